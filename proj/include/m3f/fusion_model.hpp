#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "m3f/binary_io.hpp"
#include "m3f/cnn_branch.hpp"
#include "m3f/ops.hpp"
#include "m3f/param_store.hpp"
#include "m3f/rnn_branch.hpp"
#include "m3f/sample.hpp"
#include "m3f/tape.hpp"

namespace m3f {

/// Which part of the network a forward pass runs. Ablations train a single
/// branch with its own head and a plain cross-entropy loss.
enum class Branch { Full, RnnOnly, CnnOnly };

struct ModelDims {
    int n_dates = 34;
    int ts_vars = 16;
    int hidden = 1024;
    int classes = 13;
    int channels = 5;
    int patch = 25;
    int cnn_width_div = 1;
};

/// The dual-branch classifier: GRU-with-attention over the time series,
/// patch CNN over the imagery, and three softmax heads: one per branch
/// and one on the concatenated [rnn_feat, cnn_feat] vector. Only the
/// fusion head is consulted at inference time.
class FusionModel {
  public:
    ModelDims dims;
    real alpha1 = real(0.3);
    real alpha2 = real(0.3);
    uint64_t seed = 0;
    ParamStore store;

    CnnConfig cnn_config() const {
        return CnnConfig{dims.channels, dims.patch, dims.cnn_width_div};
    }
    int cnn_feature_size() const { return cnn_config().feature_size(); }
    int fusion_input_size() const { return dims.hidden + cnn_feature_size(); }

    static FusionModel init(uint64_t seed, const ModelDims& dims, real alpha1 = real(0.3),
                            real alpha2 = real(0.3)) {
        if (dims.n_dates < 1 || dims.ts_vars < 1 || dims.hidden < 1 || dims.classes < 2 ||
            dims.channels < 1 || dims.patch < 9 || dims.cnn_width_div < 1)
            throw std::invalid_argument("FusionModel::init: invalid dimensions");
        if (256 % dims.cnn_width_div != 0)
            throw std::invalid_argument("FusionModel::init: cnn_width_div must divide 256");
        FusionModel m;
        m.dims = dims;
        m.alpha1 = alpha1;
        m.alpha2 = alpha2;
        m.seed = seed;
        Rng rng(seed);
        init_gru_params(m.store, "gru", dims.ts_vars, dims.hidden, rng);
        init_attention_params(m.store, "att", dims.hidden, rng);
        init_cnn_params(m.store, "cnn", m.cnn_config(), rng);
        init_head(m.store, "head1", dims.hidden, dims.classes, rng);
        init_head(m.store, "head2", m.cnn_feature_size(), dims.classes, rng);
        init_head(m.store, "head3", m.fusion_input_size(), dims.classes, rng);
        return m;
    }

    struct BatchOutput {
        Var probs1, probs2, probs3;  // invalid entries for skipped branches
        Var rnn_feats, cnn_feats;
    };

    /// Forward over a mini-batch. The GRU branch runs per sample; patches
    /// run batched so batch norm sees cross-sample statistics.
    BatchOutput forward_batch(Tape& t, std::span<const Sample> batch, Mode mode, Branch branch,
                              bool update_stats = true) {
        if (batch.empty()) throw std::invalid_argument("forward_batch: empty batch");
        BatchOutput out;
        const int n = static_cast<int>(batch.size());
        if (branch != Branch::CnnOnly) {
            auto gp = gru_vars(t, store, "gru");
            auto ap = attention_vars(t, store, "att");
            std::vector<Var> feats;
            feats.reserve(static_cast<size_t>(n));
            for (const Sample& s : batch) {
                check_sample_ts(s);
                feats.push_back(rnn_features(t, t.leaf(s.ts), gp, ap));
            }
            out.rnn_feats = vstack(t, feats);
            out.probs1 = head_forward(t, out.rnn_feats, "head1");
        }
        if (branch != Branch::RnnOnly) {
            const CnnConfig cfg = cnn_config();
            Tensor patches({n, dims.channels, dims.patch, dims.patch});
            int64_t per = static_cast<int64_t>(dims.channels) * dims.patch * dims.patch;
            for (int i = 0; i < n; ++i) {
                check_sample_patch(batch[static_cast<size_t>(i)]);
                std::copy_n(batch[static_cast<size_t>(i)].patch.data.begin(), per,
                            patches.data.begin() + i * per);
            }
            out.cnn_feats = cnn_features(t, t.leaf(std::move(patches)), cnn_vars(t, store, "cnn"),
                                         cfg, mode, update_stats);
            out.probs2 = head_forward(t, out.cnn_feats, "head2");
        }
        if (branch == Branch::Full) {
            Var fused = concat_cols(t, out.rnn_feats, out.cnn_feats);
            out.probs3 = head_forward(t, fused, "head3");
        }
        return out;
    }

    /// softmax(feat * W + b) for one head over a [B x in_dim] feature block.
    Var head_forward(Tape& t, Var feats, const std::string& head) {
        Var logits = add_rowvec(t, matmul(t, feats, t.param(store, head + ".w")),
                                t.param(store, head + ".b"));
        return softmax_rows(t, logits);
    }

    struct LossOutput {
        Var total, l1, l2, lfus;
    };

    /// L_total = alpha1*L1 + alpha2*L2 + L_fus for the full model; a plain
    /// cross entropy on the branch head for ablations.
    LossOutput total_loss(Tape& t, std::span<const Sample> batch, Mode mode,
                          Branch branch = Branch::Full, bool update_stats = true) {
        std::vector<int> labels;
        labels.reserve(batch.size());
        for (const Sample& s : batch) labels.push_back(s.label);
        BatchOutput fwd = forward_batch(t, batch, mode, branch, update_stats);
        LossOutput out;
        switch (branch) {
            case Branch::RnnOnly:
                out.l1 = cross_entropy(t, fwd.probs1, labels);
                out.total = out.l1;
                break;
            case Branch::CnnOnly:
                out.l2 = cross_entropy(t, fwd.probs2, labels);
                out.total = out.l2;
                break;
            case Branch::Full:
                out.l1 = cross_entropy(t, fwd.probs1, labels);
                out.l2 = cross_entropy(t, fwd.probs2, labels);
                out.lfus = cross_entropy(t, fwd.probs3, labels);
                out.total =
                    add(t, add(t, scale(t, out.l1, alpha1), scale(t, out.l2, alpha2)), out.lfus);
                break;
        }
        return out;
    }

    /// Inference: eval-mode forward, argmax over the deciding head's
    /// probabilities (head 3 for the full model). Ties go to the lowest
    /// class index.
    std::pair<int, Tensor> predict(const Sample& s, Branch branch = Branch::Full) {
        Tape t(false);
        BatchOutput fwd = forward_batch(t, std::span<const Sample>(&s, 1), Mode::Eval, branch,
                                        /*update_stats=*/false);
        Var head = branch == Branch::Full      ? fwd.probs3
                   : branch == Branch::RnnOnly ? fwd.probs1
                                               : fwd.probs2;
        Tensor probs({dims.classes}, t.val(head).data);
        int best = 0;
        for (int c = 1; c < dims.classes; ++c)
            if (probs[c] > probs[best]) best = c;
        return {best, std::move(probs)};
    }

    // -- checkpoint format: "M3CK", version u16, dims u16 x7, alphas f32 x2,
    //    seed u64, record count u32, then name-length-prefixed tensors.
    void save(const std::string& path) const {
        auto os = io::open_out(path);
        os.write("M3CK", 4);
        io::write_raw<uint16_t>(os, 1);
        for (int d : {dims.n_dates, dims.ts_vars, dims.hidden, dims.classes, dims.channels,
                      dims.patch, dims.cnn_width_div})
            io::write_raw<uint16_t>(os, static_cast<uint16_t>(d));
        io::write_f32(os, alpha1);
        io::write_f32(os, alpha2);
        io::write_raw<uint64_t>(os, seed);
        io::write_raw<uint32_t>(os, static_cast<uint32_t>(store.count()));
        for (const auto& [name, p] : store) {
            io::write_raw<uint16_t>(os, static_cast<uint16_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            io::write_raw<uint8_t>(os, static_cast<uint8_t>(p.value.rank()));
            for (int d : p.value.shape) io::write_raw<uint32_t>(os, static_cast<uint32_t>(d));
            io::write_f32_block(os, p.value.data);
        }
        if (!os) throw std::runtime_error("failed writing checkpoint: " + path);
    }

    static FusionModel load(const std::string& path) {
        auto is = io::open_in(path);
        io::expect_magic(is, "M3CK", "checkpoint");
        uint16_t version = io::read_raw<uint16_t>(is, "checkpoint version");
        if (version != 1)
            throw io::BadVersion("unsupported checkpoint version " + std::to_string(version));
        ModelDims dims;
        dims.n_dates = io::read_raw<uint16_t>(is, "dims");
        dims.ts_vars = io::read_raw<uint16_t>(is, "dims");
        dims.hidden = io::read_raw<uint16_t>(is, "dims");
        dims.classes = io::read_raw<uint16_t>(is, "dims");
        dims.channels = io::read_raw<uint16_t>(is, "dims");
        dims.patch = io::read_raw<uint16_t>(is, "dims");
        dims.cnn_width_div = io::read_raw<uint16_t>(is, "dims");
        real a1 = io::read_f32(is, "alpha1");
        real a2 = io::read_f32(is, "alpha2");
        uint64_t seed = io::read_raw<uint64_t>(is, "seed");
        FusionModel m = init(seed, dims, a1, a2);
        uint32_t count = io::read_raw<uint32_t>(is, "record count");
        for (uint32_t i = 0; i < count; ++i) {
            uint16_t len = io::read_raw<uint16_t>(is, "record name length");
            std::string name(len, '\0');
            is.read(name.data(), len);
            if (!is) throw io::TruncatedFile("truncated record name");
            uint8_t rank = io::read_raw<uint8_t>(is, "record rank");
            std::vector<int> shape(rank);
            for (auto& d : shape) d = static_cast<int>(io::read_raw<uint32_t>(is, "record dims"));
            if (!m.store.has(name))
                throw std::runtime_error("checkpoint record for unknown parameter: " + name);
            Param& p = m.store.at(name);
            if (p.value.shape != shape)
                throw std::runtime_error("checkpoint shape mismatch for " + name);
            io::read_f32_block(is, p.value.data, name.c_str());
        }
        return m;
    }

  private:
    static void init_head(ParamStore& ps, const std::string& prefix, int in_dim, int classes,
                          Rng& rng) {
        const real bound = real(1) / std::sqrt(static_cast<real>(in_dim));
        ps.add(prefix + ".w", rng.uniform_tensor({in_dim, classes}, -bound, bound));
        ps.add(prefix + ".b", Tensor::zeros({classes}));
    }

    void check_sample_ts(const Sample& s) const {
        check_shape(s.ts.rank() == 2 && s.ts.dim(0) == dims.n_dates && s.ts.dim(1) == dims.ts_vars,
                    "sample time series must be " + std::to_string(dims.n_dates) + "x" +
                        std::to_string(dims.ts_vars) + ", got " + s.ts.shape_str());
    }
    void check_sample_patch(const Sample& s) const {
        check_shape(s.patch.rank() == 3 && s.patch.dim(0) == dims.channels &&
                        s.patch.dim(1) == dims.patch && s.patch.dim(2) == dims.patch,
                    "sample patch must be " + std::to_string(dims.channels) + "x" +
                        std::to_string(dims.patch) + "x" + std::to_string(dims.patch) + ", got " +
                        s.patch.shape_str());
    }
};

}  // namespace m3f
