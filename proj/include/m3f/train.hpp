#pragma once

#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "m3f/data_pipeline.hpp"
#include "m3f/fusion_model.hpp"
#include "m3f/metrics.hpp"

namespace m3f {

struct TrainConfig {
    real lr = real(2e-4);
    int epochs = 400;
    int batch_size = 32;
    uint64_t seed = 0;
    real alpha1 = real(0.3);
    real alpha2 = real(0.3);
    std::string checkpoint_path;  // empty: keep best model in memory only
    std::string loss_log_path;    // empty: in-memory log only
    int hidden = 1024;
    int cnn_width_div = 1;
    bool quiet = false;

    void validate() const {
        if (lr <= 0 || epochs < 1 || batch_size < 1 || hidden < 1 || cnn_width_div < 1 ||
            alpha1 < 0 || alpha1 > 1 || alpha2 < 0 || alpha2 > 1)
            throw std::invalid_argument("TrainConfig: invalid field value");
    }
};

struct EpochLoss {
    int epoch = 0;
    double l1 = 0, l2 = 0, lfus = 0, total = 0;
};

struct TrainResult {
    FusionModel model;  // best model by full-train-split total loss
    std::vector<EpochLoss> log;
    int best_epoch = -1;
    double best_loss = std::numeric_limits<double>::infinity();
};

namespace detail {

inline ModelDims dims_for(const Dataset& ds, const TrainConfig& cfg) {
    ModelDims d;
    d.n_dates = ds.n_dates;
    d.ts_vars = ds.ts_vars;
    d.hidden = cfg.hidden;
    d.classes = ds.classes;
    d.channels = ds.channels;
    d.patch = ds.patch;
    d.cnn_width_div = cfg.cnn_width_div;
    return d;
}

inline double scalar(Tape& t, Var v) { return static_cast<double>(t.val(v)[0]); }

/// Mean loss components over the whole split, eval mode, frozen stats.
inline EpochLoss full_split_loss(FusionModel& m, const Dataset& ds, int batch_size,
                                 Branch branch) {
    EpochLoss acc;
    size_t done = 0;
    while (done < ds.samples.size()) {
        const size_t n = std::min(static_cast<size_t>(batch_size), ds.samples.size() - done);
        Tape t(false);
        auto loss = m.total_loss(t, std::span<const Sample>(ds.samples.data() + done, n),
                                 Mode::Eval, branch, false);
        const double w = static_cast<double>(n);
        if (loss.l1.valid()) acc.l1 += scalar(t, loss.l1) * w;
        if (loss.l2.valid()) acc.l2 += scalar(t, loss.l2) * w;
        if (loss.lfus.valid()) acc.lfus += scalar(t, loss.lfus) * w;
        acc.total += scalar(t, loss.total) * w;
        done += n;
    }
    const auto total = static_cast<double>(ds.samples.size());
    acc.l1 /= total;
    acc.l2 /= total;
    acc.lfus /= total;
    acc.total /= total;
    return acc;
}

}  // namespace detail

/// Seeded mini-batch training on L_total with Adam; after every epoch the
/// full-train-split loss (eval mode) is logged and the best model kept.
/// Aborts with a diagnostic if the loss turns non-finite.
inline TrainResult train(const Dataset& train_split, const TrainConfig& cfg,
                         Branch branch = Branch::Full) {
    cfg.validate();
    if (train_split.samples.empty()) throw std::invalid_argument("train: empty training split");
    TrainResult result;
    FusionModel model = FusionModel::init(cfg.seed, detail::dims_for(train_split, cfg),
                                          cfg.alpha1, cfg.alpha2);
    result.model = model;

    std::ofstream log_file;
    if (!cfg.loss_log_path.empty()) {
        log_file.open(cfg.loss_log_path);
        if (!log_file) throw std::runtime_error("cannot open loss log: " + cfg.loss_log_path);
        log_file << "epoch,L1,L2,L_fus,L_total\n";
    }

    Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<size_t> order(train_split.samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::vector<Sample> batch;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        size_t done = 0;
        int batch_index = 0;
        while (done < order.size()) {
            const size_t n =
                std::min(static_cast<size_t>(cfg.batch_size), order.size() - done);
            batch.clear();
            for (size_t i = 0; i < n; ++i)
                batch.push_back(train_split.samples[order[done + i]]);
            Tape t;
            auto loss = model.total_loss(t, batch, Mode::Train, branch);
            const double value = detail::scalar(t, loss.total);
            if (!std::isfinite(value))
                throw std::runtime_error("train: loss is not finite at epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_index));
            t.backward(loss.total);
            model.store.adam_step(cfg.lr);
            done += n;
            ++batch_index;
        }
        EpochLoss el = detail::full_split_loss(model, train_split, cfg.batch_size, branch);
        el.epoch = epoch;
        result.log.push_back(el);
        if (log_file)
            log_file << epoch << "," << el.l1 << "," << el.l2 << "," << el.lfus << ","
                     << el.total << "\n";
        if (!cfg.quiet)
            std::cerr << "epoch " << epoch << "  L_total " << el.total << "\n";
        if (el.total < result.best_loss) {
            result.best_loss = el.total;
            result.best_epoch = epoch;
            result.model = model;
            if (!cfg.checkpoint_path.empty()) model.save(cfg.checkpoint_path);
        }
    }
    return result;
}

/// Batched eval-mode predictions with the branch's deciding head; ties go
/// to the lowest class index.
inline std::vector<int> predict_all(FusionModel& model, const Dataset& ds, int batch_size = 64,
                                    Branch branch = Branch::Full) {
    std::vector<int> preds;
    preds.reserve(ds.samples.size());
    size_t done = 0;
    while (done < ds.samples.size()) {
        const size_t n = std::min(static_cast<size_t>(batch_size), ds.samples.size() - done);
        Tape t(false);
        auto fwd = model.forward_batch(t, std::span<const Sample>(ds.samples.data() + done, n),
                                       Mode::Eval, branch, false);
        Var head = branch == Branch::Full      ? fwd.probs3
                   : branch == Branch::RnnOnly ? fwd.probs1
                                               : fwd.probs2;
        const Tensor& p = t.val(head);
        for (size_t r = 0; r < n; ++r) {
            int best = 0;
            for (int c = 1; c < p.dim(1); ++c)
                if (p.at(static_cast<int>(r), c) > p.at(static_cast<int>(r), best)) best = c;
            preds.push_back(best);
        }
        done += n;
    }
    return preds;
}

inline MetricsReport evaluate(FusionModel& model, const Dataset& test, int batch_size = 64,
                              Branch branch = Branch::Full) {
    if (test.classes != model.dims.classes)
        throw std::invalid_argument("evaluate: dataset has " + std::to_string(test.classes) +
                                    " classes but the checkpoint expects " +
                                    std::to_string(model.dims.classes));
    auto preds = predict_all(model, test, batch_size, branch);
    std::vector<int> labels;
    labels.reserve(test.samples.size());
    for (const Sample& s : test.samples) labels.push_back(s.label);
    return compute_metrics(labels, preds, model.dims.classes);
}

/// Trains one branch with its own head and evaluates it.
inline std::pair<TrainResult, MetricsReport> ablation(const Dataset& train_split,
                                                      const Dataset& test_split,
                                                      const TrainConfig& cfg, Branch branch) {
    if (branch == Branch::Full)
        throw std::invalid_argument("ablation: pick a single branch");
    TrainResult r = train(train_split, cfg, branch);
    MetricsReport m = evaluate(r.model, test_split, cfg.batch_size, branch);
    return {std::move(r), std::move(m)};
}

inline int stacked_input_size(const Dataset& ds) {
    return ds.channels * ds.patch * ds.patch + ds.n_dates * ds.ts_vars;
}

/// Single softmax classifier over the flattened patch-then-series vector,
/// trained with Adam; the fusion-vs-stacking comparison point.
inline MetricsReport baseline_stacked(const Dataset& train_split, const Dataset& test_split,
                                      const TrainConfig& cfg) {
    cfg.validate();
    if (train_split.samples.empty())
        throw std::invalid_argument("baseline_stacked: empty training split");
    const int in_dim = stacked_input_size(train_split);
    const int classes = train_split.classes;

    auto stack = [in_dim](const Sample& s) {
        Tensor v({1, in_dim});
        std::copy(s.patch.data.begin(), s.patch.data.end(), v.data.begin());
        std::copy(s.ts.data.begin(), s.ts.data.end(),
                  v.data.begin() + static_cast<int64_t>(s.patch.data.size()));
        return v;
    };

    ParamStore store;
    {
        Rng rng(cfg.seed);
        const real bound = real(1) / std::sqrt(static_cast<real>(in_dim));
        store.add("w", rng.uniform_tensor({in_dim, classes}, -bound, bound));
        store.add("b", Tensor::zeros({classes}));
    }

    Rng shuffle_rng(cfg.seed ^ 0x6a09e667f3bcc909ull);
    std::vector<size_t> order(train_split.samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        size_t done = 0;
        while (done < order.size()) {
            const size_t n =
                std::min(static_cast<size_t>(cfg.batch_size), order.size() - done);
            Tensor x({static_cast<int>(n), in_dim});
            std::vector<int> labels;
            for (size_t i = 0; i < n; ++i) {
                const Sample& s = train_split.samples[order[done + i]];
                Tensor row = stack(s);
                std::copy(row.data.begin(), row.data.end(),
                          x.data.begin() + static_cast<int64_t>(i) * in_dim);
                labels.push_back(s.label);
            }
            Tape t;
            Var probs = softmax_rows(
                t, add_rowvec(t, matmul(t, t.leaf(std::move(x)), t.param(store, "w")),
                              t.param(store, "b")));
            Var loss = cross_entropy(t, probs, labels);
            if (!std::isfinite(t.val(loss)[0]))
                throw std::runtime_error("baseline_stacked: loss is not finite at epoch " +
                                         std::to_string(epoch));
            t.backward(loss);
            store.adam_step(cfg.lr);
            done += n;
        }
    }

    std::vector<int> labels, preds;
    for (const Sample& s : test_split.samples) {
        Tape t(false);
        Var probs = softmax_rows(
            t, add_rowvec(t, matmul(t, t.leaf(stack(s)), t.param(store, "w")),
                          t.param(store, "b")));
        const Tensor& p = t.val(probs);
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (p.at(0, c) > p.at(0, best)) best = c;
        preds.push_back(best);
        labels.push_back(s.label);
    }
    return compute_metrics(labels, preds, classes);
}

}  // namespace m3f
