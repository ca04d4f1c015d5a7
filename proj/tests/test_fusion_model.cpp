#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "m3f/fusion_model.hpp"
#include "m3f/gradcheck.hpp"

using namespace m3f;

namespace {

ModelDims small_dims() {
    ModelDims d;
    d.n_dates = 4;
    d.ts_vars = 3;
    d.hidden = 8;
    d.classes = 13;
    d.channels = 2;
    d.patch = 25;
    d.cnn_width_div = 32;
    return d;
}

std::vector<Sample> make_batch(const ModelDims& d, int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<Sample> batch;
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.ts = rng.uniform_tensor({d.n_dates, d.ts_vars}, -1, 1);
        s.patch = rng.uniform_tensor({d.channels, d.patch, d.patch}, 0, 1);
        s.label = i % d.classes;
        s.object_id = static_cast<uint32_t>(i);
        batch.push_back(std::move(s));
    }
    return batch;
}

void zero_param(FusionModel& m, const std::string& name) {
    auto& v = m.store.at(name).value.data;
    std::fill(v.begin(), v.end(), real(0));
}

void zero_heads(FusionModel& m) {
    for (const char* h : {"head1", "head2", "head3"}) {
        zero_param(m, std::string(h) + ".w");
        zero_param(m, std::string(h) + ".b");
    }
}

struct TempFile {
    std::string path;
    explicit TempFile(const char* name) {
        path = (std::filesystem::temp_directory_path() / name).string();
    }
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST(FusionModel, ZeroHeadGivesUniformProbabilities) {
    auto dims = small_dims();
    auto m = FusionModel::init(1, dims);
    zero_heads(m);
    auto batch = make_batch(dims, 2, 7);
    Tape t;
    auto fwd = m.forward_batch(t, batch, Mode::Eval, Branch::Full, false);
    for (Var head : {fwd.probs1, fwd.probs2, fwd.probs3}) {
        const Tensor& p = t.val(head);
        for (real v : p.data) EXPECT_NEAR(v, real(1) / dims.classes, 1e-6);
    }
}

TEST(FusionModel, ProbabilityRowsSumToOne) {
    auto dims = small_dims();
    auto m = FusionModel::init(3, dims);
    auto batch = make_batch(dims, 4, 11);
    Tape t;
    auto fwd = m.forward_batch(t, batch, Mode::Train, Branch::Full);
    for (Var head : {fwd.probs1, fwd.probs2, fwd.probs3}) {
        const Tensor& p = t.val(head);
        ASSERT_EQ(p.dim(1), 13);
        for (int r = 0; r < p.dim(0); ++r) {
            real sum = 0;
            for (int c = 0; c < p.dim(1); ++c) sum += p.at(r, c);
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

TEST(FusionModel, UniformHeadsLossIsOnePointSixLogThirteen) {
    auto dims = small_dims();
    auto m = FusionModel::init(5, dims, real(0.3), real(0.3));
    zero_heads(m);
    auto batch = make_batch(dims, 3, 13);
    Tape t;
    auto loss = m.total_loss(t, batch, Mode::Eval, Branch::Full, false);
    const double expect = 1.6 * std::log(13.0);
    EXPECT_NEAR(t.val(loss.total)[0], expect, 1e-4);
    EXPECT_NEAR(t.val(loss.l1)[0], std::log(13.0), 1e-5);
    EXPECT_NEAR(t.val(loss.l2)[0], std::log(13.0), 1e-5);
    EXPECT_NEAR(t.val(loss.lfus)[0], std::log(13.0), 1e-5);
}

TEST(FusionModel, ZeroAlphasReduceToFusionLoss) {
    auto dims = small_dims();
    auto m = FusionModel::init(5, dims, 0, 0);
    auto batch = make_batch(dims, 2, 17);
    Tape t;
    auto loss = m.total_loss(t, batch, Mode::Eval, Branch::Full, false);
    EXPECT_NEAR(t.val(loss.total)[0], t.val(loss.lfus)[0], 1e-6);
}

TEST(FusionModel, TotalLossMatchesThreeTermOracle) {
    ModelDims dims = small_dims();
    dims.hidden = 4;
    dims.classes = 3;
    auto m = FusionModel::init(9, dims, real(0.3), real(0.3));
    auto batch = make_batch(dims, 2, 19);

    Tape t;
    auto fwd = m.forward_batch(t, batch, Mode::Eval, Branch::Full, false);
    auto ce = [&](Var head) {
        const Tensor& p = t.val(head);
        double s = 0;
        for (size_t i = 0; i < batch.size(); ++i)
            s -= std::log(std::max<double>(p.at(static_cast<int>(i), batch[i].label), 1e-7));
        return s / static_cast<double>(batch.size());
    };
    const double oracle = 0.3 * ce(fwd.probs1) + 0.3 * ce(fwd.probs2) + ce(fwd.probs3);

    Tape t2;
    auto loss = m.total_loss(t2, batch, Mode::Eval, Branch::Full, false);
    EXPECT_NEAR(t2.val(loss.total)[0], oracle, 1e-5);
    EXPECT_GE(t2.val(loss.l1)[0], 0);
    EXPECT_GE(t2.val(loss.l2)[0], 0);
    EXPECT_GE(t2.val(loss.total)[0], t2.val(loss.lfus)[0]);
}

TEST(FusionModel, PredictReturnsArgmaxOfFusionHead) {
    ModelDims dims = small_dims();
    dims.classes = 3;
    auto m = FusionModel::init(21, dims);
    zero_param(m, "head3.w");
    auto& b3 = m.store.at("head3.b").value;
    b3[0] = static_cast<real>(std::log(0.1));
    b3[1] = static_cast<real>(std::log(0.7));
    b3[2] = static_cast<real>(std::log(0.2));
    auto batch = make_batch(dims, 1, 23);
    auto [cls, probs] = m.predict(batch[0]);
    EXPECT_EQ(cls, 1);
    EXPECT_NEAR(probs[0], 0.1, 1e-5);
    EXPECT_NEAR(probs[1], 0.7, 1e-5);
    EXPECT_NEAR(probs[2], 0.2, 1e-5);
}

TEST(FusionModel, PredictBreaksTiesTowardLowestClass) {
    auto dims = small_dims();
    auto m = FusionModel::init(25, dims);
    zero_param(m, "head3.w");
    zero_param(m, "head3.b");
    auto batch = make_batch(dims, 1, 27);
    auto [cls, probs] = m.predict(batch[0]);
    EXPECT_EQ(cls, 0);
    for (real v : probs.data) EXPECT_NEAR(v, real(1) / dims.classes, 1e-6);
}

TEST(FusionModel, PredictIgnoresAuxiliaryHeads) {
    auto dims = small_dims();
    auto m = FusionModel::init(29, dims);
    auto batch = make_batch(dims, 1, 31);
    auto [cls, probs] = m.predict(batch[0]);

    Rng rng(999);
    for (const char* h : {"head1", "head2"}) {
        for (const char* part : {".w", ".b"})
            for (auto& v : m.store.at(std::string(h) + part).value.data)
                v = rng.uniform(-5, 5);
    }
    auto [cls2, probs2] = m.predict(batch[0]);
    EXPECT_EQ(cls, cls2);
    for (int c = 0; c < dims.classes; ++c) EXPECT_EQ(probs[c], probs2[c]);
}

TEST(FusionModel, SameSeedGivesIdenticalParameters) {
    auto dims = small_dims();
    auto a = FusionModel::init(77, dims);
    auto b = FusionModel::init(77, dims);
    ASSERT_EQ(a.store.count(), b.store.count());
    for (const auto& [name, p] : a.store) {
        const auto& q = b.store.at(name);
        ASSERT_EQ(p.value.shape, q.value.shape) << name;
        EXPECT_EQ(p.value.data, q.value.data) << name;
    }
    auto c = FusionModel::init(78, dims);
    EXPECT_NE(a.store.at("gru.wz").value.data, c.store.at("gru.wz").value.data);
}

TEST(FusionModel, ReferenceDimensionHeadShapes) {
    ModelDims dims;  // defaults: d=1024, C=13, 5x25x25, 34x16
    auto m = FusionModel::init(1, dims);
    const auto& w3 = m.store.at("head3.w").value;
    EXPECT_EQ(w3.shape, (std::vector<int>{1536, 13}));
    EXPECT_EQ(m.store.at("head1.w").value.shape, (std::vector<int>{1024, 13}));
    EXPECT_EQ(m.store.at("head2.w").value.shape, (std::vector<int>{512, 13}));

    ModelDims reduced = dims;
    reduced.hidden = 8;
    auto r = FusionModel::init(1, reduced);
    EXPECT_EQ(r.store.at("head3.w").value.shape, (std::vector<int>{520, 13}));
}

TEST(FusionModel, InvalidDimsRejected) {
    ModelDims dims = small_dims();
    dims.classes = 1;
    EXPECT_THROW(FusionModel::init(1, dims), std::invalid_argument);
    dims = small_dims();
    dims.cnn_width_div = 33;
    EXPECT_THROW(FusionModel::init(1, dims), std::invalid_argument);
    dims = small_dims();
    dims.patch = 7;
    EXPECT_THROW(FusionModel::init(1, dims), std::invalid_argument);
}

TEST(FusionModel, GradientFlowsToEveryParameterGroup) {
    auto dims = small_dims();
    auto m = FusionModel::init(41, dims);
    auto batch = make_batch(dims, 2, 43);
    Tape t;
    auto loss = m.total_loss(t, batch, Mode::Train);
    t.backward(loss.total);
    for (const auto& [name, p] : m.store) {
        if (!p.trainable) continue;
        real mx = 0;
        for (real g : p.grad.data) mx = std::max(mx, std::abs(g));
        EXPECT_GT(mx, real(0)) << name;
    }
}

TEST(FusionModel, AuxiliaryLossesTouchOnlyTheirBranch) {
    auto dims = small_dims();
    auto m = FusionModel::init(47, dims);
    auto batch = make_batch(dims, 2, 53);

    auto max_grad = [&](const std::string& prefix) {
        real mx = 0;
        for (const auto& [name, p] : m.store)
            if (name.rfind(prefix, 0) == 0)
                for (real g : p.grad.data) mx = std::max(mx, std::abs(g));
        return mx;
    };

    {
        Tape t;
        auto loss = m.total_loss(t, batch, Mode::Train);
        t.backward(loss.l1);
        EXPECT_EQ(max_grad("cnn"), real(0));
        EXPECT_EQ(max_grad("head2"), real(0));
        EXPECT_EQ(max_grad("head3"), real(0));
        EXPECT_GT(max_grad("gru"), real(0));
        EXPECT_GT(max_grad("head1"), real(0));
    }
    m.store.zero_grads();
    {
        Tape t;
        auto loss = m.total_loss(t, batch, Mode::Train);
        t.backward(loss.l2);
        EXPECT_EQ(max_grad("gru"), real(0));
        EXPECT_EQ(max_grad("att"), real(0));
        EXPECT_EQ(max_grad("head1"), real(0));
        EXPECT_GT(max_grad("cnn.b1"), real(0));
        EXPECT_GT(max_grad("head2"), real(0));
    }
}

TEST(FusionModel, AblationBranchesUseOwnHead) {
    auto dims = small_dims();
    auto m = FusionModel::init(59, dims);
    auto batch = make_batch(dims, 2, 61);
    {
        Tape t;
        auto loss = m.total_loss(t, batch, Mode::Train, Branch::RnnOnly);
        t.backward(loss.total);
        real cnn_mx = 0;
        for (const auto& [name, p] : m.store)
            if (name.rfind("cnn", 0) == 0 || name.rfind("head2", 0) == 0)
                for (real g : p.grad.data) cnn_mx = std::max(cnn_mx, std::abs(g));
        EXPECT_EQ(cnn_mx, real(0));
    }
    m.store.zero_grads();
    auto [c1, p1] = m.predict(batch[0], Branch::RnnOnly);
    auto [c2, p2] = m.predict(batch[0], Branch::CnnOnly);
    EXPECT_EQ(static_cast<int>(p1.size()), dims.classes);
    EXPECT_EQ(static_cast<int>(p2.size()), dims.classes);
    (void)c1;
    (void)c2;
}

TEST(FusionModel, FullModelGradCheck) {
    ModelDims dims = small_dims();
    dims.hidden = 4;
    dims.classes = 3;
    dims.n_dates = 3;
    auto m = FusionModel::init(67, dims);
    auto batch = make_batch(dims, 2, 71);
    auto loss_fn = [&]() {
        Tape t(false);
        auto l = m.total_loss(t, batch, Mode::Train, Branch::Full, false);
        return t.val(l.total)[0];
    };
    auto grad_fn = [&]() {
        Tape t;
        auto l = m.total_loss(t, batch, Mode::Train, Branch::Full, false);
        t.backward(l.total);
    };
    auto report = grad_check(m.store, loss_fn, grad_fn, real(1e-2), real(1e-2), 6);
    if (!report.passed()) report.print(std::cerr);
    EXPECT_TRUE(report.passed());
}

TEST(FusionModelCheckpoint, RoundTripIsExact) {
    auto dims = small_dims();
    auto m = FusionModel::init(73, dims, real(0.25), real(0.4));
    TempFile f("m3f_ckpt_roundtrip.bin");
    m.save(f.path);
    auto r = FusionModel::load(f.path);
    EXPECT_EQ(r.dims.hidden, dims.hidden);
    EXPECT_EQ(r.dims.classes, dims.classes);
    EXPECT_EQ(r.dims.cnn_width_div, dims.cnn_width_div);
    EXPECT_EQ(r.seed, m.seed);
    EXPECT_NEAR(r.alpha1, 0.25, 1e-7);
    EXPECT_NEAR(r.alpha2, 0.4, 1e-7);
    ASSERT_EQ(r.store.count(), m.store.count());
    for (const auto& [name, p] : m.store)
        EXPECT_EQ(p.value.data, r.store.at(name).value.data) << name;
}

TEST(FusionModelCheckpoint, RoundTripAfterTrainingStep) {
    auto dims = small_dims();
    auto m = FusionModel::init(79, dims);
    auto batch = make_batch(dims, 2, 83);
    Tape t;
    auto loss = m.total_loss(t, batch, Mode::Train);
    t.backward(loss.total);
    m.store.adam_step(real(2e-4));

    TempFile f("m3f_ckpt_trained.bin");
    m.save(f.path);
    auto r = FusionModel::load(f.path);
    for (const auto& [name, p] : m.store)
        EXPECT_EQ(p.value.data, r.store.at(name).value.data) << name;

    auto [cls, probs] = m.predict(batch[0]);
    auto [cls2, probs2] = r.predict(batch[0]);
    EXPECT_EQ(cls, cls2);
    for (int c = 0; c < dims.classes; ++c) EXPECT_EQ(probs[c], probs2[c]);
}

TEST(FusionModelCheckpoint, MalformedFilesRaiseDistinctErrors) {
    TempFile f("m3f_ckpt_bad.bin");
    {
        std::ofstream os(f.path, std::ios::binary);
        os << "NOPE more bytes here to get past the header read";
    }
    EXPECT_THROW(FusionModel::load(f.path), io::BadMagic);
    {
        std::ofstream os(f.path, std::ios::binary);
        os << "M3";
    }
    EXPECT_THROW(FusionModel::load(f.path), io::TruncatedFile);
    {
        std::ofstream os(f.path, std::ios::binary);
        os.write("M3CK", 4);
        io::write_raw<uint16_t>(os, 9);
    }
    EXPECT_THROW(FusionModel::load(f.path), io::BadVersion);

    auto dims = small_dims();
    auto m = FusionModel::init(89, dims);
    m.save(f.path);
    auto size = std::filesystem::file_size(f.path);
    std::filesystem::resize_file(f.path, size / 2);
    EXPECT_THROW(FusionModel::load(f.path), io::TruncatedFile);
    EXPECT_THROW(FusionModel::load("/nonexistent/dir/ckpt.bin"), std::runtime_error);
}
