#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "m3f/train.hpp"

using namespace m3f;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const char* name) {
        path = (std::filesystem::temp_directory_path() / name).string();
    }
    ~TempFile() { std::remove(path.c_str()); }
};

SynthConfig tiny_synth(int temporal, int spatial, real noise) {
    SynthConfig cfg;
    cfg.temporal_classes = temporal;
    cfg.spatial_classes = spatial;
    cfg.samples_per_class = 30;
    cfg.samples_per_object = 5;
    cfg.n_dates = 6;
    cfg.ts_vars = 3;
    cfg.channels = 2;
    cfg.patch = 15;
    cfg.noise = noise;
    cfg.seed = 7;
    return cfg;
}

TrainConfig tiny_train(int epochs) {
    TrainConfig cfg;
    cfg.lr = real(1e-3);
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    cfg.seed = 5;
    cfg.hidden = 8;
    cfg.cnn_width_div = 32;
    cfg.quiet = true;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Train, SingleStepDecreasesLoss) {
    auto ds = synth_generate(tiny_synth(1, 1, real(0.1)));
    ds.samples.resize(1);
    auto cfg = tiny_train(1);
    cfg.batch_size = 1;

    FusionModel before = FusionModel::init(cfg.seed, detail::dims_for(ds, cfg), cfg.alpha1,
                                           cfg.alpha2);
    const double initial = detail::full_split_loss(before, ds, 1, Branch::Full).total;
    auto result = train(ds, cfg);
    ASSERT_EQ(result.log.size(), 1u);
    EXPECT_LT(result.log[0].total, initial);
}

TEST(Train, ZeroAlphasLogTotalEqualsFusionColumn) {
    auto ds = synth_generate(tiny_synth(1, 1, real(0.1)));
    auto cfg = tiny_train(2);
    cfg.alpha1 = cfg.alpha2 = 0;
    auto result = train(ds, cfg);
    for (const auto& e : result.log) EXPECT_NEAR(e.total, e.lfus, 1e-9);
}

TEST(Train, FixedSeedGivesIdenticalLossLogs) {
    auto ds = synth_generate(tiny_synth(1, 1, real(0.1)));
    auto cfg = tiny_train(2);
    TempFile log1("m3f_loss1.csv"), log2("m3f_loss2.csv");
    cfg.loss_log_path = log1.path;
    auto a = train(ds, cfg);
    cfg.loss_log_path = log2.path;
    auto b = train(ds, cfg);
    ASSERT_EQ(a.log.size(), b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        EXPECT_EQ(a.log[i].total, b.log[i].total);
        EXPECT_EQ(a.log[i].l1, b.log[i].l1);
        EXPECT_EQ(a.log[i].l2, b.log[i].l2);
        EXPECT_EQ(a.log[i].lfus, b.log[i].lfus);
    }
    const std::string c1 = slurp(log1.path);
    EXPECT_EQ(c1, slurp(log2.path));
    EXPECT_EQ(c1.rfind("epoch,L1,L2,L_fus,L_total\n", 0), 0u);
}

TEST(Train, BestModelMatchesMinimumLoggedLoss) {
    auto ds = synth_generate(tiny_synth(1, 1, real(0.1)));
    auto cfg = tiny_train(4);
    auto result = train(ds, cfg);
    double min_total = result.log[0].total;
    for (const auto& e : result.log) min_total = std::min(min_total, e.total);
    EXPECT_EQ(result.best_loss, min_total);
    EXPECT_GE(result.best_epoch, 1);
    const double replay =
        detail::full_split_loss(result.model, ds, cfg.batch_size, Branch::Full).total;
    EXPECT_NEAR(replay, result.best_loss, 1e-6);
}

TEST(Train, CheckpointSavedForBestModel) {
    auto ds = synth_generate(tiny_synth(1, 1, real(0.1)));
    auto cfg = tiny_train(2);
    TempFile ckpt("m3f_train_ckpt.bin");
    cfg.checkpoint_path = ckpt.path;
    auto result = train(ds, cfg);
    auto loaded = FusionModel::load(ckpt.path);
    for (const auto& [name, p] : result.model.store)
        EXPECT_EQ(p.value.data, loaded.store.at(name).value.data) << name;
}

TEST(Train, NonFiniteLossAbortsWithDiagnostic) {
    auto ds = synth_generate(tiny_synth(1, 1, real(0.1)));
    ds.samples[0].ts[0] = std::numeric_limits<real>::quiet_NaN();
    auto cfg = tiny_train(1);
    cfg.batch_size = static_cast<int>(ds.samples.size());
    try {
        train(ds, cfg);
        FAIL() << "expected abort";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
    }
}

TEST(Train, LearnsNoiselessTwoClassProblem) {
    auto ds = synth_generate(tiny_synth(1, 1, 0));
    auto [tr, te] = split_dataset(ds, real(0.34), 3);
    auto cfg = tiny_train(30);
    auto result = train(tr, cfg);
    auto report = evaluate(result.model, te, cfg.batch_size);
    EXPECT_GE(report.accuracy, 0.95);
}

TEST(Evaluate, ClassCountMismatchRejected) {
    auto ds = synth_generate(tiny_synth(1, 1, real(0.1)));
    auto cfg = tiny_train(1);
    auto result = train(ds, cfg);
    Dataset other = ds;
    other.classes = 5;
    EXPECT_THROW(evaluate(result.model, other), std::invalid_argument);
}

TEST(Evaluate, PredictAllAgreesWithPredict) {
    auto ds = synth_generate(tiny_synth(1, 1, real(0.1)));
    auto cfg = tiny_train(1);
    auto result = train(ds, cfg);
    auto preds = predict_all(result.model, ds, 7);
    for (size_t i = 0; i < std::min<size_t>(ds.samples.size(), 10); ++i) {
        auto [cls, probs] = result.model.predict(ds.samples[i]);
        EXPECT_EQ(preds[i], cls) << i;
    }
}

TEST(Baseline, StackedVectorLengths) {
    Dataset reference;
    reference.channels = 5;
    reference.patch = 25;
    reference.n_dates = 34;
    reference.ts_vars = 16;
    EXPECT_EQ(stacked_input_size(reference), 3669);
    Dataset reduced;
    reduced.channels = 2;
    reduced.patch = 9;
    reduced.n_dates = 8;
    reduced.ts_vars = 3;
    EXPECT_EQ(stacked_input_size(reduced), 186);
}

TEST(Baseline, SeparableSyntheticAboveChance) {
    auto ds = synth_generate(tiny_synth(2, 2, 0));
    auto [tr, te] = split_dataset(ds, real(0.34), 3);
    auto cfg = tiny_train(25);
    auto report = baseline_stacked(tr, te, cfg);
    EXPECT_GT(report.accuracy, 0.5);  // chance is 0.25
}

TEST(Ablation, RnnOnlyBlindToSpatialClasses) {
    auto ds = synth_generate(tiny_synth(0, 2, 0));
    auto [tr, te] = split_dataset(ds, real(0.34), 3);
    auto cfg = tiny_train(4);
    auto [result, report] = ablation(tr, te, cfg, Branch::RnnOnly);
    // time series are identical across spatial classes: accuracy pinned to
    // a single predicted class
    EXPECT_NEAR(report.accuracy, 0.5, 1e-9);
    EXPECT_THROW(ablation(tr, te, cfg, Branch::Full), std::invalid_argument);
}

TEST(Ablation, CnnOnlyBlindToTemporalClasses) {
    auto ds = synth_generate(tiny_synth(2, 0, 0));
    auto [tr, te] = split_dataset(ds, real(0.34), 3);
    auto cfg = tiny_train(4);
    auto [result, report] = ablation(tr, te, cfg, Branch::CnnOnly);
    EXPECT_NEAR(report.accuracy, 0.5, 1e-9);
}
