#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "m3f/metrics.hpp"

using namespace m3f;

namespace {
struct TempFile {
    std::string path;
    explicit TempFile(const char* name) {
        path = (std::filesystem::temp_directory_path() / name).string();
    }
    ~TempFile() { std::remove(path.c_str()); }
};
}  // namespace

TEST(Metrics, AllCorrectGivesPerfectScores) {
    std::vector<int> labels{0, 1, 2, 0, 1, 2};
    auto r = compute_metrics(labels, labels, 3);
    EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
    EXPECT_DOUBLE_EQ(r.macro_f, 1.0);
    EXPECT_DOUBLE_EQ(r.weighted_f, 1.0);
    for (int c = 0; c < 3; ++c) {
        EXPECT_DOUBLE_EQ(r.f_measure[static_cast<size_t>(c)], 1.0);
        EXPECT_FALSE(r.empty_class[static_cast<size_t>(c)]);
    }
}

TEST(Metrics, SymmetricTwoClassConfusion) {
    // confusion [[3,1],[1,3]]
    std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 1};
    std::vector<int> preds{0, 0, 0, 1, 1, 1, 1, 0};
    auto r = compute_metrics(labels, preds, 2);
    EXPECT_EQ(r.at(0, 0), 3);
    EXPECT_EQ(r.at(0, 1), 1);
    EXPECT_EQ(r.at(1, 0), 1);
    EXPECT_EQ(r.at(1, 1), 3);
    EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
    EXPECT_DOUBLE_EQ(r.f_measure[0], 0.75);
    EXPECT_DOUBLE_EQ(r.f_measure[1], 0.75);
    EXPECT_DOUBLE_EQ(r.macro_f, 0.75);
    EXPECT_DOUBLE_EQ(r.weighted_f, 0.75);
}

TEST(Metrics, TraceOverTotalEqualsAccuracy) {
    Rng rng(7);
    std::vector<int> labels, preds;
    for (int i = 0; i < 500; ++i) {
        labels.push_back(static_cast<int>(rng.index(5)));
        preds.push_back(static_cast<int>(rng.index(5)));
    }
    auto r = compute_metrics(labels, preds, 5);
    long trace = 0, total = 0;
    for (int c = 0; c < 5; ++c) {
        trace += r.at(c, c);
        for (int k = 0; k < 5; ++k) total += r.at(c, k);
    }
    EXPECT_EQ(total, 500);
    EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(trace) / total);
    for (int c = 0; c < 5; ++c) {
        EXPECT_GE(r.f_measure[static_cast<size_t>(c)], 0.0);
        EXPECT_LE(r.f_measure[static_cast<size_t>(c)], 1.0);
    }
}

TEST(Metrics, EmptyClassFlaggedWithZeroF) {
    std::vector<int> labels{0, 0, 1, 1};
    std::vector<int> preds{0, 0, 1, 1};
    auto r = compute_metrics(labels, preds, 3);
    EXPECT_TRUE(r.empty_class[2]);
    EXPECT_DOUBLE_EQ(r.f_measure[2], 0.0);
    EXPECT_DOUBLE_EQ(r.macro_f, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
}

TEST(Metrics, JsonReportHasFixedKeyOrder) {
    std::vector<int> labels{0, 1};
    auto r = compute_metrics(labels, labels, 2);
    auto s = metrics_to_json(r);
    const auto a = s.find("\"accuracy\"");
    const auto m = s.find("\"macro_f_measure\"");
    const auto w = s.find("\"weighted_f_measure\"");
    const auto p = s.find("\"per_class\"");
    const auto c = s.find("\"confusion\"");
    ASSERT_NE(a, std::string::npos);
    EXPECT_LT(a, m);
    EXPECT_LT(m, w);
    EXPECT_LT(w, p);
    EXPECT_LT(p, c);
    auto j = nlohmann::json::parse(s);
    EXPECT_DOUBLE_EQ(j["accuracy"].get<double>(), 1.0);
    EXPECT_EQ(j["confusion"][0][0].get<long>(), 1);
}

TEST(Metrics, ConfusionCsvRoundTrips) {
    std::vector<int> labels{0, 0, 1, 2, 2, 2};
    std::vector<int> preds{0, 1, 1, 2, 0, 2};
    auto r = compute_metrics(labels, preds, 3);
    TempFile f("m3f_conf.csv");
    save_confusion_csv(r, f.path);
    auto m = load_confusion_csv(f.path, 3);
    EXPECT_EQ(m, r.confusion);
    EXPECT_THROW(load_confusion_csv(f.path, 4), std::runtime_error);
}

namespace {
struct Ppm {
    int width = 0, height = 0;
    std::vector<unsigned char> pixels;

    unsigned char at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

Ppm read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::string magic;
    int maxval = 0;
    Ppm img;
    is >> magic >> img.width >> img.height >> maxval;
    EXPECT_EQ(magic, "P6");
    EXPECT_EQ(maxval, 255);
    is.get();
    img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
    is.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    EXPECT_TRUE(static_cast<bool>(is));
    return img;
}
}  // namespace

TEST(Heatmap, IdentityConfusionLightsTheDiagonal) {
    std::vector<int> labels{0, 1, 2};
    auto r = compute_metrics(labels, labels, 3);
    TempFile f("m3f_heat_ident.ppm");
    emit_heatmap(r, f.path, 4);
    auto img = read_ppm(f.path);
    EXPECT_EQ(img.width, 12);
    EXPECT_EQ(img.height, 12);
    for (int t = 0; t < 3; ++t)
        for (int p = 0; p < 3; ++p) {
            const int y = t * 4 + 2, x = p * 4 + 2;
            if (t == p) {
                EXPECT_EQ(img.at(y, x, 0), 0);  // saturated blue
                EXPECT_EQ(img.at(y, x, 1), 0);
            } else {
                EXPECT_EQ(img.at(y, x, 0), 255);  // white
                EXPECT_EQ(img.at(y, x, 1), 255);
            }
            EXPECT_EQ(img.at(y, x, 2), 255);
        }
}

TEST(Heatmap, UniformConfusionIsFlat) {
    std::vector<int> labels, preds;
    for (int t = 0; t < 3; ++t)
        for (int p = 0; p < 3; ++p) {
            labels.push_back(t);
            preds.push_back(p);
        }
    auto r = compute_metrics(labels, preds, 3);
    TempFile f("m3f_heat_flat.ppm");
    emit_heatmap(r, f.path, 2);
    auto img = read_ppm(f.path);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            EXPECT_EQ(img.at(y, x, 0), img.at(0, 0, 0));
            EXPECT_EQ(img.at(y, x, 1), img.at(0, 0, 1));
            EXPECT_EQ(img.at(y, x, 2), 255);
        }
}

TEST(Metrics, InvalidInputsRejected) {
    std::vector<int> labels{0, 1};
    std::vector<int> fewer{0};
    EXPECT_THROW(compute_metrics(labels, fewer, 2), std::invalid_argument);
    std::vector<int> out_of_range{0, 5};
    EXPECT_THROW(compute_metrics(labels, out_of_range, 2), std::invalid_argument);
    std::vector<int> empty;
    EXPECT_THROW(compute_metrics(empty, empty, 2), std::invalid_argument);
}
