#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "m3f/tensor.hpp"

namespace m3f {

/// Confusion-matrix derived evaluation summary. Rows of the confusion
/// matrix are true classes, columns predictions. Classes absent from the
/// test split get F = 0 and are flagged.
struct MetricsReport {
    int classes = 0;
    std::vector<long> confusion;  // row-major C x C counts
    std::vector<double> precision, recall, f_measure;
    std::vector<bool> empty_class;
    double accuracy = 0;
    double macro_f = 0;
    double weighted_f = 0;

    long at(int truth, int pred) const {
        return confusion[static_cast<size_t>(truth) * classes + pred];
    }
};

inline MetricsReport compute_metrics(const std::vector<int>& labels,
                                     const std::vector<int>& predictions, int classes) {
    if (labels.size() != predictions.size())
        throw std::invalid_argument("compute_metrics: label/prediction count mismatch");
    if (labels.empty()) throw std::invalid_argument("compute_metrics: empty evaluation set");
    MetricsReport r;
    r.classes = classes;
    r.confusion.assign(static_cast<size_t>(classes) * classes, 0);
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes || predictions[i] < 0 ||
            predictions[i] >= classes)
            throw std::invalid_argument("compute_metrics: class index out of range");
        ++r.confusion[static_cast<size_t>(labels[i]) * classes + predictions[i]];
    }
    long correct = 0, total = static_cast<long>(labels.size());
    double weighted_sum = 0;
    for (int c = 0; c < classes; ++c) {
        correct += r.at(c, c);
        long support = 0, predicted = 0;
        for (int k = 0; k < classes; ++k) {
            support += r.at(c, k);
            predicted += r.at(k, c);
        }
        const long tp = r.at(c, c);
        const double p = predicted == 0 ? 0 : static_cast<double>(tp) / predicted;
        const double rec = support == 0 ? 0 : static_cast<double>(tp) / support;
        const double f = p + rec == 0 ? 0 : 2 * p * rec / (p + rec);
        r.precision.push_back(p);
        r.recall.push_back(rec);
        r.f_measure.push_back(f);
        r.empty_class.push_back(support == 0);
        r.macro_f += f / classes;
        weighted_sum += f * support;
    }
    r.accuracy = static_cast<double>(correct) / total;
    r.weighted_f = weighted_sum / total;
    return r;
}

/// Plain-text JSON report with a fixed key order.
inline std::string metrics_to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["accuracy"] = r.accuracy;
    j["macro_f_measure"] = r.macro_f;
    j["weighted_f_measure"] = r.weighted_f;
    j["classes"] = r.classes;
    j["per_class"] = nlohmann::ordered_json::array();
    for (int c = 0; c < r.classes; ++c) {
        nlohmann::ordered_json e;
        e["class"] = c;
        e["precision"] = r.precision[static_cast<size_t>(c)];
        e["recall"] = r.recall[static_cast<size_t>(c)];
        e["f_measure"] = r.f_measure[static_cast<size_t>(c)];
        e["empty"] = static_cast<bool>(r.empty_class[static_cast<size_t>(c)]);
        j["per_class"].push_back(e);
    }
    j["confusion"] = nlohmann::ordered_json::array();
    for (int t = 0; t < r.classes; ++t) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (int p = 0; p < r.classes; ++p) row.push_back(r.at(t, p));
        j["confusion"].push_back(row);
    }
    return j.dump(2) + "\n";
}

inline void save_confusion_csv(const MetricsReport& r, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    for (int t = 0; t < r.classes; ++t) {
        for (int p = 0; p < r.classes; ++p) os << (p ? "," : "") << r.at(t, p);
        os << "\n";
    }
    if (!os) throw std::runtime_error("failed writing confusion csv: " + path);
}

inline std::vector<long> load_confusion_csv(const std::string& path, int classes) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    std::vector<long> m;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) m.push_back(std::stol(cell));
    }
    if (m.size() != static_cast<size_t>(classes) * classes)
        throw std::runtime_error("confusion csv has wrong cell count in " + path);
    return m;
}

/// Row-normalized confusion heatmap as a binary PPM, `cell` pixels per
/// matrix entry, white-to-blue linear ramp.
inline void emit_heatmap(const MetricsReport& r, const std::string& path, int cell = 16) {
    if (cell < 1) throw std::invalid_argument("emit_heatmap: cell size must be positive");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    const int side = r.classes * cell;
    os << "P6\n" << side << " " << side << "\n255\n";
    std::vector<double> norm(static_cast<size_t>(r.classes) * r.classes, 0);
    for (int t = 0; t < r.classes; ++t) {
        long sum = 0;
        for (int p = 0; p < r.classes; ++p) sum += r.at(t, p);
        if (sum > 0)
            for (int p = 0; p < r.classes; ++p)
                norm[static_cast<size_t>(t) * r.classes + p] =
                    static_cast<double>(r.at(t, p)) / sum;
    }
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double v = norm[static_cast<size_t>(y / cell) * r.classes + x / cell];
            const auto fade = static_cast<unsigned char>(255.0 * (1.0 - v) + 0.5);
            const unsigned char px[3] = {fade, fade, 255};
            os.write(reinterpret_cast<const char*>(px), 3);
        }
    if (!os) throw std::runtime_error("failed writing heatmap: " + path);
}

}  // namespace m3f
