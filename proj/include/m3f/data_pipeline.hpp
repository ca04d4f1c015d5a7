#pragma once

#include <array>
#include <cmath>
#include <iostream>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "m3f/binary_io.hpp"
#include "m3f/sample.hpp"
#include "m3f/tensor.hpp"

namespace m3f {

/// A labeled sample set plus the per-band min-max bounds it was scaled
/// with (empty until normalize runs).
struct Dataset {
    std::vector<Sample> samples;
    int n_dates = 0;
    int ts_vars = 0;
    int channels = 0;
    int patch = 0;
    int classes = 0;
    bool normalized = false;
    std::vector<real> ts_min, ts_max;        // per time-series variable
    std::vector<real> patch_min, patch_max;  // per patch channel
};

// ---------------------------------------------------------------- gapfill

/// Replaces invalid entries of a per-band date series by linear
/// interpolation between the nearest valid neighbors; leading/trailing
/// gaps take the nearest valid value. `context` names the pixel/band in
/// the all-invalid error.
inline std::vector<real> gapfill_linear(std::span<const real> series,
                                        std::span<const uint8_t> valid,
                                        const std::string& context = "series") {
    const int n = static_cast<int>(series.size());
    if (valid.size() != series.size())
        throw std::invalid_argument("gapfill_linear: mask length mismatch for " + context);
    std::vector<int> idx;
    for (int i = 0; i < n; ++i)
        if (valid[static_cast<size_t>(i)]) idx.push_back(i);
    if (idx.empty())
        throw std::runtime_error("gapfill_linear: no valid observation in " + context);
    std::vector<real> out(series.begin(), series.end());
    int seg = 0;
    for (int i = 0; i < n; ++i) {
        if (valid[static_cast<size_t>(i)]) continue;
        while (seg + 1 < static_cast<int>(idx.size()) && idx[static_cast<size_t>(seg) + 1] < i)
            ++seg;
        const int lo = idx[static_cast<size_t>(seg)];
        if (i < idx.front()) {
            out[static_cast<size_t>(i)] = series[static_cast<size_t>(idx.front())];
        } else if (i > idx.back()) {
            out[static_cast<size_t>(i)] = series[static_cast<size_t>(idx.back())];
        } else {
            const int hi = idx[static_cast<size_t>(seg) + 1];
            // slope form stays exact on representable ramps; the blended
            // form v0*(1-w) + v1*w rounds whenever the gap is not a power
            // of two
            const real slope = (series[static_cast<size_t>(hi)] -
                                series[static_cast<size_t>(lo)]) /
                               static_cast<real>(hi - lo);
            out[static_cast<size_t>(i)] =
                series[static_cast<size_t>(lo)] + slope * static_cast<real>(i - lo);
        }
    }
    return out;
}

// ---------------------------------------------------------------- indices

/// Position of each reflectance in the 10-band vector, wavelength order:
/// blue, green, red, three red-edge bands, NIR, narrow NIR, two SWIR.
enum BandIndex {
    kBlue = 0,
    kGreen = 1,
    kRed = 2,
    kRedEdge1 = 3,
    kRedEdge2 = 4,
    kRedEdge3 = 5,
    kNir = 6,
    kNirNarrow = 7,
    kSwir1 = 8,
    kSwir2 = 9
};

inline constexpr int kReflectanceBands = 10;
inline constexpr int kIndexCount = 6;

namespace detail {
inline real norm_diff(real a, real b) {
    const real d = a + b;
    return d == 0 ? real(0) : (a - b) / d;
}
}  // namespace detail

/// The six radiometric indices appended to the reflectances:
/// NDVI = (NIR-Red)/(NIR+Red), NDWI = (Green-NIR)/(Green+NIR),
/// BI = sqrt((Red^2+NIR^2)/2), MNDVI/MNDWI substitute the SWIR-band mean
/// for NDVI's red / NDWI's NIR, RNDVI = (NIR-RedEdge1)/(NIR+RedEdge1).
/// Zero denominators yield 0.
inline std::array<real, kIndexCount> compute_indices(std::span<const real> bands) {
    if (bands.size() != kReflectanceBands)
        throw std::invalid_argument("compute_indices: expected " +
                                    std::to_string(kReflectanceBands) + " bands, got " +
                                    std::to_string(bands.size()));
    const real red = bands[kRed], nir = bands[kNir], green = bands[kGreen];
    const real swir = (bands[kSwir1] + bands[kSwir2]) / 2;
    return {detail::norm_diff(nir, red),
            detail::norm_diff(green, nir),
            std::sqrt((red * red + nir * nir) / 2),
            detail::norm_diff(nir, swir),
            detail::norm_diff(green, swir),
            detail::norm_diff(nir, bands[kRedEdge1])};
}

// ---------------------------------------------------------------- patches

namespace detail {
/// Mirror (symmetric, edge included) index fold into [0, n).
inline int mirror_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}
}  // namespace detail

/// Scale factor between the time-series grid and the imagery grid: one
/// series pixel corresponds to a 5x5 block of image pixels.
inline constexpr int kBlockScale = 5;

/// Cuts the window x window image patch centered on the 5x5 block of
/// series pixel (s2_row, s2_col); image rows 5r+2 +/- window/2, mirror
/// padded at the borders. Returns [CH x window x window].
inline Tensor extract_patch(const Tensor& vhsr, int s2_row, int s2_col, int window = 25) {
    check_shape(vhsr.rank() == 3, "extract_patch expects [CH x H x W], got " + vhsr.shape_str());
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("extract_patch: window must be odd and positive");
    const int ch = vhsr.dim(0), h = vhsr.dim(1), w = vhsr.dim(2);
    const int cr = kBlockScale * s2_row + 2, cc = kBlockScale * s2_col + 2;
    if (s2_row < 0 || s2_col < 0 || cr + 2 >= h || cc + 2 >= w)
        throw std::invalid_argument("extract_patch: series pixel (" + std::to_string(s2_row) +
                                    "," + std::to_string(s2_col) + ") outside the image grid");
    const int half = window / 2;
    Tensor out({ch, window, window});
    for (int c = 0; c < ch; ++c)
        for (int dy = 0; dy < window; ++dy) {
            const int sy = detail::mirror_index(cr - half + dy, h);
            for (int dx = 0; dx < window; ++dx) {
                const int sx = detail::mirror_index(cc - half + dx, w);
                out.data[(static_cast<int64_t>(c) * window + dy) * window + dx] =
                    vhsr.data[(static_cast<int64_t>(c) * h + sy) * w + sx];
            }
        }
    return out;
}

// ------------------------------------------------------------- normalize

struct NormBounds {
    std::vector<real> ts_min, ts_max;
    std::vector<real> patch_min, patch_max;
};

/// Per-variable / per-channel min-max over every sample of the (training)
/// dataset.
inline NormBounds compute_bounds(const Dataset& ds) {
    if (ds.samples.empty()) throw std::invalid_argument("compute_bounds: empty dataset");
    NormBounds b;
    b.ts_min.assign(static_cast<size_t>(ds.ts_vars), std::numeric_limits<real>::max());
    b.ts_max.assign(static_cast<size_t>(ds.ts_vars), std::numeric_limits<real>::lowest());
    b.patch_min.assign(static_cast<size_t>(ds.channels), std::numeric_limits<real>::max());
    b.patch_max.assign(static_cast<size_t>(ds.channels), std::numeric_limits<real>::lowest());
    for (const Sample& s : ds.samples) {
        for (int n = 0; n < ds.n_dates; ++n)
            for (int v = 0; v < ds.ts_vars; ++v) {
                const real x = s.ts.at(n, v);
                b.ts_min[static_cast<size_t>(v)] = std::min(b.ts_min[static_cast<size_t>(v)], x);
                b.ts_max[static_cast<size_t>(v)] = std::max(b.ts_max[static_cast<size_t>(v)], x);
            }
        const int64_t per = static_cast<int64_t>(ds.patch) * ds.patch;
        for (int c = 0; c < ds.channels; ++c)
            for (int64_t i = 0; i < per; ++i) {
                const real x = s.patch.data[static_cast<size_t>(c * per + i)];
                b.patch_min[static_cast<size_t>(c)] =
                    std::min(b.patch_min[static_cast<size_t>(c)], x);
                b.patch_max[static_cast<size_t>(c)] =
                    std::max(b.patch_max[static_cast<size_t>(c)], x);
            }
    }
    return b;
}

namespace detail {
inline real scale01(real x, real lo, real hi, bool clip) {
    if (hi <= lo) return 0;  // constant band
    real y = (x - lo) / (hi - lo);
    if (clip) y = std::clamp(y, real(0), real(1));
    return y;
}
}  // namespace detail

/// Applies min-max bounds in place; values outside the bounds (test split
/// against train bounds) are clipped to [0, 1].
inline void apply_bounds(Dataset& ds, const NormBounds& b) {
    for (size_t v = 0; v < b.ts_min.size(); ++v)
        if (b.ts_max[v] <= b.ts_min[v])
            std::cerr << "normalize: constant time-series variable " << v << ", mapped to 0\n";
    for (size_t c = 0; c < b.patch_min.size(); ++c)
        if (b.patch_max[c] <= b.patch_min[c])
            std::cerr << "normalize: constant patch channel " << c << ", mapped to 0\n";
    for (Sample& s : ds.samples) {
        for (int n = 0; n < ds.n_dates; ++n)
            for (int v = 0; v < ds.ts_vars; ++v)
                s.ts.at(n, v) = detail::scale01(s.ts.at(n, v), b.ts_min[static_cast<size_t>(v)],
                                                b.ts_max[static_cast<size_t>(v)], true);
        const int64_t per = static_cast<int64_t>(ds.patch) * ds.patch;
        for (int c = 0; c < ds.channels; ++c)
            for (int64_t i = 0; i < per; ++i) {
                real& x = s.patch.data[static_cast<size_t>(c * per + i)];
                x = detail::scale01(x, b.patch_min[static_cast<size_t>(c)],
                                    b.patch_max[static_cast<size_t>(c)], true);
            }
    }
    ds.normalized = true;
    ds.ts_min = b.ts_min;
    ds.ts_max = b.ts_max;
    ds.patch_min = b.patch_min;
    ds.patch_max = b.patch_max;
}

/// Fits bounds on the training split only and applies them to both splits.
inline NormBounds normalize(Dataset& train, Dataset& test) {
    NormBounds b = compute_bounds(train);
    apply_bounds(train, b);
    apply_bounds(test, b);
    return b;
}

// ---------------------------------------------------------- object split

/// Splits object ids per class without replacement: round(fraction * n)
/// objects per class to the train side, at least 1 and at most n-1.
/// Deterministic given seed; classes with fewer than two objects are
/// rejected.
inline std::pair<std::vector<uint32_t>, std::vector<uint32_t>> object_split(
    const Dataset& ds, real train_fraction, uint64_t seed) {
    if (train_fraction <= 0 || train_fraction >= 1)
        throw std::invalid_argument("object_split: train fraction must be in (0,1)");
    std::map<int, std::vector<uint32_t>> per_class;
    std::map<uint32_t, int> object_class;
    for (const Sample& s : ds.samples) {
        auto it = object_class.find(s.object_id);
        if (it == object_class.end()) {
            object_class[s.object_id] = s.label;
            per_class[s.label].push_back(s.object_id);
        } else if (it->second != s.label) {
            throw std::invalid_argument("object_split: object " + std::to_string(s.object_id) +
                                        " spans multiple classes");
        }
    }
    Rng rng(seed);
    std::vector<uint32_t> train_ids, test_ids;
    for (auto& [cls, ids] : per_class) {
        const int n = static_cast<int>(ids.size());
        if (n < 2)
            throw std::invalid_argument("object_split: class " + std::to_string(cls) +
                                        " has fewer than 2 objects");
        rng.shuffle(ids);
        int k = static_cast<int>(std::lround(train_fraction * n));
        k = std::clamp(k, 1, n - 1);
        train_ids.insert(train_ids.end(), ids.begin(), ids.begin() + k);
        test_ids.insert(test_ids.end(), ids.begin() + k, ids.end());
    }
    return {std::move(train_ids), std::move(test_ids)};
}

/// Materializes the (train, test) datasets induced by an object split.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, real train_fraction,
                                                 uint64_t seed) {
    auto [train_ids, test_ids] = object_split(ds, train_fraction, seed);
    std::map<uint32_t, bool> in_train;
    for (uint32_t id : train_ids) in_train[id] = true;
    for (uint32_t id : test_ids) in_train[id] = false;
    Dataset train = ds, test = ds;
    train.samples.clear();
    test.samples.clear();
    for (const Sample& s : ds.samples)
        (in_train.at(s.object_id) ? train : test).samples.push_back(s);
    return {std::move(train), std::move(test)};
}

// ------------------------------------------------------------- synthetic

/// Synthetic benchmark layout: the first `temporal_classes` classes carry
/// their signal only in the time series (class-specific sinusoid, shared
/// neutral patch); the remaining `spatial_classes` only in the patch
/// (class-specific oriented grating, shared flat series). Samples carry
/// independent gaussian noise and are grouped into fixed-size objects
/// for split bookkeeping. The uninformative modality is noise-only by
/// construction, so a model cannot shortcut around the other branch.
struct SynthConfig {
    int temporal_classes = 4;
    int spatial_classes = 4;
    int samples_per_class = 600;
    int samples_per_object = 10;
    int n_dates = 8;
    int ts_vars = 3;
    int channels = 2;
    int patch = 25;
    real noise = real(0.1);
    uint64_t seed = 0;

    int classes() const { return temporal_classes + spatial_classes; }
};

namespace detail {

inline Tensor synth_ts_template(const SynthConfig& cfg, int cls) {
    Tensor ts({cfg.n_dates, cfg.ts_vars});
    if (cls >= cfg.temporal_classes) {
        std::fill(ts.data.begin(), ts.data.end(), real(0.5));  // shared flat profile
        return ts;
    }
    // low frequency with well-spread phases plus a per-class level shift:
    // smooth trajectories stay separable at few sampling dates (higher
    // harmonics alias together)
    const real freq = real(1) + real(cls % 2);
    const real phase = real(2) * std::numbers::pi_v<real> * cls /
                       std::max(cfg.temporal_classes, 1);
    const real level = real(0.5) + real(0.08) * (cls - real(0.5) * (cfg.temporal_classes - 1));
    for (int n = 0; n < cfg.n_dates; ++n)
        for (int v = 0; v < cfg.ts_vars; ++v)
            ts.at(n, v) = level +
                          real(0.3) * std::sin(2 * std::numbers::pi_v<real> * freq * n /
                                                   cfg.n_dates +
                                               phase + real(0.4) * v);
    return ts;
}

inline Tensor synth_patch_template(const SynthConfig& cfg, int cls) {
    Tensor p({cfg.channels, cfg.patch, cfg.patch});
    if (cls < cfg.temporal_classes) {
        std::fill(p.data.begin(), p.data.end(), real(0.5));  // shared neutral texture
        return p;
    }
    const int j = cls - cfg.temporal_classes;
    const real theta = std::numbers::pi_v<real> * j / std::max(cfg.spatial_classes, 1);
    const real freq = real(2) + j;
    for (int c = 0; c < cfg.channels; ++c)
        for (int y = 0; y < cfg.patch; ++y)
            for (int x = 0; x < cfg.patch; ++x)
                p.data[(static_cast<int64_t>(c) * cfg.patch + y) * cfg.patch + x] =
                    real(0.5) +
                    real(0.35) * std::sin(2 * std::numbers::pi_v<real> * freq *
                                              (x * std::cos(theta) + y * std::sin(theta)) /
                                              cfg.patch +
                                          real(0.3) * c);
    return p;
}

}  // namespace detail

inline Dataset synth_generate(const SynthConfig& cfg) {
    if (cfg.classes() < 2 || cfg.samples_per_class < 1 || cfg.samples_per_object < 1 ||
        cfg.n_dates < 1 || cfg.ts_vars < 1 || cfg.channels < 1 || cfg.patch < 1 ||
        cfg.noise < 0)
        throw std::invalid_argument("synth_generate: invalid config");
    Dataset ds;
    ds.n_dates = cfg.n_dates;
    ds.ts_vars = cfg.ts_vars;
    ds.channels = cfg.channels;
    ds.patch = cfg.patch;
    ds.classes = cfg.classes();
    Rng rng(cfg.seed);
    uint32_t next_object = 0;
    for (int cls = 0; cls < cfg.classes(); ++cls) {
        const Tensor ts_tpl = detail::synth_ts_template(cfg, cls);
        const Tensor patch_tpl = detail::synth_patch_template(cfg, cls);
        int remaining = cfg.samples_per_class;
        while (remaining > 0) {
            const int in_object = std::min(remaining, cfg.samples_per_object);
            const uint32_t object_id = next_object++;
            for (int k = 0; k < in_object; ++k) {
                Sample s;
                s.label = cls;
                s.object_id = object_id;
                s.ts = ts_tpl;
                s.patch = patch_tpl;
                for (auto& v : s.ts.data) v += rng.normal(0, cfg.noise);
                for (auto& v : s.patch.data) v += rng.normal(0, cfg.noise);
                ds.samples.push_back(std::move(s));
            }
            remaining -= in_object;
        }
    }
    return ds;
}

// ----------------------------------------------------------- file format

// Dataset file: "M3FD", version u16; header {sample count u64, N u16,
// B u16, patch u16, channels u16, classes u16}; per-sample records
// {label u16, object id u32, ts f32 N*B, patch f32 CH*P*P}; then a
// normalization block {flag u8, bounds f32 when flag=1}. Little endian.

inline void save_dataset(const Dataset& ds, const std::string& path) {
    auto os = io::open_out(path);
    os.write("M3FD", 4);
    io::write_raw<uint16_t>(os, 1);
    io::write_raw<uint64_t>(os, ds.samples.size());
    io::write_raw<uint16_t>(os, static_cast<uint16_t>(ds.n_dates));
    io::write_raw<uint16_t>(os, static_cast<uint16_t>(ds.ts_vars));
    io::write_raw<uint16_t>(os, static_cast<uint16_t>(ds.patch));
    io::write_raw<uint16_t>(os, static_cast<uint16_t>(ds.channels));
    io::write_raw<uint16_t>(os, static_cast<uint16_t>(ds.classes));
    for (const Sample& s : ds.samples) {
        io::write_raw<uint16_t>(os, static_cast<uint16_t>(s.label));
        io::write_raw<uint32_t>(os, s.object_id);
        io::write_f32_block(os, s.ts.data);
        io::write_f32_block(os, s.patch.data);
    }
    io::write_raw<uint8_t>(os, ds.normalized ? 1 : 0);
    if (ds.normalized) {
        io::write_f32_block(os, ds.ts_min);
        io::write_f32_block(os, ds.ts_max);
        io::write_f32_block(os, ds.patch_min);
        io::write_f32_block(os, ds.patch_max);
    }
    if (!os) throw std::runtime_error("failed writing dataset: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    auto is = io::open_in(path);
    io::expect_magic(is, "M3FD", "dataset");
    uint16_t version = io::read_raw<uint16_t>(is, "dataset version");
    if (version != 1)
        throw io::BadVersion("unsupported dataset version " + std::to_string(version));
    Dataset ds;
    const uint64_t count = io::read_raw<uint64_t>(is, "sample count");
    ds.n_dates = io::read_raw<uint16_t>(is, "header");
    ds.ts_vars = io::read_raw<uint16_t>(is, "header");
    ds.patch = io::read_raw<uint16_t>(is, "header");
    ds.channels = io::read_raw<uint16_t>(is, "header");
    ds.classes = io::read_raw<uint16_t>(is, "header");
    if (ds.n_dates < 1 || ds.ts_vars < 1 || ds.patch < 1 || ds.channels < 1 || ds.classes < 1)
        throw std::runtime_error("dataset header has zero dimension");
    ds.samples.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        Sample s;
        s.label = io::read_raw<uint16_t>(is, "sample label");
        if (s.label >= ds.classes)
            throw std::runtime_error("sample label " + std::to_string(s.label) +
                                     " outside class count " + std::to_string(ds.classes));
        s.object_id = io::read_raw<uint32_t>(is, "sample object id");
        s.ts = Tensor({ds.n_dates, ds.ts_vars});
        io::read_f32_block(is, s.ts.data, "sample time series");
        s.patch = Tensor({ds.channels, ds.patch, ds.patch});
        io::read_f32_block(is, s.patch.data, "sample patch");
        ds.samples.push_back(std::move(s));
    }
    const uint8_t normalized = io::read_raw<uint8_t>(is, "normalization flag");
    if (normalized) {
        ds.normalized = true;
        ds.ts_min.resize(static_cast<size_t>(ds.ts_vars));
        ds.ts_max.resize(static_cast<size_t>(ds.ts_vars));
        ds.patch_min.resize(static_cast<size_t>(ds.channels));
        ds.patch_max.resize(static_cast<size_t>(ds.channels));
        io::read_f32_block(is, ds.ts_min, "bounds");
        io::read_f32_block(is, ds.ts_max, "bounds");
        io::read_f32_block(is, ds.patch_min, "bounds");
        io::read_f32_block(is, ds.patch_max, "bounds");
    }
    return ds;
}

// ------------------------------------------------------ raw data assembly

/// Stack of co-registered reflectance images over time plus per-element
/// validity (cloud) flags. Layout [N x B x H x W].
struct RawSeriesCube {
    int n_dates = 0, bands = 0, height = 0, width = 0;
    std::vector<real> data;
    std::vector<uint8_t> valid;

    int64_t offset(int t, int b, int y, int x) const {
        return ((static_cast<int64_t>(t) * bands + b) * height + y) * width + x;
    }
    void check() const {
        const auto n = static_cast<size_t>(Tensor::count({n_dates, bands, height, width}));
        if (data.size() != n || valid.size() != n)
            throw std::invalid_argument("RawSeriesCube: data/mask size mismatch");
    }
};

/// Per-series-pixel class label (-1 for unlabeled) and object id.
struct GroundTruth {
    int height = 0, width = 0;
    std::vector<int> labels;
    std::vector<uint32_t> objects;
};

/// Builds samples from raw arrays: gapfills each band series, appends the
/// six radiometric indices when the cube carries the 10 reflectance
/// bands, and cuts the image patch for every labeled pixel. The image
/// must cover the series grid at the exact 5x scale.
inline Dataset assemble_dataset(const RawSeriesCube& cube, const Tensor& vhsr,
                                const GroundTruth& gt, int window = 25) {
    cube.check();
    check_shape(vhsr.rank() == 3, "assemble_dataset: image must be [CH x H x W]");
    if (vhsr.dim(1) != kBlockScale * cube.height || vhsr.dim(2) != kBlockScale * cube.width)
        throw std::invalid_argument("assemble_dataset: image must be exactly " +
                                    std::to_string(kBlockScale) + "x the series grid");
    if (gt.height != cube.height || gt.width != cube.width ||
        gt.labels.size() != static_cast<size_t>(cube.height) * cube.width ||
        gt.objects.size() != gt.labels.size())
        throw std::invalid_argument("assemble_dataset: ground truth shape mismatch");

    const bool with_indices = cube.bands == kReflectanceBands;
    Dataset ds;
    ds.n_dates = cube.n_dates;
    ds.ts_vars = cube.bands + (with_indices ? kIndexCount : 0);
    ds.channels = vhsr.dim(0);
    ds.patch = window;
    int max_label = -1;
    std::vector<real> series(static_cast<size_t>(cube.n_dates));
    std::vector<uint8_t> mask(static_cast<size_t>(cube.n_dates));
    for (int y = 0; y < cube.height; ++y)
        for (int x = 0; x < cube.width; ++x) {
            const int label = gt.labels[static_cast<size_t>(y) * cube.width + x];
            if (label < 0) continue;
            Sample s;
            s.label = label;
            s.object_id = gt.objects[static_cast<size_t>(y) * cube.width + x];
            s.ts = Tensor({ds.n_dates, ds.ts_vars});
            for (int b = 0; b < cube.bands; ++b) {
                for (int t = 0; t < cube.n_dates; ++t) {
                    series[static_cast<size_t>(t)] = cube.data[static_cast<size_t>(
                        cube.offset(t, b, y, x))];
                    mask[static_cast<size_t>(t)] =
                        cube.valid[static_cast<size_t>(cube.offset(t, b, y, x))];
                }
                auto filled = gapfill_linear(series, mask,
                                             "pixel (" + std::to_string(y) + "," +
                                                 std::to_string(x) + ") band " +
                                                 std::to_string(b));
                for (int t = 0; t < cube.n_dates; ++t) s.ts.at(t, b) = filled[static_cast<size_t>(t)];
            }
            if (with_indices)
                for (int t = 0; t < cube.n_dates; ++t) {
                    auto idx = compute_indices(
                        std::span<const real>(&s.ts.at(t, 0), kReflectanceBands));
                    for (int k = 0; k < kIndexCount; ++k)
                        s.ts.at(t, cube.bands + k) = idx[static_cast<size_t>(k)];
                }
            s.patch = extract_patch(vhsr, y, x, window);
            max_label = std::max(max_label, label);
            ds.samples.push_back(std::move(s));
        }
    ds.classes = max_label + 1;
    return ds;
}

}  // namespace m3f
