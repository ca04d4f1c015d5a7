#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace m3f {

#ifdef M3F_REAL64
using real = double;
#else
using real = float;
#endif

/// Dense n-dimensional row-major tensor. The universal value type of the
/// autodiff core; shape is a list of positive dimensions and data holds
/// product(shape) entries.
struct Tensor {
    std::vector<int> shape;
    std::vector<real> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), real(0)) {}
    Tensor(std::vector<int> s, std::vector<real> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<size_t>(count(shape)) != data.size())
            throw std::invalid_argument("Tensor: shape/data size mismatch");
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, real v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(real v) { return Tensor({1}, {v}); }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    real& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    real operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 2-D accessors; row-major
    real& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    real at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (real v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const { return shape_to_string(shape); }

    static std::string shape_to_string(const std::vector<int>& s) {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << ']';
        return os.str();
    }
};

inline void check_shape(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("shape error: " + what);
}

/// Deterministic RNG helpers. std::normal_distribution output is
/// implementation-defined, so normals are hand-rolled Box-Muller over
/// mt19937 draws to keep runs reproducible across standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    real uniform(real lo, real hi) {
        // 53-bit mantissa draw, identical for float and double builds
        double u = (gen_() >> 11) * (1.0 / 9007199254740992.0);
        return static_cast<real>(lo + (hi - lo) * u);
    }

    real normal(real mean = 0, real stddev = 1) {
        if (have_spare_) {
            have_spare_ = false;
            return static_cast<real>(mean + stddev * spare_);
        }
        double u1, u2;
        do {
            u1 = (gen_() >> 11) * (1.0 / 9007199254740992.0);
        } while (u1 <= 1e-300);
        u2 = (gen_() >> 11) * (1.0 / 9007199254740992.0);
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(2.0 * 3.14159265358979323846 * u2);
        have_spare_ = true;
        return static_cast<real>(mean + stddev * mag * std::cos(2.0 * 3.14159265358979323846 * u2));
    }

    uint64_t next() { return gen_(); }

    /// Uniform integer in [0, n)
    int64_t index(int64_t n) { return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n)); }

    Tensor uniform_tensor(std::vector<int> shape, real lo, real hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.data) v = uniform(lo, hi);
        return t;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(gen_() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0;
    bool have_spare_ = false;
};

}  // namespace m3f
