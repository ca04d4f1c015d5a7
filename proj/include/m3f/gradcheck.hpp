#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "m3f/param_store.hpp"
#include "m3f/tensor.hpp"

namespace m3f {

struct GradCheckEntry {
    std::string name;
    real max_rel_err = 0;
    int checked = 0;
    int failed = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    real tolerance = 0;

    bool passed() const {
        for (const auto& e : entries)
            if (e.failed > 0) return false;
        return true;
    }

    real max_rel_err() const {
        real m = 0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_err);
        return m;
    }

    double pass_fraction() const {
        long checked = 0, failed = 0;
        for (const auto& e : entries) {
            checked += e.checked;
            failed += e.failed;
        }
        return checked == 0 ? 1.0 : 1.0 - static_cast<double>(failed) / checked;
    }

    void print(std::ostream& os) const {
        for (const auto& e : entries)
            os << (e.failed ? "FAIL " : "ok   ") << e.name << "  max_rel_err=" << e.max_rel_err
               << "  checked=" << e.checked << " failed=" << e.failed << "\n";
    }
};

/// Central-difference probe of analytic gradients at randomly sampled
/// parameter coordinates. `loss_fn` must be a deterministic function of the
/// store's current values (batch norm must run with frozen stats) and must
/// not touch gradients; the analytic gradients are taken from `grad_fn`,
/// which runs one forward/backward and leaves gradients in the store.
// Denominator floor for the relative error, i.e. an absolute-tolerance
// term for near-zero gradients: fp32 forward roundoff is ~1e-4 of the
// loss scale in a central difference, so differences below floor*tol are
// indistinguishable from noise.
inline constexpr real kGradCheckFloor = sizeof(real) == 8 ? real(1e-8) : real(3e-2);

inline GradCheckReport grad_check(ParamStore& store, const std::function<real()>& loss_fn,
                                  const std::function<void()>& grad_fn, real tolerance,
                                  real step = real(1e-3), int coords_per_param = 16,
                                  uint64_t seed = 42, real denom_floor = kGradCheckFloor) {
    store.zero_grads();
    grad_fn();
    if (!store.grads_populated())
        throw std::logic_error("grad_check: grad_fn did not populate gradients");

    GradCheckReport report;
    report.tolerance = tolerance;
    Rng rng(seed);
    for (auto& [name, p] : store) {
        if (!p.trainable) continue;
        GradCheckEntry e;
        e.name = name;
        const int64_t n = p.value.size();
        const int probes = static_cast<int>(std::min<int64_t>(coords_per_param, n));
        for (int i = 0; i < probes; ++i) {
            int64_t idx = probes == n ? i : rng.index(n);
            const real saved = p.value[idx];
            const real an = p.grad[idx];
            const real base = loss_fn();
            auto rel_at = [&](real h) {
                p.value[idx] = saved + h;
                const real up = loss_fn();
                p.value[idx] = saved - h;
                const real down = loss_fn();
                p.value[idx] = saved;
                auto rel = [&](real fd) {
                    const real denom = std::max({std::abs(fd), std::abs(an), denom_floor});
                    return std::abs(fd - an) / denom;
                };
                // Near a relu/maxpool kink the central difference never
                // converges; any subgradient between the two one-sided
                // slopes is correct there, so accept the analytic value if
                // it falls inside (or near) that interval.
                const real fwd = (up - base) / h;
                const real bwd = (base - down) / h;
                const real lo = std::min(fwd, bwd), hi = std::max(fwd, bwd);
                const real dist = std::max({lo - an, an - hi, real(0)});
                const real denom = std::max({std::abs(fwd), std::abs(bwd), std::abs(an),
                                             denom_floor});
                return std::min(rel((up - down) / (2 * h)), dist / denom);
            };
            // Retry at other step sizes before declaring a mismatch: a probe
            // can straddle a relu/maxpool kink, or drown in fp32 roundoff.
            real rel = rel_at(step);
            // Larger steps trade truncation error for less fp32 forward
            // noise, which dominates for nearly cancelled gradients.
            for (real h : {step / 4, step / 16, step / 64, step / 256, step * 4, step * 16}) {
                if (rel <= tolerance) break;
                rel = std::min(rel, rel_at(h));
            }
            e.max_rel_err = std::max(e.max_rel_err, rel);
            ++e.checked;
            if (rel > tolerance) ++e.failed;
        }
        report.entries.push_back(std::move(e));
    }
    store.zero_grads();
    return report;
}

}  // namespace m3f
