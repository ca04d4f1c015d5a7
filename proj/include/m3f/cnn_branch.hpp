#pragma once

#include <string>

#include "m3f/ops.hpp"
#include "m3f/param_store.hpp"
#include "m3f/tape.hpp"

namespace m3f {

/// Width layout of the patch encoder. At full scale the pipeline is
/// 5x25x25 -> 7x7 conv (256 maps) -> 3x3 maxpool stride 2 -> 3x3 conv
/// (512) -> 3x3 same conv (512) -> channel concat (1024) -> 1x1 conv
/// (512) -> global average pool -> 512 features. width_div shrinks every
/// width for desk-scale runs.
struct CnnConfig {
    int in_channels = 5;
    int patch = 25;
    int width_div = 1;

    int c1() const { return 256 / width_div; }
    int c2() const { return 512 / width_div; }   // block2a out
    int c3() const { return 512 / width_div; }   // block2b out
    int c4() const { return 512 / width_div; }   // block3 out == feature size
    int feature_size() const { return c4(); }
};

/// Tape handles plus running-stat storage for one conv block
/// (conv -> relu -> batch norm, in that order).
struct ConvBlockVars {
    Var kernel, bias, gamma, beta;
    Tensor* run_mean = nullptr;
    Tensor* run_var = nullptr;
};

struct CnnVars {
    ConvBlockVars b1, b2a, b2b, b3;
};

inline void init_conv_block_params(ParamStore& ps, const std::string& prefix, int c_in, int c_out,
                                   int k, Rng& rng) {
    const real bound = real(1) / std::sqrt(static_cast<real>(c_in) * k * k);
    ps.add(prefix + ".kernel", rng.uniform_tensor({c_out, c_in, k, k}, -bound, bound));
    ps.add(prefix + ".bias", Tensor::zeros({c_out}));
    ps.add(prefix + ".gamma", Tensor::full({c_out}, 1));
    ps.add(prefix + ".beta", Tensor::zeros({c_out}));
    ps.add(prefix + ".run_mean", Tensor::zeros({c_out}), /*trainable=*/false);
    ps.add(prefix + ".run_var", Tensor::full({c_out}, 1), /*trainable=*/false);
}

inline void init_cnn_params(ParamStore& ps, const std::string& prefix, const CnnConfig& cfg,
                            Rng& rng) {
    init_conv_block_params(ps, prefix + ".b1", cfg.in_channels, cfg.c1(), 7, rng);
    init_conv_block_params(ps, prefix + ".b2a", cfg.c1(), cfg.c2(), 3, rng);
    init_conv_block_params(ps, prefix + ".b2b", cfg.c2(), cfg.c3(), 3, rng);
    init_conv_block_params(ps, prefix + ".b3", cfg.c2() + cfg.c3(), cfg.c4(), 1, rng);
}

inline ConvBlockVars conv_block_vars(Tape& t, ParamStore& ps, const std::string& prefix) {
    return ConvBlockVars{t.param(ps, prefix + ".kernel"), t.param(ps, prefix + ".bias"),
                         t.param(ps, prefix + ".gamma"), t.param(ps, prefix + ".beta"),
                         &ps.at(prefix + ".run_mean").value, &ps.at(prefix + ".run_var").value};
}

inline CnnVars cnn_vars(Tape& t, ParamStore& ps, const std::string& prefix) {
    return CnnVars{conv_block_vars(t, ps, prefix + ".b1"), conv_block_vars(t, ps, prefix + ".b2a"),
                   conv_block_vars(t, ps, prefix + ".b2b"), conv_block_vars(t, ps, prefix + ".b3")};
}

/// conv2d -> relu -> batch_norm.
inline Var conv_block(Tape& t, Var x, const ConvBlockVars& p, Padding pad, int stride, Mode mode,
                      bool update_stats = true) {
    Var v = conv2d(t, x, p.kernel, p.bias, pad, stride);
    v = relu(t, v);
    return batch_norm(t, v, p.gamma, p.beta, *p.run_mean, *p.run_var, mode, update_stats);
}

namespace detail {
inline void expect_maps(const Tensor& v, int ch, int h, int w, const char* stage) {
    const bool batched = v.rank() == 4;
    const int off = batched ? 1 : 0;
    check_shape(v.dim(off) == ch && v.dim(off + 1) == h && v.dim(off + 2) == w,
                std::string(stage) + ": expected " + std::to_string(ch) + "x" +
                    std::to_string(h) + "x" + std::to_string(w) + ", got " + v.shape_str());
}
}  // namespace detail

/// Spatial branch over a patch [CH x 25 x 25] (or a batch of them).
/// Returns [feature_size] (or [B x feature_size]).
inline Var cnn_features(Tape& t, Var patch, const CnnVars& p, const CnnConfig& cfg, Mode mode,
                        bool update_stats = true) {
    const Tensor& X = t.val(patch);
    const bool batched = X.rank() == 4;
    const int off = batched ? 1 : 0;
    check_shape(X.rank() == 3 || X.rank() == 4, "cnn_features expects [CH,P,P] or [B,CH,P,P]");
    check_shape(X.dim(off) == cfg.in_channels && X.dim(off + 1) == cfg.patch &&
                    X.dim(off + 2) == cfg.patch,
                "cnn_features: patch must be " + std::to_string(cfg.in_channels) + "x" +
                    std::to_string(cfg.patch) + "x" + std::to_string(cfg.patch) + ", got " +
                    X.shape_str());

    // 25 -> 19 -> 9 -> 7 -> 7 -> 7 at the reference patch size
    Var v = conv_block(t, patch, p.b1, Padding::Valid, 1, mode, update_stats);
    detail::expect_maps(t.val(v), cfg.c1(), cfg.patch - 6, cfg.patch - 6, "block1");
    v = maxpool2d(t, v, 3, 2);
    const int pooled = (cfg.patch - 6 - 3) / 2 + 1;
    detail::expect_maps(t.val(v), cfg.c1(), pooled, pooled, "maxpool");
    Var a = conv_block(t, v, p.b2a, Padding::Valid, 1, mode, update_stats);
    detail::expect_maps(t.val(a), cfg.c2(), pooled - 2, pooled - 2, "block2a");
    Var b = conv_block(t, a, p.b2b, Padding::Same, 1, mode, update_stats);
    detail::expect_maps(t.val(b), cfg.c3(), pooled - 2, pooled - 2, "block2b");
    Var cat = concat_channels(t, a, b);
    detail::expect_maps(t.val(cat), cfg.c2() + cfg.c3(), pooled - 2, pooled - 2, "concat");
    Var f = conv_block(t, cat, p.b3, Padding::Valid, 1, mode, update_stats);
    detail::expect_maps(t.val(f), cfg.c4(), pooled - 2, pooled - 2, "block3");
    return global_avg_pool(t, f);
}

}  // namespace m3f
