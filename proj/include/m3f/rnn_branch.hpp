#pragma once

#include <string>
#include <vector>

#include "m3f/ops.hpp"
#include "m3f/param_store.hpp"
#include "m3f/tape.hpp"

namespace m3f {

inline Var row_slice(Tape& t, Var m, int row);

/// Tape handles for the GRU gate parameters: per-gate input weights
/// [B_in x d], recurrent weights [d x d] and biases [d] for the update
/// gate (z), reset gate (r) and candidate state (h).
struct GruVars {
    Var wz, uz, bz;
    Var wr, ur, br;
    Var wh, uh, bh;
};

/// Tape handles for attention pooling: W_a [d x d], b_a [d], u_a [d].
struct AttentionVars {
    Var w_a, b_a, u_a;
};

/// Result of attention pooling: the pooled feature row [1 x d] and the
/// per-timestep weights [1 x N].
struct AttentionResult {
    Var pooled;
    Var lambdas;
};

inline void init_gru_params(ParamStore& ps, const std::string& prefix, int input_dim, int hidden,
                            Rng& rng) {
    const real bound = real(1) / std::sqrt(static_cast<real>(hidden));
    for (const char* gate : {"z", "r", "h"}) {
        ps.add(prefix + ".w" + gate, rng.uniform_tensor({input_dim, hidden}, -bound, bound));
        ps.add(prefix + ".u" + gate, rng.uniform_tensor({hidden, hidden}, -bound, bound));
        ps.add(prefix + ".b" + gate, Tensor::zeros({hidden}));
    }
}

inline void init_attention_params(ParamStore& ps, const std::string& prefix, int hidden,
                                  Rng& rng) {
    const real bound = real(1) / std::sqrt(static_cast<real>(hidden));
    ps.add(prefix + ".w_a", rng.uniform_tensor({hidden, hidden}, -bound, bound));
    ps.add(prefix + ".b_a", Tensor::zeros({hidden}));
    ps.add(prefix + ".u_a", rng.uniform_tensor({hidden, 1}, -bound, bound));
}

inline GruVars gru_vars(Tape& t, ParamStore& ps, const std::string& prefix) {
    return GruVars{t.param(ps, prefix + ".wz"), t.param(ps, prefix + ".uz"),
                   t.param(ps, prefix + ".bz"), t.param(ps, prefix + ".wr"),
                   t.param(ps, prefix + ".ur"), t.param(ps, prefix + ".br"),
                   t.param(ps, prefix + ".wh"), t.param(ps, prefix + ".uh"),
                   t.param(ps, prefix + ".bh")};
}

inline AttentionVars attention_vars(Tape& t, ParamStore& ps, const std::string& prefix) {
    return AttentionVars{t.param(ps, prefix + ".w_a"), t.param(ps, prefix + ".b_a"),
                         t.param(ps, prefix + ".u_a")};
}

/// One GRU step. x_t and h_prev are rows ([1 x B_in], [1 x d]).
///   z = sigmoid(x W_z + h U_z + b_z)
///   r = sigmoid(x W_r + h U_r + b_r)
///   c = tanh(x W_h + (r . h) U_h + b_h)
///   h' = (1 - z) . h + z . c
inline Var gru_cell(Tape& t, Var x_t, Var h_prev, const GruVars& p) {
    auto gate = [&](Var w, Var u, Var b, Var h_in, Act act) {
        Var pre = add(t, matmul(t, x_t, w), matmul(t, h_in, u));
        return activation(t, add_rowvec(t, pre, b), act);
    };
    Var z = gate(p.wz, p.uz, p.bz, h_prev, Act::Sigmoid);
    Var r = gate(p.wr, p.ur, p.br, h_prev, Act::Sigmoid);
    Var cand = gate(p.wh, p.uh, p.bh, mul(t, r, h_prev), Act::Tanh);
    Var one_minus_z = sub(t, t.leaf(Tensor::full(t.val(z).shape, 1)), z);
    return add(t, mul(t, one_minus_z, h_prev), mul(t, z, cand));
}

/// Runs the GRU over a time series [N x B_in] from h0 (zeros when invalid)
/// and stacks the per-date hidden states into H [N x d].
inline Var gru_sequence(Tape& t, Var ts, const GruVars& p, Var h0 = {}) {
    const Tensor& T = t.val(ts);
    check_shape(T.rank() == 2, "gru_sequence expects [N x B_in], got " + T.shape_str());
    const int n = T.dim(0), b_in = T.dim(1);
    check_shape(n >= 1, "gru_sequence: empty sequence");
    const int d = t.val(p.uz).dim(0);
    Var h = h0.valid() ? h0 : t.leaf(Tensor::zeros({1, d}));
    std::vector<Var> rows;
    rows.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Var x_t = reshape(t, row_slice(t, ts, i), {1, b_in});
        h = gru_cell(t, x_t, h, p);
        rows.push_back(h);
    }
    return vstack(t, rows);
}

/// Attention pooling over H [N x d]:
///   v_a = tanh(H W_a + b_a); scores = v_a u_a; lambda = softmax(scores);
///   pooled = lambda H.
inline AttentionResult attention_pool(Tape& t, Var h_seq, const AttentionVars& p) {
    const Tensor& H = t.val(h_seq);
    check_shape(H.rank() == 2, "attention_pool expects [N x d]");
    const int n = H.dim(0);
    Var v_a = tanh_op(t, add_rowvec(t, matmul(t, h_seq, p.w_a), p.b_a));
    Var scores = reshape(t, matmul(t, v_a, p.u_a), {1, n});
    Var lambdas = softmax_rows(t, scores);
    Var pooled = matmul(t, lambdas, h_seq);
    return {pooled, lambdas};
}

/// Full temporal branch: GRU over the series, then attention pooling.
/// Returns the feature row [1 x d].
inline Var rnn_features(Tape& t, Var ts, const GruVars& gru, const AttentionVars& att) {
    return attention_pool(t, gru_sequence(t, ts, gru), att).pooled;
}

/// Extracts row i of a rank-2 tensor as [cols].
inline Var row_slice(Tape& t, Var m, int row) {
    const Tensor& M = t.val(m);
    check_shape(M.rank() == 2 && row >= 0 && row < M.dim(0), "row_slice out of range");
    const int cols = M.dim(1);
    Tensor out({cols});
    std::copy_n(M.data.begin() + static_cast<int64_t>(row) * cols, cols, out.data.begin());
    Var o{t.next_id()};
    return t.push(std::move(out), [m, o, row, cols](Tape& tp) {
        const Tensor& g = tp.grad(o);
        Tensor& gm = tp.grad(m);
        for (int c = 0; c < cols; ++c) gm.at(row, c) += g[c];
    });
}

}  // namespace m3f
