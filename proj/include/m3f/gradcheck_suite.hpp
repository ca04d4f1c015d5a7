#pragma once

#include <chrono>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "m3f/fusion_model.hpp"
#include "m3f/gradcheck.hpp"
#include "m3f/rnn_branch.hpp"
#include "m3f/train.hpp"

namespace m3f {

struct SuiteResult {
    bool passed = true;
    real max_rel_err = 0;
    double seconds = 0;
};

/// Finite-difference verification of every differentiable op and of the
/// composed reduced model (d=8 branches). Prints one line per check.
inline SuiteResult run_reduced_gradcheck(std::ostream& os, uint64_t seed = 42) {
    const real tol = sizeof(real) == 8 ? real(1e-6) : real(1e-2);
    const real step = sizeof(real) == 8 ? real(1e-4) : real(1e-2);
    SuiteResult suite;
    const auto t0 = std::chrono::steady_clock::now();

    auto check = [&](const std::string& name, ParamStore& store,
                     const std::function<Var(Tape&)>& loss) {
        auto loss_fn = [&]() {
            Tape t(false);
            return t.val(loss(t))[0];
        };
        auto grad_fn = [&]() {
            Tape t;
            t.backward(loss(t));
        };
        auto report = grad_check(store, loss_fn, grad_fn, tol, step, 8, seed);
        os << (report.passed() ? "ok   " : "FAIL ") << name
           << "  max_rel_err=" << report.max_rel_err() << "\n";
        suite.passed = suite.passed && report.passed();
        suite.max_rel_err = std::max(suite.max_rel_err, report.max_rel_err());
    };

    Rng rng(seed);

    {
        ParamStore ps;
        ps.add("x", rng.uniform_tensor({3, 4}, -1, 1));
        ps.add("w", rng.uniform_tensor({4, 5}, -1, 1));
        ps.add("b", rng.uniform_tensor({5}, -1, 1));
        const std::pair<const char*, Act> acts[] = {{"linear+tanh", Act::Tanh},
                                                    {"linear+sigmoid", Act::Sigmoid},
                                                    {"linear+relu", Act::Relu}};
        for (auto [name, act] : acts) {
            ParamStore local = ps;
            check(name, local, [&local, act](Tape& t) {
                Var v = activation(t, add_rowvec(t, matmul(t, t.param(local, "x"),
                                                           t.param(local, "w")),
                                                 t.param(local, "b")),
                                   act);
                return sum(t, mul(t, v, v));
            });
        }
    }
    {
        ParamStore ps;
        ps.add("x", rng.uniform_tensor({2, 13}, -1, 1));
        check("softmax+cross_entropy", ps, [&ps](Tape& t) {
            return cross_entropy(t, softmax_rows(t, t.param(ps, "x")), {3, 7});
        });
    }
    {
        ParamStore ps;
        ps.add("x", rng.uniform_tensor({2, 3, 9, 9}, -1, 1));
        ps.add("k", rng.uniform_tensor({4, 3, 3, 3}, -1, 1));
        ps.add("b", rng.uniform_tensor({4}, -1, 1));
        check("conv2d+maxpool", ps, [&ps](Tape& t) {
            Var v = conv2d(t, t.param(ps, "x"), t.param(ps, "k"), t.param(ps, "b"),
                           Padding::Same, 1);
            v = maxpool2d(t, v, 3, 2);
            return sum(t, mul(t, v, v));
        });
    }
    {
        ParamStore ps;
        ps.add("x", rng.uniform_tensor({4, 3, 5, 5}, -1, 1));
        ps.add("gamma", rng.uniform_tensor({3}, real(0.5), real(1.5)));
        ps.add("beta", rng.uniform_tensor({3}, -1, 1));
        Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1);
        check("batch_norm+gap", ps, [&ps, &rm, &rv](Tape& t) {
            Var v = batch_norm(t, t.param(ps, "x"), t.param(ps, "gamma"), t.param(ps, "beta"),
                               rm, rv, Mode::Train, false);
            v = global_avg_pool(t, v);
            return sum(t, mul(t, v, v));
        });
    }
    {
        ParamStore ps;
        Rng init(seed + 1);
        init_gru_params(ps, "gru", 3, 6, init);
        init_attention_params(ps, "att", 6, init);
        ps.add("ts", rng.uniform_tensor({5, 3}, -1, 1));
        check("gru+attention", ps, [&ps](Tape& t) {
            Var f = rnn_features(t, t.param(ps, "ts"), gru_vars(t, ps, "gru"),
                                 attention_vars(t, ps, "att"));
            return sum(t, mul(t, f, f));
        });
    }
    {
        ModelDims dims;
        dims.n_dates = 3;
        dims.ts_vars = 3;
        dims.hidden = 8;
        dims.classes = 4;
        dims.channels = 2;
        dims.patch = 13;
        dims.cnn_width_div = 32;
        FusionModel model = FusionModel::init(seed + 2, dims);
        Rng data(seed + 3);
        std::vector<Sample> batch;
        for (int i = 0; i < 2; ++i) {
            Sample s;
            s.ts = data.uniform_tensor({dims.n_dates, dims.ts_vars}, -1, 1);
            s.patch = data.uniform_tensor({dims.channels, dims.patch, dims.patch}, 0, 1);
            s.label = i % dims.classes;
            batch.push_back(std::move(s));
        }
        auto loss_fn = [&]() {
            Tape t(false);
            return t.val(model.total_loss(t, batch, Mode::Train, Branch::Full, false).total)[0];
        };
        auto grad_fn = [&]() {
            Tape t;
            t.backward(model.total_loss(t, batch, Mode::Train, Branch::Full, false).total);
        };
        auto report = grad_check(model.store, loss_fn, grad_fn, tol, step, 6, seed);
        os << (report.passed() ? "ok   " : "FAIL ") << "composed reduced model (d=8)"
           << "  max_rel_err=" << report.max_rel_err() << "\n";
        if (!report.passed()) report.print(os);
        suite.passed = suite.passed && report.passed();
        suite.max_rel_err = std::max(suite.max_rel_err, report.max_rel_err());
    }

    suite.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    os << (suite.passed ? "gradcheck passed" : "gradcheck FAILED")
       << "  max_rel_err=" << suite.max_rel_err << "  (" << suite.seconds << " s)\n";
    return suite;
}

}  // namespace m3f
