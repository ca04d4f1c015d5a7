#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>

#include "m3f/tensor.hpp"

namespace m3f {

/// One named learnable (or stateful) tensor with its gradient accumulator
/// and Adam moment estimates. Non-trainable entries (batch-norm running
/// stats) are carried for checkpointing but skipped by the optimizer.
struct Param {
    Tensor value;
    Tensor grad;
    Tensor m;  // Adam first moment
    Tensor v;  // Adam second moment
    bool trainable = true;
};

/// Name -> Param map with a shared Adam step counter. Iteration order is
/// lexicographic (std::map), which keeps every traversal deterministic.
class ParamStore {
  public:
    Tensor& add(const std::string& name, Tensor init, bool trainable = true) {
        if (params_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        Param p;
        p.grad = Tensor::zeros(init.shape);
        p.m = Tensor::zeros(init.shape);
        p.v = Tensor::zeros(init.shape);
        p.value = std::move(init);
        p.trainable = trainable;
        return params_.emplace(name, std::move(p)).first->second.value;
    }

    Param& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    const Param& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    size_t count() const { return params_.size(); }

    void zero_grads() {
        for (auto& [name, p] : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), real(0));
        grads_populated_ = false;
    }

    void mark_grads_populated() { grads_populated_ = true; }
    bool grads_populated() const { return grads_populated_; }
    long step() const { return step_; }

    /// Standard Adam update with bias correction. Gradients are zeroed
    /// after the step and the shared step counter advances. A step with
    /// no populated gradients is a warned no-op.
    void adam_step(real lr, real beta1 = real(0.9), real beta2 = real(0.999),
                   real eps = real(1e-8)) {
        if (!grads_populated_) {
            std::cerr << "adam_step: no gradients populated, skipping\n";
            return;
        }
        ++step_;
        const real bc1 = real(1) - static_cast<real>(std::pow(beta1, step_));
        const real bc2 = real(1) - static_cast<real>(std::pow(beta2, step_));
        for (auto& [name, p] : params_) {
            if (!p.trainable) continue;
            for (int64_t i = 0; i < p.value.size(); ++i) {
                real g = p.grad[i];
                p.m[i] = beta1 * p.m[i] + (real(1) - beta1) * g;
                p.v[i] = beta2 * p.v[i] + (real(1) - beta2) * g * g;
                real mhat = p.m[i] / bc1;
                real vhat = p.v[i] / bc2;
                p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
        zero_grads();
    }

  private:
    std::map<std::string, Param> params_;
    long step_ = 0;
    bool grads_populated_ = false;
};

}  // namespace m3f
