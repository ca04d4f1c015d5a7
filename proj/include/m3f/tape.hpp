#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "m3f/param_store.hpp"
#include "m3f/tensor.hpp"

namespace m3f {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Recorded computation graph for one forward pass. Nodes are appended in
/// topological order (an op's inputs are always recorded before the op), so
/// a single reverse sweep computes all gradients.
class Tape {
  public:
    /// When recording is off, ops still compute values but skip backward
    /// closures; backward() is then unavailable. Used for cheap
    /// forward-only evaluation.
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    Var leaf(Tensor value) {
        values_.push_back(std::move(value));
        backs_.emplace_back();
        return Var{static_cast<int>(values_.size()) - 1};
    }

    /// Leaf bound to a named parameter: its gradient is flushed back into
    /// the store (accumulating) at the end of backward().
    Var param(ParamStore& store, const std::string& name) {
        Var v = leaf(store.at(name).value);
        if (recording_) bindings_.push_back({v.id, &store, name});
        return v;
    }

    /// Record an op result. `back` runs during the reverse sweep and must
    /// add this node's contribution into its inputs' grad tensors.
    Var push(Tensor value, std::function<void(Tape&)> back) {
        values_.push_back(std::move(value));
        backs_.push_back(recording_ ? std::move(back) : std::function<void(Tape&)>());
        return Var{static_cast<int>(values_.size()) - 1};
    }

    /// Id the next push/leaf will receive; lets an op capture its own
    /// output handle inside its backward closure.
    int next_id() const { return static_cast<int>(values_.size()); }

    const Tensor& val(Var v) const { return values_[static_cast<size_t>(v.id)]; }
    Tensor& mutable_val(Var v) { return values_[static_cast<size_t>(v.id)]; }

    /// Gradient accumulator for a node, allocated on first touch.
    Tensor& grad(Var v) {
        auto i = static_cast<size_t>(v.id);
        if (grads_.size() <= i) grads_.resize(values_.size());
        if (grads_[i].data.empty()) grads_[i] = Tensor::zeros(values_[i].shape);
        return grads_[i];
    }

    /// Reverse sweep from a scalar loss. Visits every node once, newest
    /// first; parameter gradients are then accumulated into their stores.
    void backward(Var loss) {
        if (!recording_) throw std::logic_error("backward on a non-recording tape");
        if (val(loss).size() != 1) throw std::invalid_argument("backward requires a scalar loss");
        grads_.assign(values_.size(), Tensor());
        grad(loss)[0] = real(1);
        for (int i = loss.id; i >= 0; --i) {
            auto& g = grads_[static_cast<size_t>(i)];
            if (g.data.empty()) continue;  // node does not influence the loss
            if (backs_[static_cast<size_t>(i)]) backs_[static_cast<size_t>(i)](*this);
        }
        for (auto& b : bindings_) {
            Tensor& dst = b.store->at(b.name).grad;
            auto i = static_cast<size_t>(b.id);
            if (i < grads_.size() && !grads_[i].data.empty()) {
                for (int64_t k = 0; k < dst.size(); ++k) dst[k] += grads_[i][k];
            }
            b.store->mark_grads_populated();
        }
    }

  private:
    struct Binding {
        int id;
        ParamStore* store;
        std::string name;
    };

    bool recording_;
    std::vector<Tensor> values_;
    std::vector<std::function<void(Tape&)>> backs_;
    std::vector<Tensor> grads_;
    std::vector<Binding> bindings_;
};

}  // namespace m3f
