#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>

#include "hybridforge/tensor.hpp"

namespace hybridforge {

struct Var {
    static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
    std::uint32_t id = kNone;
    bool valid() const noexcept { return id != kNone; }
};

// Dynamic gradient tape for one forward pass. Nodes live in a deque so
// references handed out by value()/grad() stay valid while ops are recorded.
// A tape is confined to the thread that created it.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }

    Var constant(Tensor<T> value) {
        Node& n = push();
        n.owned = std::move(value);
        return last();
    }

    // Tracked leaf: gradients are added into p.grad by backward().
    Var leaf(Parameter<T>& p) {
        Node& n = push();
        n.external = &p.value;
        if (grad_enabled_) {
            n.param = &p;
            n.requires_grad = true;
        }
        return last();
    }

    // Read-only leaf, never tracked.
    Var leaf(const Parameter<T>& p) {
        Node& n = push();
        n.external = &p.value;
        return last();
    }

    // Record an op output. The backward closure is kept only when some input
    // requires gradients.
    Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool track = false;
        if (grad_enabled_) {
            for (Var v : inputs) track = track || (v.valid() && nodes_[v.id].requires_grad);
        }
        Node& n = push();
        n.owned = std::move(value);
        if (track) {
            n.requires_grad = true;
            n.backward = std::move(fn);
        }
        return last();
    }

    const Tensor<T>& value(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.external ? *n.external : n.owned;
    }

    bool requires_grad(Var v) const { return v.valid() && nodes_.at(v.id).requires_grad; }

    // Gradient buffer, zero-initialised on first access.
    Tensor<T>& grad(Var v) {
        Node& n = nodes_.at(v.id);
        if (n.grad.shape() != value(v).shape()) n.grad = Tensor<T>(value(v).shape());
        return n.grad;
    }

    bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

    std::size_t size() const noexcept { return nodes_.size(); }

    // Reverse sweep from a scalar loss; accumulates into tracked Parameters.
    void backward(Var loss) {
        if (value(loss).numel() != 1) {
            throw ContractError("backward() needs a scalar loss, got shape " + shape_string(value(loss).shape()));
        }
        if (!requires_grad(loss)) return;
        grad(loss)[0] = T(1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this);
            if (n.param) {
                Parameter<T>& p = *n.param;
                if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
                for (std::size_t j = 0; j < n.grad.numel(); ++j) p.grad[j] += n.grad[j];
            }
        }
    }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Parameter<T>* param = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Node& push() { return nodes_.emplace_back(); }
    Var last() const { return Var{static_cast<std::uint32_t>(nodes_.size() - 1)}; }

    bool grad_enabled_;
    std::deque<Node> nodes_;
};

} // namespace hybridforge
