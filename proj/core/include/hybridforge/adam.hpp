#pragma once

#include <cstdint>
#include <vector>

#include "hybridforge/tensor.hpp"

namespace hybridforge {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct AdamState {
    Tensor<T> m;
    Tensor<T> v;
    std::uint64_t step_count = 0;
    AdamHyper hyper;

    AdamState() = default;
    AdamState(const Shape& shape, AdamHyper h) : m(shape), v(shape), hyper(h) {}
};

// One bias-corrected Adam step on p using p.grad, then zeroes p.grad.
// lr_override < 0 means "use state.hyper.lr".
// Throws TrainingError naming the parameter if the gradient is not finite.
template <class T>
void adam_update(Parameter<T>& p, AdamState<T>& state, double lr_override = -1.0);

// Adam over a fixed list of parameters. Parameters are referenced, not owned.
template <class T>
class Adam {
public:
    Adam(std::vector<Parameter<T>*> params, AdamHyper hyper);

    void step(double lr);
    void zero_grad();
    const std::vector<Parameter<T>*>& params() const noexcept { return params_; }

    // Scales all gradients so their global L2 norm is at most max_norm.
    // Returns the norm before clipping.
    double clip_grad_norm(double max_norm);

private:
    std::vector<Parameter<T>*> params_;
    std::vector<AdamState<T>> states_;
};

} // namespace hybridforge
