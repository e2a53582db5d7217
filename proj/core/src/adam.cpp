#include "hybridforge/adam.hpp"

#include <cmath>

#include "hybridforge/error.hpp"

namespace hybridforge {

template <class T>
void adam_update(Parameter<T>& p, AdamState<T>& state, double lr_override) {
    if (p.grad.shape() != p.value.shape()) throw ContractError("adam_update: gradient of '" + p.name + "' not populated");
    if (state.m.shape() != p.value.shape()) state = AdamState<T>(p.value.shape(), state.hyper);
    if (!p.grad.all_finite()) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");

    const AdamHyper& h = state.hyper;
    const double lr = lr_override >= 0.0 ? lr_override : h.lr;
    ++state.step_count;
    const double bc1 = 1.0 - std::pow(h.beta1, double(state.step_count));
    const double bc2 = 1.0 - std::pow(h.beta2, double(state.step_count));
    const T b1 = T(h.beta1), b2 = T(h.beta2);
    const T step = T(lr / bc1);
    const T inv_bc2 = T(1.0 / bc2);
    const T eps = T(h.eps);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const T g = p.grad[i];
        state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
        state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
        p.value[i] -= step * state.m[i] / (std::sqrt(state.v[i] * inv_bc2) + eps);
    }
    p.grad.fill(T{});
}

template <class T>
Adam<T>::Adam(std::vector<Parameter<T>*> params, AdamHyper hyper) : params_(std::move(params)) {
    states_.reserve(params_.size());
    for (Parameter<T>* p : params_) {
        states_.emplace_back(p->value.shape(), hyper);
        p->zero_grad();
    }
}

template <class T>
void Adam<T>::step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) adam_update(*params_[i], states_[i], lr);
}

template <class T>
void Adam<T>::zero_grad() {
    for (Parameter<T>* p : params_) p->zero_grad();
}

template <class T>
double Adam<T>::clip_grad_norm(double max_norm) {
    double ss = 0;
    for (Parameter<T>* p : params_)
        for (std::size_t i = 0; i < p->grad.numel(); ++i) ss += double(p->grad[i]) * double(p->grad[i]);
    const double norm = std::sqrt(ss);
    if (std::isfinite(norm) && norm > max_norm && max_norm > 0) {
        const T f = T(max_norm / norm);
        for (Parameter<T>* p : params_)
            for (std::size_t i = 0; i < p->grad.numel(); ++i) p->grad[i] *= f;
    }
    return norm;
}

template void adam_update<float>(Parameter<float>&, AdamState<float>&, double);
template void adam_update<double>(Parameter<double>&, AdamState<double>&, double);
template class Adam<float>;
template class Adam<double>;

} // namespace hybridforge
