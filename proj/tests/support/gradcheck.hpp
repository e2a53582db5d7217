#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hybridforge/autograd.hpp"
#include "hybridforge/ops.hpp"
#include "hybridforge/rng.hpp"

namespace hftest {

using hybridforge::Parameter;
using hybridforge::SeededRng;
using hybridforge::Tape;
using hybridforge::Tensor;
using hybridforge::Var;

inline Tensor<double> random_tensor(hybridforge::Shape shape, SeededRng& rng, double std = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * std;
    return t;
}

inline Parameter<double> random_param(const std::string& name, hybridforge::Shape shape, SeededRng& rng,
                                      double std = 1.0) {
    return Parameter<double>(name, random_tensor(std::move(shape), rng, std));
}

struct GradCheck {
    double max_rel = 0.0;
    std::size_t checked = 0;
};

// Builds the graph and returns an output Var. Non-scalar outputs are reduced
// with a fixed random projection so every output element matters.
using Builder = std::function<Var(Tape<double>&)>;

inline double eval_loss(const Builder& build, const Tensor<double>& proj) {
    Tape<double> tape(false);
    Var out = build(tape);
    const Tensor<double>& v = tape.value(out);
    if (v.numel() == 1) return v[0];
    double s = 0.0;
    for (std::size_t i = 0; i < v.numel(); ++i) s += v[i] * proj[i];
    return s;
}

// Central finite differences against the tape's analytic gradients for every
// element of every listed parameter (strided when a tensor is large).
inline GradCheck grad_check(const std::vector<Parameter<double>*>& params, const Builder& build,
                            std::uint64_t seed, double eps = 1e-5, std::size_t max_per_param = 48) {
    Tensor<double> proj;
    {
        Tape<double> probe(false);
        Var out = build(probe);
        SeededRng rng(seed ^ 0x5eedull);
        proj = random_tensor(probe.value(out).shape(), rng);
    }
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape(true);
        Var out = build(tape);
        Var loss = out;
        if (tape.value(out).numel() != 1) {
            loss = hybridforge::ops::sum(tape, hybridforge::ops::mul(tape, out, tape.constant(proj)));
        }
        tape.backward(loss);
    }
    GradCheck r;
    for (auto* p : params) {
        const std::size_t n = p->value.numel();
        const std::size_t stride = std::max<std::size_t>(1, n / max_per_param);
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = p->value[i];
            p->value[i] = orig + eps;
            const double up = eval_loss(build, proj);
            p->value[i] = orig - eps;
            const double down = eval_loss(build, proj);
            p->value[i] = orig;
            const double numeric = (up - down) / (2 * eps);
            const double analytic = p->grad[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            r.max_rel = std::max(r.max_rel, std::abs(numeric - analytic) / denom);
            ++r.checked;
        }
    }
    return r;
}

} // namespace hftest
