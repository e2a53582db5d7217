#pragma once

#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "hybridforge/linear_attention.hpp"
#include "hybridforge/model.hpp"

namespace hftest {

struct GradCase {
    std::string name;
    double tolerance;
    std::function<GradCheck(std::uint64_t seed)> run;
};

namespace ops = hybridforge::ops;
using hybridforge::LinearVariant;

inline hybridforge::ModelConfig tiny_config(std::size_t layers = 1) {
    hybridforge::ModelConfig c;
    c.n_layers = layers;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_head = 4;
    c.d_ff = 16;
    c.vocab_size = 11;
    c.max_seq = 16;
    return c;
}

// Larger-than-init weights so the sublayer operates in a nonlinear regime.
inline void randomise(hybridforge::LinearBlockWeights<double>& w, SeededRng& rng) {
    for (auto* p : w.parameters()) {
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] = rng.normal() * 0.4;
    }
}

inline GradCase linear_sublayer_case(LinearVariant v) {
    return {"linear_sublayer_" + std::string(hybridforge::variant_tag(v)), 1e-3, [v](std::uint64_t seed) {
                SeededRng rng(seed);
                const auto cfg = tiny_config();
                auto w = hybridforge::init_linear_block<double>(v, cfg, 0.1, rng.split(1));
                randomise(w, rng);
                auto x = random_param("x", {2 * 5, cfg.d_model}, rng);
                std::vector<Parameter<double>*> ps = w.parameters();
                ps.push_back(&x);
                return grad_check(ps, [&](Tape<double>& t) {
                    return hybridforge::linear_sublayer(t, w, t.leaf(x), 2, 5);
                }, seed);
            }};
}

inline GradCase linear_scan_case(LinearVariant v) {
    return {"linear_scan_" + std::string(hybridforge::variant_tag(v)), 1e-3, [v](std::uint64_t seed) {
                SeededRng rng(seed);
                const std::size_t batch = 2, seq = 6, heads = 2, d = 8;
                auto q = random_param("q", {batch * seq, d}, rng, 0.7);
                auto k = random_param("k", {batch * seq, d}, rng, 0.7);
                auto vv = random_param("v", {batch * seq, d}, rng, 0.7);
                const std::size_t aw = v == LinearVariant::GLA ? d : heads;
                auto a = random_param("a", {batch * seq, aw}, rng, 1.5);
                auto b = random_param("b", {batch * seq, heads}, rng, 1.5);
                std::vector<Parameter<double>*> ps{&q, &k, &vv};
                if (v != LinearVariant::UngatedLinear) ps.push_back(&a);
                if (v == LinearVariant::GatedDeltaNet) ps.push_back(&b);
                return grad_check(ps, [&](Tape<double>& t) {
                    Var av = v == LinearVariant::UngatedLinear ? Var{} : t.leaf(a);
                    Var bv = v == LinearVariant::GatedDeltaNet ? t.leaf(b) : Var{};
                    return hybridforge::linear_scan(t, v, t.leaf(q), t.leaf(k), t.leaf(vv), av, bv, batch, seq, heads);
                }, seed);
            }};
}

inline GradCase model_case(const std::string& name, const std::string& layout) {
    return {name, layout.find('L') == std::string::npos ? 1e-4 : 1e-3, [layout](std::uint64_t seed) {
                auto cfg = tiny_config(layout.size());
                auto model = hybridforge::model_init<double>(cfg, seed);
                SeededRng rng(seed);
                for (auto* p : model.parameters()) {
                    for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += rng.normal() * 0.2;
                }
                const LinearVariant variants[] = {LinearVariant::GLA, LinearVariant::GatedDeltaNet,
                                                  LinearVariant::UngatedLinear};
                for (std::size_t l = 0, n = 0; l < layout.size(); ++l) {
                    if (layout[l] != 'L') continue;
                    auto w = hybridforge::init_linear_block<double>(variants[n++ % 3], cfg, 0.1, rng.split(l));
                    randomise(w, rng);
                    model.layers[l].attn = std::move(w);
                }
                hybridforge::TokenBatch tb{2, 5, {}};
                for (std::size_t i = 0; i < 10; ++i) tb.ids.push_back(static_cast<std::int32_t>(rng.uniform_int(cfg.vocab_size)));
                std::vector<std::int32_t> targets;
                std::vector<double> weights;
                for (std::size_t i = 0; i < 10; ++i) {
                    targets.push_back(static_cast<std::int32_t>(rng.uniform_int(cfg.vocab_size)));
                    weights.push_back(i % 3 == 0 ? 0.0 : 1.0);
                }
                return grad_check(model.parameters(), [&](Tape<double>& t) {
                    Var logits = hybridforge::forward(t, model, tb);
                    return ops::cross_entropy(t, logits, std::span<const std::int32_t>(targets),
                                              std::span<const double>(weights));
                }, seed, 1e-5, 12);
            }};
}

// Every differentiable op and every block type.
inline std::vector<GradCase> gradient_cases() {
    std::vector<GradCase> cases;
    auto binary = [&](const std::string& name, std::function<Var(Tape<double>&, Var, Var)> f, hybridforge::Shape sa,
                      hybridforge::Shape sb) {
        cases.push_back({name, 1e-4, [f, sa, sb](std::uint64_t seed) {
                             SeededRng rng(seed);
                             auto a = random_param("a", sa, rng);
                             auto b = random_param("b", sb, rng);
                             return grad_check({&a, &b}, [&](Tape<double>& t) { return f(t, t.leaf(a), t.leaf(b)); },
                                               seed);
                         }});
    };
    auto unary = [&](const std::string& name, std::function<Var(Tape<double>&, Var)> f, hybridforge::Shape s,
                     double std = 1.0) {
        cases.push_back({name, 1e-4, [f, s, std](std::uint64_t seed) {
                             SeededRng rng(seed);
                             auto a = random_param("a", s, rng, std);
                             return grad_check({&a}, [&](Tape<double>& t) { return f(t, t.leaf(a)); }, seed);
                         }});
    };

    binary("matmul", [](Tape<double>& t, Var a, Var b) { return ops::matmul(t, a, b); }, {4, 5}, {5, 3});
    binary("add", [](Tape<double>& t, Var a, Var b) { return ops::add(t, a, b); }, {3, 4}, {3, 4});
    binary("add_rowwise", [](Tape<double>& t, Var a, Var b) { return ops::add_rowwise(t, a, b); }, {3, 4}, {4});
    binary("mul", [](Tape<double>& t, Var a, Var b) { return ops::mul(t, a, b); }, {3, 4}, {3, 4});
    binary("rmsnorm", [](Tape<double>& t, Var a, Var b) { return ops::rmsnorm(t, a, b); }, {3, 6}, {6});
    binary("silu_mul", [](Tape<double>& t, Var a, Var b) { return ops::silu_mul(t, a, b); }, {3, 4}, {3, 4});
    unary("scale", [](Tape<double>& t, Var a) { return ops::scale(t, a, -1.7); }, {3, 4});
    unary("sum", [](Tape<double>& t, Var a) { return ops::sum(t, a); }, {3, 4});
    unary("sigmoid", [](Tape<double>& t, Var a) { return ops::sigmoid(t, a); }, {3, 4}, 3.0);
    unary("softmax_rows", [](Tape<double>& t, Var a) { return ops::softmax_rows(t, a, false); }, {3, 5}, 2.0);
    unary("softmax_rows_causal", [](Tape<double>& t, Var a) { return ops::softmax_rows(t, a, true); }, {5, 5}, 2.0);
    unary("rope", [](Tape<double>& t, Var a) { return ops::rope(t, a, 4, 2); }, {8, 8});
    unary("mse", [](Tape<double>& t, Var a) {
        Tensor<double> target({3, 4});
        for (std::size_t i = 0; i < target.numel(); ++i) target[i] = 0.1 * double(i) - 0.5;
        return ops::mse(t, a, target);
    }, {3, 4});
    unary("embedding", [](Tape<double>& t, Var a) {
        static const std::vector<std::int32_t> ids{3, 0, 3, 5, 1};
        return ops::embedding(t, a, std::span<const std::int32_t>(ids));
    }, {6, 4});
    unary("cross_entropy", [](Tape<double>& t, Var a) {
        static const std::vector<std::int32_t> tg{1, 4, 0, 2};
        static const std::vector<double> w{1, 0, 1, 1};
        return ops::cross_entropy(t, a, std::span<const std::int32_t>(tg), std::span<const double>(w));
    }, {4, 5}, 2.0);
    cases.push_back({"causal_attention", 1e-4, [](std::uint64_t seed) {
                         SeededRng rng(seed);
                         auto q = random_param("q", {2 * 5, 8}, rng);
                         auto k = random_param("k", {2 * 5, 8}, rng);
                         auto v = random_param("v", {2 * 5, 8}, rng);
                         return grad_check({&q, &k, &v}, [&](Tape<double>& t) {
                             return ops::causal_attention(t, t.leaf(q), t.leaf(k), t.leaf(v), 2, 5, 2);
                         }, seed);
                     }});
    for (auto v : hybridforge::all_variants()) {
        cases.push_back(linear_scan_case(v));
        cases.push_back(linear_sublayer_case(v));
    }
    cases.push_back(model_case("full_block", "F"));
    cases.push_back(model_case("hybrid_stack", "FLLL"));
    return cases;
}

} // namespace hftest
