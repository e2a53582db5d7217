#include "hybridforge/model.hpp"

#include <cmath>

#include "hybridforge/kernels.hpp"
#include "hybridforge/ops.hpp"
#include "hybridforge/rng.hpp"

namespace hybridforge {
namespace {

template <class T>
Parameter<T> normal_param(const std::string& name, Shape shape, double std, std::uint64_t seed) {
    SeededRng rng = SeededRng(seed).split(fnv1a(name));
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * std);
    return Parameter<T>(name, std::move(t));
}

template <class T>
Parameter<T> ones_param(const std::string& name, std::size_t n) {
    return Parameter<T>(name, Tensor<T>::full({n}, T(1)));
}

template <class T, class LayerRef>
Var block_forward(Tape<T>& tape, LayerRef& layer, Var x, std::size_t batch, std::size_t seq, std::size_t n_heads,
                  ActivationTap<T>* tap, std::size_t index) {
    Var xn = ops::rmsnorm(tape, x, tape.leaf(layer.attn_norm));
    Var attn_out;
    if (auto* full = std::get_if<FullAttentionWeights<T>>(&layer.attn)) {
        Var q = ops::matmul(tape, xn, tape.leaf(full->wq));
        Var k = ops::matmul(tape, xn, tape.leaf(full->wk));
        Var v = ops::matmul(tape, xn, tape.leaf(full->wv));
        q = ops::rope(tape, q, seq, n_heads);
        k = ops::rope(tape, k, seq, n_heads);
        Var heads = ops::causal_attention(tape, q, k, v, batch, seq, n_heads);
        attn_out = ops::matmul(tape, heads, tape.leaf(full->wo));
    } else {
        auto& lin = std::get<LinearBlockWeights<T>>(layer.attn);
        attn_out = linear_sublayer(tape, lin, xn, batch, seq);
    }
    if (tap && index < tap->want.size() && tap->want[index]) {
        tap->inputs[index] = tape.value(xn);
        tap->outputs[index] = tape.value(attn_out);
    }
    Var h = ops::add(tape, x, attn_out);
    Var hn = ops::rmsnorm(tape, h, tape.leaf(layer.mlp_norm));
    Var g = ops::matmul(tape, hn, tape.leaf(layer.w_gate));
    Var u = ops::matmul(tape, hn, tape.leaf(layer.w_up));
    Var m = ops::matmul(tape, ops::silu_mul(tape, g, u), tape.leaf(layer.w_down));
    return ops::add(tape, h, m);
}

void check_tokens(const TokenBatch& tokens, const ModelConfig& cfg) {
    if (tokens.ids.size() != tokens.batch * tokens.seq) {
        throw InputError("token batch holds " + std::to_string(tokens.ids.size()) + " ids, expected " +
                         std::to_string(tokens.batch * tokens.seq));
    }
    if (tokens.seq > cfg.max_seq) {
        throw InputError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq " +
                         std::to_string(cfg.max_seq));
    }
    for (std::int32_t id : tokens.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw InputError("token id " + std::to_string(id) + " out of range for vocab " +
                             std::to_string(cfg.vocab_size));
        }
    }
}

template <class T, class ModelRef>
Var forward_impl(Tape<T>& tape, ModelRef& model, const TokenBatch& tokens, ActivationTap<T>* tap) {
    check_tokens(tokens, model.config);
    Var x = ops::embedding(tape, tape.leaf(model.embed), std::span<const std::int32_t>(tokens.ids));
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        x = block_forward(tape, model.layers[i], x, tokens.batch, tokens.seq, model.config.n_heads, tap, i);
    }
    x = ops::rmsnorm(tape, x, tape.leaf(model.final_norm));
    return ops::matmul(tape, x, tape.leaf(model.lm_head));
}

} // namespace

template <class T>
AttentionKind Layer<T>::kind() const {
    if (std::holds_alternative<FullAttentionWeights<T>>(attn)) return AttentionKind::full();
    return AttentionKind::linear(std::get<LinearBlockWeights<T>>(attn).variant);
}

template <class T>
HybridSpec Model<T>::spec() const {
    HybridSpec s;
    for (const auto& l : layers) s.kinds.push_back(l.kind());
    return s;
}

template <class T>
std::vector<Parameter<T>*> Model<T>::parameters() {
    std::vector<Parameter<T>*> out{&embed};
    for (auto& l : layers) {
        out.push_back(&l.attn_norm);
        if (auto* f = std::get_if<FullAttentionWeights<T>>(&l.attn)) {
            for (Parameter<T>* p : {&f->wq, &f->wk, &f->wv, &f->wo}) out.push_back(p);
        } else {
            for (Parameter<T>* p : std::get<LinearBlockWeights<T>>(l.attn).parameters()) out.push_back(p);
        }
        for (Parameter<T>* p : {&l.mlp_norm, &l.w_gate, &l.w_up, &l.w_down}) out.push_back(p);
    }
    out.push_back(&final_norm);
    out.push_back(&lm_head);
    return out;
}

template <class T>
std::vector<const Parameter<T>*> Model<T>::parameters() const {
    std::vector<const Parameter<T>*> out;
    for (Parameter<T>* p : const_cast<Model<T>*>(this)->parameters()) out.push_back(p);
    return out;
}

template <class T>
std::size_t Model<T>::parameter_count() const {
    std::size_t n = 0;
    for (const Parameter<T>* p : parameters()) n += p->value.numel();
    return n;
}

double output_init_std(const ModelConfig& c) { return 0.02 / std::sqrt(2.0 * double(c.n_layers)); }

template <class T>
Model<T> model_init(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    const double out_std = output_init_std(c);
    Model<T> m;
    m.config = c;
    m.embed = normal_param<T>("embed", {c.vocab_size, c.d_model}, 0.02, seed);
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        Layer<T> l;
        l.attn_norm = ones_param<T>(p + "attn_norm", c.d_model);
        FullAttentionWeights<T> a;
        a.wq = normal_param<T>(p + "attn.Wq", {c.d_model, c.d_model}, 0.02, seed);
        a.wk = normal_param<T>(p + "attn.Wk", {c.d_model, c.d_model}, 0.02, seed);
        a.wv = normal_param<T>(p + "attn.Wv", {c.d_model, c.d_model}, 0.02, seed);
        a.wo = normal_param<T>(p + "attn.Wo", {c.d_model, c.d_model}, out_std, seed);
        l.attn = std::move(a);
        l.mlp_norm = ones_param<T>(p + "mlp_norm", c.d_model);
        l.w_gate = normal_param<T>(p + "mlp.W_gate", {c.d_model, c.d_ff}, 0.02, seed);
        l.w_up = normal_param<T>(p + "mlp.W_up", {c.d_model, c.d_ff}, 0.02, seed);
        l.w_down = normal_param<T>(p + "mlp.W_down", {c.d_ff, c.d_model}, out_std, seed);
        m.layers.push_back(std::move(l));
    }
    m.final_norm = ones_param<T>("final_norm", c.d_model);
    m.lm_head = normal_param<T>("lm_head", {c.d_model, c.vocab_size}, 0.02, seed);
    return m;
}

template <class T>
ActivationTap<T> ActivationTap<T>::for_layers(std::size_t n_layers, std::span<const std::size_t> layers) {
    ActivationTap<T> tap;
    tap.want.assign(n_layers, false);
    tap.inputs.resize(n_layers);
    tap.outputs.resize(n_layers);
    for (std::size_t l : layers) {
        if (l >= n_layers) {
            throw IndexError("layer index " + std::to_string(l) + " out of range for " + std::to_string(n_layers) +
                             " layers");
        }
        tap.want[l] = true;
    }
    return tap;
}

template <class T>
Var forward(Tape<T>& tape, Model<T>& model, const TokenBatch& tokens, ActivationTap<T>* tap) {
    return forward_impl(tape, model, tokens, tap);
}

template <class T>
Var forward(Tape<T>& tape, const Model<T>& model, const TokenBatch& tokens, ActivationTap<T>* tap) {
    return forward_impl(tape, model, tokens, tap);
}

template <class T>
Tensor<T> forward_hidden(const Model<T>& model, const TokenBatch& tokens, std::size_t first_layer,
                         std::size_t last_layer, const Tensor<T>* start, ActivationTap<T>* tap) {
    check_tokens(tokens, model.config);
    if (last_layer > model.layers.size() || first_layer > last_layer) {
        throw IndexError("forward_hidden: bad layer range [" + std::to_string(first_layer) + ", " +
                         std::to_string(last_layer) + ")");
    }
    Tensor<T> x;
    if (first_layer == 0 && !start) {
        Tape<T> tape(false);
        x = tape.value(ops::embedding(tape, tape.leaf(model.embed), std::span<const std::int32_t>(tokens.ids)));
    } else {
        if (!start) throw ContractError("forward_hidden: a start state is required when first_layer > 0");
        x = *start;
    }
    // One short-lived tape per layer bounds the memory held by intermediates.
    for (std::size_t i = first_layer; i < last_layer; ++i) {
        Tape<T> tape(false);
        Var in = tape.constant(std::move(x));
        Var out = block_forward(tape, model.layers[i], in, tokens.batch, tokens.seq, model.config.n_heads, tap, i);
        x = tape.value(out);
    }
    return x;
}

template <class T>
Tensor<T> forward_head(const Model<T>& model, const Tensor<T>& hidden) {
    Tape<T> tape(false);
    Var x = ops::rmsnorm(tape, tape.constant(hidden), tape.leaf(model.final_norm));
    return tape.value(ops::matmul(tape, x, tape.leaf(model.lm_head)));
}

template <class T>
Tensor<T> forward_full(const Model<T>& model, const TokenBatch& tokens, ActivationTap<T>* tap) {
    Tensor<T> logits = forward_head(model, forward_hidden<T>(model, tokens, 0, model.layers.size(), nullptr, tap));
    logits.reshape({tokens.batch, tokens.seq, model.config.vocab_size});
    return logits;
}

template <class T>
KVCache<T>::KVCache(const Model<T>& model) : spec_(model.spec()), head_dim_(model.config.d_head) {
    const ModelConfig& c = model.config;
    for (const auto& l : model.layers) {
        LayerCache<T> lc;
        lc.kind = l.kind();
        if (lc.kind.is_full()) {
            lc.keys.resize(c.n_heads);
            lc.values.resize(c.n_heads);
        } else {
            lc.state = RecurrentState<T>::zeros(lc.kind.variant, c.n_heads, c.d_head);
        }
        layers_.push_back(std::move(lc));
    }
}

template <class T>
std::size_t KVCache<T>::bytes() const {
    std::size_t n = 0;
    for (const auto& l : layers_) {
        for (const auto& k : l.keys) n += k.size() * sizeof(T);
        for (const auto& v : l.values) n += v.size() * sizeof(T);
        if (l.state) n += l.state->bytes();
    }
    return n;
}

template <class T>
void KVCache<T>::reserve(std::size_t tokens) {
    for (auto& l : layers_) {
        const std::size_t per_head = l.state ? 0 : tokens * head_dim_;
        for (auto& k : l.keys) k.reserve(per_head);
        for (auto& v : l.values) v.reserve(per_head);
    }
}

template <class T>
Tensor<T> forward_cached(const Model<T>& model, KVCache<T>& cache, std::span<const std::int32_t> tokens) {
    const ModelConfig& c = model.config;
    if (cache.spec() != model.spec() || cache.layers().size() != model.layers.size()) {
        throw ContractError("KV cache was built for spec " + cache.spec().canonical() + " but model is " +
                            model.spec().canonical());
    }
    const std::size_t n = tokens.size(), d = c.d_model, H = c.n_heads, D = c.d_head;
    const std::size_t p0 = cache.length();
    if (p0 + n > c.max_seq) {
        throw InputError("decode position " + std::to_string(p0 + n) + " exceeds max_seq " + std::to_string(c.max_seq));
    }
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = p0 + i;

    Tensor<T> x({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= c.vocab_size) {
            throw InputError("token id " + std::to_string(tokens[i]) + " out of range for vocab " +
                             std::to_string(c.vocab_size));
        }
        std::copy_n(model.embed.value.row(static_cast<std::size_t>(tokens[i])), d, x.row(i));
    }

    Tensor<T> xn({n, d}), heads({n, d}), attn({n, d});
    Tensor<T> q({n, d}), k({n, d}), v({n, d});
    Tensor<T> g({n, c.d_ff}), u({n, c.d_ff}), mlp({n, d});
    const T scale = T(1) / std::sqrt(T(D));
    std::vector<T> qh(n * D), kt, scores, oh(n * D);

    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const Layer<T>& layer = model.layers[li];
        LayerCache<T>& lc = cache.layers()[li];
        kernels::rmsnorm_rows(x.data(), layer.attn_norm.value.data(), xn.data(), n, d, T(kernels::kRmsEps));
        if (lc.kind.is_full()) {
            const auto& w = layer.full();
            kernels::gemm_nn(xn.data(), w.wq.value.data(), q.data(), n, d, d);
            kernels::gemm_nn(xn.data(), w.wk.value.data(), k.data(), n, d, d);
            kernels::gemm_nn(xn.data(), w.wv.value.data(), v.data(), n, d, d);
            kernels::rope_rows(q.data(), n, H, D, pos.data());
            kernels::rope_rows(k.data(), n, H, D, pos.data());
            const std::size_t total = p0 + n;
            scores.resize(n * total);
            for (std::size_t h = 0; h < H; ++h) {
                auto& keys = lc.keys[h];
                auto& vals = lc.values[h];
                for (std::size_t i = 0; i < n; ++i) {
                    keys.insert(keys.end(), k.row(i) + h * D, k.row(i) + (h + 1) * D);
                    vals.insert(vals.end(), v.row(i) + h * D, v.row(i) + (h + 1) * D);
                    std::copy_n(q.row(i) + h * D, D, qh.data() + i * D);
                }
                kernels::gemm_nt(qh.data(), keys.data(), scores.data(), n, D, total);
                for (T& s : scores) s *= scale;
                kernels::softmax_rows(scores.data(), n, total, true, p0);
                kernels::gemm_nn(scores.data(), vals.data(), oh.data(), n, total, D);
                for (std::size_t i = 0; i < n; ++i) std::copy_n(oh.data() + i * D, D, heads.row(i) + h * D);
            }
            kernels::gemm_nn(heads.data(), w.wo.value.data(), attn.data(), n, d, d);
        } else {
            const auto& w = layer.linear();
            if (!lc.state || lc.state->variant != w.variant) throw ContractError("KV cache layer kind mismatch");
            LinearProjections<T> p = project(w, xn);
            for (std::size_t i = 0; i < n; ++i) {
                scan_step(*lc.state, p.q.row(i), p.k.row(i), p.v.row(i), p.alpha.empty() ? nullptr : p.alpha.row(i),
                          p.beta.empty() ? nullptr : p.beta.row(i), heads.row(i));
            }
            kernels::gemm_nn(heads.data(), w.wo.value.data(), attn.data(), n, d, d);
        }
        for (std::size_t i = 0; i < n * d; ++i) x[i] += attn[i];
        kernels::rmsnorm_rows(x.data(), layer.mlp_norm.value.data(), xn.data(), n, d, T(kernels::kRmsEps));
        kernels::gemm_nn(xn.data(), layer.w_gate.value.data(), g.data(), n, d, c.d_ff);
        kernels::gemm_nn(xn.data(), layer.w_up.value.data(), u.data(), n, d, c.d_ff);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = g[i] * kernels::sigmoid(g[i]) * u[i];
        kernels::gemm_nn(g.data(), layer.w_down.value.data(), mlp.data(), n, c.d_ff, d);
        for (std::size_t i = 0; i < n * d; ++i) x[i] += mlp[i];
    }
    cache.advance(n);
    kernels::rmsnorm_rows(x.data(), model.final_norm.value.data(), xn.data(), n, d, T(kernels::kRmsEps));
    Tensor<T> logits({n, c.vocab_size});
    kernels::gemm_nn(xn.data(), model.lm_head.value.data(), logits.data(), n, d, c.vocab_size);
    return logits;
}

template <class T>
std::vector<T> decode_step(const Model<T>& model, KVCache<T>& cache, std::int32_t token) {
    const std::int32_t ids[1] = {token};
    Tensor<T> logits = forward_cached(model, cache, std::span<const std::int32_t>(ids, 1));
    return std::move(logits.storage());
}

#define HF_INSTANTIATE(T)                                                                                          \
    template struct Layer<T>;                                                                                      \
    template struct Model<T>;                                                                                      \
    template struct ActivationTap<T>;                                                                              \
    template class KVCache<T>;                                                                                     \
    template Model<T> model_init<T>(const ModelConfig&, std::uint64_t);                                            \
    template Var forward<T>(Tape<T>&, Model<T>&, const TokenBatch&, ActivationTap<T>*);                            \
    template Var forward<T>(Tape<T>&, const Model<T>&, const TokenBatch&, ActivationTap<T>*);                      \
    template Tensor<T> forward_hidden<T>(const Model<T>&, const TokenBatch&, std::size_t, std::size_t,             \
                                         const Tensor<T>*, ActivationTap<T>*);                                     \
    template Tensor<T> forward_head<T>(const Model<T>&, const Tensor<T>&);                                         \
    template Tensor<T> forward_full<T>(const Model<T>&, const TokenBatch&, ActivationTap<T>*);                     \
    template Tensor<T> forward_cached<T>(const Model<T>&, KVCache<T>&, std::span<const std::int32_t>);             \
    template std::vector<T> decode_step<T>(const Model<T>&, KVCache<T>&, std::int32_t);

HF_INSTANTIATE(float)
HF_INSTANTIATE(double)
#undef HF_INSTANTIATE

} // namespace hybridforge
