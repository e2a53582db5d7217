#include "hybridforge/ops.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include "hybridforge/kernels.hpp"

namespace hybridforge::ops {
namespace {

template <class T>
Var next_id(const Tape<T>& t) {
    return Var{static_cast<std::uint32_t>(t.size())};
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

template <class T>
void require_2d(const Tensor<T>& a, const char* op) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 input, got " + shape_string(a.shape()));
}

} // namespace

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
        throw DimensionError("matmul shape mismatch: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor<T> out({m, n});
    kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
    const Var self = next_id(t);
    return t.record(std::move(out), {a, b}, [a, b, self, m, k, n](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.requires_grad(a)) {
            kernels::gemm_nt(g.data(), tp.value(b).data(), tp.grad(a).data(), m, n, k, true);
        }
        if (tp.requires_grad(b)) {
            kernels::gemm_tn(tp.value(a).data(), g.data(), tp.grad(b).data(), m, k, n, true);
        }
    });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    require_same_shape(av, bv, "add");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    const Var self = next_id(t);
    return t.record(std::move(out), {a, b}, [a, b, self](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        for (Var in : {a, b}) {
            if (!tp.requires_grad(in)) continue;
            Tensor<T>& gi = tp.grad(in);
            for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
        }
    });
}

template <class T>
Var add_rowwise(Tape<T>& t, Var x, Var bias) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& bv = t.value(bias);
    require_2d(xv, "add_rowwise");
    const std::size_t rows = xv.rows(), cols = xv.cols();
    if (bv.numel() != cols) {
        throw DimensionError("add_rowwise: bias " + shape_string(bv.shape()) + " vs rows " + shape_string(xv.shape()));
    }
    Tensor<T> out = xv;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bv[c];
    const Var self = next_id(t);
    return t.record(std::move(out), {x, bias}, [x, bias, self, rows, cols](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.requires_grad(x)) {
            Tensor<T>& gx = tp.grad(x);
            for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (tp.requires_grad(bias)) {
            Tensor<T>& gb = tp.grad(bias);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gb[c] += g.at(r, c);
        }
    });
}

template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    require_same_shape(av, bv, "mul");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    const Var self = next_id(t);
    return t.record(std::move(out), {a, b}, [a, b, self](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        if (tp.requires_grad(a)) {
            Tensor<T>& ga = tp.grad(a);
            const Tensor<T>& bv2 = tp.value(b);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (tp.requires_grad(b)) {
            Tensor<T>& gb = tp.grad(b);
            const Tensor<T>& av2 = tp.value(a);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
        }
    });
}

template <class T>
Var scale(Tape<T>& t, Var a, T s) {
    Tensor<T> out = t.value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
    const Var self = next_id(t);
    return t.record(std::move(out), {a}, [a, self, s](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        Tensor<T>& ga = tp.grad(a);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
    });
}

template <class T>
Var sum(Tape<T>& t, Var a) {
    const Tensor<T>& av = t.value(a);
    T s = 0;
    for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
    const Var self = next_id(t);
    return t.record(Tensor<T>({1}, {s}), {a}, [a, self](Tape<T>& tp) {
        const T g = tp.grad(self)[0];
        Tensor<T>& ga = tp.grad(a);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

template <class T>
Var rmsnorm(Tape<T>& t, Var x, Var weight) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(weight);
    require_2d(xv, "rmsnorm");
    const std::size_t rows = xv.rows(), d = xv.cols();
    if (wv.numel() != d) throw DimensionError("rmsnorm: weight " + shape_string(wv.shape()) + " vs d=" + std::to_string(d));
    Tensor<T> out({rows, d});
    kernels::rmsnorm_rows(xv.data(), wv.data(), out.data(), rows, d, T(kernels::kRmsEps));
    const Var self = next_id(t);
    return t.record(std::move(out), {x, weight}, [x, weight, self, rows, d](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& xv2 = tp.value(x);
        const Tensor<T>& wv2 = tp.value(weight);
        const bool gx_on = tp.requires_grad(x), gw_on = tp.requires_grad(weight);
        Tensor<T>* gx = gx_on ? &tp.grad(x) : nullptr;
        Tensor<T>* gw = gw_on ? &tp.grad(weight) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv2.row(r);
            const T* gr = g.row(r);
            T ss = 0;
            for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
            const T inv = T(1) / std::sqrt(ss / T(d) + T(kernels::kRmsEps));
            if (gw) {
                for (std::size_t j = 0; j < d; ++j) (*gw)[j] += gr[j] * xr[j] * inv;
            }
            if (gx) {
                T dot = 0;
                for (std::size_t j = 0; j < d; ++j) dot += gr[j] * wv2[j] * xr[j];
                const T coef = dot * inv * inv * inv / T(d);
                T* gxr = gx->row(r);
                for (std::size_t j = 0; j < d; ++j) gxr[j] += gr[j] * wv2[j] * inv - xr[j] * coef;
            }
        }
    });
}

template <class T>
Var silu_mul(Tape<T>& t, Var gate, Var up) {
    const Tensor<T>& gv = t.value(gate);
    const Tensor<T>& uv = t.value(up);
    require_same_shape(gv, uv, "silu_mul");
    Tensor<T> out(gv.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = gv[i] * kernels::sigmoid(gv[i]) * uv[i];
    const Var self = next_id(t);
    return t.record(std::move(out), {gate, up}, [gate, up, self](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& gv2 = tp.value(gate);
        const Tensor<T>& uv2 = tp.value(up);
        const bool ga_on = tp.requires_grad(gate), gu_on = tp.requires_grad(up);
        Tensor<T>* ga = ga_on ? &tp.grad(gate) : nullptr;
        Tensor<T>* gu = gu_on ? &tp.grad(up) : nullptr;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const T s = kernels::sigmoid(gv2[i]);
            if (ga) (*ga)[i] += g[i] * uv2[i] * (s + gv2[i] * s * (T(1) - s));
            if (gu) (*gu)[i] += g[i] * gv2[i] * s;
        }
    });
}

template <class T>
Var sigmoid(Tape<T>& t, Var x) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = kernels::sigmoid(xv[i]);
    const Var self = next_id(t);
    return t.record(std::move(out), {x}, [x, self](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& y = tp.value(self);
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
}

template <class T>
Var softmax_rows(Tape<T>& t, Var x, bool causal) {
    const Tensor<T>& xv = t.value(x);
    require_2d(xv, "softmax_rows");
    Tensor<T> out = xv;
    const std::size_t rows = xv.rows(), cols = xv.cols();
    kernels::softmax_rows(out.data(), rows, cols, causal);
    const Var self = next_id(t);
    return t.record(std::move(out), {x}, [x, self, rows, cols](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& y = tp.value(self);
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t c = 0; c < cols; ++c) dot += g.at(r, c) * y.at(r, c);
            for (std::size_t c = 0; c < cols; ++c) gx.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
        }
    });
}

template <class T>
Var embedding(Tape<T>& t, Var table, std::span<const std::int32_t> ids) {
    const Tensor<T>& tv = t.value(table);
    require_2d(tv, "embedding");
    const std::size_t vocab = tv.rows(), d = tv.cols();
    Tensor<T> out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
            throw InputError("token id " + std::to_string(ids[r]) + " out of range for vocab " + std::to_string(vocab));
        }
        std::copy_n(tv.row(static_cast<std::size_t>(ids[r])), d, out.row(r));
    }
    std::vector<std::int32_t> kept(ids.begin(), ids.end());
    const Var self = next_id(t);
    return t.record(std::move(out), {table}, [table, self, kept = std::move(kept), d](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        Tensor<T>& gt = tp.grad(table);
        for (std::size_t r = 0; r < kept.size(); ++r) {
            T* dst = gt.row(static_cast<std::size_t>(kept[r]));
            const T* src = g.row(r);
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

template <class T>
Var rope(Tape<T>& t, Var x, std::size_t seq, std::size_t n_heads) {
    const Tensor<T>& xv = t.value(x);
    require_2d(xv, "rope");
    const std::size_t rows = xv.rows(), d = xv.cols();
    if (d % n_heads != 0 || (d / n_heads) % 2 != 0) throw DimensionError("rope: width must split into even-sized heads");
    const std::size_t d_head = d / n_heads;
    std::vector<std::size_t> pos(rows);
    for (std::size_t r = 0; r < rows; ++r) pos[r] = r % seq;
    Tensor<T> out = xv;
    kernels::rope_rows(out.data(), rows, n_heads, d_head, pos.data());
    const Var self = next_id(t);
    return t.record(std::move(out), {x}, [x, self, pos = std::move(pos), rows, n_heads, d_head](Tape<T>& tp) {
        Tensor<T> g = tp.grad(self);
        kernels::rope_rows(g.data(), rows, n_heads, d_head, pos.data(), true);
        Tensor<T>& gx = tp.grad(x);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
}

template <class T>
Var causal_attention(Tape<T>& t, Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t n_heads) {
    const Tensor<T>& qv = t.value(q);
    const Tensor<T>& kv = t.value(k);
    const Tensor<T>& vv = t.value(v);
    require_same_shape(qv, kv, "causal_attention");
    require_same_shape(qv, vv, "causal_attention");
    const std::size_t d = qv.cols();
    if (qv.rows() != batch * seq || d % n_heads != 0) {
        throw DimensionError("causal_attention: input " + shape_string(qv.shape()) + " does not match batch*seq=" +
                             std::to_string(batch * seq));
    }
    const std::size_t dh = d / n_heads;
    const T sc = T(1) / std::sqrt(T(dh));

    // probs[b][h] is seq x seq, kept for the backward pass.
    auto probs = std::make_shared<std::vector<T>>(batch * n_heads * seq * seq);
    Tensor<T> out({batch * seq, d});
    std::vector<T> qh(seq * dh), kh(seq * dh), vh(seq * dh), oh(seq * dh);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < seq; ++i) {
                const std::size_t r = b * seq + i;
                std::copy_n(qv.row(r) + h * dh, dh, qh.data() + i * dh);
                std::copy_n(kv.row(r) + h * dh, dh, kh.data() + i * dh);
                std::copy_n(vv.row(r) + h * dh, dh, vh.data() + i * dh);
            }
            T* p = probs->data() + (b * n_heads + h) * seq * seq;
            kernels::gemm_nt(qh.data(), kh.data(), p, seq, dh, seq);
            for (std::size_t i = 0; i < seq * seq; ++i) p[i] *= sc;
            kernels::softmax_rows(p, seq, seq, true);
            kernels::gemm_nn(p, vh.data(), oh.data(), seq, seq, dh);
            for (std::size_t i = 0; i < seq; ++i) std::copy_n(oh.data() + i * dh, dh, out.row(b * seq + i) + h * dh);
        }
    }
    const Var self = next_id(t);
    return t.record(std::move(out), {q, k, v}, [=](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& qv2 = tp.value(q);
        const Tensor<T>& kv2 = tp.value(k);
        const Tensor<T>& vv2 = tp.value(v);
        Tensor<T>* gq = tp.requires_grad(q) ? &tp.grad(q) : nullptr;
        Tensor<T>* gk = tp.requires_grad(k) ? &tp.grad(k) : nullptr;
        Tensor<T>* gv = tp.requires_grad(v) ? &tp.grad(v) : nullptr;
        std::vector<T> qh2(seq * dh), kh2(seq * dh), vh2(seq * dh), gh(seq * dh);
        std::vector<T> dp(seq * seq), dq(seq * dh), dk(seq * dh), dv(seq * dh);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                for (std::size_t i = 0; i < seq; ++i) {
                    const std::size_t r = b * seq + i;
                    std::copy_n(qv2.row(r) + h * dh, dh, qh2.data() + i * dh);
                    std::copy_n(kv2.row(r) + h * dh, dh, kh2.data() + i * dh);
                    std::copy_n(vv2.row(r) + h * dh, dh, vh2.data() + i * dh);
                    std::copy_n(g.row(r) + h * dh, dh, gh.data() + i * dh);
                }
                const T* p = probs->data() + (b * n_heads + h) * seq * seq;
                // dV = P^T dO ; dP = dO V^T
                kernels::gemm_tn(p, gh.data(), dv.data(), seq, seq, dh);
                kernels::gemm_nt(gh.data(), vh2.data(), dp.data(), seq, dh, seq);
                // dS = P * (dP - rowsum(dP * P)), scaled
                for (std::size_t i = 0; i < seq; ++i) {
                    T dot = 0;
                    for (std::size_t j = 0; j <= i; ++j) dot += dp[i * seq + j] * p[i * seq + j];
                    for (std::size_t j = 0; j < seq; ++j) {
                        dp[i * seq + j] = j <= i ? p[i * seq + j] * (dp[i * seq + j] - dot) * sc : T(0);
                    }
                }
                kernels::gemm_nn(dp.data(), kh2.data(), dq.data(), seq, seq, dh);
                kernels::gemm_tn(dp.data(), qh2.data(), dk.data(), seq, seq, dh);
                for (std::size_t i = 0; i < seq; ++i) {
                    const std::size_t r = b * seq + i;
                    for (std::size_t j = 0; j < dh; ++j) {
                        if (gq) gq->row(r)[h * dh + j] += dq[i * dh + j];
                        if (gk) gk->row(r)[h * dh + j] += dk[i * dh + j];
                        if (gv) gv->row(r)[h * dh + j] += dv[i * dh + j];
                    }
                }
            }
        }
    });
}

template <class T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const std::int32_t> targets, std::span<const T> weights) {
    const Tensor<T>& lv = t.value(logits);
    require_2d(lv, "cross_entropy");
    const std::size_t rows = lv.rows(), vocab = lv.cols();
    if (targets.size() != rows || weights.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(rows) + " rows but " + std::to_string(targets.size()) +
                             " targets / " + std::to_string(weights.size()) + " weights");
    }
    T wsum = 0;
    for (T w : weights) wsum += w;
    if (wsum <= T(0)) throw ContractError("cross_entropy: no supervised positions");
    auto probs = std::make_shared<Tensor<T>>(lv);
    kernels::softmax_rows(probs->data(), rows, vocab, false);
    T loss = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (weights[r] == T(0)) continue;
        const auto tgt = static_cast<std::size_t>(targets[r]);
        if (tgt >= vocab) throw InputError("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
        // log-sum-exp recomputed from logits for accuracy on confident rows
        T mx = lv.at(r, 0);
        for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, lv.at(r, c));
        T se = 0;
        for (std::size_t c = 0; c < vocab; ++c) se += std::exp(lv.at(r, c) - mx);
        loss += weights[r] * (mx + std::log(se) - lv.at(r, tgt));
    }
    loss /= wsum;
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    std::vector<T> wt(weights.begin(), weights.end());
    const Var self = next_id(t);
    return t.record(Tensor<T>({1}, {loss}), {logits},
                    [logits, self, probs, tg = std::move(tg), wt = std::move(wt), wsum, rows, vocab](Tape<T>& tp) {
                        const T g = tp.grad(self)[0] / wsum;
                        Tensor<T>& gl = tp.grad(logits);
                        for (std::size_t r = 0; r < rows; ++r) {
                            if (wt[r] == T(0)) continue;
                            const T f = g * wt[r];
                            for (std::size_t c = 0; c < vocab; ++c) gl.at(r, c) += f * probs->at(r, c);
                            gl.at(r, static_cast<std::size_t>(tg[r])) -= f;
                        }
                    });
}

template <class T>
Var mse(Tape<T>& t, Var pred, const Tensor<T>& target) {
    const Tensor<T>& pv = t.value(pred);
    require_same_shape(pv, target, "mse");
    auto diff = std::make_shared<Tensor<T>>(pv);
    T acc = 0;
    for (std::size_t i = 0; i < pv.numel(); ++i) {
        (*diff)[i] -= target[i];
        acc += (*diff)[i] * (*diff)[i];
    }
    const T n = T(pv.numel());
    const Var self = next_id(t);
    return t.record(Tensor<T>({1}, {acc / n}), {pred}, [pred, self, diff, n](Tape<T>& tp) {
        const T g = tp.grad(self)[0] * T(2) / n;
        Tensor<T>& gp = tp.grad(pred);
        for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += g * (*diff)[i];
    });
}

#define HF_INSTANTIATE(T)                                                                                          \
    template Var matmul<T>(Tape<T>&, Var, Var);                                                                    \
    template Var add<T>(Tape<T>&, Var, Var);                                                                       \
    template Var add_rowwise<T>(Tape<T>&, Var, Var);                                                               \
    template Var mul<T>(Tape<T>&, Var, Var);                                                                       \
    template Var scale<T>(Tape<T>&, Var, T);                                                                       \
    template Var sum<T>(Tape<T>&, Var);                                                                            \
    template Var rmsnorm<T>(Tape<T>&, Var, Var);                                                                   \
    template Var silu_mul<T>(Tape<T>&, Var, Var);                                                                  \
    template Var sigmoid<T>(Tape<T>&, Var);                                                                        \
    template Var softmax_rows<T>(Tape<T>&, Var, bool);                                                             \
    template Var embedding<T>(Tape<T>&, Var, std::span<const std::int32_t>);                                       \
    template Var rope<T>(Tape<T>&, Var, std::size_t, std::size_t);                                                 \
    template Var causal_attention<T>(Tape<T>&, Var, Var, Var, std::size_t, std::size_t, std::size_t);              \
    template Var cross_entropy<T>(Tape<T>&, Var, std::span<const std::int32_t>, std::span<const T>);               \
    template Var mse<T>(Tape<T>&, Var, const Tensor<T>&);

HF_INSTANTIATE(float)
HF_INSTANTIATE(double)
#undef HF_INSTANTIATE

} // namespace hybridforge::ops
