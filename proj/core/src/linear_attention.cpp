#include "hybridforge/linear_attention.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "hybridforge/kernels.hpp"
#include "hybridforge/ops.hpp"

namespace hybridforge {
namespace {

template <class T>
inline T phi(T x) {
    return x > T(0) ? x + T(1) : std::exp(x);
}

template <class T>
inline T phi_grad(T x) {
    return x > T(0) ? T(1) : std::exp(x);
}

std::size_t gate_a_width(LinearVariant v, std::size_t d_model, std::size_t n_heads) {
    switch (v) {
    case LinearVariant::UngatedLinear: return 0;
    case LinearVariant::GLA: return d_model;
    case LinearVariant::GatedDeltaNet: return n_heads;
    }
    return 0;
}

std::size_t gate_b_width(LinearVariant v, std::size_t n_heads) {
    return v == LinearVariant::GatedDeltaNet ? n_heads : 0;
}

template <class T>
Tensor<T> normal_tensor(Shape shape, double std, SeededRng& rng) {
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * std);
    return t;
}

} // namespace

template <class T>
RecurrentState<T> RecurrentState<T>::zeros(LinearVariant v, std::size_t n_heads, std::size_t d_head) {
    RecurrentState st;
    st.variant = v;
    st.n_heads = n_heads;
    st.d_head = d_head;
    st.s.assign(n_heads * d_head * d_head, T(0));
    if (v == LinearVariant::UngatedLinear) st.z.assign(n_heads * d_head, T(0));
    return st;
}

template <class T>
bool RecurrentState<T>::all_finite() const {
    return std::all_of(s.begin(), s.end(), [](T x) { return std::isfinite(x); }) &&
           std::all_of(z.begin(), z.end(), [](T x) { return std::isfinite(x); });
}

std::size_t state_bytes(LinearVariant v, const ModelConfig& c, std::size_t dtype_bytes) {
    std::size_t n = c.n_heads * c.d_head * c.d_head;
    if (v == LinearVariant::UngatedLinear) n += c.n_heads * c.d_head;
    return n * dtype_bytes;
}

template <class T>
LinearBlockWeights<T> init_linear_block(LinearVariant v, const ModelConfig& c, double out_std, SeededRng rng,
                                        const std::string& prefix) {
    const std::size_t d = c.d_model;
    LinearBlockWeights<T> w;
    w.variant = v;
    w.n_heads = c.n_heads;
    w.wq = Parameter<T>(prefix + ".Wq", normal_tensor<T>({d, d}, 0.02, rng));
    w.wk = Parameter<T>(prefix + ".Wk", normal_tensor<T>({d, d}, 0.02, rng));
    w.wv = Parameter<T>(prefix + ".Wv", normal_tensor<T>({d, d}, 0.02, rng));
    w.wo = Parameter<T>(prefix + ".Wo", normal_tensor<T>({d, d}, out_std, rng));
    if (v == LinearVariant::GLA) {
        w.gate_w = Parameter<T>(prefix + ".gate_w", normal_tensor<T>({d, d}, 0.02, rng));
        w.gate_b = Parameter<T>(prefix + ".gate_b", Tensor<T>({d}));
    } else if (v == LinearVariant::GatedDeltaNet) {
        w.gate_w = Parameter<T>(prefix + ".gate_w", normal_tensor<T>({d, c.n_heads}, 0.02, rng));
        w.gate_b = Parameter<T>(prefix + ".gate_b", Tensor<T>::full({c.n_heads}, T(3)));
        w.beta_w = Parameter<T>(prefix + ".beta_w", normal_tensor<T>({d, c.n_heads}, 0.02, rng));
        w.beta_b = Parameter<T>(prefix + ".beta_b", Tensor<T>({c.n_heads}));
    }
    return w;
}

template <class T>
void activate_gates(LinearVariant v, std::span<const T> a_logits, std::span<const T> b_logits, std::span<T> alpha,
                    std::span<T> beta) {
    switch (v) {
    case LinearVariant::UngatedLinear: return;
    case LinearVariant::GLA:
        for (std::size_t i = 0; i < a_logits.size(); ++i) {
            const T a = std::exp(kernels::log_sigmoid(a_logits[i]) / T(kGlaTemperature));
            alpha[i] = std::max(a, T(kGlaMinDecay));
        }
        return;
    case LinearVariant::GatedDeltaNet:
        for (std::size_t i = 0; i < a_logits.size(); ++i) alpha[i] = kernels::sigmoid(a_logits[i]);
        for (std::size_t i = 0; i < b_logits.size(); ++i) beta[i] = kernels::sigmoid(b_logits[i]);
        return;
    }
}

template <class T>
void scan_step(RecurrentState<T>& st, const T* q, const T* k, const T* v, const T* alpha, const T* beta, T* out) {
    const std::size_t H = st.n_heads, D = st.d_head;
    std::vector<T> fq(D), fk(D), u(D);
    for (std::size_t h = 0; h < H; ++h) {
        T* S = st.s.data() + h * D * D;
        const T* qh = q + h * D;
        const T* kh = k + h * D;
        const T* vh = v + h * D;
        T* oh = out + h * D;
        std::fill(oh, oh + D, T(0));
        switch (st.variant) {
        case LinearVariant::UngatedLinear: {
            T* z = st.z.data() + h * D;
            for (std::size_t i = 0; i < D; ++i) {
                fq[i] = phi(qh[i]);
                fk[i] = phi(kh[i]);
            }
            for (std::size_t i = 0; i < D; ++i) {
                T* Si = S + i * D;
                for (std::size_t j = 0; j < D; ++j) Si[j] += fk[i] * vh[j];
                z[i] += fk[i];
            }
            T den = 0;
            for (std::size_t i = 0; i < D; ++i) {
                const T* Si = S + i * D;
                for (std::size_t j = 0; j < D; ++j) oh[j] += fq[i] * Si[j];
                den += fq[i] * z[i];
            }
            den = std::max(den, T(kNormalizerEps));
            for (std::size_t j = 0; j < D; ++j) oh[j] /= den;
            break;
        }
        case LinearVariant::GLA: {
            const T* ah = alpha + h * D;
            for (std::size_t i = 0; i < D; ++i) {
                T* Si = S + i * D;
                const T a = ah[i], ki = kh[i];
                for (std::size_t j = 0; j < D; ++j) Si[j] = a * Si[j] + ki * vh[j];
            }
            for (std::size_t i = 0; i < D; ++i) {
                const T* Si = S + i * D;
                for (std::size_t j = 0; j < D; ++j) oh[j] += qh[i] * Si[j];
            }
            break;
        }
        case LinearVariant::GatedDeltaNet: {
            T ss = 0;
            for (std::size_t i = 0; i < D; ++i) ss += kh[i] * kh[i];
            const T inv = T(1) / std::sqrt(ss + T(kKeyNormEps));
            for (std::size_t i = 0; i < D; ++i) fk[i] = kh[i] * inv;
            std::fill(u.begin(), u.end(), T(0));
            for (std::size_t i = 0; i < D; ++i) {
                const T* Si = S + i * D;
                for (std::size_t j = 0; j < D; ++j) u[j] += fk[i] * Si[j];
            }
            const T a = alpha[h], b = beta[h];
            for (std::size_t i = 0; i < D; ++i) {
                T* Si = S + i * D;
                const T bk = b * fk[i];
                for (std::size_t j = 0; j < D; ++j) Si[j] = a * (Si[j] - bk * u[j]) + bk * vh[j];
            }
            for (std::size_t i = 0; i < D; ++i) {
                const T* Si = S + i * D;
                for (std::size_t j = 0; j < D; ++j) oh[j] += qh[i] * Si[j];
            }
            break;
        }
        }
    }
}

template <class T>
LinearProjections<T> project(const LinearBlockWeights<T>& w, const Tensor<T>& x) {
    const std::size_t n = x.rows(), d = x.cols();
    if (w.wq.value.rows() != d) {
        throw DimensionError("linear sublayer: input " + shape_string(x.shape()) + " vs Wq " +
                             shape_string(w.wq.value.shape()));
    }
    LinearProjections<T> p;
    auto proj = [&](const Parameter<T>& W) {
        Tensor<T> out({n, W.value.cols()});
        kernels::gemm_nn(x.data(), W.value.data(), out.data(), n, d, W.value.cols());
        return out;
    };
    p.q = proj(w.wq);
    p.k = proj(w.wk);
    p.v = proj(w.wv);
    if (w.variant == LinearVariant::UngatedLinear) return p;
    Tensor<T> a = proj(w.gate_w);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) a.at(r, c) += w.gate_b.value[c];
    Tensor<T> b;
    if (w.variant == LinearVariant::GatedDeltaNet) {
        b = proj(w.beta_w);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < b.cols(); ++c) b.at(r, c) += w.beta_b.value[c];
    }
    p.alpha = Tensor<T>(a.shape());
    if (!b.empty()) p.beta = Tensor<T>(b.shape());
    activate_gates<T>(w.variant, a.span(), b.span(), p.alpha.span(), p.beta.span());
    return p;
}

template <class T>
Tensor<T> linear_forward_recurrent(const LinearBlockWeights<T>& w, const Tensor<T>& x, RecurrentState<T>& state) {
    const std::size_t n = x.rows(), d = x.cols();
    if (state.variant != w.variant || state.n_heads * state.d_head != d) {
        throw ContractError("linear_forward_recurrent: state does not match weights");
    }
    LinearProjections<T> p = project(w, x);
    Tensor<T> heads({n, d});
    const std::size_t aw = p.alpha.empty() ? 0 : p.alpha.cols();
    const std::size_t bw = p.beta.empty() ? 0 : p.beta.cols();
    for (std::size_t t = 0; t < n; ++t) {
        scan_step(state, p.q.row(t), p.k.row(t), p.v.row(t), aw ? p.alpha.row(t) : nullptr,
                  bw ? p.beta.row(t) : nullptr, heads.row(t));
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::isfinite(heads.at(t, j))) throw NumericError("linear attention state became non-finite", t);
        }
    }
    Tensor<T> out({n, d});
    kernels::gemm_nn(heads.data(), w.wo.value.data(), out.data(), n, d, d);
    return out;
}

template <class T>
std::vector<T> linear_step(const LinearBlockWeights<T>& w, RecurrentState<T>& state, std::span<const T> x_t) {
    const std::size_t d = x_t.size();
    if (state.variant != w.variant || state.n_heads * state.d_head != d ||
        state.s.size() != state.n_heads * state.d_head * state.d_head) {
        throw ContractError("linear_step: state shape does not match weights");
    }
    Tensor<T> x({1, d}, std::vector<T>(x_t.begin(), x_t.end()));
    LinearProjections<T> p = project(w, x);
    std::vector<T> heads(d), out(d);
    scan_step(state, p.q.data(), p.k.data(), p.v.data(), p.alpha.empty() ? nullptr : p.alpha.data(),
              p.beta.empty() ? nullptr : p.beta.data(), heads.data());
    for (T h : heads) {
        if (!std::isfinite(h)) throw NumericError("linear attention state became non-finite", 0);
    }
    kernels::gemm_nn(heads.data(), w.wo.value.data(), out.data(), 1, d, d);
    return out;
}

template <class T>
Tensor<T> linear_forward_reference(const LinearBlockWeights<T>& w, const Tensor<T>& x) {
    const std::size_t n = x.rows(), d = x.cols(), H = w.n_heads, D = d / H;
    auto naive = [&](const Tensor<T>& W, const Tensor<T>* bias) {
        const std::size_t m = W.cols();
        Tensor<T> out({n, m});
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t c = 0; c < m; ++c) {
                T acc = bias ? (*bias)[c] : T(0);
                for (std::size_t i = 0; i < d; ++i) acc += x.at(t, i) * W.at(i, c);
                out.at(t, c) = acc;
            }
        return out;
    };
    auto sig = [](T z) { return T(1) / (T(1) + std::exp(-z)); };
    const Tensor<T> q = naive(w.wq.value, nullptr);
    const Tensor<T> k = naive(w.wk.value, nullptr);
    const Tensor<T> v = naive(w.wv.value, nullptr);
    Tensor<T> ga, gb;
    if (w.variant != LinearVariant::UngatedLinear) ga = naive(w.gate_w.value, &w.gate_b.value);
    if (w.variant == LinearVariant::GatedDeltaNet) gb = naive(w.beta_w.value, &w.beta_b.value);

    Tensor<T> heads({n, d});
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t o = h * D;
            T* oh = heads.row(t) + o;
            if (w.variant == LinearVariant::UngatedLinear) {
                // o_t = sum_s (phi(q_t).phi(k_s)) v_s / max(sum_s phi(q_t).phi(k_s), eps)
                T den = 0;
                for (std::size_t s = 0; s <= t; ++s) {
                    T score = 0;
                    for (std::size_t i = 0; i < D; ++i) score += phi(q.at(t, o + i)) * phi(k.at(s, o + i));
                    den += score;
                    for (std::size_t j = 0; j < D; ++j) oh[j] += score * v.at(s, o + j);
                }
                den = std::max(den, T(kNormalizerEps));
                for (std::size_t j = 0; j < D; ++j) oh[j] /= den;
            } else if (w.variant == LinearVariant::GLA) {
                // o_t = sum_s sum_i q_t,i * prod_{r=s+1..t} alpha_r,i * k_s,i * v_s
                std::vector<T> decay(D, T(1));
                for (std::size_t s = t + 1; s-- > 0;) {
                    for (std::size_t i = 0; i < D; ++i) {
                        const T coef = q.at(t, o + i) * decay[i] * k.at(s, o + i);
                        for (std::size_t j = 0; j < D; ++j) oh[j] += coef * v.at(s, o + j);
                    }
                    for (std::size_t i = 0; i < D; ++i) {
                        const T a = std::pow(sig(ga.at(s, o + i)), T(1) / T(kGlaTemperature));
                        decay[i] *= std::max(a, T(kGlaMinDecay));
                    }
                }
            } else {
                // unroll the delta rule from an empty state up to t
                std::vector<T> S(D * D, T(0)), kn(D), u(D);
                for (std::size_t s = 0; s <= t; ++s) {
                    T ss = 0;
                    for (std::size_t i = 0; i < D; ++i) ss += k.at(s, o + i) * k.at(s, o + i);
                    for (std::size_t i = 0; i < D; ++i) kn[i] = k.at(s, o + i) / std::sqrt(ss + T(kKeyNormEps));
                    const T a = sig(ga.at(s, h)), b = sig(gb.at(s, h));
                    for (std::size_t j = 0; j < D; ++j) {
                        u[j] = 0;
                        for (std::size_t i = 0; i < D; ++i) u[j] += kn[i] * S[i * D + j];
                    }
                    for (std::size_t i = 0; i < D; ++i)
                        for (std::size_t j = 0; j < D; ++j)
                            S[i * D + j] = a * (S[i * D + j] - b * kn[i] * u[j]) + b * kn[i] * v.at(s, o + j);
                }
                for (std::size_t i = 0; i < D; ++i)
                    for (std::size_t j = 0; j < D; ++j) oh[j] += q.at(t, o + i) * S[i * D + j];
            }
        }
    }
    Tensor<T> out({n, d});
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t c = 0; c < d; ++c) {
            T acc = 0;
            for (std::size_t i = 0; i < d; ++i) acc += heads.at(t, i) * w.wo.value.at(i, c);
            out.at(t, c) = acc;
        }
    return out;
}

template <class T>
Var linear_scan(Tape<T>& tape, LinearVariant variant, Var q, Var k, Var v, Var a, Var b, std::size_t batch,
                std::size_t seq, std::size_t n_heads) {
    const Tensor<T>& qv = tape.value(q);
    const std::size_t n = qv.rows(), d = qv.cols();
    if (n != batch * seq || d % n_heads != 0) {
        throw DimensionError("linear_scan: input " + shape_string(qv.shape()) + " vs batch*seq=" +
                             std::to_string(batch * seq));
    }
    const std::size_t D = d / n_heads;
    const std::size_t aw = gate_a_width(variant, d, n_heads), bw = gate_b_width(variant, n_heads);
    if ((aw && (!a.valid() || tape.value(a).shape() != Shape{n, aw})) ||
        (bw && (!b.valid() || tape.value(b).shape() != Shape{n, bw}))) {
        throw DimensionError("linear_scan: gate logits have the wrong shape for variant " +
                             std::string(variant_tag(variant)));
    }

    struct Saved {
        std::vector<T> alpha, beta;  // activated gates, [n x aw], [n x bw]
        std::vector<T> states;       // S after each step, [n x H*D*D]
        std::vector<T> zs;           // z after each step (ungated), [n x H*D]
    };
    auto saved = std::make_shared<Saved>();
    saved->alpha.resize(n * aw);
    saved->beta.resize(n * bw);
    if (aw) {
        activate_gates<T>(variant, tape.value(a).span(), bw ? tape.value(b).span() : std::span<const T>{},
                          saved->alpha, saved->beta);
    }
    const std::size_t ssz = n_heads * D * D, zsz = variant == LinearVariant::UngatedLinear ? n_heads * D : 0;
    const bool keep = tape.grad_enabled();
    if (keep) {
        saved->states.resize(n * ssz);
        saved->zs.resize(n * zsz);
    }

    const Tensor<T>& kv = tape.value(k);
    const Tensor<T>& vv = tape.value(v);
    Tensor<T> out({n, d});
    for (std::size_t bi = 0; bi < batch; ++bi) {
        auto st = RecurrentState<T>::zeros(variant, n_heads, D);
        for (std::size_t t = 0; t < seq; ++t) {
            const std::size_t r = bi * seq + t;
            scan_step(st, qv.row(r), kv.row(r), vv.row(r), aw ? saved->alpha.data() + r * aw : nullptr,
                      bw ? saved->beta.data() + r * bw : nullptr, out.row(r));
            for (std::size_t j = 0; j < d; ++j) {
                if (!std::isfinite(out.at(r, j))) throw NumericError("linear attention state became non-finite", t);
            }
            if (keep) {
                std::copy(st.s.begin(), st.s.end(), saved->states.begin() + r * ssz);
                std::copy(st.z.begin(), st.z.end(), saved->zs.begin() + r * zsz);
            }
        }
    }

    const Var self{static_cast<std::uint32_t>(tape.size())};
    return tape.record(std::move(out), {q, k, v, a, b}, [=](Tape<T>& tp) {
        const Tensor<T>& g = tp.grad(self);
        const Tensor<T>& qv2 = tp.value(q);
        const Tensor<T>& kv2 = tp.value(k);
        const Tensor<T>& vv2 = tp.value(v);
        Tensor<T>* gq = tp.requires_grad(q) ? &tp.grad(q) : nullptr;
        Tensor<T>* gk = tp.requires_grad(k) ? &tp.grad(k) : nullptr;
        Tensor<T>* gv = tp.requires_grad(v) ? &tp.grad(v) : nullptr;
        Tensor<T>* ga = (aw && tp.requires_grad(a)) ? &tp.grad(a) : nullptr;
        Tensor<T>* gb = (bw && tp.requires_grad(b)) ? &tp.grad(b) : nullptr;
        const Tensor<T>* av = aw ? &tp.value(a) : nullptr;

        std::vector<T> G(D * D), gz(D), fq(D), fk(D), dfk(D), num(D), u(D), wv(D), zero(D * D, T(0));
        for (std::size_t bi = 0; bi < batch; ++bi) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                std::fill(G.begin(), G.end(), T(0));
                std::fill(gz.begin(), gz.end(), T(0));
                for (std::size_t t = seq; t-- > 0;) {
                    const std::size_t r = bi * seq + t;
                    const T* S = saved->states.data() + r * ssz + h * D * D;
                    const T* P = t ? saved->states.data() + (r - 1) * ssz + h * D * D : zero.data();
                    const T* qh = qv2.row(r) + h * D;
                    const T* kh = kv2.row(r) + h * D;
                    const T* vh = vv2.row(r) + h * D;
                    const T* dO = g.row(r) + h * D;
                    T* dq = gq ? gq->row(r) + h * D : nullptr;
                    T* dk = gk ? gk->row(r) + h * D : nullptr;
                    T* dv = gv ? gv->row(r) + h * D : nullptr;

                    if (variant == LinearVariant::UngatedLinear) {
                        const T* z = saved->zs.data() + r * zsz + h * D;
                        for (std::size_t i = 0; i < D; ++i) {
                            fq[i] = phi(qh[i]);
                            fk[i] = phi(kh[i]);
                        }
                        std::fill(num.begin(), num.end(), T(0));
                        T den_raw = 0;
                        for (std::size_t i = 0; i < D; ++i) {
                            for (std::size_t j = 0; j < D; ++j) num[j] += fq[i] * S[i * D + j];
                            den_raw += fq[i] * z[i];
                        }
                        const bool clamped = den_raw < T(kNormalizerEps);
                        const T den = clamped ? T(kNormalizerEps) : den_raw;
                        T dden = 0;
                        if (!clamped) {
                            for (std::size_t j = 0; j < D; ++j) dden -= dO[j] * num[j];
                            dden /= den * den;
                        }
                        // output: o = num / den
                        for (std::size_t i = 0; i < D; ++i) {
                            T da = dden * z[i];
                            for (std::size_t j = 0; j < D; ++j) {
                                const T dn = dO[j] / den;
                                da += S[i * D + j] * dn;
                                G[i * D + j] += fq[i] * dn;
                            }
                            gz[i] += dden * fq[i];
                            if (dq) dq[i] += da * phi_grad(qh[i]);
                        }
                        // update: S += phi(k) v^T, z += phi(k)
                        for (std::size_t i = 0; i < D; ++i) {
                            T acc = gz[i];
                            for (std::size_t j = 0; j < D; ++j) acc += G[i * D + j] * vh[j];
                            if (dk) dk[i] += acc * phi_grad(kh[i]);
                        }
                        if (dv) {
                            for (std::size_t i = 0; i < D; ++i)
                                for (std::size_t j = 0; j < D; ++j) dv[j] += fk[i] * G[i * D + j];
                        }
                        continue;
                    }

                    // o = q S
                    for (std::size_t i = 0; i < D; ++i) {
                        T acc = 0;
                        for (std::size_t j = 0; j < D; ++j) {
                            acc += S[i * D + j] * dO[j];
                            G[i * D + j] += qh[i] * dO[j];
                        }
                        if (dq) dq[i] += acc;
                    }

                    if (variant == LinearVariant::GLA) {
                        const T* al = saved->alpha.data() + r * aw + h * D;
                        for (std::size_t i = 0; i < D; ++i) {
                            T dki = 0, dal = 0;
                            for (std::size_t j = 0; j < D; ++j) {
                                dki += G[i * D + j] * vh[j];
                                dal += G[i * D + j] * P[i * D + j];
                            }
                            if (dk) dk[i] += dki;
                            if (dv) {
                                for (std::size_t j = 0; j < D; ++j) dv[j] += kh[i] * G[i * D + j];
                            }
                            if (ga && al[i] > T(kGlaMinDecay)) {
                                const T logit = av->at(r, h * D + i);
                                ga->at(r, h * D + i) +=
                                    dal * al[i] * (T(1) - kernels::sigmoid(logit)) / T(kGlaTemperature);
                            }
                            for (std::size_t j = 0; j < D; ++j) G[i * D + j] *= al[i];
                        }
                        continue;
                    }

                    // Gated DeltaNet: S_t = a (P - b kn (kn P)) + b kn v^T
                    const T al = saved->alpha[r * aw + h];
                    const T be = saved->beta[r * bw + h];
                    T ss = 0;
                    for (std::size_t i = 0; i < D; ++i) ss += kh[i] * kh[i];
                    const T rn = std::sqrt(ss + T(kKeyNormEps));
                    for (std::size_t i = 0; i < D; ++i) fk[i] = kh[i] / rn;
                    std::fill(u.begin(), u.end(), T(0));
                    std::fill(wv.begin(), wv.end(), T(0));
                    for (std::size_t i = 0; i < D; ++i)
                        for (std::size_t j = 0; j < D; ++j) {
                            u[j] += fk[i] * P[i * D + j];
                            wv[j] += fk[i] * G[i * D + j];
                        }
                    T dal = 0, dbe = 0;
                    for (std::size_t i = 0; i < D; ++i) {
                        T gu = 0, pw = 0, gvv = 0;
                        for (std::size_t j = 0; j < D; ++j) {
                            const T gij = G[i * D + j];
                            dal += gij * (P[i * D + j] - be * fk[i] * u[j]);
                            gu += gij * u[j];
                            pw += P[i * D + j] * wv[j];
                            gvv += gij * vh[j];
                        }
                        dfk[i] = -al * be * (gu + pw) + be * gvv;
                    }
                    for (std::size_t j = 0; j < D; ++j) dbe += wv[j] * (vh[j] - al * u[j]);
                    if (dv) {
                        for (std::size_t j = 0; j < D; ++j) dv[j] += be * wv[j];
                    }
                    if (dk) {
                        T kd = 0;
                        for (std::size_t i = 0; i < D; ++i) kd += kh[i] * dfk[i];
                        for (std::size_t i = 0; i < D; ++i) dk[i] += dfk[i] / rn - kh[i] * kd / (rn * rn * rn);
                    }
                    if (ga) ga->at(r, h) += dal * al * (T(1) - al);
                    if (gb) gb->at(r, h) += dbe * be * (T(1) - be);
                    for (std::size_t i = 0; i < D; ++i)
                        for (std::size_t j = 0; j < D; ++j)
                            G[i * D + j] = al * G[i * D + j] - al * be * fk[i] * wv[j];
                }
            }
        }
    });
}

namespace {

template <class T, class W>
Var sublayer_impl(Tape<T>& tape, W& w, Var x, std::size_t batch, std::size_t seq) {
    Var q = ops::matmul(tape, x, tape.leaf(w.wq));
    Var k = ops::matmul(tape, x, tape.leaf(w.wk));
    Var v = ops::matmul(tape, x, tape.leaf(w.wv));
    Var a, b;
    if (w.variant != LinearVariant::UngatedLinear) {
        a = ops::add_rowwise(tape, ops::matmul(tape, x, tape.leaf(w.gate_w)), tape.leaf(w.gate_b));
    }
    if (w.variant == LinearVariant::GatedDeltaNet) {
        b = ops::add_rowwise(tape, ops::matmul(tape, x, tape.leaf(w.beta_w)), tape.leaf(w.beta_b));
    }
    Var heads = linear_scan(tape, w.variant, q, k, v, a, b, batch, seq, w.n_heads);
    return ops::matmul(tape, heads, tape.leaf(w.wo));
}

} // namespace

template <class T>
Var linear_sublayer(Tape<T>& tape, LinearBlockWeights<T>& w, Var x, std::size_t batch, std::size_t seq) {
    return sublayer_impl(tape, w, x, batch, seq);
}

template <class T>
Var linear_sublayer(Tape<T>& tape, const LinearBlockWeights<T>& w, Var x, std::size_t batch, std::size_t seq) {
    return sublayer_impl(tape, w, x, batch, seq);
}

#define HF_INSTANTIATE(T)                                                                                          \
    template struct RecurrentState<T>;                                                                             \
    template LinearBlockWeights<T> init_linear_block<T>(LinearVariant, const ModelConfig&, double, SeededRng,      \
                                                         const std::string&);                                      \
    template void activate_gates<T>(LinearVariant, std::span<const T>, std::span<const T>, std::span<T>,           \
                                    std::span<T>);                                                                 \
    template void scan_step<T>(RecurrentState<T>&, const T*, const T*, const T*, const T*, const T*, T*);          \
    template LinearProjections<T> project<T>(const LinearBlockWeights<T>&, const Tensor<T>&);                      \
    template Tensor<T> linear_forward_recurrent<T>(const LinearBlockWeights<T>&, const Tensor<T>&,                 \
                                                   RecurrentState<T>&);                                            \
    template Tensor<T> linear_forward_reference<T>(const LinearBlockWeights<T>&, const Tensor<T>&);                \
    template std::vector<T> linear_step<T>(const LinearBlockWeights<T>&, RecurrentState<T>&, std::span<const T>);  \
    template Var linear_scan<T>(Tape<T>&, LinearVariant, Var, Var, Var, Var, Var, std::size_t, std::size_t,        \
                                std::size_t);                                                                      \
    template Var linear_sublayer<T>(Tape<T>&, LinearBlockWeights<T>&, Var, std::size_t, std::size_t);              \
    template Var linear_sublayer<T>(Tape<T>&, const LinearBlockWeights<T>&, Var, std::size_t, std::size_t);

HF_INSTANTIATE(float)
HF_INSTANTIATE(double)
#undef HF_INSTANTIATE

} // namespace hybridforge
