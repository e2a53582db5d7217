#include "hybridforge/bld.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstring>
#include <exception>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include "hybridforge/adam.hpp"
#include "hybridforge/ops.hpp"
#include "hybridforge/train.hpp"

namespace hybridforge {
namespace {

std::string layer_name(std::size_t l) { return "bld.layer" + std::to_string(l); }

std::size_t parse_size(const Container& c, const std::string& key) {
    try {
        return static_cast<std::size_t>(std::stoull(c.meta_at(key)));
    } catch (const std::logic_error&) {
        throw FormatError("metadata '" + key + "' is not a number", 0);
    }
}

} // namespace

std::uint64_t corpus_fingerprint(const Split& corpus) {
    std::uint64_t h = fnv1a("corpus");
    for (const auto& e : corpus) {
        std::string_view bytes(reinterpret_cast<const char*>(e.tokens.data()), e.tokens.size() * sizeof(std::int32_t));
        h = fnv1a(bytes, h ^ e.tokens.size());
    }
    return h;
}

template <class T>
ActivationDataset<T> collect_activations(const Model<T>& model, const Split& corpus, std::span<const std::size_t> layers,
                                         const CaptureConfig& cfg) {
    const std::size_t L = model.layers.size();
    if (model.spec() != HybridSpec::all_full(L)) {
        throw ContractError("collect_activations needs an all-Full teacher, got " + model.spec().to_string());
    }
    if (corpus.empty()) throw InputError("collect_activations: corpus is empty");
    if (layers.empty()) throw InputError("collect_activations: no layers requested");
    for (std::size_t l : layers) {
        if (l >= L) throw IndexError("layer index " + std::to_string(l) + " out of range for " + std::to_string(L) + " layers");
    }
    const std::size_t seq = corpus.front().tokens.size();
    for (const auto& e : corpus) {
        if (e.tokens.size() != seq) throw InputError("collect_activations: corpus sequences differ in length");
    }

    std::vector<std::size_t> pick(corpus.size());
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    if (cfg.max_tokens > 0 && corpus.size() * seq > cfg.max_tokens) {
        const std::size_t keep = std::max<std::size_t>(1, cfg.max_tokens / seq);
        SeededRng rng = SeededRng(cfg.seed).split(0x63617074u);
        pick = rng.sample_without_replacement(corpus.size(), keep);
        std::sort(pick.begin(), pick.end());
    }

    ActivationDataset<T> data;
    data.n_layers = L;
    data.seq_len = seq;
    data.n_seqs = pick.size();
    data.layers.assign(layers.begin(), layers.end());
    std::sort(data.layers.begin(), data.layers.end());
    data.layers.erase(std::unique(data.layers.begin(), data.layers.end()), data.layers.end());
    data.corpus_fingerprint = corpus_fingerprint(corpus);
    data.seed = cfg.seed;
    data.x.resize(L);
    data.o.resize(L);
    const std::size_t d = model.config.d_model;
    for (std::size_t l : data.layers) {
        data.x[l] = Tensor<T>({data.n_tokens(), d});
        data.o[l] = Tensor<T>({data.n_tokens(), d});
    }
    const std::size_t last = data.layers.back() + 1;
    auto tap = ActivationTap<T>::for_layers(L, data.layers);
    const std::size_t per_batch = std::max<std::size_t>(1, cfg.batch_seqs);
    for (std::size_t first = 0; first < pick.size(); first += per_batch) {
        const std::size_t count = std::min(per_batch, pick.size() - first);
        TokenBatch tb{count, seq, {}};
        for (std::size_t i = 0; i < count; ++i) {
            const auto& t = corpus[pick[first + i]].tokens;
            tb.ids.insert(tb.ids.end(), t.begin(), t.end());
        }
        forward_hidden<T>(model, tb, 0, last, nullptr, &tap);
        const std::size_t offset = first * seq * d;
        for (std::size_t l : data.layers) {
            std::memcpy(data.x[l].data() + offset, tap.inputs[l].data(), tap.inputs[l].numel() * sizeof(T));
            std::memcpy(data.o[l].data() + offset, tap.outputs[l].data(), tap.outputs[l].numel() * sizeof(T));
        }
    }
    return data;
}

template <class T>
void save_activations(const ActivationDataset<T>& data, const std::filesystem::path& path) {
    Container c;
    for (std::size_t l : data.layers) {
        c.add(layer_name(l) + ".X", data.x[l]);
        c.add(layer_name(l) + ".O", data.o[l]);
    }
    c.meta["content"] = "activations";
    c.meta["n_layers"] = std::to_string(data.n_layers);
    c.meta["seq_len"] = std::to_string(data.seq_len);
    c.meta["n_seqs"] = std::to_string(data.n_seqs);
    c.meta["corpus_fingerprint"] = std::to_string(data.corpus_fingerprint);
    c.meta["seed"] = std::to_string(data.seed);
    write_container(c, path);
}

template <class T>
ActivationDataset<T> load_activations(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.meta.count("content") == 0 || c.meta.at("content") != "activations") {
        throw FormatError(path.string() + " does not hold activations", 0);
    }
    ActivationDataset<T> data;
    data.n_layers = parse_size(c, "n_layers");
    data.seq_len = parse_size(c, "seq_len");
    data.n_seqs = parse_size(c, "n_seqs");
    data.corpus_fingerprint = std::stoull(c.meta_at("corpus_fingerprint"));
    data.seed = std::stoull(c.meta_at("seed"));
    data.x.resize(data.n_layers);
    data.o.resize(data.n_layers);
    for (std::size_t l = 0; l < data.n_layers; ++l) {
        if (!c.find(layer_name(l) + ".X")) continue;
        data.x[l] = c.get<T>(layer_name(l) + ".X");
        data.o[l] = c.get<T>(layer_name(l) + ".O");
        if (data.x[l].rows() != data.n_tokens() || data.o[l].shape() != data.x[l].shape()) {
            throw FormatError("activation tables of layer " + std::to_string(l) + " have the wrong size", 0);
        }
        data.layers.push_back(l);
    }
    return data;
}

void DistillConfig::validate() const {
    if (batch_tokens < 1) throw ConfigError("distill: batch_tokens must be >= 1");
    if (!(lr >= 0)) throw ConfigError("distill: lr must be non-negative");
}

template <class T>
LinearBlockWeights<T> init_student(const Model<T>& teacher, std::size_t layer, LinearVariant variant,
                                   std::uint64_t seed) {
    if (layer >= teacher.layers.size()) {
        throw IndexError("layer index " + std::to_string(layer) + " out of range for " +
                         std::to_string(teacher.layers.size()) + " layers");
    }
    const auto* full = std::get_if<FullAttentionWeights<T>>(&teacher.layers[layer].attn);
    if (!full) throw ContractError("layer " + std::to_string(layer) + " of the teacher is not full attention");
    auto w = init_linear_block<T>(variant, teacher.config, output_init_std(teacher.config),
                                  SeededRng(seed).split(layer).split(1), "layers." + std::to_string(layer) + ".attn");
    w.wq.value = full->wq.value;
    w.wk.value = full->wk.value;
    w.wv.value = full->wv.value;
    w.wo.value = full->wo.value;
    return w;
}

template <class T>
DistillResult<T> distill_block(const Model<T>& teacher, std::size_t layer, LinearVariant variant,
                               const ActivationDataset<T>& data, const DistillConfig& cfg,
                               const LinearBlockWeights<T>* init) {
    cfg.validate();
    if (!data.has_layer(layer)) throw IndexError("activation dataset has no layer " + std::to_string(layer));
    const auto t0 = std::chrono::steady_clock::now();
    DistillResult<T> r;
    r.weights = init ? *init : init_student(teacher, layer, variant, cfg.seed);
    if (r.weights.variant != variant) throw ContractError("initial student has a different variant");
    for (Parameter<T>* p : r.weights.parameters()) p->zero_grad();
    if (cfg.steps == 0) return r;

    const std::size_t seq = data.seq_len, d = data.x[layer].cols();
    const std::size_t n_b = std::max<std::size_t>(1, cfg.batch_tokens / seq);
    Adam<T> opt(r.weights.parameters(), AdamHyper{cfg.lr, 0.9, 0.999, 1e-8});
    TrainHyper sched;
    sched.steps = cfg.steps;
    sched.lr = cfg.lr;
    sched.warmup = cfg.warmup;
    sched.min_lr_ratio = cfg.min_lr_ratio;
    SeededRng rng = SeededRng(cfg.seed).split(layer).split(2);
    Tensor<T> xb({n_b * seq, d}), ob({n_b * seq, d});
    r.curve.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (std::size_t b = 0; b < n_b; ++b) {
            const std::size_t s = rng.uniform_int(data.n_seqs);
            std::memcpy(xb.row(b * seq), data.x[layer].row(s * seq), seq * d * sizeof(T));
            std::memcpy(ob.row(b * seq), data.o[layer].row(s * seq), seq * d * sizeof(T));
        }
        Tape<T> tape;
        Var loss;
        try {
            loss = ops::mse(tape, linear_sublayer(tape, r.weights, tape.constant(xb), n_b, seq), ob);
        } catch (const NumericError&) {
            loss = tape.constant(Tensor<T>::full({1}, std::numeric_limits<T>::quiet_NaN()));
        }
        const double value = tape.value(loss)[0];
        if (!std::isfinite(value)) {
            throw TrainingError("distill layer " + std::to_string(layer) + ": loss became non-finite at step " +
                                std::to_string(step));
        }
        r.curve.push_back(value);
        tape.backward(loss);
        opt.clip_grad_norm(1.0);
        opt.step(lr_at(sched, step));
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

void DistillReport::write_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot open " + path.string() + " for writing");
    f.precision(9);
    f << "layer,step,mse\n";
    for (const auto& l : layers) {
        for (std::size_t s = 0; s < l.curve.size(); ++s) f << l.layer << ',' << s << ',' << l.curve[s] << '\n';
    }
}

template <class T>
DistillAllResult<T> distill_all(const Model<T>& teacher, const ActivationDataset<T>& data, LinearVariant variant,
                                const DistillConfig& cfg, std::size_t workers) {
    if (workers < 1) throw ConfigError("distill: workers must be >= 1");
    cfg.validate();
    const std::vector<std::size_t>& jobs = data.layers;
    std::vector<std::optional<DistillResult<T>>> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
            try {
                results[j] = distill_block(teacher, jobs[j], variant, data, cfg);
            } catch (...) {
                errors[j] = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::min(workers, jobs.size());
    if (n_threads <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        if (errors[j]) std::rethrow_exception(errors[j]);
    }
    DistillAllResult<T> out;
    out.blocks.resize(teacher.layers.size());
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        auto& r = *results[j];
        out.report.layers.push_back({jobs[j], r.curve, r.curve.empty() ? 0.0 : r.curve.back(), r.seconds});
        out.blocks[jobs[j]] = std::move(r.weights);
    }
    return out;
}

template <class T>
double mean_token_kl(const Model<T>& teacher, const Model<T>& other, const Split& held_out, std::size_t batch) {
    if (teacher.config.vocab_size != other.config.vocab_size) throw ContractError("mean_token_kl: vocab sizes differ");
    const std::size_t V = teacher.config.vocab_size;
    double total = 0;
    std::size_t rows = 0;
    std::vector<double> lp(V), lq(V);
    auto log_softmax = [V](const T* x, std::vector<double>& out) {
        double mx = x[0];
        for (std::size_t i = 1; i < V; ++i) mx = std::max(mx, double(x[i]));
        double z = 0;
        for (std::size_t i = 0; i < V; ++i) z += std::exp(double(x[i]) - mx);
        const double lz = mx + std::log(z);
        for (std::size_t i = 0; i < V; ++i) out[i] = double(x[i]) - lz;
    };
    for (std::size_t first = 0; first < held_out.size(); first += batch) {
        const TokenBatch tb = make_batch(held_out, first, std::min(batch, held_out.size() - first));
        const Tensor<T> p = forward_full(teacher, tb);
        const Tensor<T> q = forward_full(other, tb);
        for (std::size_t r = 0; r < tb.batch * tb.seq; ++r) {
            log_softmax(p.data() + r * V, lp);
            log_softmax(q.data() + r * V, lq);
            for (std::size_t i = 0; i < V; ++i) total += std::exp(lp[i]) * (lp[i] - lq[i]);
            ++rows;
        }
    }
    return rows ? total / double(rows) : 0.0;
}

std::vector<double> smooth(std::span<const double> curve, std::size_t window) {
    std::vector<double> out(curve.size());
    double acc = 0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        acc += curve[i];
        if (i >= window) acc -= curve[i - window];
        out[i] = acc / double(std::min(i + 1, window));
    }
    return out;
}

#define HF_INSTANTIATE(T)                                                                                          \
    template struct ActivationDataset<T>;                                                                          \
    template ActivationDataset<T> collect_activations<T>(const Model<T>&, const Split&, std::span<const std::size_t>, \
                                                         const CaptureConfig&);                                    \
    template void save_activations<T>(const ActivationDataset<T>&, const std::filesystem::path&);                  \
    template ActivationDataset<T> load_activations<T>(const std::filesystem::path&);                               \
    template LinearBlockWeights<T> init_student<T>(const Model<T>&, std::size_t, LinearVariant, std::uint64_t);    \
    template DistillResult<T> distill_block<T>(const Model<T>&, std::size_t, LinearVariant,                        \
                                               const ActivationDataset<T>&, const DistillConfig&,                  \
                                               const LinearBlockWeights<T>*);                                      \
    template DistillAllResult<T> distill_all<T>(const Model<T>&, const ActivationDataset<T>&, LinearVariant,       \
                                                const DistillConfig&, std::size_t);                \
    template double mean_token_kl<T>(const Model<T>&, const Model<T>&, const Split&, std::size_t);
HF_INSTANTIATE(float)
HF_INSTANTIATE(double)
#undef HF_INSTANTIATE

} // namespace hybridforge
