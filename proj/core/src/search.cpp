#include "hybridforge/search.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace hybridforge {

using nlohmann::json;

namespace {

std::string fingerprint_hex(std::uint64_t f) {
    std::ostringstream os;
    os << std::hex << f;
    return os.str();
}

HybridSpec spec_from_string(const std::string& s, const SearchSpace& space) {
    if (s.size() != space.n_layers()) {
        throw SpecError("spec \"" + s + "\" has " + std::to_string(s.size()) + " layers, expected " +
                        std::to_string(space.n_layers()));
    }
    HybridSpec spec = HybridSpec::all_full(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == 'L') spec.kinds[i] = AttentionKind::linear(space.variants[i]);
        else if (s[i] != 'F') throw SpecError("bad hybrid spec character in \"" + s + "\"");
    }
    return spec;
}

// Scores `specs` on up to `workers` threads; results are in input order.
std::vector<double> score_all(Evaluator& ev, const std::vector<HybridSpec>& specs, std::size_t workers) {
    std::vector<double> out(specs.size());
    const std::size_t n_threads = std::min(std::max<std::size_t>(1, workers), specs.size());
    if (n_threads <= 1) {
        for (std::size_t i = 0; i < specs.size(); ++i) out[i] = ev.score(specs[i]);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(specs.size());
    auto work = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < specs.size();) {
            try {
                out[i] = ev.score(specs[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

SearchResult run_greedy(const SearchSpace& space, Evaluator& ev, double p_min, std::size_t max_accepts,
                        std::size_t workers) {
    const std::size_t L = space.n_layers();
    const std::size_t distinct0 = ev.distinct();
    SearchResult r;
    HybridSpec current = HybridSpec::all_full(L);
    r.baseline = ev.score(current);
    r.best_spec = r.opt_spec = current;
    r.p_best = r.p_opt = r.baseline;
    std::size_t accepted = 0;
    try {
        while (accepted < max_accepts && current.replaced() < L) {
            SearchIteration it;
            it.iter = r.trace.size() + 1;
            std::vector<std::size_t> layers;
            std::vector<HybridSpec> specs;
            for (std::size_t l = 0; l < L; ++l) {
                if (current.kinds[l].is_full()) {
                    layers.push_back(l);
                    specs.push_back(current.with_linear(l, space.variants[l]));
                }
            }
            const auto scores = score_all(ev, specs, workers);
            std::size_t pick = 0;
            for (std::size_t i = 0; i < layers.size(); ++i) {
                it.candidates.emplace_back(layers[i], scores[i]);
                if (scores[i] > scores[pick]) pick = i;
            }
            it.chosen = layers[pick];
            it.p_star = scores[pick];
            if (it.p_star >= r.p_best) {
                r.p_best = it.p_star;
                r.best_spec = specs[pick];
            }
            it.accepted = it.p_star >= p_min;
            r.trace.push_back(it);
            if (!it.accepted) break;
            current = specs[pick];
            r.opt_spec = current;
            r.p_opt = it.p_star;
            ++accepted;
        }
    } catch (...) {
        r.evaluations = ev.distinct() - distinct0;
        throw;
    }
    r.below_threshold = r.baseline < p_min && accepted == 0;
    r.evaluations = ev.distinct() - distinct0;
    return r;
}

} // namespace

Evaluator::Evaluator(ScoreFn fn, std::uint64_t task_fingerprint) : fn_(std::move(fn)), fingerprint_(task_fingerprint) {}

double Evaluator::score(const HybridSpec& spec) {
    const std::string key = spec.canonical();
    std::promise<double> promise;
    std::shared_future<double> result;
    bool owner = false;
    {
        std::lock_guard lock(mu_);
        auto it = memo_.find(key);
        if (it != memo_.end()) {
            result = it->second;
            ++hits_;
            if (restored_keys_.erase(key)) ++restored_;
        } else {
            result = promise.get_future().share();
            memo_.emplace(key, result);
            owner = true;
            ++misses_;
        }
    }
    if (!owner) return result.get();
    double value = 0;
    try {
        value = fn_(spec);
    } catch (...) {
        {
            std::lock_guard lock(mu_);
            memo_.erase(key);
        }
        promise.set_exception(std::current_exception());
        throw;
    }
    promise.set_value(value);
    std::lock_guard lock(mu_);
    if (store_) {
        std::ofstream f(*store_, std::ios::app);
        f << json{{"fingerprint", fingerprint_hex(fingerprint_)}, {"spec", key}, {"score", value}}.dump() << '\n';
    }
    return value;
}

void Evaluator::attach_store(const std::filesystem::path& path) {
    std::lock_guard lock(mu_);
    if (std::filesystem::exists(path)) {
        std::ifstream f(path);
        const std::string fp = fingerprint_hex(fingerprint_);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            if (line.empty()) continue;
            json j;
            try {
                j = json::parse(line);
                if (j.at("fingerprint").get<std::string>() != fp) continue;
                std::promise<double> p;
                p.set_value(j.at("score").get<double>());
                const auto key = j.at("spec").get<std::string>();
                if (memo_.emplace(key, p.get_future().share()).second) restored_keys_.insert(key);
            } catch (const json::exception& e) {
                // A torn final line from an interrupted run is dropped; anything else is corruption.
                if (f.peek() == EOF) break;
                throw FormatError(path.string() + ": bad memo line " + std::to_string(line_no) + ": " + e.what(), 0);
            }
        }
    } else if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    store_ = path;
}

template <class T>
Model<T> assemble_hybrid(const Model<T>& full_model, const LinearBlockSet<T>& blocks, const HybridSpec& spec) {
    const std::size_t L = full_model.layers.size();
    if (spec.size() != L) {
        throw AssemblyError("spec " + spec.to_string() + " has " + std::to_string(spec.size()) + " layers, model has " +
                            std::to_string(L));
    }
    Model<T> m = full_model;
    for (std::size_t l = 0; l < L; ++l) {
        const AttentionKind k = spec.kinds[l];
        if (k.is_full()) {
            if (!full_model.layers[l].kind().is_full()) {
                throw AssemblyError("layer " + std::to_string(l) + " has no full-attention weights to restore");
            }
            continue;
        }
        if (l >= blocks.size() || !blocks[l]) {
            throw AssemblyError("no distilled weights for layer " + std::to_string(l));
        }
        if (blocks[l]->variant != k.variant) {
            throw AssemblyError("layer " + std::to_string(l) + " was distilled as " +
                                std::string(variant_tag(blocks[l]->variant)) + ", spec asks for " +
                                std::string(variant_tag(k.variant)));
        }
        m.layers[l].attn = *blocks[l];
    }
    return m;
}

Evaluator make_model_evaluator(const Model<float>& full_model, const LinearBlockSet<float>& blocks, const Split& split,
                               std::uint64_t task_fingerprint, Metric) {
    if (full_model.spec() != HybridSpec::all_full(full_model.layers.size())) {
        throw ContractError("make_model_evaluator needs the all-Full base model");
    }
    struct Batch {
        TokenBatch tokens;
        std::vector<Tensor<float>> states;  // states[l]: hidden state entering layer l
    };
    struct Shared {
        Model<float> base;
        LinearBlockSet<float> blocks;
        Split split;
        std::vector<Batch> batches;
    };
    auto sh = std::make_shared<Shared>(Shared{full_model, blocks, split, {}});
    const std::size_t L = full_model.layers.size();
    constexpr std::size_t kBatch = 50;
    for (std::size_t first = 0; first < split.size();) {
        std::size_t count = 1;
        const std::size_t len = split[first].tokens.size();
        while (count < kBatch && first + count < split.size() && split[first + count].tokens.size() == len) ++count;
        Batch b;
        b.tokens = make_batch(split, first, count);
        b.states.push_back(forward_hidden<float>(sh->base, b.tokens, 0, 0));
        for (std::size_t l = 0; l < L; ++l) {
            b.states.push_back(forward_hidden<float>(sh->base, b.tokens, l, l + 1, &b.states.back()));
        }
        sh->batches.push_back(std::move(b));
        first += count;
    }
    auto fn = [sh, L](const HybridSpec& spec) {
        const Model<float> m = assemble_hybrid(sh->base, sh->blocks, spec);
        std::size_t first_linear = L;
        for (std::size_t l = 0; l < L; ++l) {
            if (spec.kinds[l].is_linear()) {
                first_linear = l;
                break;
            }
        }
        const std::size_t V = m.config.vocab_size;
        std::size_t correct = 0, total = 0, example = 0;
        for (const Batch& b : sh->batches) {
            const Tensor<float> hidden = forward_hidden<float>(m, b.tokens, first_linear, L, &b.states[first_linear]);
            const Tensor<float> logits = forward_head(m, hidden);
            for (std::size_t i = 0; i < b.tokens.batch; ++i, ++example) {
                const Example& e = sh->split[example];
                for (std::size_t p : e.answer_positions) {
                    const float* row = logits.row(i * b.tokens.seq + p - 1);
                    correct += std::size_t(std::max_element(row, row + V) - row) == std::size_t(e.tokens[p]);
                    ++total;
                }
            }
        }
        return total ? double(correct) / double(total) : 0.0;
    };
    return Evaluator(fn, task_fingerprint);
}

template <class T>
SearchSpace SearchSpace::from_blocks(const LinearBlockSet<T>& blocks) {
    SearchSpace s;
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        if (!blocks[l]) throw AssemblyError("no distilled weights for layer " + std::to_string(l));
        s.variants.push_back(blocks[l]->variant);
    }
    return s;
}

std::size_t SearchResult::accepted() const {
    return static_cast<std::size_t>(std::count_if(trace.begin(), trace.end(), [](const auto& it) { return it.accepted; }));
}

SearchResult greedy_replace(const SearchSpace& space, Evaluator& evaluator, double p_min, std::size_t workers) {
    return run_greedy(space, evaluator, p_min, space.n_layers(), workers);
}

template <class T>
SearchResult greedy_replace(const Model<T>& full_model, const LinearBlockSet<T>& blocks, Evaluator& evaluator,
                            double p_min, std::size_t workers) {
    const SearchSpace space = SearchSpace::from_blocks(blocks);
    if (space.n_layers() != full_model.layers.size()) throw AssemblyError("block set does not match the model depth");
    return greedy_replace(space, evaluator, p_min, workers);
}

SearchResult greedy_fixed_budget(const SearchSpace& space, Evaluator& evaluator, std::size_t k, std::size_t workers) {
    if (k > space.n_layers()) {
        throw SpecError("budget " + std::to_string(k) + " exceeds " + std::to_string(space.n_layers()) + " layers");
    }
    return run_greedy(space, evaluator, kNegInf, k, workers);
}

ImportanceResult strategy_local_importance(const SearchSpace& space, Evaluator& evaluator) {
    const std::size_t L = space.n_layers();
    const HybridSpec base = HybridSpec::all_full(L);
    ImportanceResult r;
    for (std::size_t l = 0; l < L; ++l) r.single_scores.push_back(evaluator.score(base.with_linear(l, space.variants[l])));
    r.ordering.resize(L);
    std::iota(r.ordering.begin(), r.ordering.end(), std::size_t{0});
    std::stable_sort(r.ordering.begin(), r.ordering.end(),
                     [&](std::size_t a, std::size_t b) { return r.single_scores[a] > r.single_scores[b]; });
    r.specs.push_back(base);
    for (std::size_t l : r.ordering) r.specs.push_back(r.specs.back().with_linear(l, space.variants[l]));
    return r;
}

HybridSpec strategy_uniform(std::size_t k, std::size_t n_layers, LinearVariant v) {
    return strategy_uniform(k, SearchSpace::uniform(n_layers, v));
}

HybridSpec strategy_uniform(std::size_t k, const SearchSpace& space) {
    const std::size_t L = space.n_layers();
    if (k > L) throw SpecError("budget " + std::to_string(k) + " exceeds " + std::to_string(L) + " layers");
    HybridSpec s = HybridSpec::all_full(L);
    for (std::size_t i = 0; i < k; ++i) {
        // (2i + 1) L / 2k, floored, in integers.
        const std::size_t l = ((2 * i + 1) * L) / (2 * k);
        s.kinds[l] = AttentionKind::linear(space.variants[l]);
    }
    return s;
}

HybridSpec strategy_random(std::size_t k, std::size_t n_layers, std::uint64_t seed, LinearVariant v) {
    return strategy_random(k, SearchSpace::uniform(n_layers, v), seed);
}

HybridSpec strategy_random(std::size_t k, const SearchSpace& space, std::uint64_t seed) {
    const std::size_t L = space.n_layers();
    if (k > L) throw SpecError("budget " + std::to_string(k) + " exceeds " + std::to_string(L) + " layers");
    SeededRng rng(seed);
    HybridSpec s = HybridSpec::all_full(L);
    for (std::size_t l : rng.sample_without_replacement(L, k)) s.kinds[l] = AttentionKind::linear(space.variants[l]);
    return s;
}

ExhaustiveResult exhaustive_search(const SearchSpace& space, Evaluator& evaluator, std::optional<std::size_t> k) {
    const std::size_t L = space.n_layers();
    if (L > kExhaustiveMaxLayers) {
        throw SpecError("exhaustive search is limited to " + std::to_string(kExhaustiveMaxLayers) + " layers, got " +
                        std::to_string(L));
    }
    if (k && *k > L) throw SpecError("budget " + std::to_string(*k) + " exceeds " + std::to_string(L) + " layers");
    ExhaustiveResult best;
    bool have = false;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << L); ++mask) {
        if (k && static_cast<std::size_t>(std::popcount(mask)) != *k) continue;
        HybridSpec s = HybridSpec::all_full(L);
        for (std::size_t l = 0; l < L; ++l) {
            if (mask >> l & 1) s.kinds[l] = AttentionKind::linear(space.variants[l]);
        }
        const double v = evaluator.score(s);
        ++best.evaluated;
        if (!have || v > best.score || (v == best.score && s.to_string() < best.spec.to_string())) {
            best.spec = s;
            best.score = v;
            have = true;
        }
    }
    return best;
}

namespace {

json iteration_json(const SearchIteration& it) {
    json cands = json::array();
    for (const auto& [l, s] : it.candidates) cands.push_back(json::array({l, s}));
    return json{{"iter", it.iter}, {"candidates", cands}, {"chosen", it.chosen}, {"p_star", it.p_star},
                {"accepted", it.accepted}};
}

// JSON has no infinities; they only arise from rigged evaluators.
json number(double v) { return std::isfinite(v) ? json(v) : json(v > 0 ? "inf" : "-inf"); }

} // namespace

std::string trace_jsonl(const std::vector<SearchIteration>& trace) {
    std::string out;
    for (const auto& it : trace) out += iteration_json(it).dump() + "\n";
    return out;
}

std::string result_json(const SearchResult& r) {
    json trace = json::array();
    for (const auto& it : r.trace) trace.push_back(iteration_json(it));
    json j{{"m_best", r.best_spec.to_string()},
           {"p_best", number(r.p_best)},
           {"m_opt", r.opt_spec.to_string()},
           {"p_opt", number(r.p_opt)},
           {"baseline", number(r.baseline)},
           {"replaced", r.opt_spec.replaced()},
           {"evaluations", r.evaluations},
           {"below_threshold", r.below_threshold},
           {"trace", trace}};
    return j.dump(2);
}

SearchResult parse_result_json(const std::string& text, const SearchSpace& space) {
    try {
        const json j = json::parse(text);
        auto num = [](const json& v) {
            if (v.is_string()) return v.get<std::string>() == "inf" ? kPosInf : kNegInf;
            return v.get<double>();
        };
        SearchResult r;
        r.best_spec = spec_from_string(j.at("m_best").get<std::string>(), space);
        r.p_best = num(j.at("p_best"));
        r.opt_spec = spec_from_string(j.at("m_opt").get<std::string>(), space);
        r.p_opt = num(j.at("p_opt"));
        r.baseline = num(j.at("baseline"));
        r.evaluations = j.at("evaluations").get<std::size_t>();
        r.below_threshold = j.at("below_threshold").get<bool>();
        for (const auto& t : j.at("trace")) {
            SearchIteration it;
            it.iter = t.at("iter").get<std::size_t>();
            for (const auto& c : t.at("candidates")) it.candidates.emplace_back(c.at(0).get<std::size_t>(), num(c.at(1)));
            it.chosen = t.at("chosen").get<std::size_t>();
            it.p_star = num(t.at("p_star"));
            it.accepted = t.at("accepted").get<bool>();
            r.trace.push_back(std::move(it));
        }
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad search result: ") + e.what(), 0);
    }
}

template Model<float> assemble_hybrid<float>(const Model<float>&, const LinearBlockSet<float>&, const HybridSpec&);
template Model<double> assemble_hybrid<double>(const Model<double>&, const LinearBlockSet<double>&, const HybridSpec&);
template SearchSpace SearchSpace::from_blocks<float>(const LinearBlockSet<float>&);
template SearchSpace SearchSpace::from_blocks<double>(const LinearBlockSet<double>&);
template SearchResult greedy_replace<float>(const Model<float>&, const LinearBlockSet<float>&, Evaluator&, double,
                                            std::size_t);
template SearchResult greedy_replace<double>(const Model<double>&, const LinearBlockSet<double>&, Evaluator&, double,
                                             std::size_t);

} // namespace hybridforge
