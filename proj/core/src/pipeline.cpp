#include "hybridforge/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "hybridforge/checkpoint.hpp"
#include "hybridforge/error.hpp"
#include "hybridforge/search.hpp"
#include "json.hpp"

namespace hybridforge {

using json = nlohmann::ordered_json;

namespace {

// ---- strict config reading -------------------------------------------------

class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config key '" + where() + "' must be an object");
    }

    void size(const char* key, std::size_t& out) {
        if (const json* v = take(key)) {
            if (!v->is_number_unsigned()) throw type_error(key, "a non-negative integer");
            out = v->get<std::size_t>();
        }
    }
    void u64(const char* key, std::uint64_t& out) {
        if (const json* v = take(key)) {
            if (!v->is_number_unsigned()) throw type_error(key, "a non-negative integer");
            out = v->get<std::uint64_t>();
        }
    }
    void real(const char* key, double& out) {
        if (const json* v = take(key)) {
            if (!v->is_number()) throw type_error(key, "a number");
            out = v->get<double>();
        }
    }
    void real(const char* key, std::optional<double>& out) {
        if (const json* v = take(key)) {
            if (v->is_null()) out.reset();
            else if (!v->is_number()) throw type_error(key, "a number or null");
            else out = v->get<double>();
        }
    }
    void boolean(const char* key, bool& out) {
        if (const json* v = take(key)) {
            if (!v->is_boolean()) throw type_error(key, "a boolean");
            out = v->get<bool>();
        }
    }
    void string(const char* key, std::string& out) {
        if (const json* v = take(key)) {
            if (!v->is_string()) throw type_error(key, "a string");
            out = v->get<std::string>();
        }
    }
    void sizes(const char* key, std::vector<std::size_t>& out) {
        if (const json* v = take(key)) {
            if (!v->is_array()) throw type_error(key, "an array of non-negative integers");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number_unsigned()) throw type_error(key, "an array of non-negative integers");
                out.push_back(e.get<std::size_t>());
            }
        }
    }
    void strings(const char* key, std::vector<std::string>& out) {
        if (const json* v = take(key)) {
            if (!v->is_array()) throw type_error(key, "an array of strings");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_string()) throw type_error(key, "an array of strings");
                out.push_back(e.get<std::string>());
            }
        }
    }
    template <class F>
    void object(const char* key, F&& fill) {
        if (const json* v = take(key)) {
            Reader r(*v, join(key));
            fill(r);
            r.finish();
        }
    }
    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + join(k) + "'");
        }
    }
    std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const json* take(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    ConfigError type_error(const char* key, const char* what) const {
        return ConfigError("config key '" + join(key) + "' must be " + what);
    }
    std::string where() const { return path_.empty() ? "<root>" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_train(Reader& r, TrainHyper& h) {
    r.size("steps", h.steps);
    r.size("batch_size", h.batch_size);
    r.real("lr", h.lr);
    r.size("warmup", h.warmup);
    r.real("min_lr_ratio", h.min_lr_ratio);
    r.real("grad_clip", h.grad_clip);
    r.boolean("answers_only", h.answers_only);
    r.real("beta1", h.adam.beta1);
    r.real("beta2", h.adam.beta2);
    r.real("eps", h.adam.eps);
}

json train_json(const TrainHyper& h) {
    return json{{"steps", h.steps},       {"batch_size", h.batch_size},     {"lr", h.lr},
                {"warmup", h.warmup},     {"min_lr_ratio", h.min_lr_ratio}, {"grad_clip", h.grad_clip},
                {"answers_only", h.answers_only}, {"beta1", h.adam.beta1}, {"beta2", h.adam.beta2},
                {"eps", h.adam.eps}};
}

json config_json(const Config& c) {
    json variants = json::array();
    for (auto v : c.distill.variants) variants.push_back(std::string(variant_tag(v)));
    json j;
    j["model"] = {{"n_layers", c.model.n_layers}, {"d_model", c.model.d_model}, {"n_heads", c.model.n_heads},
                  {"d_head", c.model.d_head},     {"d_ff", c.model.d_ff},       {"vocab_size", c.model.vocab_size},
                  {"max_seq", c.model.max_seq},   {"train", train_json(c.pretrain)}};
    j["task"] = {{"kind", std::string(task_tag(c.task.kind))}, {"n_pairs", c.task.n_pairs},
                 {"seq_len", c.task.seq_len},                  {"n_train", c.task.n_train},
                 {"n_val", c.task.n_val},                      {"n_test", c.task.n_test}};
    j["distill"] = {{"variants", variants},
                    {"steps", c.distill.hyper.steps},
                    {"batch_tokens", c.distill.hyper.batch_tokens},
                    {"lr", c.distill.hyper.lr},
                    {"warmup", c.distill.hyper.warmup},
                    {"min_lr_ratio", c.distill.hyper.min_lr_ratio},
                    {"capture_tokens", c.distill.capture_tokens},
                    {"capture_batch", c.distill.capture_batch}};
    j["search"] = {{"variant", std::string(variant_tag(c.search.variant))},
                   {"tolerance", c.search.tolerance},
                   {"p_min", c.search.p_min ? json(*c.search.p_min) : json(nullptr)},
                   {"strategies", c.search.strategies},
                   {"random_runs", c.search.random_runs},
                   {"budgets", c.search.budgets}};
    j["bench"] = {{"context_lengths", c.bench.context_lengths}, {"gen_tokens", c.bench.gen_tokens},
                  {"batch", c.bench.batch},                     {"repeats", c.bench.repeats},
                  {"warmup", c.bench.warmup},                   {"budgets", c.bench_budgets}};
    j["sft"] = {{"budgets", c.sft.budgets}, {"train", train_json(c.sft.hyper)}};
    j["seeds"] = {{"model", c.seeds.model},   {"data", c.seeds.data},     {"pretrain", c.seeds.pretrain},
                  {"distill", c.seeds.distill}, {"search", c.seeds.search}, {"sft", c.seeds.sft},
                  {"bench", c.seeds.bench}};
    j["output_dir"] = c.output_dir.string();
    return j;
}

const std::set<std::string> kStrategies{"greedy", "importance", "uniform", "random", "exhaustive"};

// ---- small file helpers ----------------------------------------------------

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
    for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ull;
    return h;
}

std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw InputError("cannot write " + path.string());
        f << text;
        if (!f.flush()) throw InputError("write failed for " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

json read_json(const std::filesystem::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what(), 0);
    }
}

std::string num(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

// ---- stage bookkeeping -----------------------------------------------------

std::vector<Stage> upstream(Stage s) {
    switch (s) {
    case Stage::Pretrain: return {};
    case Stage::Distill: return {Stage::Pretrain};
    case Stage::Search: return {Stage::Distill};
    case Stage::Eval:
    case Stage::Sft:
    case Stage::Bench: return {Stage::Search};
    case Stage::Report: return {Stage::Eval, Stage::Sft, Stage::Bench};
    }
    return {};
}

struct Stamps {
    std::map<Stage, std::string> value;
};

Stamps compute_stamps(const Config& c) {
    const json j = config_json(c);
    const json& seeds = j["seeds"];
    Stamps st;
    auto put = [&](Stage s, std::string text) {
        for (Stage u : upstream(s)) text += "|" + st.value.at(u);
        st.value[s] = hex(fnv1a(std::string(kToolVersion) + "|" + std::string(stage_name(s)) + "|" + text));
    };
    put(Stage::Pretrain, j["model"].dump() + j["task"].dump() + seeds["model"].dump() + seeds["data"].dump() +
                             seeds["pretrain"].dump());
    put(Stage::Distill, j["distill"].dump() + seeds["distill"].dump());
    put(Stage::Search, j["search"].dump() + seeds["search"].dump());
    put(Stage::Eval, "");
    put(Stage::Sft, j["sft"].dump() + seeds["sft"].dump());
    put(Stage::Bench, j["bench"].dump() + seeds["bench"].dump());
    put(Stage::Report, "");
    return st;
}

std::vector<std::filesystem::path> stage_artifacts(const Config& c, const ArtifactPaths& p, Stage s) {
    switch (s) {
    case Stage::Pretrain: return {p.base_checkpoint(), p.pretrain_loss()};
    case Stage::Distill: {
        std::vector<std::filesystem::path> out;
        for (auto v : c.distill.variants) {
            out.push_back(p.blocks(v));
            out.push_back(p.bld_report(v));
        }
        return out;
    }
    case Stage::Search: return {p.search_result(), p.search_trace(), p.strategies()};
    case Stage::Eval: return {p.eval()};
    case Stage::Sft: return {p.sft()};
    case Stage::Bench: return {p.bench()};
    case Stage::Report: {
        const auto d = p.report_dir();
        return {d / "throughput.csv", d / "trajectory.csv", d / "strategies.csv", d / "sft.csv", d / "summary.json"};
    }
    }
    return {};
}

std::optional<json> read_stamp(const ArtifactPaths& p, Stage s) {
    try {
        if (!std::filesystem::exists(p.stamp(s))) return std::nullopt;
        return read_json(p.stamp(s));
    } catch (const Error&) {
        return std::nullopt;
    }
}

bool is_current(const Config& c, const ArtifactPaths& p, const Stamps& st, Stage s) {
    const auto stamp = read_stamp(p, s);
    if (!stamp || !stamp->contains("stamp") || (*stamp)["stamp"] != st.value.at(s)) return false;
    for (const auto& a : stage_artifacts(c, p, s)) {
        if (!std::filesystem::exists(a)) return false;
    }
    return true;
}

void write_manifest(const Config& c, const ArtifactPaths& p, const Stamps& st) {
    json m;
    m["tool_version"] = kToolVersion;
    m["config"] = config_json(c);
    m["seeds"] = m["config"]["seeds"];
    json stages = json::object();
    for (Stage s : all_stages()) {
        json e;
        e["stamp"] = st.value.at(s);
        const bool current = is_current(c, p, st, s);
        e["status"] = current ? "complete" : "pending";
        const auto stamp = read_stamp(p, s);
        e["seconds"] = current && stamp ? (*stamp)["seconds"] : json(nullptr);
        json arts = json::array();
        for (const auto& a : stage_artifacts(c, p, s)) arts.push_back(std::filesystem::relative(a, p.root).string());
        e["artifacts"] = arts;
        stages[std::string(stage_name(s))] = e;
    }
    m["stages"] = stages;
    write_text(p.manifest(), m.dump(2) + "\n");
}

// ---- shared loaders ----------------------------------------------------------

TaskSpec task_spec(const Config& c) {
    TaskSpec t = c.task;
    t.vocab_size = c.model.vocab_size;
    t.seed = c.seeds.data;
    return t;
}

HybridSpec greedy_prefix(const std::vector<std::size_t>& order, std::size_t k, LinearVariant v) {
    auto spec = HybridSpec::all_full(order.size());
    for (std::size_t i = 0; i < k; ++i) spec.kinds[order[i]] = AttentionKind::linear(v);
    return spec;
}

struct Context {
    const Config& config;
    ArtifactPaths paths;
    RunOptions options;

    void log(const std::string& line) const {
        if (options.log) *options.log << line << std::endl;
    }
    TaskData data() const { return generate_task(task_spec(config)); }
    Model<float> base() const { return load_checkpoint<float>(paths.base_checkpoint()); }
    LinearBlockSet<float> blocks(LinearVariant v) const { return load_linear_blocks<float>(paths.blocks(v)); }
    std::vector<std::size_t> greedy_order() const {
        return read_json(paths.strategies())["greedy_order"].get<std::vector<std::size_t>>();
    }
    SearchResult search_result() const {
        return parse_result_json(read_text(paths.search_result()),
                                 SearchSpace::uniform(config.model.n_layers, config.search.variant));
    }
};

// ---- stages ------------------------------------------------------------------

void stage_pretrain(const Context& ctx) {
    const auto& c = ctx.config;
    const auto data = ctx.data();
    const auto init = model_init<float>(c.model, c.seeds.model);
    auto r = pretrain(init, data.train, c.pretrain, c.seeds.pretrain);
    std::ostringstream csv;
    csv << "step,loss\n";
    for (std::size_t i = 0; i < r.loss_curve.size(); ++i) csv << i << "," << num(r.loss_curve[i]) << "\n";
    write_text(ctx.paths.pretrain_loss(), csv.str());
    save_checkpoint(r.model, ctx.paths.base_checkpoint());
    ctx.log("pretrain: final loss " + num(r.loss_curve.empty() ? 0.0 : r.loss_curve.back()) + ", val accuracy " +
            num(evaluate(r.model, data.val)));
}

void stage_distill(const Context& ctx) {
    const auto& c = ctx.config;
    const auto data = ctx.data();
    const auto base = ctx.base();
    std::vector<std::size_t> layers(c.model.n_layers);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = l;
    CaptureConfig cc;
    cc.max_tokens = c.distill.capture_tokens;
    cc.batch_seqs = c.distill.capture_batch;
    cc.seed = c.seeds.distill;
    const auto acts = collect_activations(base, data.train, layers, cc);
    ctx.log("distill: captured " + std::to_string(acts.n_tokens()) + " tokens");
    DistillConfig h = c.distill.hyper;
    h.seed = c.seeds.distill;
    for (auto v : c.distill.variants) {
        auto r = distill_all(base, acts, v, h, ctx.options.workers);
        save_linear_blocks(r.blocks, base.config, ctx.paths.blocks(v));
        r.report.write_csv(ctx.paths.bld_report(v));
        for (const auto& l : r.report.layers) {
            ctx.log("distill " + std::string(variant_tag(v)) + " layer " + std::to_string(l.layer) + ": mse " +
                    num(l.curve.front()) + " -> " + num(l.final_mse));
        }
    }
}

void stage_search(const Context& ctx) {
    const auto& c = ctx.config;
    const auto data = ctx.data();
    const auto base = ctx.base();
    const auto blocks = ctx.blocks(c.search.variant);
    const auto space = SearchSpace::from_blocks(blocks);
    const std::size_t L = space.n_layers();

    auto ev = make_model_evaluator(base, blocks, data.val, task_spec(c).fingerprint());
    ev.attach_store(ctx.paths.search_memo());
    const double baseline = evaluate(base, data.val);
    const double p_min = c.search.p_min ? *c.search.p_min : (1.0 - c.search.tolerance) * baseline;

    const auto result = greedy_replace(base, blocks, ev, p_min, ctx.options.workers);
    ctx.log("search: M_opt " + result.opt_spec.to_string() + " P_opt " + num(result.p_opt) + " (P_base " +
            num(result.baseline) + ", p_min " + num(p_min) + ")");

    // Full greedy ordering, reused by the strategy comparison, SFT and bench.
    const auto full = greedy_replace(space, ev, kNegInf, ctx.options.workers);
    std::vector<std::size_t> order;
    for (const auto& it : full.trace) order.push_back(it.chosen);

    json rows = json::array();
    auto row = [&](const std::string& strategy, std::size_t k, const HybridSpec& spec, double score,
                   std::optional<std::uint64_t> seed) {
        rows.push_back({{"strategy", strategy},
                        {"budget", k},
                        {"spec", spec.to_string()},
                        {"score", score},
                        {"seed", seed ? json(*seed) : json(nullptr)}});
    };
    const auto has = [&](const char* s) {
        return std::find(c.search.strategies.begin(), c.search.strategies.end(), s) != c.search.strategies.end();
    };
    std::optional<ImportanceResult> imp;
    if (has("importance")) imp = strategy_local_importance(space, ev);
    for (std::size_t k : c.search_budgets()) {
        if (has("greedy")) row("greedy", k, greedy_prefix(order, k, c.search.variant), full.trace[k - 1].p_star, {});
        if (imp) row("importance", k, imp->specs[k], ev.score(imp->specs[k]), {});
        if (has("uniform")) {
            const auto s = strategy_uniform(k, space);
            row("uniform", k, s, ev.score(s), {});
        }
        if (has("random")) {
            for (std::size_t r = 0; r < c.search.random_runs; ++r) {
                const std::uint64_t seed = c.seeds.search * 1000003ull + r;
                const auto s = strategy_random(k, space, seed);
                row("random", k, s, ev.score(s), seed);
            }
        }
        if (has("exhaustive")) {
            const auto ex = exhaustive_search(space, ev, k);
            row("exhaustive", k, ex.spec, ex.score, {});
        }
    }
    (void)L;
    json strat{{"baseline", baseline}, {"greedy_order", order}, {"rows", rows}};
    write_text(ctx.paths.strategies(), strat.dump(2) + "\n");
    write_text(ctx.paths.search_trace(), trace_jsonl(result.trace));
    write_text(ctx.paths.search_result(), result_json(result));
}

void stage_eval(const Context& ctx) {
    const auto& c = ctx.config;
    const auto data = ctx.data();
    const auto base = ctx.base();
    const auto blocks = ctx.blocks(c.search.variant);
    const auto r = ctx.search_result();
    const auto opt = assemble_hybrid(base, blocks, r.opt_spec);
    const auto best = assemble_hybrid(base, blocks, r.best_spec);
    json j;
    j["m_opt"] = r.opt_spec.to_string();
    j["m_best"] = r.best_spec.to_string();
    for (const auto& [name, split] : {std::pair<const char*, const Split*>{"val", &data.val}, {"test", &data.test}}) {
        j[name] = {{"base", evaluate(base, *split)}, {"m_opt", evaluate(opt, *split)}, {"m_best", evaluate(best, *split)}};
    }
    write_text(ctx.paths.eval(), j.dump(2) + "\n");
    ctx.log("eval: test base " + num(j["test"]["base"].get<double>()) + ", M_opt " +
            num(j["test"]["m_opt"].get<double>()));
}

void stage_sft(const Context& ctx) {
    const auto& c = ctx.config;
    const auto data = ctx.data();
    const auto base = ctx.base();
    const auto blocks = ctx.blocks(c.search.variant);
    const auto order = ctx.greedy_order();
    json rows = json::array();
    for (std::size_t k : c.sft.budgets) {
        const auto spec = greedy_prefix(order, k, c.search.variant);
        const auto hybrid = assemble_hybrid(base, blocks, spec);
        const double pre = evaluate(hybrid, data.val);
        const auto tuned = sft(hybrid, data.train, c.sft.hyper, c.seeds.sft);
        const double post = evaluate(tuned, data.val);
        rows.push_back({{"budget", k}, {"spec", spec.to_string()}, {"pre_sft", pre}, {"post_sft", post}});
        ctx.log("sft k=" + std::to_string(k) + " " + spec.to_string() + ": " + num(pre) + " -> " + num(post));
    }
    write_text(ctx.paths.sft(), json{{"rows", rows}}.dump(2) + "\n");
}

void stage_bench(const Context& ctx) {
    const auto& c = ctx.config;
    const auto base = ctx.base();
    const auto blocks = ctx.blocks(c.search.variant);
    const auto order = ctx.greedy_order();
    std::vector<HybridSpec> specs;
    for (std::size_t k : c.bench_budgets) specs.push_back(greedy_prefix(order, k, c.search.variant));
    specs.push_back(ctx.search_result().opt_spec);
    BenchConfig bc = c.bench;
    bc.seed = c.seeds.bench;
    const auto rows = bench_grid(base, blocks, specs, bc);
    json out = json::array();
    for (const auto& r : rows) {
        out.push_back({{"spec", r.spec},
                       {"context", r.context},
                       {"gen_tokens", r.gen_tokens},
                       {"tokens_per_sec", r.tokens_per_sec},
                       {"iqr", r.iqr},
                       {"cache_bytes", r.cache_bytes},
                       {"speedup", r.speedup},
                       {"note", r.note}});
        ctx.log("bench " + r.spec + " ctx " + std::to_string(r.context) + ": " + num(r.tokens_per_sec) +
                " tok/s, speedup " + num(r.speedup));
    }
    write_text(ctx.paths.bench(), json{{"rows", out}}.dump(2) + "\n");
}

void run_stage(const Context& ctx, Stage s) {
    switch (s) {
    case Stage::Pretrain: return stage_pretrain(ctx);
    case Stage::Distill: return stage_distill(ctx);
    case Stage::Search: return stage_search(ctx);
    case Stage::Eval: return stage_eval(ctx);
    case Stage::Sft: return stage_sft(ctx);
    case Stage::Bench: return stage_bench(ctx);
    case Stage::Report: return emit_report(ctx.config, ctx.paths);
    }
}

void require_current(const Config& c, const ArtifactPaths& p, const Stamps& st, Stage for_stage, Stage dep) {
    if (!is_current(c, p, st, dep)) {
        const std::string name(stage_name(dep));
        throw StageError(std::string(stage_name(for_stage)),
                         "artifacts of stage '" + name + "' are missing or were produced by a different config in " +
                             p.root.string() + "; run `hybridforge " + name + "` first");
    }
}

} // namespace

// ---- Config ------------------------------------------------------------------

Config Config::parse(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    Config c;
    Reader root(j, "");
    root.object("model", [&](Reader& r) {
        r.size("n_layers", c.model.n_layers);
        r.size("d_model", c.model.d_model);
        r.size("n_heads", c.model.n_heads);
        r.size("d_head", c.model.d_head);
        r.size("d_ff", c.model.d_ff);
        r.size("vocab_size", c.model.vocab_size);
        r.size("max_seq", c.model.max_seq);
        r.object("train", [&](Reader& t) { read_train(t, c.pretrain); });
    });
    root.object("task", [&](Reader& r) {
        std::string kind(task_tag(c.task.kind));
        r.string("kind", kind);
        try {
            c.task.kind = parse_task(kind);
        } catch (const SpecError& e) {
            throw ConfigError(std::string("config key 'task.kind': ") + e.what());
        }
        r.size("n_pairs", c.task.n_pairs);
        r.size("seq_len", c.task.seq_len);
        r.size("n_train", c.task.n_train);
        r.size("n_val", c.task.n_val);
        r.size("n_test", c.task.n_test);
    });
    root.object("distill", [&](Reader& r) {
        std::vector<std::string> tags;
        r.strings("variants", tags);
        if (!tags.empty()) {
            c.distill.variants.clear();
            for (const auto& t : tags) {
                try {
                    c.distill.variants.push_back(parse_variant(t));
                } catch (const Error& e) {
                    throw ConfigError(std::string("config key 'distill.variants': ") + e.what());
                }
            }
        }
        r.size("steps", c.distill.hyper.steps);
        r.size("batch_tokens", c.distill.hyper.batch_tokens);
        r.real("lr", c.distill.hyper.lr);
        r.size("warmup", c.distill.hyper.warmup);
        r.real("min_lr_ratio", c.distill.hyper.min_lr_ratio);
        r.size("capture_tokens", c.distill.capture_tokens);
        r.size("capture_batch", c.distill.capture_batch);
    });
    root.object("search", [&](Reader& r) {
        std::string v(variant_tag(c.search.variant));
        r.string("variant", v);
        try {
            c.search.variant = parse_variant(v);
        } catch (const Error& e) {
            throw ConfigError(std::string("config key 'search.variant': ") + e.what());
        }
        r.real("tolerance", c.search.tolerance);
        r.real("p_min", c.search.p_min);
        r.strings("strategies", c.search.strategies);
        r.size("random_runs", c.search.random_runs);
        r.sizes("budgets", c.search.budgets);
    });
    root.object("bench", [&](Reader& r) {
        r.sizes("context_lengths", c.bench.context_lengths);
        r.size("gen_tokens", c.bench.gen_tokens);
        r.size("batch", c.bench.batch);
        r.size("repeats", c.bench.repeats);
        r.size("warmup", c.bench.warmup);
        r.sizes("budgets", c.bench_budgets);
    });
    root.object("sft", [&](Reader& r) {
        r.sizes("budgets", c.sft.budgets);
        r.object("train", [&](Reader& t) { read_train(t, c.sft.hyper); });
    });
    root.object("seeds", [&](Reader& r) {
        r.u64("model", c.seeds.model);
        r.u64("data", c.seeds.data);
        r.u64("pretrain", c.seeds.pretrain);
        r.u64("distill", c.seeds.distill);
        r.u64("search", c.seeds.search);
        r.u64("sft", c.seeds.sft);
        r.u64("bench", c.seeds.bench);
    });
    std::string out = c.output_dir.string();
    root.string("output_dir", out);
    c.output_dir = out;
    root.finish();
    c.validate();
    return c;
}

Config Config::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return parse(os.str());
}

std::string Config::to_json() const { return config_json(*this).dump(2) + "\n"; }

std::vector<std::size_t> Config::search_budgets() const {
    if (!search.budgets.empty()) return search.budgets;
    std::vector<std::size_t> b;
    for (std::size_t k = 1; k < model.n_layers; ++k) b.push_back(k);
    return b;
}

void Config::validate() const {
    try {
        model.validate();
        task_spec(*this).validate();
        distill.hyper.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    const std::size_t L = model.n_layers;
    if (distill.variants.empty()) throw ConfigError("config key 'distill.variants' must not be empty");
    if (std::find(distill.variants.begin(), distill.variants.end(), search.variant) == distill.variants.end()) {
        throw ConfigError("config key 'search.variant' (" + std::string(variant_tag(search.variant)) +
                          ") is not among distill.variants");
    }
    if (!(search.tolerance >= 0 && search.tolerance <= 1)) {
        throw ConfigError("config key 'search.tolerance' must lie in [0, 1]");
    }
    if (search.p_min && !std::isfinite(*search.p_min)) throw ConfigError("config key 'search.p_min' must be finite");
    for (const auto& s : search.strategies) {
        if (!kStrategies.count(s)) throw ConfigError("config key 'search.strategies': unknown strategy '" + s + "'");
        if (s == "exhaustive" && L > kExhaustiveMaxLayers) {
            throw ConfigError("config key 'search.strategies': exhaustive search needs n_layers <= 12");
        }
    }
    auto check_budgets = [&](const std::vector<std::size_t>& b, const char* key, std::size_t lo) {
        for (std::size_t k : b) {
            if (k < lo || k > L) {
                throw ConfigError(std::string("config key '") + key + "': budget " + std::to_string(k) +
                                  " outside [" + std::to_string(lo) + ", " + std::to_string(L) + "]");
            }
        }
    };
    check_budgets(search.budgets, "search.budgets", 1);
    check_budgets(bench_budgets, "bench.budgets", 0);
    check_budgets(sft.budgets, "sft.budgets", 0);
    bench.validate(std::numeric_limits<std::size_t>::max() / 2);
    if (output_dir.empty()) throw ConfigError("config key 'output_dir' must not be empty");
}

// ---- stages and paths --------------------------------------------------------

std::string_view stage_name(Stage s) {
    switch (s) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Distill: return "distill";
    case Stage::Search: return "search";
    case Stage::Eval: return "eval";
    case Stage::Sft: return "sft";
    case Stage::Bench: return "bench";
    case Stage::Report: return "report";
    }
    return "?";
}

Stage parse_stage(std::string_view name) {
    for (Stage s : all_stages()) {
        if (stage_name(s) == name) return s;
    }
    throw ConfigError("unknown stage '" + std::string(name) + "'");
}

std::vector<Stage> all_stages() {
    return {Stage::Pretrain, Stage::Distill, Stage::Search, Stage::Eval, Stage::Sft, Stage::Bench, Stage::Report};
}

std::filesystem::path ArtifactPaths::stamp(Stage s) const { return root / std::string(stage_name(s)) / "stamp.json"; }

std::filesystem::path ArtifactPaths::blocks(LinearVariant v) const {
    return root / "distill" / std::string(variant_tag(v)) / "blocks.hybf";
}

std::filesystem::path ArtifactPaths::bld_report(LinearVariant v) const {
    return root / "distill" / std::string(variant_tag(v)) / "bld.csv";
}

std::vector<StageOutcome> run_pipeline(const Config& config, const std::vector<Stage>& stages,
                                       const RunOptions& options) {
    config.validate();
    const Context ctx{config, ArtifactPaths{config.output_dir}, options};
    const auto& paths = ctx.paths;
    const Stamps st = compute_stamps(config);
    std::filesystem::create_directories(paths.root);
    write_manifest(config, paths, st);

    std::vector<StageOutcome> out;
    for (Stage s : all_stages()) {
        if (std::find(stages.begin(), stages.end(), s) == stages.end()) continue;
        for (Stage dep : upstream(s)) require_current(config, paths, st, s, dep);
        StageOutcome o{s};
        if (!options.force && is_current(config, paths, st, s)) {
            o.skipped = true;
            o.seconds = (*read_stamp(paths, s))["seconds"].get<double>();
            ctx.log(std::string(stage_name(s)) + ": up to date, skipped");
            out.push_back(o);
            continue;
        }
        ctx.log(std::string(stage_name(s)) + ": running");
        std::filesystem::remove(paths.stamp(s));
        const auto t0 = std::chrono::steady_clock::now();
        try {
            run_stage(ctx, s);
        } catch (const StageError&) {
            throw;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(std::string(stage_name(s)), e.what());
        }
        o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        json arts = json::array();
        for (const auto& a : stage_artifacts(config, paths, s)) arts.push_back(std::filesystem::relative(a, paths.root).string());
        write_text(paths.stamp(s),
                   json{{"stage", stage_name(s)}, {"stamp", st.value.at(s)}, {"seconds", o.seconds}, {"artifacts", arts}}
                           .dump(2) +
                       "\n");
        write_manifest(config, paths, st);
        out.push_back(o);
    }
    return out;
}

std::vector<StageOutcome> run_pipeline(const std::filesystem::path& config_file, const RunOptions& options) {
    return run_pipeline(Config::load(config_file), all_stages(), options);
}

// ---- report --------------------------------------------------------------------

void emit_report(const Config& config, const ArtifactPaths& paths) {
    const auto dir = paths.report_dir();
    const SearchResult r =
        parse_result_json(read_text(paths.search_result()),
                          SearchSpace::uniform(config.model.n_layers, config.search.variant));

    {
        std::ostringstream csv;
        csv << "spec,context,tokens_per_sec,speedup,iqr,cache_bytes,gen_tokens\n";
        const json doc = read_json(paths.bench());
        for (const auto& row : doc["rows"]) {
            csv << row["spec"].get<std::string>() << "," << row["context"].get<std::size_t>() << ","
                << num(row["tokens_per_sec"].get<double>()) << "," << num(row["speedup"].get<double>()) << ","
                << num(row["iqr"].get<double>()) << "," << row["cache_bytes"].get<std::size_t>() << ","
                << row["gen_tokens"].get<std::size_t>() << "\n";
        }
        write_text(dir / "throughput.csv", csv.str());
    }
    {
        std::ostringstream csv;
        csv << "iter,layer,score\n";
        for (const auto& it : r.trace) {
            if (it.accepted) csv << it.iter << "," << it.chosen << "," << num(it.p_star) << "\n";
        }
        write_text(dir / "trajectory.csv", csv.str());
    }
    {
        std::ostringstream csv;
        csv << "strategy,budget,score,seed\n";
        const json doc = read_json(paths.strategies());
        for (const auto& row : doc["rows"]) {
            csv << row["strategy"].get<std::string>() << "," << row["budget"].get<std::size_t>() << ","
                << num(row["score"].get<double>()) << ",";
            if (!row["seed"].is_null()) csv << row["seed"].get<std::uint64_t>();
            csv << "\n";
        }
        write_text(dir / "strategies.csv", csv.str());
    }
    {
        std::ostringstream csv;
        csv << "budget,pre_sft,post_sft\n";
        const json doc = read_json(paths.sft());
        for (const auto& row : doc["rows"]) {
            csv << row["budget"].get<std::size_t>() << "," << num(row["pre_sft"].get<double>()) << ","
                << num(row["post_sft"].get<double>()) << "\n";
        }
        write_text(dir / "sft.csv", csv.str());
    }
    {
        const json ev = read_json(paths.eval());
        const double p_base = r.baseline;
        const double drop = p_base > 0 ? (p_base - r.p_opt) / p_base * 100.0 : 0.0;
        json task{{"task", std::string(task_tag(config.task.kind))},
                  {"variant", std::string(variant_tag(config.search.variant))},
                  {"P_base", p_base},
                  {"P_opt", r.p_opt},
                  {"drop_pct", drop},
                  {"n_replaced", r.opt_spec.replaced()},
                  {"M_opt", r.opt_spec.to_string()},
                  {"M_best", r.best_spec.to_string()},
                  {"P_best", r.p_best},
                  {"tolerance", config.search.p_min ? json(nullptr) : json(config.search.tolerance)},
                  {"evaluations", r.evaluations},
                  {"below_threshold", r.below_threshold},
                  {"test", ev["test"]}};
        json summary{{"tasks", json::array({task})}};
        write_text(dir / "summary.json", summary.dump(2) + "\n");
    }
}

// ---- one-off search --------------------------------------------------------------

std::string run_adhoc_search(const Config& config, const std::string& strategy, std::optional<std::size_t> budget,
                             const RunOptions& options) {
    config.validate();
    if (!kStrategies.count(strategy)) throw ConfigError("unknown strategy '" + strategy + "'");
    const Context ctx{config, ArtifactPaths{config.output_dir}, options};
    const Stamps st = compute_stamps(config);
    require_current(config, ctx.paths, st, Stage::Search, Stage::Distill);

    const auto data = ctx.data();
    const auto base = ctx.base();
    const auto blocks = ctx.blocks(config.search.variant);
    const auto space = SearchSpace::from_blocks(blocks);
    const std::size_t L = space.n_layers();
    if (budget && *budget > L) throw ConfigError("--budget " + std::to_string(*budget) + " exceeds n_layers " + std::to_string(L));
    auto ev = make_model_evaluator(base, blocks, data.val, task_spec(config).fingerprint());
    ev.attach_store(ctx.paths.search_memo());

    json out{{"strategy", strategy}};
    HybridSpec spec;
    double score = 0;
    if (strategy == "greedy") {
        SearchResult r;
        if (budget) {
            r = greedy_fixed_budget(space, ev, *budget, options.workers);
        } else {
            const double baseline = evaluate(base, data.val);
            r = greedy_replace(space, ev, config.search.p_min ? *config.search.p_min
                                                              : (1.0 - config.search.tolerance) * baseline,
                               options.workers);
        }
        spec = r.opt_spec;
        score = r.p_opt;
        out["result"] = json::parse(result_json(r));
    } else {
        const std::size_t k = budget.value_or(L / 2);
        if (strategy == "importance") spec = strategy_local_importance(space, ev).specs[k];
        else if (strategy == "uniform") spec = strategy_uniform(k, space);
        else if (strategy == "random") spec = strategy_random(k, space, config.seeds.search);
        else spec = exhaustive_search(space, ev, k).spec;
        score = ev.score(spec);
    }
    out["budget"] = budget ? json(*budget) : json(nullptr);
    out["spec"] = spec.to_string();
    out["score"] = score;
    out["evaluations"] = ev.misses();
    return out.dump(2) + "\n";
}

std::size_t resolve_workers(std::optional<std::size_t> flag) {
    if (const char* env = std::getenv("HYBRIDFORGE_THREADS")) {
        char* end = nullptr;
        const long long v = std::strtoll(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return std::size_t(v);
        throw ConfigError("HYBRIDFORGE_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return std::max<std::size_t>(1, flag.value_or(1));
}

} // namespace hybridforge
