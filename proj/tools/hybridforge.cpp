#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hybridforge/error.hpp"
#include "hybridforge/pipeline.hpp"

namespace hf = hybridforge;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::size_t> workers;
    bool force = false;
    bool quiet = false;
};

struct SearchFlags {
    std::optional<double> p_min;
    std::optional<std::size_t> budget;
    std::string strategy;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Override every seed in the config");
    cmd->add_option("--out", c.out, "Output directory (overrides output_dir)");
    cmd->add_option("--workers", c.workers, "Worker threads (HYBRIDFORGE_THREADS wins)")->check(CLI::PositiveNumber);
    cmd->add_flag("--force", c.force, "Rerun stages even if their artifacts are current");
    cmd->add_flag("-q,--quiet", c.quiet, "No progress output");
}

std::vector<std::size_t> parse_contexts(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != item.size() || item.empty() || item[0] == '-' || v == 0) {
            throw hf::ConfigError("--contexts expects a comma-separated list of positive integers, got '" + csv + "'");
        }
        out.push_back(std::size_t(v));
    }
    if (out.empty()) throw hf::ConfigError("--contexts is empty");
    return out;
}

hf::Config load_config(const Common& c, const SearchFlags& s, const std::string& contexts) {
    hf::Config cfg = hf::Config::load(c.config);
    if (c.seed) cfg.seeds.set_all(*c.seed);
    if (!c.out.empty()) cfg.output_dir = c.out;
    if (s.p_min) cfg.search.p_min = *s.p_min;
    if (!contexts.empty()) cfg.bench.context_lengths = parse_contexts(contexts);
    cfg.validate();
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hybrid attention search: pretrain, distil linear blocks, search layer placements, benchmark."};
    app.set_version_flag("--version", hf::kToolVersion);
    app.require_subcommand(1);

    Common common;
    SearchFlags search;
    std::string contexts;

    const std::vector<std::pair<std::string, std::string>> commands{
        {"pretrain", "Train the full-attention base model on the configured task"},
        {"distill", "Distil a linear block for every layer and variant"},
        {"search", "Greedy layer replacement plus the strategy comparison"},
        {"eval", "Score the base and searched models on validation and test splits"},
        {"sft", "Fine-tune budget-k hybrids and record before/after scores"},
        {"bench", "Decode throughput and cache size per spec and context"},
        {"report", "Write CSV and JSON report files from stage artifacts"},
        {"pipeline", "Run every stage, skipping those already current"},
    };
    std::vector<CLI::App*> subs;
    for (const auto& [name, help] : commands) {
        auto* cmd = app.add_subcommand(name, help);
        add_common(cmd, common);
        if (name == "search") {
            cmd->add_option("--p-min", search.p_min, "Absolute score threshold (overrides the tolerance)");
            cmd->add_option("--budget", search.budget, "Replace exactly K layers (one-off search)");
            cmd->add_option("--strategy", search.strategy, "One-off search strategy")
                ->check(CLI::IsMember({"greedy", "importance", "uniform", "random", "exhaustive"}));
        }
        if (name == "bench") cmd->add_option("--contexts", contexts, "Comma-separated context lengths");
        subs.push_back(cmd);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        const hf::Config cfg = load_config(common, search, contexts);
        hf::RunOptions opts;
        opts.workers = hf::resolve_workers(common.workers);
        opts.force = common.force;
        opts.log = common.quiet ? nullptr : &std::cerr;

        std::string name;
        for (auto* s : subs) {
            if (s->parsed()) name = s->get_name();
        }
        if (name == "search" && (search.budget || !search.strategy.empty())) {
            const std::string strategy = search.strategy.empty() ? "greedy" : search.strategy;
            const std::string out = hf::run_adhoc_search(cfg, strategy, search.budget, opts);
            auto path = cfg.output_dir / "search" /
                        ("adhoc_" + strategy + (search.budget ? "_k" + std::to_string(*search.budget) : "") + ".json");
            std::filesystem::create_directories(path.parent_path());
            std::ofstream(path) << out;
            std::cout << out;
            return 0;
        }
        const auto stages = name == "pipeline" ? hf::all_stages() : std::vector<hf::Stage>{hf::parse_stage(name)};
        for (const auto& o : hf::run_pipeline(cfg, stages, opts)) {
            if (!common.quiet) {
                std::cerr << hf::stage_name(o.stage) << ": " << (o.skipped ? "current" : "done") << " ("
                          << o.seconds << " s)\n";
            }
        }
        return 0;
    } catch (const hf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const hf::StageError& e) {
        std::cerr << "stage '" << e.stage() << "' failed: " << e.what() << "\n";
        return kExitStage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    }
}
