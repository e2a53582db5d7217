#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hybridforge/bench.hpp"
#include "hybridforge/bld.hpp"
#include "hybridforge/train.hpp"

namespace hybridforge {

inline constexpr const char* kToolVersion = "0.1.0";

// Run configuration. JSON form (every key optional, unknown keys rejected):
//   {"model":{n_layers,d_model,n_heads,d_head,d_ff,vocab_size,max_seq,
//             "train":{steps,batch_size,lr,warmup,min_lr_ratio,grad_clip,answers_only,beta1,beta2,eps}},
//    "task":{kind,n_pairs,seq_len,n_train,n_val,n_test},
//    "distill":{variants,steps,batch_tokens,lr,warmup,min_lr_ratio,capture_tokens,capture_batch},
//    "search":{variant,tolerance,p_min,strategies,random_runs,budgets},
//    "bench":{context_lengths,gen_tokens,batch,repeats,warmup,budgets},
//    "sft":{budgets,"train":{...}},
//    "seeds":{model,data,pretrain,distill,search,sft,bench},
//    "output_dir":"..."}
struct Config {
    ModelConfig model;
    TrainHyper pretrain;
    TaskSpec task;

    struct Distill {
        std::vector<LinearVariant> variants{LinearVariant::GLA};
        DistillConfig hyper;
        std::size_t capture_tokens = 200000;
        std::size_t capture_batch = 64;
    } distill;

    struct Search {
        LinearVariant variant = LinearVariant::GLA;
        double tolerance = 0.05;          // p_min = (1 - tolerance) * P_base
        std::optional<double> p_min;      // absolute threshold, overrides tolerance
        std::vector<std::string> strategies{"greedy", "importance", "uniform", "random"};
        std::size_t random_runs = 20;
        std::vector<std::size_t> budgets;  // empty: 1 .. L-1
    } search;

    BenchConfig bench;
    std::vector<std::size_t> bench_budgets{2, 4, 6, 8};

    struct Sft {
        std::vector<std::size_t> budgets{2, 4, 6};
        TrainHyper hyper;
    } sft;

    struct Seeds {
        std::uint64_t model = 0, data = 0, pretrain = 0, distill = 0, search = 0, sft = 0, bench = 0;
        void set_all(std::uint64_t s) { model = data = pretrain = distill = search = sft = bench = s; }
    } seeds;

    std::filesystem::path output_dir = "runs/default";

    // Throws ConfigError naming the offending key (dotted path).
    static Config parse(const std::string& json_text);
    static Config load(const std::filesystem::path& path);
    // Canonical JSON with every field spelled out; parse(to_json()) round-trips.
    std::string to_json() const;
    void validate() const;

    std::vector<std::size_t> search_budgets() const;
};

enum class Stage { Pretrain, Distill, Search, Eval, Sft, Bench, Report };

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);
std::vector<Stage> all_stages();

struct RunOptions {
    std::size_t workers = 1;
    bool force = false;          // rerun stages even when their artifacts are current
    std::ostream* log = nullptr;  // progress lines, if set
};

struct StageOutcome {
    Stage stage;
    bool skipped = false;
    double seconds = 0;
};

// Runs `stages` in pipeline order. Each stage is skipped when its stamp (a
// hash of the config sections it reads plus upstream stamps) and artifacts
// are current. Stages not requested must already be complete; otherwise a
// StageError names the stage to run first. The manifest is written before
// any stage starts and refreshed after each one.
std::vector<StageOutcome> run_pipeline(const Config& config, const std::vector<Stage>& stages,
                                       const RunOptions& options = {});
std::vector<StageOutcome> run_pipeline(const std::filesystem::path& config_file, const RunOptions& options = {});

// Stage artifacts, relative to output_dir.
struct ArtifactPaths {
    std::filesystem::path root;

    std::filesystem::path manifest() const { return root / "manifest.json"; }
    std::filesystem::path stamp(Stage s) const;
    std::filesystem::path base_checkpoint() const { return root / "pretrain" / "base.hybf"; }
    std::filesystem::path pretrain_loss() const { return root / "pretrain" / "loss.csv"; }
    std::filesystem::path blocks(LinearVariant v) const;
    std::filesystem::path bld_report(LinearVariant v) const;
    std::filesystem::path search_result() const { return root / "search" / "result.json"; }
    std::filesystem::path search_trace() const { return root / "search" / "trace.jsonl"; }
    std::filesystem::path search_memo() const { return root / "search" / "memo.jsonl"; }
    std::filesystem::path strategies() const { return root / "search" / "strategies.json"; }
    std::filesystem::path eval() const { return root / "eval" / "eval.json"; }
    std::filesystem::path sft() const { return root / "sft" / "sft.json"; }
    std::filesystem::path bench() const { return root / "bench" / "bench.json"; }
    std::filesystem::path report_dir() const { return root / "report"; }
};

// Writes throughput.csv, trajectory.csv, strategies.csv, sft.csv and
// summary.json into report_dir() from persisted stage artifacts alone.
void emit_report(const Config& config, const ArtifactPaths& paths);

// One-off search outside the pipeline: `strategy` at `budget` layers (greedy
// with no budget uses the configured threshold). Needs a completed distill
// stage. Returns a JSON document describing the chosen spec and its score.
std::string run_adhoc_search(const Config& config, const std::string& strategy, std::optional<std::size_t> budget,
                             const RunOptions& options = {});

// HYBRIDFORGE_THREADS, when set to a positive integer, wins over `flag`.
std::size_t resolve_workers(std::optional<std::size_t> flag);

} // namespace hybridforge
