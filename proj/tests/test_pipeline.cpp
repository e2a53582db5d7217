#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "hybridforge/pipeline.hpp"
#include "json.hpp"
#include "support/tiny_config.hpp"

using namespace hybridforge;
namespace fs = std::filesystem;

namespace {


std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("hf_pipe_" + tag + "_" + std::to_string(::getpid()))) {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Config tiny(const fs::path& out) {
    auto c = Config::parse(hftest::kTinyConfig);
    c.output_dir = out;
    return c;
}

std::size_t ran(const std::vector<StageOutcome>& o) {
    std::size_t n = 0;
    for (const auto& s : o) n += !s.skipped;
    return n;
}

std::string config_error(const std::string& text) {
    try {
        Config::parse(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(Config, EmptyObjectGivesDefaults) {
    const auto c = Config::parse("{}");
    EXPECT_EQ(c.model.n_layers, 8u);
    EXPECT_EQ(c.model.d_model, 128u);
    EXPECT_EQ(c.task.n_val, 500u);
    EXPECT_EQ(c.search.tolerance, 0.05);
    EXPECT_EQ(c.bench.context_lengths, (std::vector<std::size_t>{512, 2048, 8192}));
    EXPECT_EQ(c.search_budgets(), (std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7}));
}

TEST(Config, CanonicalJsonRoundTrips) {
    const auto c = Config::parse(hftest::kTinyConfig);
    EXPECT_EQ(Config::parse(c.to_json()).to_json(), c.to_json());
}

TEST(Config, UnknownKeysAreNamed) {
    EXPECT_NE(config_error(R"({"modle": {}})").find("'modle'"), std::string::npos);
    EXPECT_NE(config_error(R"({"distill": {"lrr": 0.1}})").find("'distill.lrr'"), std::string::npos);
    EXPECT_NE(config_error(R"({"model": {"train": {"stepz": 3}}})").find("'model.train.stepz'"), std::string::npos);
}

TEST(Config, BadValuesAreNamed) {
    EXPECT_NE(config_error(R"({"model": {"n_layers": -1}})").find("'model.n_layers'"), std::string::npos);
    EXPECT_NE(config_error(R"({"search": {"tolerance": "x"}})").find("'search.tolerance'"), std::string::npos);
    EXPECT_NE(config_error(R"({"search": {"variant": "gdn"}})").find("search.variant"), std::string::npos);
    EXPECT_NE(config_error(R"({"task": {"kind": "parity"}})").find("task.kind"), std::string::npos);
    EXPECT_NE(config_error(R"({"sft": {"budgets": [9]}})").find("sft.budgets"), std::string::npos);
    EXPECT_NE(config_error(R"({"bench": {"repeats": 2}})").find("repeats"), std::string::npos);
    EXPECT_NE(config_error("{"), "");
    EXPECT_THROW(Config::load("/nonexistent/config.json"), ConfigError);
}

TEST(Workers, EnvironmentOverridesFlag) {
    ::unsetenv("HYBRIDFORGE_THREADS");
    EXPECT_EQ(resolve_workers(std::nullopt), 1u);
    EXPECT_EQ(resolve_workers(3), 3u);
    ::setenv("HYBRIDFORGE_THREADS", "5", 1);
    EXPECT_EQ(resolve_workers(3), 5u);
    ::setenv("HYBRIDFORGE_THREADS", "zero", 1);
    EXPECT_THROW(resolve_workers(3), ConfigError);
    ::unsetenv("HYBRIDFORGE_THREADS");
}

class PipelineRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("main");
        first_ = run_pipeline(tiny(dir_->path), all_stages());
    }
    static void TearDownTestSuite() { delete dir_; }

    static TempDir* dir_;
    static std::vector<StageOutcome> first_;
};
TempDir* PipelineRun::dir_ = nullptr;
std::vector<StageOutcome> PipelineRun::first_;

TEST_F(PipelineRun, FirstRunExecutesEveryStage) {
    ASSERT_EQ(first_.size(), 7u);
    EXPECT_EQ(ran(first_), 7u);
    const auto m = nlohmann::json::parse(slurp(dir_->path / "manifest.json"));
    EXPECT_EQ(m["tool_version"], kToolVersion);
    EXPECT_EQ(m["config"]["seeds"]["search"], 5);
    for (Stage s : all_stages()) EXPECT_EQ(m["stages"][std::string(stage_name(s))]["status"], "complete");
}

TEST_F(PipelineRun, RerunSkipsEverythingAndChangesNothing) {
    const ArtifactPaths p{dir_->path};
    const auto summary = slurp(p.report_dir() / "summary.json");
    const auto result = slurp(p.search_result());
    const auto manifest = slurp(p.manifest());
    const auto again = run_pipeline(tiny(dir_->path), all_stages());
    EXPECT_EQ(ran(again), 0u);
    EXPECT_EQ(slurp(p.report_dir() / "summary.json"), summary);
    EXPECT_EQ(slurp(p.search_result()), result);
    EXPECT_EQ(slurp(p.manifest()), manifest);
}

TEST_F(PipelineRun, DeletedSearchArtifactRerunsOnlySearch) {
    const ArtifactPaths p{dir_->path};
    const auto result = slurp(p.search_result());
    fs::remove(p.search_result());
    const auto again = run_pipeline(tiny(dir_->path), all_stages());
    for (const auto& o : again) EXPECT_EQ(o.skipped, o.stage != Stage::Search) << stage_name(o.stage);
    EXPECT_EQ(slurp(p.search_result()), result);
}

TEST_F(PipelineRun, ReportFilesHaveStableSchemas) {
    const auto d = ArtifactPaths{dir_->path}.report_dir();
    auto header = [&](const char* f) {
        std::istringstream in(slurp(d / f));
        std::string h;
        std::getline(in, h);
        return h;
    };
    EXPECT_EQ(header("throughput.csv"), "spec,context,tokens_per_sec,speedup,iqr,cache_bytes,gen_tokens");
    EXPECT_EQ(header("trajectory.csv"), "iter,layer,score");
    EXPECT_EQ(header("strategies.csv"), "strategy,budget,score,seed");
    EXPECT_EQ(header("sft.csv"), "budget,pre_sft,post_sft");
}

TEST_F(PipelineRun, ReportCsvsCarryEveryStageRow) {
    const ArtifactPaths p{dir_->path};
    auto lines = [&](const char* f) {
        const auto text = slurp(p.report_dir() / f);
        return std::size_t(std::count(text.begin(), text.end(), '\n')) - 1;
    };
    auto rows = [&](const fs::path& j) { return nlohmann::json::parse(slurp(j))["rows"].size(); };
    EXPECT_EQ(lines("throughput.csv"), rows(p.bench()));
    EXPECT_EQ(lines("strategies.csv"), rows(p.strategies()));
    EXPECT_EQ(lines("sft.csv"), rows(p.sft()));
    EXPECT_GT(lines("sft.csv"), 0u);

    std::istringstream sft(slurp(p.report_dir() / "sft.csv"));
    std::string line;
    std::getline(sft, line);
    std::getline(sft, line);
    EXPECT_EQ(line.rfind("1,", 0), 0u);
}

TEST_F(PipelineRun, SummaryIsInternallyConsistent) {
    const ArtifactPaths p{dir_->path};
    const auto s = nlohmann::json::parse(slurp(p.report_dir() / "summary.json"))["tasks"][0];
    const double base = s["P_base"], opt = s["P_opt"], drop = s["drop_pct"];
    EXPECT_DOUBLE_EQ(drop, base > 0 ? (base - opt) / base * 100 : 0.0);
    if (!s["below_threshold"].get<bool>()) EXPECT_GE(opt, 0.95 * base);
    const std::string m_opt = s["M_opt"];
    EXPECT_EQ(std::size_t(std::count(m_opt.begin(), m_opt.end(), 'L')), s["n_replaced"].get<std::size_t>());

    std::istringstream traj(slurp(p.report_dir() / "trajectory.csv"));
    std::string line;
    std::size_t rows = 0;
    std::getline(traj, line);
    while (std::getline(traj, line)) ++rows;
    EXPECT_EQ(rows, s["n_replaced"].get<std::size_t>());
}

TEST_F(PipelineRun, ThroughputRowsCoverEverySpecAndContext) {
    const auto rows = nlohmann::json::parse(slurp(ArtifactPaths{dir_->path}.bench()))["rows"];
    std::size_t base_rows = 0;
    for (const auto& r : rows) {
        if (r["spec"] == "FFF") {
            ++base_rows;
            EXPECT_EQ(r["speedup"].get<double>(), 1.0);
        }
    }
    EXPECT_EQ(base_rows, 2u);
    EXPECT_EQ(rows.size() % 2, 0u);
}

TEST_F(PipelineRun, AdhocSearchUsesTheDistilledBlocks) {
    const auto j = nlohmann::json::parse(run_adhoc_search(tiny(dir_->path), "uniform", 1));
    EXPECT_EQ(j["spec"], "FLF");
    EXPECT_THROW(run_adhoc_search(tiny(dir_->path), "annealing", 1), ConfigError);
}

TEST(Pipeline, MissingUpstreamNamesTheStageToRun) {
    TempDir dir("missing");
    try {
        run_pipeline(tiny(dir.path), {Stage::Search});
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "search");
        EXPECT_NE(std::string(e.what()).find("hybridforge distill"), std::string::npos);
    }
    EXPECT_TRUE(fs::exists(dir.path / "manifest.json"));
}

TEST(Pipeline, SameConfigGivesIdenticalSummaries) {
    TempDir a("det_a"), b("det_b");
    auto ca = tiny(a.path), cb = tiny(b.path);
    ca.bench_budgets = cb.bench_budgets = {3};
    run_pipeline(ca, all_stages());
    run_pipeline(cb, all_stages());
    for (const char* f : {"summary.json", "trajectory.csv", "strategies.csv", "sft.csv"}) {
        EXPECT_EQ(slurp(a.path / "report" / f), slurp(b.path / "report" / f)) << f;
    }
}

TEST(Pipeline, ChangedSearchConfigKeepsUpstreamStages) {
    TempDir dir("change");
    auto c = tiny(dir.path);
    run_pipeline(c, {Stage::Pretrain, Stage::Distill, Stage::Search});
    c.search.tolerance = 0.5;
    const auto o = run_pipeline(c, {Stage::Pretrain, Stage::Distill, Stage::Search});
    EXPECT_TRUE(o[0].skipped);
    EXPECT_TRUE(o[1].skipped);
    EXPECT_FALSE(o[2].skipped);
}
