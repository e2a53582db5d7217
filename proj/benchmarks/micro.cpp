#include <benchmark/benchmark.h>

#include "hybridforge/kernels.hpp"
#include "hybridforge/linear_attention.hpp"
#include "hybridforge/model.hpp"
#include "hybridforge/rng.hpp"
#include "hybridforge/search.hpp"

namespace hf = hybridforge;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
    hf::SeededRng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = float(rng.normal());
    return v;
}

void BM_Gemm(benchmark::State& state) {
    const auto n = std::size_t(state.range(0));
    const auto a = noise(n * n, 1), b = noise(n * n, 2);
    std::vector<float> c(n * n);
    for (auto _ : state) {
        hf::kernels::gemm_nn(a.data(), b.data(), c.data(), n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOP/s"] = benchmark::Counter(2.0 * double(n * n * n), benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(128)->Arg(512);

void BM_ScanStep(benchmark::State& state) {
    const auto v = hf::LinearVariant(state.range(0));
    constexpr std::size_t H = 4, D = 32;
    auto st = hf::RecurrentState<float>::zeros(v, H, D);
    const auto q = noise(H * D, 1), k = noise(H * D, 2), val = noise(H * D, 3);
    std::vector<float> alpha(H * D, 0.95f), beta(H, 0.5f), out(H * D);
    for (auto _ : state) {
        hf::scan_step(st, q.data(), k.data(), val.data(), alpha.data(), beta.data(), out.data());
        benchmark::DoNotOptimize(out.data());
    }
    state.SetLabel(std::string(hf::variant_tag(v)));
}
BENCHMARK(BM_ScanStep)->DenseRange(0, 2);

// One decode step at a given context length for the all-Full and all-GLA desk models.
void BM_DecodeStep(benchmark::State& state) {
    const auto ctx = std::size_t(state.range(0));
    const bool linear = state.range(1) != 0;
    hf::ModelConfig c;
    c.max_seq = ctx + 1;
    auto full = hf::model_init<float>(c, 0);
    hf::LinearBlockSet<float> blocks(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        blocks[l] = hf::init_linear_block<float>(hf::LinearVariant::GLA, c, 0.01, hf::SeededRng(l),
                                                 "layers." + std::to_string(l) + ".attn");
    }
    const auto model = linear ? hf::assemble_hybrid(full, blocks, hf::HybridSpec::all_linear(c.n_layers, hf::LinearVariant::GLA))
                              : full;
    std::vector<std::int32_t> prompt(ctx);
    for (std::size_t i = 0; i < ctx; ++i) prompt[i] = std::int32_t(2 + i % 60);
    hf::KVCache<float> prefilled(model);
    prefilled.reserve(ctx + 1);
    hf::forward_cached(model, prefilled, std::span<const std::int32_t>(prompt));
    for (auto _ : state) {
        state.PauseTiming();
        auto cache = prefilled;
        state.ResumeTiming();
        benchmark::DoNotOptimize(hf::decode_step(model, cache, 5));
    }
    state.SetLabel(linear ? "all-linear" : "all-full");
}
BENCHMARK(BM_DecodeStep)->ArgsProduct({{512, 2048}, {0, 1}})->Unit(benchmark::kMicrosecond);

} // namespace
BENCHMARK_MAIN();
