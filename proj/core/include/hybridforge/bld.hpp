#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hybridforge/checkpoint.hpp"
#include "hybridforge/model.hpp"
#include "hybridforge/tasks.hpp"

namespace hybridforge {

// Captured attention-sublayer traffic of a frozen full-attention model.
// Rows are grouped by sequence: rows [i*seq_len, (i+1)*seq_len) belong to
// captured sequence i, in the same order for every layer.
template <class T>
struct ActivationDataset {
    std::size_t n_layers = 0;
    std::size_t seq_len = 0;
    std::size_t n_seqs = 0;
    std::vector<std::size_t> layers;  // captured, ascending
    std::vector<Tensor<T>> x;         // per model layer; empty when not captured
    std::vector<Tensor<T>> o;
    std::uint64_t corpus_fingerprint = 0;
    std::uint64_t seed = 0;

    bool has_layer(std::size_t l) const { return l < x.size() && !x[l].empty(); }
    std::size_t n_tokens() const noexcept { return n_seqs * seq_len; }
};

struct CaptureConfig {
    std::size_t max_tokens = 200000;  // whole sequences only; 0 means the whole corpus
    std::size_t batch_seqs = 64;
    std::uint64_t seed = 0;
};

// Fingerprint of a token corpus (order-sensitive).
std::uint64_t corpus_fingerprint(const Split& corpus);

// One frozen forward per batch captures every requested layer. When the
// corpus holds more than max_tokens, whole sequences are drawn without
// replacement using the capture seed and kept in ascending corpus order.
template <class T>
ActivationDataset<T> collect_activations(const Model<T>& full_model, const Split& corpus,
                                         std::span<const std::size_t> layers, const CaptureConfig& cfg = {});

// Persisted as "bld.layer{l}.X" / "bld.layer{l}.O" in the checkpoint container.
template <class T>
void save_activations(const ActivationDataset<T>& data, const std::filesystem::path& path);
template <class T>
ActivationDataset<T> load_activations(const std::filesystem::path& path);

struct DistillConfig {
    std::size_t steps = 2000;
    std::size_t batch_tokens = 512;  // rounded to whole sequences, at least one
    double lr = 3e-3;
    std::size_t warmup = 50;
    double min_lr_ratio = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

template <class T>
struct DistillResult {
    LinearBlockWeights<T> weights;
    std::vector<double> curve;  // MSE before each update
    double seconds = 0;
};

// Student warm start: Wq/Wk/Wv/Wo copied from the teacher layer, gates
// freshly initialised from the layer's own stream.
template <class T>
LinearBlockWeights<T> init_student(const Model<T>& teacher, std::size_t layer, LinearVariant variant,
                                   std::uint64_t seed);

// Minimises MSE(student(X_l), O_l) over tokens and channels. Each step draws
// whole sequences, so the recurrent state restarts at every sequence start.
// Only the student's weights change. `init` overrides the warm start.
template <class T>
DistillResult<T> distill_block(const Model<T>& teacher, std::size_t layer, LinearVariant variant,
                               const ActivationDataset<T>& data, const DistillConfig& cfg,
                               const LinearBlockWeights<T>* init = nullptr);

struct LayerReport {
    std::size_t layer = 0;
    std::vector<double> curve;
    double final_mse = 0;
    double seconds = 0;
};

struct DistillReport {
    std::vector<LayerReport> layers;

    // CSV with header "layer,step,mse".
    void write_csv(const std::filesystem::path& path) const;
};

template <class T>
struct DistillAllResult {
    LinearBlockSet<T> blocks;  // one entry per layer
    DistillReport report;
};

// Distils every captured layer. Jobs run on `workers` threads; each owns its
// weights, optimiser and RNG stream, so the result does not depend on the
// worker count. The first failing layer's error is rethrown with its index.
template <class T>
DistillAllResult<T> distill_all(const Model<T>& teacher, const ActivationDataset<T>& data, LinearVariant variant,
                                const DistillConfig& cfg, std::size_t workers);

// Mean over every position of KL(teacher || other) between next-token
// distributions, evaluated on `held_out`.
template <class T>
double mean_token_kl(const Model<T>& teacher, const Model<T>& other, const Split& held_out, std::size_t batch = 50);

// Windowed moving average (window clipped at the start).
std::vector<double> smooth(std::span<const double> curve, std::size_t window);

} // namespace hybridforge
