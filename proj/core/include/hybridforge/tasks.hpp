#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hybridforge/model.hpp"

namespace hybridforge {

enum class TaskKind : std::uint8_t { Mqar = 0, Copy = 1, Induction = 2, SynthLm = 3 };

std::string_view task_tag(TaskKind k);
TaskKind parse_task(std::string_view tag);

// Token 0 opens every sequence and token 1 separates halves in copy; all task
// content uses ids >= 2.
inline constexpr std::int32_t kBosToken = 0;
inline constexpr std::int32_t kSepToken = 1;

struct TaskSpec {
    TaskKind kind = TaskKind::Mqar;
    std::size_t vocab_size = 64;
    std::size_t seq_len = 0;  // 0 picks the natural length for the kind
    std::size_t n_pairs = 8;  // mqar only
    std::size_t n_train = 10000;
    std::size_t n_val = 500;
    std::size_t n_test = 500;
    std::uint64_t seed = 0;

    // Length every example of this spec has. Throws SpecError when the
    // vocabulary or length cannot hold the task structure.
    std::size_t resolved_seq_len() const;
    void validate() const;
    std::string canonical() const;
    std::uint64_t fingerprint() const;
};

struct Example {
    std::vector<std::int32_t> tokens;
    std::vector<std::size_t> answer_positions;  // ascending, each >= 1
    std::vector<std::int32_t> answers;          // answers[i] == tokens[answer_positions[i]]

    std::uint64_t hash() const;
};

using Split = std::vector<Example>;

struct TaskData {
    TaskSpec spec;
    Split train, val, test;
};

TaskData generate_task(const TaskSpec& spec);

enum class Metric : std::uint8_t { Accuracy = 0 };

// Logits for a batch, [batch*seq x vocab].
using LogitsFn = std::function<Tensor<float>(const TokenBatch&)>;

// Fraction of answer positions p where argmax(logits[p-1]) == tokens[p]
// (ties go to the lower id). Examples run in batches of `batch` sequences.
double evaluate(const LogitsFn& predict, const Split& split, std::size_t vocab_size, std::size_t batch = 50);
double evaluate(const Model<float>& model, const Split& split, Metric metric = Metric::Accuracy);

// Packs examples [first, first+count) into one batch; all must share a length.
TokenBatch make_batch(const Split& split, std::size_t first, std::size_t count);

} // namespace hybridforge
