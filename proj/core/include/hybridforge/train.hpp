#pragma once

#include <vector>

#include "hybridforge/adam.hpp"
#include "hybridforge/tasks.hpp"

namespace hybridforge {

struct TrainHyper {
    std::size_t steps = 3000;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::size_t warmup = 100;
    double min_lr_ratio = 0.1;  // cosine decays to lr * min_lr_ratio
    double grad_clip = 1.0;     // <= 0 disables clipping
    bool answers_only = true;   // supervise answer positions only, else every next token
    AdamHyper adam{};
};

// Learning rate at step s: linear warmup, then cosine decay.
double lr_at(const TrainHyper& h, std::size_t step);

struct TrainResult {
    Model<float> model;
    std::vector<double> loss_curve;  // loss before each step's update
};

// Next-token cross-entropy training on a copy of `model`. Batches are drawn
// with replacement from `data`, seeded by `seed`. Throws TrainingError
// naming the step when the loss goes non-finite.
TrainResult pretrain(const Model<float>& model, const Split& data, const TrainHyper& hyper, std::uint64_t seed);

// Fine-tunes every parameter of a (possibly hybrid) model; the input is not modified.
Model<float> sft(const Model<float>& model, const Split& train, const TrainHyper& hyper, std::uint64_t seed,
                 std::vector<double>* loss_curve = nullptr);

} // namespace hybridforge
