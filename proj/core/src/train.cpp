#include "hybridforge/train.hpp"

#include <cmath>
#include <numbers>

#include "hybridforge/ops.hpp"
#include "hybridforge/rng.hpp"

namespace hybridforge {

double lr_at(const TrainHyper& h, std::size_t step) {
    if (h.warmup > 0 && step < h.warmup) return h.lr * double(step + 1) / double(h.warmup);
    const double span = double(std::max<std::size_t>(1, h.steps - std::min(h.steps, h.warmup)));
    const double progress = std::min(1.0, double(step - std::min(step, h.warmup)) / span);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return h.lr * (h.min_lr_ratio + (1.0 - h.min_lr_ratio) * cosine);
}

TrainResult pretrain(const Model<float>& model, const Split& data, const TrainHyper& hyper, std::uint64_t seed) {
    if (data.empty()) throw TrainingError("training split is empty");
    if (hyper.batch_size == 0) throw TrainingError("batch_size must be positive");
    TrainResult r{model, {}};
    if (hyper.steps == 0) return r;
    Adam<float> opt(r.model.parameters(), hyper.adam);
    SeededRng rng(seed);
    const std::size_t seq = data.front().tokens.size();
    std::vector<std::int32_t> targets;
    std::vector<float> weights;
    r.loss_curve.reserve(hyper.steps);
    for (std::size_t step = 0; step < hyper.steps; ++step) {
        TokenBatch tb{hyper.batch_size, seq, {}};
        targets.assign(hyper.batch_size * seq, 0);
        weights.assign(hyper.batch_size * seq, 0.f);
        for (std::size_t b = 0; b < hyper.batch_size; ++b) {
            const Example& e = data[rng.uniform_int(data.size())];
            if (e.tokens.size() != seq) throw TrainingError("training examples must share one length");
            tb.ids.insert(tb.ids.end(), e.tokens.begin(), e.tokens.end());
            for (std::size_t p = 1; p < seq; ++p) targets[b * seq + p - 1] = e.tokens[p];
            if (hyper.answers_only) {
                for (std::size_t p : e.answer_positions) weights[b * seq + p - 1] = 1.f;
            } else {
                for (std::size_t p = 1; p < seq; ++p) weights[b * seq + p - 1] = 1.f;
            }
        }
        Tape<float> tape;
        Var logits = forward(tape, r.model, tb);
        Var loss = ops::cross_entropy(tape, logits, std::span<const std::int32_t>(targets),
                                      std::span<const float>(weights));
        const double value = tape.value(loss)[0];
        if (!std::isfinite(value)) {
            throw TrainingError("loss became non-finite at step " + std::to_string(step));
        }
        r.loss_curve.push_back(value);
        tape.backward(loss);
        if (hyper.grad_clip > 0) opt.clip_grad_norm(hyper.grad_clip);
        opt.step(lr_at(hyper, step));
    }
    return r;
}

Model<float> sft(const Model<float>& model, const Split& train, const TrainHyper& hyper, std::uint64_t seed,
                 std::vector<double>* loss_curve) {
    TrainResult r = pretrain(model, train, hyper, seed);
    if (loss_curve) *loss_curve = std::move(r.loss_curve);
    return std::move(r.model);
}

} // namespace hybridforge
