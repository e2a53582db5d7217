#include "hybridforge/tasks.hpp"

#include <algorithm>
#include <memory>
#include <unordered_set>

#include "hybridforge/rng.hpp"

namespace hybridforge {
namespace {

constexpr std::size_t kCopyLen = 16;
constexpr std::size_t kInductionLen = 16;
constexpr std::size_t kSynthLen = 32;
constexpr std::size_t kGrammarFanout = 4;

std::int32_t tok(std::size_t v) { return static_cast<std::int32_t>(v); }

Example make_mqar(const TaskSpec& s, SeededRng& rng) {
    const std::size_t n_keys = (s.vocab_size - 2) / 2;
    const std::size_t val0 = 2 + n_keys, n_vals = s.vocab_size - val0;
    auto keys = rng.sample_without_replacement(n_keys, s.n_pairs);
    std::vector<std::int32_t> vals(s.n_pairs);
    Example e;
    e.tokens.push_back(kBosToken);
    for (std::size_t i = 0; i < s.n_pairs; ++i) {
        vals[i] = tok(val0 + rng.uniform_int(n_vals));
        e.tokens.push_back(tok(2 + keys[i]));
        e.tokens.push_back(vals[i]);
    }
    for (std::size_t qi : rng.sample_without_replacement(s.n_pairs, s.n_pairs)) {
        e.tokens.push_back(tok(2 + keys[qi]));
        e.answer_positions.push_back(e.tokens.size());
        e.answers.push_back(vals[qi]);
        e.tokens.push_back(vals[qi]);
    }
    return e;
}

Example make_copy(const TaskSpec& s, SeededRng& rng) {
    const std::size_t m = (s.resolved_seq_len() - 2) / 2;
    Example e;
    e.tokens.push_back(kBosToken);
    for (std::size_t i = 0; i < m; ++i) e.tokens.push_back(tok(2 + rng.uniform_int(s.vocab_size - 2)));
    e.tokens.push_back(kSepToken);
    for (std::size_t i = 0; i < m; ++i) {
        e.answer_positions.push_back(e.tokens.size());
        e.answers.push_back(e.tokens[1 + i]);
        e.tokens.push_back(e.tokens[1 + i]);
    }
    return e;
}

// BOS r r with distinct tokens in r. The first token of the repeat has no
// cue, so scoring starts one token into the second copy.
Example make_induction(const TaskSpec& s, SeededRng& rng) {
    const std::size_t m = (s.resolved_seq_len() - 1) / 2;
    auto r = rng.sample_without_replacement(s.vocab_size - 2, m);
    Example e;
    e.tokens.push_back(kBosToken);
    for (std::size_t v : r) e.tokens.push_back(tok(2 + v));
    for (std::size_t i = 0; i < m; ++i) {
        if (i > 0) {
            e.answer_positions.push_back(e.tokens.size());
            e.answers.push_back(tok(2 + r[i]));
        }
        e.tokens.push_back(tok(2 + r[i]));
    }
    return e;
}

// Sparse first-order Markov chain over content tokens: each token has a few
// successors with random weights, fixed by the task seed.
struct Grammar {
    std::vector<std::vector<std::int32_t>> next;
    std::vector<std::vector<double>> cdf;

    explicit Grammar(const TaskSpec& s) {
        SeededRng rng = SeededRng(s.seed).split(0x6772616du);
        const std::size_t n = s.vocab_size - 2;
        next.resize(s.vocab_size);
        cdf.resize(s.vocab_size);
        for (std::size_t from = 0; from < s.vocab_size; ++from) {
            if (from == std::size_t(kSepToken)) continue;
            double total = 0;
            for (std::size_t v : rng.sample_without_replacement(n, std::min(kGrammarFanout, n))) {
                next[from].push_back(tok(2 + v));
                total += 0.2 + rng.uniform();
                cdf[from].push_back(total);
            }
            for (double& c : cdf[from]) c /= total;
        }
    }

    std::int32_t sample(std::int32_t from, SeededRng& rng) const {
        const double u = rng.uniform();
        const auto& c = cdf[std::size_t(from)];
        const std::size_t i = std::size_t(std::upper_bound(c.begin(), c.end(), u) - c.begin());
        return next[std::size_t(from)][std::min(i, c.size() - 1)];
    }
};

Example make_synth(const TaskSpec& s, const Grammar& g, SeededRng& rng) {
    Example e;
    e.tokens.push_back(kBosToken);
    while (e.tokens.size() < s.resolved_seq_len()) {
        e.answer_positions.push_back(e.tokens.size());
        e.tokens.push_back(g.sample(e.tokens.back(), rng));
        e.answers.push_back(e.tokens.back());
    }
    return e;
}

} // namespace

std::string_view task_tag(TaskKind k) {
    switch (k) {
    case TaskKind::Mqar: return "mqar";
    case TaskKind::Copy: return "copy";
    case TaskKind::Induction: return "induction";
    case TaskKind::SynthLm: return "synth_lm";
    }
    return "?";
}

TaskKind parse_task(std::string_view tag) {
    for (TaskKind k : {TaskKind::Mqar, TaskKind::Copy, TaskKind::Induction, TaskKind::SynthLm}) {
        if (task_tag(k) == tag) return k;
    }
    throw SpecError("unknown task kind '" + std::string(tag) + "' (expected mqar, copy, induction or synth_lm)");
}

std::size_t TaskSpec::resolved_seq_len() const {
    switch (kind) {
    case TaskKind::Mqar: return 1 + 4 * n_pairs;
    case TaskKind::Copy: return seq_len ? seq_len : 2 + 2 * kCopyLen;
    case TaskKind::Induction: return seq_len ? seq_len : 1 + 2 * kInductionLen;
    case TaskKind::SynthLm: return seq_len ? seq_len : kSynthLen;
    }
    return 0;
}

void TaskSpec::validate() const {
    const std::string tag(task_tag(kind));
    if (vocab_size < 4) throw SpecError(tag + ": vocab_size " + std::to_string(vocab_size) + " too small");
    if (n_val == 0 || n_test == 0) throw SpecError(tag + ": validation and test splits must be nonempty");
    const std::size_t len = resolved_seq_len();
    switch (kind) {
    case TaskKind::Mqar:
        if (n_pairs == 0) throw SpecError("mqar: n_pairs must be positive");
        if ((vocab_size - 2) / 2 < n_pairs) {
            throw SpecError("mqar: vocab_size " + std::to_string(vocab_size) + " leaves " +
                            std::to_string((vocab_size - 2) / 2) + " keys for " + std::to_string(n_pairs) + " pairs");
        }
        if (seq_len != 0 && seq_len != len) {
            throw SpecError("mqar: seq_len must be 0 or 1 + 4*n_pairs = " + std::to_string(len));
        }
        break;
    case TaskKind::Copy:
        if (len < 4 || len % 2 != 0) throw SpecError("copy: seq_len must be even and >= 4");
        break;
    case TaskKind::Induction:
        if (len < 5 || len % 2 != 1) throw SpecError("induction: seq_len must be odd and >= 5");
        if ((len - 1) / 2 > vocab_size - 2) throw SpecError("induction: vocab too small for distinct pattern tokens");
        break;
    case TaskKind::SynthLm:
        if (len < 2) throw SpecError("synth_lm: seq_len must be >= 2");
        break;
    }
}

std::string TaskSpec::canonical() const {
    return std::string(task_tag(kind)) + "|v" + std::to_string(vocab_size) + "|s" + std::to_string(resolved_seq_len()) +
           "|p" + std::to_string(kind == TaskKind::Mqar ? n_pairs : 0) + "|n" + std::to_string(n_train) + "," +
           std::to_string(n_val) + "," + std::to_string(n_test) + "|seed" + std::to_string(seed);
}

std::uint64_t TaskSpec::fingerprint() const { return fnv1a(canonical()); }

std::uint64_t Example::hash() const {
    std::string_view bytes(reinterpret_cast<const char*>(tokens.data()), tokens.size() * sizeof(std::int32_t));
    return fnv1a(bytes);
}

TaskData generate_task(const TaskSpec& spec) {
    spec.validate();
    TaskData data;
    data.spec = spec;
    std::unique_ptr<Grammar> grammar;
    if (spec.kind == TaskKind::SynthLm) grammar = std::make_unique<Grammar>(spec);
    std::unordered_set<std::uint64_t> seen;
    // Test and val are drawn first so that a small train request never
    // changes the held-out splits.
    auto fill = [&](Split& out, std::size_t n, std::uint64_t stream) {
        SeededRng rng = SeededRng(spec.seed).split(stream);
        std::size_t rejections = 0;
        while (out.size() < n) {
            Example e;
            switch (spec.kind) {
            case TaskKind::Mqar: e = make_mqar(spec, rng); break;
            case TaskKind::Copy: e = make_copy(spec, rng); break;
            case TaskKind::Induction: e = make_induction(spec, rng); break;
            case TaskKind::SynthLm: e = make_synth(spec, *grammar, rng); break;
            }
            if (!seen.insert(e.hash()).second) {
                if (++rejections > 100 * (n + 100)) {
                    throw SpecError(std::string(task_tag(spec.kind)) + ": cannot draw " + std::to_string(n) +
                                    " distinct examples; the task space is too small");
                }
                continue;
            }
            out.push_back(std::move(e));
        }
    };
    fill(data.test, spec.n_test, 3);
    fill(data.val, spec.n_val, 2);
    fill(data.train, spec.n_train, 1);
    return data;
}

TokenBatch make_batch(const Split& split, std::size_t first, std::size_t count) {
    TokenBatch tb;
    tb.batch = count;
    tb.seq = count ? split.at(first).tokens.size() : 0;
    tb.ids.reserve(count * tb.seq);
    for (std::size_t i = first; i < first + count; ++i) {
        const auto& t = split.at(i).tokens;
        if (t.size() != tb.seq) throw InputError("make_batch: examples have different lengths");
        tb.ids.insert(tb.ids.end(), t.begin(), t.end());
    }
    return tb;
}

double evaluate(const LogitsFn& predict, const Split& split, std::size_t vocab_size, std::size_t batch) {
    std::size_t correct = 0, total = 0;
    for (std::size_t first = 0; first < split.size();) {
        // Consecutive examples of one length share a batch.
        const std::size_t len = split[first].tokens.size();
        std::size_t count = 1;
        while (count < batch && first + count < split.size() && split[first + count].tokens.size() == len) ++count;
        const TokenBatch tb = make_batch(split, first, count);
        const Tensor<float> logits = predict(tb);
        for (std::size_t b = 0; b < count; ++b) {
            const Example& e = split[first + b];
            for (std::size_t p : e.answer_positions) {
                const float* row = logits.row(b * tb.seq + p - 1);
                const std::size_t pred = std::size_t(std::max_element(row, row + vocab_size) - row);
                correct += pred == std::size_t(e.tokens[p]);
                ++total;
            }
        }
        first += count;
    }
    return total ? double(correct) / double(total) : 0.0;
}

double evaluate(const Model<float>& model, const Split& split, Metric) {
    return evaluate(
        [&](const TokenBatch& tb) {
            Tensor<float> logits = forward_full(model, tb);
            logits.reshape({tb.batch * tb.seq, model.config.vocab_size});
            return logits;
        },
        split, model.config.vocab_size);
}

} // namespace hybridforge
