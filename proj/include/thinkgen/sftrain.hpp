#pragma once

// Stage 1: supervised "prompt -> chain of thought -> image" sequences with
// prompt augmentation, trained by masked next-token cross-entropy.

#include <chrono>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinkgen/common.hpp"
#include "thinkgen/corelex.hpp"
#include "thinkgen/genpolicy.hpp"
#include "thinkgen/gradcore.hpp"
#include "thinkgen/judge.hpp"
#include "thinkgen/scenegen.hpp"

namespace thinkgen {

/// Inserted between the user prompt and the chain of thought.
inline constexpr const char* kBridge = "Output a richly detailed prompt:";

enum class AugmentationType { kConcise, kParaphrase, kTags, kVaried, kObjectPrompts };

inline std::string join(const std::vector<std::string>& items, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += sep;
        out += items[i];
    }
    return out;
}

/// Renders the given augmentation type; list types pick one entry with `rng`.
inline std::string render_augmentation(const PromptRecord& r, AugmentationType type, Rng& rng) {
    switch (type) {
        case AugmentationType::kConcise: return r.concise_caption;
        case AugmentationType::kParaphrase: return r.paraphrases.at(rng.below(r.paraphrases.size()));
        case AugmentationType::kTags: return join(r.tags, ", ");
        case AugmentationType::kVaried: return r.varied_captions.at(rng.below(r.varied_captions.size()));
        case AugmentationType::kObjectPrompts: return join(r.object_prompts, ", ");
    }
    return r.concise_caption;
}

/// Uniform over the five augmentation types (concise counts as one).
inline std::pair<AugmentationType, std::string> sample_augmentation(const PromptRecord& r, Rng& rng) {
    const auto type = static_cast<AugmentationType>(rng.below(5));
    return {type, render_augmentation(r, type, rng)};
}

/// A supervised sequence; loss_mask is per token and covers the response only.
struct SftSequence {
    InterleavedSequence seq;
    std::vector<std::uint8_t> loss_mask;
};

/// Prompt tokens as the policy sees them: the prompt followed by the bridge.
inline std::vector<TokenId> prompt_with_bridge(const std::string& prompt, const Vocabulary& vocab) {
    auto ids = tokenize(prompt, vocab);
    const auto bridge = tokenize(kBridge, vocab);
    ids.insert(ids.end(), bridge.begin(), bridge.end());
    return ids;
}

inline SftSequence build_sft_sequence(const std::string& prompt, const std::string& cot, const SceneSpec& scene,
                                      const Vocabulary& vocab, int context) {
    SftSequence out;
    auto& s = out.seq;
    s.tokens = prompt_with_bridge(prompt, vocab);
    s.prompt_len = static_cast<int>(s.tokens.size());
    const auto cot_ids = tokenize(cot, vocab);
    s.tokens.insert(s.tokens.end(), cot_ids.begin(), cot_ids.end());
    s.reasoning_len = static_cast<int>(cot_ids.size());
    s.tokens.push_back(vocab.specials().img_start);
    const auto img = encode_scene(scene, vocab);
    s.tokens.insert(s.tokens.end(), img.begin(), img.end());
    s.image_len = static_cast<int>(img.size());
    if (static_cast<int>(s.tokens.size()) > context)
        throw data_error("ContextOverflow", std::to_string(s.tokens.size()) + " tokens > context " + std::to_string(context));
    out.loss_mask.assign(s.tokens.size(), 1);
    std::fill(out.loss_mask.begin(), out.loss_mask.begin() + s.prompt_len, 0);
    return out;
}

/// Recorded SFT loss of one sequence: -weight * sum of masked-distribution
/// log-probs over loss_mask positions. Logits are produced for every position
/// so that `logits_out` exposes the (zero) gradient reaching prompt positions.
inline grad::Var sft_sequence_loss(grad::Graph& g, const Policy& policy, const Policy::Bound& p, const SftSequence& ex,
                                   double weight, int null_prefix = 0, grad::Var* logits_out = nullptr) {
    using namespace grad;
    const auto& seq = ex.seq;
    if (auto bad = validate_sequence(seq, policy.vocab())) throw data_error("InvalidSequence", bad->invariant);
    const int t = static_cast<int>(seq.tokens.size());
    const int v = policy.vocab().size();
    const auto phases = policy.phases(seq);
    Var h = policy.hidden(g, p, std::span<const TokenId>(seq.tokens.data(), static_cast<std::size_t>(t - 1)), null_prefix);
    Var logits = policy.logits_of(p, h);  // row i predicts token i+1
    if (logits_out) *logits_out = logits;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(t - 1) * v, 1);
    std::vector<int> targets(static_cast<std::size_t>(t - 1));
    std::vector<double> w(static_cast<std::size_t>(t - 1), 0.0);
    for (int i = 0; i + 1 < t; ++i) {
        const int pos = i + 1;
        targets[static_cast<std::size_t>(i)] = seq.tokens[static_cast<std::size_t>(pos)];
        if (pos >= seq.prompt_len) {
            const auto& m = policy.support(phases[static_cast<std::size_t>(pos - seq.prompt_len)]);
            std::copy(m.begin(), m.end(), mask.begin() + static_cast<std::ptrdiff_t>(i) * v);
        }
        if (ex.loss_mask[static_cast<std::size_t>(pos)]) w[static_cast<std::size_t>(i)] = -weight;
    }
    Var lp = pick(log_softmax_rows(logits, std::move(mask)), std::move(targets));
    return sum(mul(lp, g.constant(t - 1, 1, std::move(w))));
}

struct SftConfig {
    double lr = 3e-3;
    double weight_decay = 0.01;
    int batch_size = 8;
    int epochs = 1;
    double warmup_ratio = 0.03;
    double cond_dropout = 0.1;  // share of examples trained with the null prompt
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // 0 = only at the end
    int workers = 1;
};

/// Mean masked NLL over every loss position of the batch; one Adam update.
/// A non-finite loss or gradient leaves the parameters untouched and throws.
inline double sft_step(Policy& policy, const std::vector<SftSequence>& batch, grad::AdamState& adam, double lr_scale = 1.0,
                       const std::vector<int>& null_prefix = {}, int workers = 1) {
    if (batch.empty()) throw config_error("EmptyBatch", "sft_step needs at least one example");
    std::size_t positions = 0;
    for (const auto& ex : batch) positions += static_cast<std::size_t>(std::accumulate(ex.loss_mask.begin(), ex.loss_mask.end(), 0));
    const double w = 1.0 / static_cast<double>(positions);
    policy.params().zero_grad();
    double loss = 0.0;
    try {
        loss = accumulate_gradients(policy, batch.size(), workers, [&](grad::Graph& g, const Policy::Bound& p, std::size_t i) {
            return sft_sequence_loss(g, policy, p, batch[i], w, null_prefix.empty() ? 0 : null_prefix[i]);
        });
    } catch (...) {
        policy.params().zero_grad();
        throw;
    }
    for (const auto& t : policy.params().tensors())
        for (double gv : t.grad)
            if (!std::isfinite(gv)) {
                policy.params().zero_grad();
                throw numeric_error("NonFinite", "sft gradient in " + t.name);
            }
    if (!std::isfinite(loss)) throw numeric_error("NonFinite", "sft loss");
    grad::adam_step(policy.params(), adam, lr_scale);
    return loss;
}

/// Builds the training sequence of dataset example `index` (augmentation and
/// conditioning dropout drawn from the example's own sub-stream).
inline std::pair<SftSequence, int> sft_example(const DataRecord& rec, std::size_t index, const SftConfig& cfg, const Policy& policy) {
    Rng rng(derive_seed(cfg.seed, "sft-example", index));
    const auto [type, prompt] = sample_augmentation(rec.record, rng);
    (void)type;
    auto ex = build_sft_sequence(prompt, rec.record.detailed_caption, rec.scene, policy.vocab(), policy.config().context);
    const int null_prefix = rng.bernoulli(cfg.cond_dropout) ? ex.seq.prompt_len : 0;
    return {std::move(ex), null_prefix};
}

struct SftLogEntry {
    long step = 0;
    double loss = 0.0;
    double wall_time = 0.0;
};

struct SftResult {
    long steps = 0;
    double final_loss = 0.0;
    std::vector<SftLogEntry> log;
};

/// Example order for epoch `epoch`.
inline std::vector<std::size_t> sft_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "sft-order", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

/// Hooks for persistence; all optional.
struct SftHooks {
    std::function<void(const SftLogEntry&)> on_log;
    std::function<void(long step, const grad::AdamState&)> on_checkpoint;
};

/// Trains for cfg.epochs passes with linear warmup then constant learning
/// rate. `adam.step` is the resume point: steps below it are skipped.
inline SftResult train_sft(Policy& policy, const std::vector<DataRecord>& data, const SftConfig& cfg, grad::AdamState& adam,
                           const SftHooks& hooks = {}) {
    if (data.empty()) throw data_error("EmptyDataset", "no SFT examples");
    if (cfg.batch_size < 1) throw config_error("BadSftConfig", "batch_size must be >= 1");
    const std::size_t per_epoch = (data.size() + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size);
    const long total = static_cast<long>(per_epoch) * cfg.epochs;
    const long warmup = std::max(1L, static_cast<long>(std::ceil(cfg.warmup_ratio * static_cast<double>(total))));
    const auto t0 = std::chrono::steady_clock::now();
    SftResult res;
    for (long step = adam.step; step < total; ++step) {
        const int epoch = static_cast<int>(step / static_cast<long>(per_epoch));
        const std::size_t b = static_cast<std::size_t>(step % static_cast<long>(per_epoch));
        const auto order = sft_order(data.size(), cfg.seed, epoch);
        std::vector<SftSequence> batch;
        std::vector<int> nulls;
        for (std::size_t k = b * static_cast<std::size_t>(cfg.batch_size);
             k < std::min(data.size(), (b + 1) * static_cast<std::size_t>(cfg.batch_size)); ++k) {
            auto [ex, np] = sft_example(data[order[k]], order[k] + static_cast<std::size_t>(epoch) * data.size(), cfg, policy);
            batch.push_back(std::move(ex));
            nulls.push_back(np);
        }
        const double scale = std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
        const double loss = sft_step(policy, batch, adam, scale, nulls, cfg.workers);
        SftLogEntry e{step + 1, loss, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
        res.log.push_back(e);
        res.final_loss = loss;
        res.steps = step + 1;
        if (hooks.on_log) hooks.on_log(e);
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) hooks.on_checkpoint(step + 1, adam);
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(res.steps, adam);
    return res;
}

struct ModalityEntropy {
    double text = 0.0;
    double image = 0.0;
    std::size_t text_positions = 0;
    std::size_t image_positions = 0;
};

/// Mean per-position entropy of each modality over `n_rollouts` samples
/// (prompts used round-robin, temperature 1, no guidance). Forced <img>
/// positions carry no choice and are excluded.
inline ModalityEntropy post_sft_entropy(const Policy& policy, const std::vector<std::vector<TokenId>>& prompts, int n_rollouts,
                                        std::uint64_t seed, int workers = 1) {
    if (n_rollouts < 1 || prompts.empty()) throw config_error("BadEntropyProbe", "need at least one rollout and prompt");
    std::vector<Rollout> rs(static_cast<std::size_t>(n_rollouts));
    parallel_for(rs.size(), workers, [&](std::size_t i) {
        Rng rng(derive_seed(seed, "entropy-probe", i));
        rs[i] = sample(policy, prompts[i % prompts.size()], SampleOptions{}, rng);
    });
    ModalityEntropy out;
    for (const auto& r : rs)
        for (std::size_t k = 0; k < r.phases.size(); ++k) {
            if (r.phases[k] == Phase::kText) {
                out.text += r.entropies[k];
                ++out.text_positions;
            } else if (r.phases[k] == Phase::kImage) {
                out.image += r.entropies[k];
                ++out.image_positions;
            }
        }
    if (out.text_positions) out.text /= static_cast<double>(out.text_positions);
    if (out.image_positions) out.image /= static_cast<double>(out.image_positions);
    return out;
}

}  // namespace thinkgen
