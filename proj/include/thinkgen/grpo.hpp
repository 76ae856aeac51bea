#pragma once

// Stage 2: group-relative policy optimization over interleaved rollouts with
// binary sequence rewards, group filtering, and one adaptive entropy
// controller per modality.

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinkgen/common.hpp"
#include "thinkgen/corelex.hpp"
#include "thinkgen/genpolicy.hpp"
#include "thinkgen/gradcore.hpp"
#include "thinkgen/judge.hpp"
#include "thinkgen/scenegen.hpp"
#include "thinkgen/sftrain.hpp"

namespace thinkgen {

/// A prompt to roll out: its constraint spec (for judging) and its tokens
/// (prompt + bridge).
struct PromptItem {
    PromptSpec spec;
    std::vector<TokenId> tokens;
};

inline PromptItem make_prompt_item(const PromptSpec& spec, const Vocabulary& vocab) {
    return {spec, prompt_with_bridge(spec.surface, vocab)};
}

/// G rollouts of one prompt. Advantages are one scalar per rollout.
struct RolloutGroup {
    PromptItem prompt;
    std::vector<Rollout> rollouts;  // log_probs are the old-policy sampling log-probs
    std::vector<double> rewards;
    std::vector<double> advantages;
    std::vector<std::vector<double>> ref_log_probs;  // only with a KL term

    std::size_t size() const { return rollouts.size(); }

    /// The rollout's advantage repeated over every response token.
    std::vector<double> token_advantages(std::size_t i) const {
        return std::vector<double>(rollouts.at(i).log_probs.size(), advantages.at(i));
    }
};

/// Samples G rollouts per prompt from the frozen old policy (guidance scale 1,
/// temperature 1). Rollout j of prompt k draws from sub-stream k*G+j.
inline std::vector<RolloutGroup> collect_rollouts(const Policy& old_policy, const std::vector<PromptItem>& prompts, int G,
                                                  std::uint64_t seed, int workers = 1, SampleOptions opt = {}) {
    if (G < 2) throw config_error("BadGroupSize", "need at least two rollouts per prompt");
    std::vector<RolloutGroup> groups(prompts.size());
    for (std::size_t k = 0; k < prompts.size(); ++k) {
        groups[k].prompt = prompts[k];
        groups[k].rollouts.resize(static_cast<std::size_t>(G));
    }
    parallel_for(prompts.size() * static_cast<std::size_t>(G), workers, [&](std::size_t idx) {
        const std::size_t k = idx / static_cast<std::size_t>(G), j = idx % static_cast<std::size_t>(G);
        Rng rng(derive_seed(seed, "rollout", idx));
        groups[k].rollouts[j] = sample(old_policy, prompts[k].tokens, opt, rng);
    });
    return groups;
}

/// Judges each rollout's image span. Groups whose judge call fails are
/// removed; returns how many were removed.
inline std::size_t assign_rewards(std::vector<RolloutGroup>& groups, const JudgeFn& judge, const Vocabulary& vocab) {
    std::size_t dropped = 0;
    std::vector<RolloutGroup> kept;
    kept.reserve(groups.size());
    for (auto& g : groups) {
        bool failed = false;
        g.rewards.assign(g.size(), 0.0);
        for (std::size_t i = 0; i < g.size() && !failed; ++i) {
            try {
                const auto scene = parse_image(g.rollouts[i].seq.image_tokens(), vocab);
                g.rewards[i] = judge(g.prompt.spec, scene).score;
            } catch (const Error& e) {
                if (e.code() != "JudgeFailure") throw;
                failed = true;
            }
        }
        if (failed)
            ++dropped;
        else
            kept.push_back(std::move(g));
    }
    groups = std::move(kept);
    return dropped;
}

inline bool is_degenerate(const RolloutGroup& g) {
    for (double r : g.rewards)
        if (r != g.rewards.front()) return false;
    return true;
}

/// Groups whose rewards are not all equal.
inline std::vector<RolloutGroup> filter_groups(std::vector<RolloutGroup> groups) {
    std::vector<RolloutGroup> out;
    for (auto& g : groups)
        if (!g.rewards.empty() && !is_degenerate(g)) out.push_back(std::move(g));
    return out;
}

/// (R_i - mean) / max(population std, 1e-6).
inline void compute_advantages(RolloutGroup& g) {
    if (g.rewards.size() != g.size() || g.rewards.empty()) throw data_error("DegenerateGroup", "rewards not assigned");
    if (is_degenerate(g)) throw data_error("DegenerateGroup", "all rewards equal");
    const double n = static_cast<double>(g.rewards.size());
    double mean = 0.0;
    for (double r : g.rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : g.rewards) var += (r - mean) * (r - mean);
    const double sd = std::max(std::sqrt(var / n), 1e-6);
    g.advantages.resize(g.rewards.size());
    for (std::size_t i = 0; i < g.rewards.size(); ++i) g.advantages[i] = (g.rewards[i] - mean) / sd;
}

/// Per-token exp(log pi_theta - log pi_old) for every rollout of a group.
inline std::vector<std::vector<double>> importance_ratios(const Policy& policy, const RolloutGroup& g) {
    std::vector<std::vector<double>> out;
    for (const auto& r : g.rollouts) {
        const auto lp = policy.log_prob(r.seq);
        if (lp.size() != r.log_probs.size()) throw data_error("InvalidSequence", "old log-prob count mismatch");
        std::vector<double> ratio(lp.size());
        for (std::size_t t = 0; t < lp.size(); ++t) {
            ratio[t] = std::exp(lp[t] - r.log_probs[t]);
            if (!std::isfinite(ratio[t])) throw numeric_error("NonFinite", "importance ratio");
        }
        out.push_back(std::move(ratio));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adaptive entropy control

/// Learnable coefficient alpha = asin(phi), steered so that the policy's
/// entropy on its modality tracks `target`.
struct EntropyController {
    static constexpr double kPhiLimit = 1.0 - 1e-6;

    double phi = 0.0;
    double target = 0.0;
    double lr_phi = 0.01;
    Modality modality = Modality::kText;

    double alpha() const { return std::asin(phi); }
};

enum class AlphaUpdate { kUpdated, kEmptyModalityBatch };

/// One descent step on E[alpha * (log pi + H_target)] with respect to phi:
/// phi -= lr * mean(log pi + H_target) / sqrt(1 - phi^2), then clamped.
inline AlphaUpdate update_alpha(EntropyController& c, std::span<const double> sampled_log_probs) {
    if (sampled_log_probs.empty()) return AlphaUpdate::kEmptyModalityBatch;
    double m = 0.0;
    for (double lp : sampled_log_probs) m += lp;
    m /= static_cast<double>(sampled_log_probs.size());
    const double grad = (m + c.target) / std::sqrt(1.0 - c.phi * c.phi);
    c.phi = std::clamp(c.phi - c.lr_phi * grad, -EntropyController::kPhiLimit, EntropyController::kPhiLimit);
    return AlphaUpdate::kUpdated;
}

/// Sampled log-probs of one modality across groups (forced positions excluded).
inline std::vector<double> modality_log_probs(const std::vector<RolloutGroup>& groups, Modality m) {
    std::vector<double> out;
    for (const auto& g : groups)
        for (const auto& r : g.rollouts)
            for (std::size_t t = 0; t < r.phases.size(); ++t)
                if (r.phases[t] != Phase::kForced && phase_modality(r.phases[t]) == m) out.push_back(r.log_probs[t]);
    return out;
}

// ---------------------------------------------------------------------------
// Objective

/// How the per-token entropy term alpha * log pi(o_t) enters the objective.
/// kExpected uses its expectation under the current policy, sum_a pi log pi =
/// -H_t, whose gradient moves the entropy; kSampled uses the sampled token's
/// log-prob literally (zero-mean gradient).
enum class EntropyTerm { kExpected, kSampled };

struct ObjectiveOptions {
    double clip_eps = 0.2;
    double kl_coeff = 0.0;
    EntropyTerm entropy_term = EntropyTerm::kExpected;
    bool surrogate = true;  // false: entropy (and KL) terms only
};

/// Recorded contribution of rollout i of group `g` to the batch objective J,
/// already divided by (groups * G * |o_i|).
inline grad::Var rollout_objective(grad::Graph& gr, const Policy& policy, const Policy::Bound& p, const RolloutGroup& g,
                                   std::size_t i, std::size_t n_groups, double alpha_text, double alpha_image,
                                   const ObjectiveOptions& opt) {
    using namespace grad;
    const auto& r = g.rollouts.at(i);
    auto rt = policy.response_terms(gr, p, r.seq);
    const int n = rt.log_probs.rows();
    if (static_cast<std::size_t>(n) != r.log_probs.size()) throw data_error("InvalidSequence", "old log-prob count mismatch");
    Var total = gr.constant(n, 1, std::vector<double>(static_cast<std::size_t>(n), 0.0));
    if (opt.surrogate) {
        Var ratio = exp(sub(rt.log_probs, gr.constant(n, 1, r.log_probs)));
        Var adv = gr.constant(n, 1, g.token_advantages(i));
        Var s1 = mul(ratio, adv);
        Var s2 = mul(clip(ratio, 1.0 - opt.clip_eps, 1.0 + opt.clip_eps), adv);
        total = minimum(s1, s2);
    }
    std::vector<double> alpha(static_cast<std::size_t>(n), 0.0);
    bool any_alpha = false;
    for (int t = 0; t < n; ++t) {
        const Phase ph = rt.phases[static_cast<std::size_t>(t)];
        const double a = ph == Phase::kText ? alpha_text : ph == Phase::kImage ? alpha_image : 0.0;
        alpha[static_cast<std::size_t>(t)] = a;
        any_alpha = any_alpha || a != 0.0;
    }
    if (any_alpha) {
        Var per_token = opt.entropy_term == EntropyTerm::kSampled ? rt.log_probs : scale(entropy_rows(rt.logits, rt.mask), -1.0);
        total = add(total, mul(gr.constant(n, 1, std::move(alpha)), per_token));
    }
    if (opt.kl_coeff != 0.0) {
        if (g.ref_log_probs.size() != g.size()) throw config_error("MissingReference", "KL term needs reference log-probs");
        // k3 estimator: exp(ref - cur) - (ref - cur) - 1
        Var d = sub(gr.constant(n, 1, g.ref_log_probs[i]), rt.log_probs);
        Var kl = sub(sub(exp(d), d), gr.constant(n, 1, std::vector<double>(static_cast<std::size_t>(n), 1.0)));
        total = sub(total, scale(kl, opt.kl_coeff));
    }
    const double w = 1.0 / (static_cast<double>(n_groups) * static_cast<double>(g.size()) * static_cast<double>(n));
    return scale(sum(total), w);
}

/// J averaged over groups; with `accumulate` the gradient of -J is added to
/// the policy's parameter gradients. Alphas are constants here.
inline double grpo_objective(Policy& policy, const std::vector<RolloutGroup>& groups, const EntropyController& text,
                             const EntropyController& image, const ObjectiveOptions& opt, bool accumulate = true, int workers = 1) {
    if (groups.empty()) throw data_error("DegenerateGroup", "no surviving groups");
    std::vector<std::pair<std::size_t, std::size_t>> items;
    for (std::size_t k = 0; k < groups.size(); ++k) {
        if (groups[k].advantages.size() != groups[k].size()) throw data_error("DegenerateGroup", "advantages not computed");
        for (std::size_t i = 0; i < groups[k].size(); ++i) items.emplace_back(k, i);
    }
    const double at = text.alpha(), ai = image.alpha();
    auto item = [&](grad::Graph& g, const Policy::Bound& p, std::size_t idx) {
        const auto [k, i] = items[idx];
        return grad::scale(rollout_objective(g, policy, p, groups[k], i, groups.size(), at, ai, opt), -1.0);
    };
    if (accumulate) return -accumulate_gradients(policy, items.size(), workers, item);
    double loss = 0.0;
    for (std::size_t idx = 0; idx < items.size(); ++idx) {
        grad::Graph g;
        auto p = policy.bind(g);
        loss += item(g, p, idx).item();
    }
    return -loss;
}

// ---------------------------------------------------------------------------
// Training loop

struct RlConfig {
    int rollouts_per_prompt = 8;
    int rollout_batch_size = 8;
    int effective_batch_size = 0;  // surviving groups used per update; 0 = half the rollout batch
    double clip_eps = 0.2;
    double kl_coeff = 0.0;
    bool allow_kl = false;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double cfg_rollout = 1.0;
    double cfg_eval = 5.0;
    double temperature = 1.0;
    int steps = 200;
    std::uint64_t seed = 0;
    int inner_epochs = 1;
    double lr_phi = 0.005;
    double phi_init = 0.0;
    EntropyTerm entropy_term = EntropyTerm::kExpected;
    int val_every = 10;
    int val_prompts = 64;
    int val_samples = 2;
    int checkpoint_every = 0;
    int workers = 1;

    int effective_groups() const { return effective_batch_size > 0 ? effective_batch_size : std::max(1, rollout_batch_size / 2); }

    void validate() const {
        if (kl_coeff != 0.0 && !allow_kl)
            throw config_error("KLNotAllowed", "kl_coeff must be 0 unless the KL ablation is explicitly allowed");
        if (rollouts_per_prompt < 2) throw config_error("BadRlConfig", "rollouts_per_prompt must be >= 2");
        if (rollout_batch_size < 1 || steps < 0 || inner_epochs < 1) throw config_error("BadRlConfig", "batch/steps/inner_epochs");
        if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw config_error("BadRlConfig", "clip_eps must be in (0,1)");
        if (cfg_rollout != 1.0 || temperature != 1.0)
            throw config_error("BadRlConfig", "rollouts must sample at guidance scale 1 and temperature 1");
        if (!(lr_phi > 0.0)) throw config_error("BadRlConfig", "lr_phi must be positive");
    }
};

struct RlMetrics {
    long step = 0;
    double mean_reward = 0.0;
    double surviving_fraction = 0.0;
    double h_text = 0.0;
    double h_image = 0.0;
    double alpha_text = 0.0;
    double alpha_image = 0.0;
    double loss = 0.0;
    bool skipped = false;
    std::size_t judge_failures = 0;
    std::optional<double> val_reward;

    nlohmann::json to_json() const {
        nlohmann::json j{{"step", step},       {"mean_reward", mean_reward}, {"surviving_fraction", surviving_fraction},
                         {"h_text", h_text},   {"h_image", h_image},         {"alpha_text", alpha_text},
                         {"alpha_image", alpha_image}, {"loss", loss},       {"skipped", skipped}};
        if (judge_failures) j["judge_failures"] = judge_failures;
        if (val_reward) j["val_reward"] = *val_reward;
        return j;
    }
};

/// Mean reward of `samples` rollouts per prompt.
inline double mean_reward(const Policy& policy, const std::vector<PromptItem>& prompts, int samples, const SampleOptions& opt,
                          std::uint64_t seed, const JudgeFn& judge, int workers = 1) {
    std::vector<double> scores(prompts.size() * static_cast<std::size_t>(samples), 0.0);
    parallel_for(scores.size(), workers, [&](std::size_t idx) {
        const auto& p = prompts[idx / static_cast<std::size_t>(samples)];
        Rng rng(derive_seed(seed, "reward-probe", idx));
        const auto r = sample(policy, p.tokens, opt, rng);
        scores[idx] = judge(p.spec, parse_image(r.seq.image_tokens(), policy.vocab())).score;
    });
    double s = 0.0;
    for (double v : scores) s += v;
    return scores.empty() ? 0.0 : s / static_cast<double>(scores.size());
}

struct RlState {
    grad::AdamState adam;
    EntropyController text;
    EntropyController image;
    long step = 0;
    double best_val = -1.0;
    long best_step = -1;
};

struct RlHooks {
    std::function<void(const RlMetrics&)> on_step;
    /// Groups used for the update, after advantages are assigned.
    std::function<void(long step, const std::vector<RolloutGroup>&)> on_groups;
    std::function<void(const Policy&, const RlState&)> on_checkpoint;
    std::function<void(const Policy&, const RlState&)> on_best;
};

/// Per-step prompt selection: `rollout_batch_size` training prompts.
inline std::vector<PromptItem> step_prompts(const std::vector<PromptItem>& pool, const RlConfig& cfg, long step) {
    Rng rng(derive_seed(cfg.seed, "rl-prompts", static_cast<std::uint64_t>(step)));
    std::vector<PromptItem> out;
    for (int k = 0; k < cfg.rollout_batch_size; ++k) out.push_back(pool[rng.below(pool.size())]);
    return out;
}

/// One RL step on `policy` (which is also the old policy for this step).
/// Returns the step metrics; a batch with no surviving group changes nothing.
inline RlMetrics rl_step(Policy& policy, RlState& st, const std::vector<PromptItem>& prompts, const JudgeFn& judge,
                         const RlConfig& cfg, const Policy* reference = nullptr, const RlHooks* hooks = nullptr) {
    RlMetrics m;
    m.step = st.step + 1;
    auto groups = collect_rollouts(policy, prompts, cfg.rollouts_per_prompt,
                                   derive_seed(cfg.seed, "rl-step", static_cast<std::uint64_t>(st.step)), cfg.workers);
    const std::size_t collected = groups.size();
    m.judge_failures = assign_rewards(groups, judge, policy.vocab());

    double reward_sum = 0.0, ht = 0.0, hi = 0.0;
    std::size_t n_roll = 0, nt = 0, ni = 0;
    for (const auto& g : groups)
        for (std::size_t i = 0; i < g.size(); ++i) {
            reward_sum += g.rewards[i];
            ++n_roll;
            const auto& r = g.rollouts[i];
            for (std::size_t t = 0; t < r.phases.size(); ++t) {
                if (r.phases[t] == Phase::kText) ht += r.entropies[t], ++nt;
                if (r.phases[t] == Phase::kImage) hi += r.entropies[t], ++ni;
            }
        }
    m.mean_reward = n_roll ? reward_sum / static_cast<double>(n_roll) : 0.0;
    m.h_text = nt ? ht / static_cast<double>(nt) : 0.0;
    m.h_image = ni ? hi / static_cast<double>(ni) : 0.0;

    const auto text_lp = modality_log_probs(groups, Modality::kText);
    const auto image_lp = modality_log_probs(groups, Modality::kImage);

    auto survivors = filter_groups(std::move(groups));
    m.surviving_fraction = collected ? static_cast<double>(survivors.size()) / static_cast<double>(collected) : 0.0;
    if (survivors.size() > static_cast<std::size_t>(cfg.effective_groups())) survivors.resize(static_cast<std::size_t>(cfg.effective_groups()));

    if (survivors.empty()) {
        m.skipped = true;
        m.alpha_text = st.text.alpha();
        m.alpha_image = st.image.alpha();
        st.step += 1;
        return m;
    }
    for (auto& g : survivors) {
        compute_advantages(g);
        if (cfg.kl_coeff != 0.0) {
            if (!reference) throw config_error("MissingReference", "KL term needs a reference policy");
            g.ref_log_probs.clear();
            for (const auto& r : g.rollouts) g.ref_log_probs.push_back(reference->log_prob(r.seq));
        }
    }
    if (hooks && hooks->on_groups) hooks->on_groups(st.step + 1, survivors);

    ObjectiveOptions opt;
    opt.clip_eps = cfg.clip_eps;
    opt.kl_coeff = cfg.kl_coeff;
    opt.entropy_term = cfg.entropy_term;
    const auto backup = policy.params().tensors();
    for (int e = 0; e < cfg.inner_epochs; ++e) {
        policy.params().zero_grad();
        const double j = grpo_objective(policy, survivors, st.text, st.image, opt, true, cfg.workers);
        if (e == 0) m.loss = -j;
        bool finite = std::isfinite(j);
        for (const auto& t : policy.params().tensors())
            for (double gv : t.grad) finite = finite && std::isfinite(gv);
        if (!finite) {
            policy.params().tensors() = backup;
            throw numeric_error("NonFinite", "grpo gradient");
        }
        grad::adam_step(policy.params(), st.adam);
    }
    update_alpha(st.text, text_lp);
    update_alpha(st.image, image_lp);
    m.alpha_text = st.text.alpha();
    m.alpha_image = st.image.alpha();
    st.step += 1;
    return m;
}

inline RlState make_rl_state(const Policy& policy, const RlConfig& cfg, double target_text, double target_image) {
    RlState st;
    st.adam = grad::AdamState(policy.params(), grad::AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
    st.text = EntropyController{cfg.phi_init, target_text, cfg.lr_phi, Modality::kText};
    st.image = EntropyController{cfg.phi_init, target_image, cfg.lr_phi, Modality::kImage};
    return st;
}

struct RlResult {
    std::vector<RlMetrics> log;
    double best_val = -1.0;
    long best_step = -1;
};

/// Runs cfg.steps steps from st.step. Every `val_every` steps (and at the
/// end) the held-out reward is measured and the best policy reported.
inline RlResult train_rl(Policy& policy, RlState& st, const std::vector<PromptItem>& train_prompts,
                         const std::vector<PromptItem>& val_prompts, const JudgeFn& judge, const RlConfig& cfg,
                         const Policy* reference = nullptr, const RlHooks& hooks = {}) {
    cfg.validate();
    if (train_prompts.empty()) throw data_error("EmptyDataset", "no RL prompts");
    RlResult res;
    auto validate_now = [&](RlMetrics& m) {
        if (val_prompts.empty()) return;
        m.val_reward = mean_reward(policy, val_prompts, cfg.val_samples, SampleOptions{cfg.temperature, cfg.cfg_rollout},
                                   derive_seed(cfg.seed, "validation"), judge, cfg.workers);
        if (*m.val_reward > st.best_val) {
            st.best_val = *m.val_reward;
            st.best_step = st.step;
            if (hooks.on_best) hooks.on_best(policy, st);
        }
    };
    if (st.step == 0 && !val_prompts.empty() && st.best_step < 0) {
        RlMetrics m0;
        validate_now(m0);
    }
    while (st.step < cfg.steps) {
        auto m = rl_step(policy, st, step_prompts(train_prompts, cfg, st.step), judge, cfg, reference, &hooks);
        if ((cfg.val_every > 0 && st.step % cfg.val_every == 0) || st.step == cfg.steps) validate_now(m);
        if (hooks.on_step) hooks.on_step(m);
        if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) hooks.on_checkpoint(policy, st);
        res.log.push_back(std::move(m));
    }
    res.best_val = st.best_val;
    res.best_step = st.best_step;
    return res;
}

/// RL prompts from dataset records (their concise captions).
inline std::vector<PromptItem> prompt_items(const std::vector<DataRecord>& data, const Vocabulary& vocab) {
    std::vector<PromptItem> out;
    out.reserve(data.size());
    for (const auto& d : data) out.push_back(make_prompt_item(d.spec, vocab));
    return out;
}

/// Categories present in `data`, in enum order.
inline std::vector<Category> categories_of(const std::vector<DataRecord>& data) {
    std::vector<Category> out;
    for (auto c : kAllCategories)
        for (const auto& d : data)
            if (d.spec.category == c) {
                out.push_back(c);
                break;
            }
    return out;
}

/// Held-out validation prompts from the "val" stream; throws LeakedSeed if
/// any of their seeds appears in the training data.
inline std::vector<PromptItem> validation_prompts(std::size_t n, std::uint64_t seed, const std::vector<DataRecord>& train,
                                                  const Vocabulary& vocab) {
    const auto val = generate_dataset(n, seed, categories_of(train), vocab.world(), "val");
    std::set<std::uint64_t> seen;
    for (const auto& d : train) seen.insert(d.seed);
    for (const auto& d : val)
        if (seen.count(d.seed)) throw data_error("LeakedSeed", "validation seed overlaps training data");
    return prompt_items(val, vocab);
}

/// Resumable snapshot: parameters, optimizer moments, controllers, counters.
inline grad::Checkpoint rl_checkpoint(const Policy& policy, const RlState& st) {
    auto ck = policy_checkpoint(policy, {{"stage", "rl"},
                                         {"step", st.step},
                                         {"phi_text", st.text.phi},
                                         {"phi_image", st.image.phi},
                                         {"target_text", st.text.target},
                                         {"target_image", st.image.target},
                                         {"lr_phi", st.text.lr_phi},
                                         {"best_val", st.best_val},
                                         {"best_step", st.best_step}});
    grad::append_adam(ck, policy.params(), st.adam, "adam/");
    return ck;
}

inline void restore_rl(const grad::Checkpoint& ck, Policy& policy, RlState& st) {
    if (ck.meta.value("stage", "") != "rl") throw data_error("BadCheckpoint", "not an RL checkpoint");
    grad::restore_params(ck, policy.params());
    grad::restore_adam(ck, policy.params(), st.adam, "adam/");
    const auto& m = ck.meta;
    st.step = m.at("step").get<long>();
    st.text.phi = m.at("phi_text").get<double>();
    st.image.phi = m.at("phi_image").get<double>();
    st.text.target = m.at("target_text").get<double>();
    st.image.target = m.at("target_image").get<double>();
    st.best_val = m.at("best_val").get<double>();
    st.best_step = m.at("best_step").get<long>();
}

}  // namespace thinkgen
