#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "testkit.hpp"
#include "thinkgen/grpo.hpp"

using namespace thinkgen;

namespace {

std::shared_ptr<const Vocabulary> small_vocab() { return std::make_shared<const Vocabulary>(World::subset(4, 3, 2, 2)); }

PolicyConfig tiny() {
    PolicyConfig c;
    c.embed_dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.max_reasoning = 6;
    c.context = 40;
    c.init_std = 0.3;
    return c;
}

std::string error_code(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return "none";
}

RolloutGroup group_with(std::vector<double> rewards) {
    RolloutGroup g;
    g.rewards = std::move(rewards);
    g.rollouts.resize(g.rewards.size());
    return g;
}

std::vector<PromptItem> prompts_for(const Vocabulary& v, int n, std::uint64_t seed) {
    const auto data = generate_dataset(static_cast<std::size_t>(n), seed, {Category::kSingleObject, Category::kColors}, v.world());
    return prompt_items(data, v);
}

}  // namespace

TEST(FilterGroups, Examples) {
    std::vector<RolloutGroup> gs{group_with({1, 1, 1, 1, 1, 1, 1, 1}), group_with({0, 0, 0, 0, 0, 0, 0, 0}),
                                 group_with({1, 0, 1, 1, 0, 0, 1, 0})};
    const auto kept = filter_groups(gs);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_EQ(kept[0].rewards, (std::vector<double>{1, 0, 1, 1, 0, 0, 1, 0}));
}

TEST(Advantages, Examples) {
    auto g = group_with({1, 0, 0, 1});
    compute_advantages(g);
    EXPECT_EQ(g.advantages, (std::vector<double>{1, -1, -1, 1}));
    auto h = group_with({1, 0, 0, 0});
    compute_advantages(h);
    EXPECT_NEAR(h.advantages[0], 1.7321, 1e-4);
    for (int i = 1; i < 4; ++i) EXPECT_NEAR(h.advantages[static_cast<std::size_t>(i)], -0.5774, 1e-4);
    double s = 0;
    for (double a : h.advantages) s += a;
    EXPECT_NEAR(s, 0.0, 1e-9);
    auto d = group_with({1, 1});
    EXPECT_EQ(error_code([&] { compute_advantages(d); }), "DegenerateGroup");
}

TEST(UpdateAlpha, Examples) {
    EntropyController c{0.0, 2.0, 0.01, Modality::kText};
    const std::vector<double> lp{-1.0, -0.5, -1.5};
    EXPECT_EQ(update_alpha(c, lp), AlphaUpdate::kUpdated);
    EXPECT_NEAR(c.phi, -0.01, 1e-15);
    EXPECT_NEAR(c.alpha(), std::asin(-0.01), 1e-15);

    EntropyController fixed{0.3, 1.0, 0.01, Modality::kImage};
    const std::vector<double> at_target{-1.0, -1.0};
    update_alpha(fixed, at_target);
    EXPECT_EQ(fixed.phi, 0.3);

    EntropyController half{0.5, 1.0, 0.01, Modality::kText};
    EXPECT_NEAR(half.alpha(), std::numbers::pi / 6, 1e-12);

    EntropyController empty{0.2, 1.0, 0.01, Modality::kText};
    EXPECT_EQ(update_alpha(empty, std::vector<double>{}), AlphaUpdate::kEmptyModalityBatch);
    EXPECT_EQ(empty.phi, 0.2);

    EntropyController edge{0.999999, 0.0, 10.0, Modality::kText};
    const std::vector<double> big{-50.0};
    update_alpha(edge, big);
    EXPECT_LE(std::abs(edge.phi), EntropyController::kPhiLimit);
    EXPECT_TRUE(std::isfinite(edge.alpha()));
}

TEST(CollectRollouts, CountsDeterminismAndValidity) {
    auto v = small_vocab();
    Policy p(v, tiny(), 1);
    const auto prompts = prompts_for(*v, 8, 2);
    const auto a = collect_rollouts(p, prompts, 8, 5);
    const auto b = collect_rollouts(p, prompts, 8, 5, 3);
    std::size_t n = 0;
    for (std::size_t k = 0; k < a.size(); ++k)
        for (std::size_t i = 0; i < a[k].size(); ++i) {
            ++n;
            EXPECT_FALSE(validate_sequence(a[k].rollouts[i].seq, *v));
            EXPECT_EQ(a[k].rollouts[i].seq, b[k].rollouts[i].seq);
        }
    EXPECT_EQ(n, 64u);
    EXPECT_EQ(error_code([&] { collect_rollouts(p, prompts, 1, 5); }), "BadGroupSize");
}

TEST(AssignRewards, OracleAndDroppedGroups) {
    auto v = small_vocab();
    Policy p(v, tiny(), 1);
    auto groups = collect_rollouts(p, prompts_for(*v, 4, 3), 4, 1);
    auto g2 = groups;
    EXPECT_EQ(assign_rewards(groups, make_oracle_judge(), *v), 0u);
    for (const auto& g : groups)
        for (std::size_t i = 0; i < g.size(); ++i)
            EXPECT_EQ(g.rewards[i], oracle_judge(g.prompt.spec, parse_image(g.rollouts[i].seq.image_tokens(), *v)).score);

    int calls = 0;
    JudgeFn flaky = [&](const PromptSpec& s, const SceneSpec& sc) {
        if (++calls == 6) throw data_error("JudgeFailure", "timeout");
        return oracle_judge(s, sc);
    };
    EXPECT_EQ(assign_rewards(g2, flaky, *v), 1u);
    EXPECT_EQ(g2.size(), 3u);
}

TEST(ImportanceRatios, IdenticalPoliciesGiveOne) {
    auto v = small_vocab();
    Policy p(v, tiny(), 1);
    const auto groups = collect_rollouts(p, prompts_for(*v, 3, 1), 3, 2);
    for (const auto& g : groups)
        for (const auto& r : importance_ratios(p, g))
            for (double x : r) EXPECT_EQ(x, 1.0);
}

TEST(ImportanceRatios, LogDifferenceOfLn2GivesTwo) {
    auto v = small_vocab();
    Policy p(v, tiny(), 1);
    auto groups = collect_rollouts(p, prompts_for(*v, 1, 1), 2, 2);
    auto& r = groups[0].rollouts[0];
    r.log_probs.back() -= std::log(2.0);
    const auto ratios = importance_ratios(p, groups[0]);
    EXPECT_NEAR(ratios[0].back(), 2.0, 1e-12);
}

TEST(GrpoObjective, ZeroAtOldPolicyWithoutEntropy) {
    auto v = small_vocab();
    Policy p(v, tiny(), 1);
    auto groups = collect_rollouts(p, prompts_for(*v, 1, 1), 2, 2);
    groups[0].rewards = {1, 0};
    compute_advantages(groups[0]);
    EntropyController t{0.0, 1.0, 0.01, Modality::kText}, im{0.0, 1.0, 0.01, Modality::kImage};
    // per-token mean of A_i * 1, averaged over the two sequences: (+1 - 1) / 2
    EXPECT_NEAR(grpo_objective(p, groups, t, im, ObjectiveOptions{}, false), 0.0, 1e-15);
}

TEST(GrpoObjective, GradientMatchesFiniteDifferences) {
    auto v = small_vocab();
    Policy old(v, tiny(), 1);
    auto groups = collect_rollouts(old, prompts_for(*v, 2, 1), 3, 4);
    for (auto& g : groups) {
        g.rewards = {1, 0, 0};
        compute_advantages(g);
    }
    Policy p = old;
    Rng rng(3);
    for (auto& t : p.params().tensors())
        for (auto& x : t.values) x += 0.02 * rng.normal();
    EntropyController t{0.3, 1.0, 0.01, Modality::kText}, im{-0.2, 1.0, 0.01, Modality::kImage};
    ObjectiveOptions opt;
    opt.clip_eps = 0.2;
    p.params().zero_grad();
    grpo_objective(p, groups, t, im, opt, true);
    // grads hold d(-J)
    auto f = [&] { return -grpo_objective(p, groups, t, im, opt, false); };
    const auto rep = testkit::fd_compare(p.params(), f, 1e-5, 1e-8, 10);
    EXPECT_LE(rep.max_rel, 1e-5) << rep.worst;
}

TEST(RlConfig, Validation) {
    RlConfig c;
    c.kl_coeff = 0.1;
    EXPECT_EQ(error_code([&] { c.validate(); }), "KLNotAllowed");
    c.allow_kl = true;
    EXPECT_NO_THROW(c.validate());
    RlConfig d;
    d.rollouts_per_prompt = 1;
    EXPECT_EQ(error_code([&] { d.validate(); }), "BadRlConfig");
    RlConfig e;
    e.cfg_rollout = 5.0;
    EXPECT_EQ(error_code([&] { e.validate(); }), "BadRlConfig");
    EXPECT_EQ(RlConfig{}.effective_groups(), 4);
}

TEST(TrainRl, DeterministicLogs) {
    auto v = small_vocab();
    const auto train = prompts_for(*v, 16, 1);
    const auto val = prompts_for(*v, 4, 99);
    RlConfig cfg;
    cfg.steps = 3;
    cfg.rollouts_per_prompt = 4;
    cfg.rollout_batch_size = 4;
    cfg.val_every = 2;
    cfg.val_samples = 1;
    cfg.seed = 5;
    auto run = [&](int workers) {
        Policy p(v, tiny(), 2);
        cfg.workers = workers;
        auto st = make_rl_state(p, cfg, 1.5, 1.0);
        std::string log;
        RlHooks h;
        h.on_step = [&](const RlMetrics& m) { log += m.to_json().dump() + "\n"; };
        train_rl(p, st, train, val, make_oracle_judge(), cfg, nullptr, h);
        return log;
    };
    const auto a = run(1);
    EXPECT_EQ(a, run(1));
    EXPECT_EQ(a, run(2));
    EXPECT_NE(a.find("val_reward"), std::string::npos);
}

TEST(TrainRl, CheckpointResumeMatches) {
    auto v = small_vocab();
    const auto train = prompts_for(*v, 16, 1);
    RlConfig cfg;
    cfg.steps = 4;
    cfg.rollouts_per_prompt = 4;
    cfg.rollout_batch_size = 4;
    cfg.seed = 8;
    cfg.checkpoint_every = 2;
    Policy full(v, tiny(), 2);
    auto s1 = make_rl_state(full, cfg, 1.5, 1.0);
    grad::Checkpoint mid;
    RlHooks h;
    h.on_checkpoint = [&](const Policy& p, const RlState& st) {
        if (st.step == 2) mid = rl_checkpoint(p, st);
    };
    train_rl(full, s1, train, {}, make_oracle_judge(), cfg, nullptr, h);

    Policy resumed = policy_from_checkpoint(mid, v);
    auto s2 = make_rl_state(resumed, cfg, 0.0, 0.0);
    restore_rl(mid, resumed, s2);
    EXPECT_EQ(s2.step, 2);
    train_rl(resumed, s2, train, {}, make_oracle_judge(), cfg);
    EXPECT_EQ(s1.text.phi, s2.text.phi);
    EXPECT_EQ(s1.image.phi, s2.image.phi);
    for (std::size_t i = 0; i < full.params().tensors().size(); ++i)
        EXPECT_EQ(full.params().tensors()[i].values, resumed.params().tensors()[i].values);
}

TEST(ValidationPrompts, DisjointFromTraining) {
    auto v = small_vocab();
    const auto data = generate_dataset(50, 4, {Category::kColors}, v->world());
    EXPECT_EQ(validation_prompts(10, 4, data, *v).size(), 10u);
    auto leaked = data;
    leaked[0].seed = example_seed(4, "val", 3);
    EXPECT_EQ(error_code([&] { validation_prompts(10, 4, leaked, *v); }), "LeakedSeed");
}
