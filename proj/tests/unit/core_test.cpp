#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "testkit.hpp"
#include "thinkgen/config.hpp"
#include "thinkgen/corelex.hpp"
#include "thinkgen/gradcore.hpp"
#include "thinkgen/judge.hpp"

using namespace thinkgen;
namespace g = thinkgen::grad;

namespace {

InterleavedSequence well_formed(const Vocabulary& v, int cells) {
    InterleavedSequence s;
    s.tokens = {v.id("a"), v.id("red"), v.id("circle"), v.id("calm"), v.specials().img_start};
    for (int i = 0; i < cells; ++i) s.tokens.push_back(v.empty_cell());
    s.prompt_len = 3;
    s.reasoning_len = 1;
    s.image_len = cells;
    return s;
}

}  // namespace

// -- corelex -------------------------------------------------------------------

TEST(Tokenize, WordLookup) {
    Vocabulary v;
    EXPECT_EQ(tokenize("a red circle", v), (std::vector<TokenId>{v.id("a"), v.id("red"), v.id("circle")}));
    EXPECT_TRUE(tokenize("", v).empty());
}

TEST(Tokenize, UnknownWord) {
    Vocabulary v;
    try {
        tokenize("a zorp", v);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "UnknownWord");
        EXPECT_NE(std::string(e.what()).find("zorp"), std::string::npos);
    }
}

TEST(Tokenize, SpecialsAreNotWords) {
    Vocabulary v;
    EXPECT_THROW(tokenize("<img>", v), Error);
    EXPECT_EQ(detokenize(tokenize("A Red, circle!", v), v), "a red circle");
}

TEST(Vocabulary, ImageTokenLayout) {
    Vocabulary v;
    EXPECT_EQ(v.num_image_tokens(), 49);
    EXPECT_TRUE(v.is_image(v.empty_cell()));
    EXPECT_FALSE(v.cell_of(v.empty_cell()));
    EXPECT_FALSE(v.cell_of(v.id("red")));
    for (int o = 0; o < 8; ++o)
        for (int c = 0; c < 6; ++c) {
            const auto oc = v.cell_of(v.cell_token(o, c));
            ASSERT_TRUE(oc);
            EXPECT_EQ(oc->first, o);
            EXPECT_EQ(oc->second, c);
        }
    Vocabulary small(World::subset(4, 4, 4, 4));
    EXPECT_EQ(small.num_image_tokens(), 17);
}

TEST(ValidateSequence, WellFormed) {
    Vocabulary v;
    EXPECT_FALSE(validate_sequence(well_formed(v, 9), v));
}

TEST(ValidateSequence, WrongImageLength) {
    Vocabulary v;
    auto bad = validate_sequence(well_formed(v, 8), v);
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->invariant, "image_len");
}

TEST(ValidateSequence, TextInImageSpan) {
    Vocabulary v;
    auto s = well_formed(v, 9);
    s.tokens[7] = v.id("red");
    auto bad = validate_sequence(s, v);
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->invariant, "modality grammar");
}

TEST(ValidateSequence, MissingMarkerAndEotPlacement) {
    Vocabulary v;
    auto s = well_formed(v, 9);
    s.tokens[4] = v.id("calm");
    ASSERT_TRUE(validate_sequence(s, v));
    EXPECT_EQ(validate_sequence(s, v)->invariant, "img_start");

    auto eot_last = well_formed(v, 9);
    eot_last.tokens[3] = v.specials().eot;
    EXPECT_FALSE(validate_sequence(eot_last, v));

    auto eot_mid = well_formed(v, 9);
    eot_mid.tokens.insert(eot_mid.tokens.begin() + 3, v.specials().eot);
    eot_mid.reasoning_len = 2;
    ASSERT_TRUE(validate_sequence(eot_mid, v));
    EXPECT_EQ(validate_sequence(eot_mid, v)->invariant, "modality grammar");
}

// -- gradcore ------------------------------------------------------------------

TEST(GradOps, SoftmaxSymmetric) {
    g::Graph gr;
    auto s = g::softmax_rows(gr.constant(1, 3, {0, 0, 0}));
    for (double v : s.value()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(GradOps, ClipOutsideHasZeroGradient) {
    g::Tensor x("x", 1, 1, 1.5);
    g::Graph gr;
    auto c = g::clip(gr.param(x), 0.8, 1.2);
    EXPECT_DOUBLE_EQ(c.item(), 1.2);
    gr.backward(g::sum(c));
    EXPECT_EQ(x.grad[0], 0.0);
}

TEST(GradOps, SumGivesOnes) {
    g::Tensor x("x", 2, 3);
    for (std::size_t i = 0; i < x.size(); ++i) x.values[i] = 0.3 * static_cast<double>(i) - 1.0;
    g::Graph gr;
    gr.backward(g::sum(gr.param(x)));
    for (double v : x.grad) EXPECT_EQ(v, 1.0);
}

TEST(GradOps, MeanSquareClosedForm) {
    g::Tensor x("x", 1, 5);
    x.values = {1, -2, 0.5, 3, -0.25};
    g::Graph gr;
    gr.backward(g::mean(g::square(gr.param(x))));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(x.grad[i], 2.0 * x.values[i] / 5.0, 1e-15);
}

TEST(GradOps, BackwardAccumulates) {
    g::Tensor x("x", 1, 2, 1.0);
    for (int k = 0; k < 2; ++k) {
        g::Graph gr;
        gr.backward(g::sum(g::scale(gr.param(x), 3.0)));
    }
    EXPECT_EQ(x.grad[0], 6.0);
}

TEST(GradOps, NonFiniteRaises) {
    g::Graph gr;
    EXPECT_THROW(g::log(gr.constant(1, 1, {-1.0})), Error);
    EXPECT_THROW(g::exp(gr.constant(1, 1, {1e6})), Error);
}

TEST(GradOps, GatherSentinelsGiveZeros) {
    g::Tensor t("t", 3, 2);
    t.values = {1, 2, 3, 4, 5, 6};
    g::Graph gr;
    auto p = gr.param(t);
    auto rows = g::gather_rows(p, {2, -1, 0});
    EXPECT_EQ(rows.value(), (std::vector<double>{5, 6, 0, 0, 1, 2}));
    auto cols = g::gather_cols(p, {1, -1});
    EXPECT_EQ(cols.value(), (std::vector<double>{2, 0, 4, 0, 6, 0}));
    gr.backward(g::add(g::sum(rows), g::sum(cols)));
    EXPECT_EQ(t.grad, (std::vector<double>{1, 2, 0, 1, 1, 2}));
}

TEST(GradOps, MaskedLogSoftmaxExcludesEntries) {
    g::Tensor x("x", 1, 3);
    x.values = {0.2, 5.0, -0.1};
    g::Graph gr;
    auto lp = g::log_softmax_rows(gr.param(x), {1, 0, 1});
    EXPECT_EQ(lp.value()[1], g::kMasked);
    EXPECT_NEAR(std::exp(lp.value()[0]) + std::exp(lp.value()[2]), 1.0, 1e-15);
    gr.backward(g::pick(lp, {0}));
    EXPECT_EQ(x.grad[1], 0.0);
}

TEST(GradOps, FiniteDifferencesOnComposite) {
    g::ParamSet ps;
    ps.add("a", 3, 4);
    ps.add("w", 4, 4);
    ps.add("gain", 1, 4, 1.0);
    ps.add("bias", 1, 4);
    auto &a = ps.get("a"), &w = ps.get("w"), &gain = ps.get("gain"), &bias = ps.get("bias");
    Rng rng(5);
    for (auto* t : {&a, &w, &bias})
        for (auto& v : t->values) v = rng.normal();
    auto f = [&](bool back) {
        g::Graph gr;
        auto h = g::layer_norm(g::matmul(gr.param(a), gr.param(w)), gr.param(gain), gr.param(bias));
        auto root = g::add(g::sum(g::entropy_rows(h)), g::mean(g::gelu(h)));
        if (back) gr.backward(root);
        return root.item();
    };
    ps.zero_grad();
    f(true);
    auto rep = testkit::fd_compare(ps, [&] { return f(false); });
    EXPECT_LT(rep.max_rel, 1e-6) << rep.worst;
}

TEST(Adam, ZeroGradientIsFixedPoint) {
    g::ParamSet ps;
    auto& w = ps.add("w", 1, 3, 0.7);
    g::AdamState st(ps, g::AdamConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
    g::adam_step(ps, st);
    for (double v : w.values) EXPECT_EQ(v, 0.7);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    g::ParamSet ps;
    auto& w = ps.add("w", 1, 1, 0.0);
    w.grad[0] = 4.2;
    g::AdamState st(ps, g::AdamConfig{0.05, 0.9, 0.999, 1e-8, 0.0});
    g::adam_step(ps, st);
    EXPECT_NEAR(w.values[0], -0.05, 1e-9);
}

TEST(Adam, QuadraticConverges) {
    g::ParamSet ps;
    auto& w = ps.add("w", 1, 1, 0.0);
    g::AdamState st(ps, g::AdamConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 100; ++i) {
        w.grad[0] = 2.0 * (w.values[0] - 3.0);
        g::adam_step(ps, st);
    }
    EXPECT_LT(std::abs(w.values[0] - 3.0), 0.5);
}

TEST(Checkpoint, RoundTripIsExact) {
    g::ParamSet ps;
    auto& w = ps.add("w", 2, 2);
    w.values = {0.1, -1e-300, 3.141592653589793, -0.0};
    g::AdamState st(ps, g::AdamConfig{});
    st.m[0] = {1, 2, 3, 4};
    st.step = 17;
    g::Checkpoint ck;
    ck.meta["note"] = "x";
    g::append_params(ck, ps);
    g::append_adam(ck, ps, st, "adam/");
    const auto path = (std::filesystem::temp_directory_path() / "thinkgen_ck_test.ckpt").string();
    g::save_checkpoint(path, ck);
    const auto back = g::load_checkpoint(path);
    std::remove(path.c_str());

    g::ParamSet ps2;
    ps2.add("w", 2, 2);
    g::AdamState st2(ps2, g::AdamConfig{});
    g::restore_params(back, ps2);
    g::restore_adam(back, ps2, st2, "adam/");
    EXPECT_EQ(ps2.get("w").values, w.values);
    EXPECT_EQ(st2.m[0], st.m[0]);
    EXPECT_EQ(st2.step, 17);
    EXPECT_EQ(back.meta.at("note"), "x");
}

TEST(Checkpoint, MissingFile) {
    EXPECT_THROW(g::load_checkpoint("/nonexistent/dir/x.ckpt"), Error);
}

// -- config --------------------------------------------------------------------

TEST(KvConfig, ParsesTypedValues) {
    auto kv = KvConfig::parse_string("# c\nlr = 0.5\nsteps=10 # trailing\nflag = true\nname = hi there\n");
    EXPECT_DOUBLE_EQ(kv.get("lr", 0.0), 0.5);
    EXPECT_EQ(kv.get("steps", 0), 10);
    EXPECT_TRUE(kv.get("flag", false));
    EXPECT_EQ(kv.get("name", ""), "hi there");
    EXPECT_EQ(kv.get("absent", 7), 7);
}

TEST(KvConfig, Errors) {
    auto code = [](auto&& fn) {
        try {
            fn();
        } catch (const Error& e) {
            return e.code();
        }
        return std::string("none");
    };
    EXPECT_EQ(code([] { KvConfig::parse_string("novalue\n"); }), "ParseError");
    EXPECT_EQ(code([] { KvConfig::parse_string("a=1\na=2\n"); }), "ParseError");
    EXPECT_EQ(code([] { KvConfig::parse_string("a = x\n").get("a", 1.0); }), "BadValue");
    EXPECT_EQ(code([] { KvConfig::parse_string("a = 1.5\n").get("a", 1); }), "BadValue");
    EXPECT_EQ(code([] { KvConfig::parse_string("zz = 1\n").check_keys({"a"}); }), "UnknownKey");
    EXPECT_EQ(code([] { KvConfig::load("/nonexistent.kv"); }), "ConfigNotFound");
}

// -- seeds ---------------------------------------------------------------------

TEST(Seeds, StreamsAreDistinctAndStable) {
    EXPECT_EQ(derive_seed(1, "a", 0), derive_seed(1, "a", 0));
    EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
    EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
    EXPECT_NE(derive_seed(1, "a", 0), derive_seed(2, "a", 0));
}

TEST(ParallelFor, CoversEveryIndexOnce) {
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) EXPECT_EQ(h, 1);
}

// -- testkit self-checks ---------------------------------------------------------

TEST(Testkit, MannKendallDetectsTrends) {
    std::vector<double> up, flat;
    for (int i = 0; i < 30; ++i) {
        up.push_back(i + 0.5 * std::sin(i));
        flat.push_back(std::sin(7.0 * i));
    }
    EXPECT_LT(testkit::mann_kendall(up).p_increasing, 1e-6);
    EXPECT_GT(testkit::mann_kendall(flat).p_increasing, 0.01);
    EXPECT_GT(testkit::mann_kendall(flat).p_decreasing, 0.01);
}

TEST(Testkit, SceneIndexRoundTrip) {
    const World w = World::subset(2, 2, 2, 2);
    Vocabulary v(w);
    const long n = testkit::scene_count(w);
    EXPECT_EQ(n, 625);
    for (long i = 0; i < n; ++i) {
        const auto s = testkit::scene_from_index(i, w);
        EXPECT_EQ(parse_image(encode_scene(s, v), v), s);
    }
}
