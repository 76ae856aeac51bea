#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <boost/math/distributions/binomial.hpp>

#include "testkit.hpp"
#include "thinkgen/evalbench.hpp"
#include "thinkgen/judge.hpp"
#include "thinkgen/scenegen.hpp"

using namespace thinkgen;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string golden(const std::string& name) { return read_file(std::string(THINKGEN_TEST_DATA_DIR) + "/" + name); }

PromptSpec parse(const std::string& s, const World& w = World{}) {
    auto p = parse_prompt(s, w);
    if (!p) throw std::runtime_error("unparsed: " + s);
    return *p;
}

SceneSpec scene_with(std::initializer_list<std::tuple<int, int, int, int>> cells, int rows = 3, int cols = 3) {
    SceneSpec s(rows, cols);
    for (auto [r, c, o, col] : cells) s.at(r, c) = Cell{o, col};
    return s;
}

std::string error_code(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return "none";
}

// circle 0, square 1, star 3; red 0, blue 1, green 2
constexpr int kCircle = 0, kSquare = 1, kStar = 3, kRed = 0, kBlue = 1, kGreen = 2;

}  // namespace

// -- prompts and scenes ----------------------------------------------------------

TEST(GenPrompt, SurfacesParseBackToTheirConstraints) {
    const World w;
    for (Category c : kAllCategories)
        for (std::uint64_t s = 0; s < 200; ++s) {
            Rng rng(derive_seed(s, category_name(c)));
            const auto spec = gen_prompt(c, w, rng);
            EXPECT_EQ(spec.category, c);
            const auto back = parse_prompt(spec.surface, w);
            ASSERT_TRUE(back) << spec.surface;
            EXPECT_EQ(canonical_constraints(*back), canonical_constraints(spec)) << spec.surface;
            for (const auto& para : augment(spec, w).paraphrases) {
                const auto p = parse_prompt(para, w);
                ASSERT_TRUE(p) << para;
                EXPECT_EQ(canonical_constraints(*p), canonical_constraints(spec)) << para;
            }
        }
}

TEST(GenPrompt, CountingIsDeterministicUnderSeed) {
    const World w;
    Rng a(42), b(42);
    const auto s1 = gen_prompt(Category::kCounting, w, a);
    const auto s2 = gen_prompt(Category::kCounting, w, b);
    EXPECT_EQ(s1, s2);
    ASSERT_EQ(s1.constraints.size(), 1u);
    ASSERT_TRUE(s1.constraints[0].count);
    EXPECT_GE(*s1.constraints[0].count, 1);
    EXPECT_LE(*s1.constraints[0].count, 4);
    EXPECT_EQ(parse(s1.surface).constraints, s1.constraints);
}

TEST(RealizeScene, SatisfiesItsSpec) {
    const World w;
    for (Category c : kAllCategories)
        for (std::uint64_t s = 0; s < 300; ++s) {
            Rng rng(derive_seed(s, "scene", static_cast<std::uint64_t>(c)));
            const auto spec = gen_prompt(c, w, rng);
            const auto scene = realize_scene(spec, w, rng);
            EXPECT_EQ(oracle_judge(spec, scene).score, 1) << spec.surface;
            EXPECT_TRUE(testkit::brute_satisfies(spec, scene)) << spec.surface;
        }
}

TEST(RealizeScene, ExactCountAndRelation) {
    const World w;
    Rng rng(3);
    const auto two = parse("two blue squares");
    const auto scene = realize_scene(two, w, rng);
    int n = 0;
    for (const auto& c : scene.cells) n += c && c->object == kSquare && c->color == kBlue;
    EXPECT_EQ(n, 2);

    const auto left = parse("a red circle left of a blue square");
    for (int k = 0; k < 50; ++k) {
        const auto s = realize_scene(left, w, rng);
        double ca = 0, cb = 0;
        for (int i = 0; i < 9; ++i) {
            const auto& c = s.cells[static_cast<std::size_t>(i)];
            if (c && c->object == kCircle) ca = i % 3;
            if (c && c->object == kSquare) cb = i % 3;
        }
        EXPECT_LT(ca, cb);
    }
}

TEST(RealizeScene, UnsatisfiableSpec) {
    const World w = World::subset(8, 6, 1, 2);
    PromptSpec s;
    s.category = Category::kCounting;
    s.constraints.push_back(Constraint{0, std::nullopt, 3});
    s.surface = "three circles";
    Rng rng(1);
    EXPECT_EQ(error_code([&] { realize_scene(s, w, rng); }), "Unsatisfiable");
}

TEST(RenderDetailed, GoldenCaption) {
    const World w;
    auto expected = golden("detailed_caption.txt");
    expected.pop_back();  // trailing newline
    EXPECT_EQ(render_detailed(parse("a red circle"), w), expected);
    EXPECT_EQ(render_detailed(parse("a red circle"), w), render_detailed(parse("the image shows a red circle"), w));
}

TEST(Augment, ObjectPromptsAndTags) {
    const World w;
    EXPECT_EQ(augment(parse("two blue squares"), w).object_prompts, std::vector<std::string>{"two blue squares"});
    const auto tags = augment(parse("a red circle left of a blue square"), w).tags;
    for (const char* t : {"red", "circle", "blue", "square", "left"})
        EXPECT_NE(std::find(tags.begin(), tags.end(), t), tags.end()) << t;
    EXPECT_GE(tags.size(), 5u);
    EXPECT_LE(tags.size(), 8u);
}

TEST(Dataset, RoundTripAndDeterminism) {
    const World w;
    const auto dir = fs::temp_directory_path() / "thinkgen_data_test";
    fs::create_directories(dir);
    const auto p1 = (dir / "a.jsonl").string(), p2 = (dir / "b.jsonl").string();
    const std::vector<Category> cats(kAllCategories.begin(), kAllCategories.end());
    emit_dataset(100, 9, p1, cats, w);
    emit_dataset(100, 9, p2, cats, w);
    EXPECT_EQ(read_file(p1), read_file(p2));
    const auto back = load_dataset(p1, w);
    EXPECT_EQ(back, generate_dataset(100, 9, cats, w));

    {
        std::ofstream f(p2, std::ios::app);
        f << "{not json\n";
    }
    try {
        load_dataset(p2, w);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("101"), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}

TEST(Dataset, StreamsDoNotOverlap) {
    std::set<std::uint64_t> data;
    for (std::size_t i = 0; i < 2000; ++i) data.insert(example_seed(7, "data", i));
    for (std::size_t i = 0; i < 2000; ++i) {
        EXPECT_FALSE(data.count(example_seed(7, "val", i)));
        EXPECT_FALSE(data.count(eval_prompt_seed(7, Category::kColors, i)));
    }
}

// -- judge ---------------------------------------------------------------------

TEST(ParseImage, EmptyAndErrors) {
    Vocabulary v;
    std::vector<TokenId> empty(9, v.empty_cell());
    const auto s = parse_image(empty, v);
    for (const auto& c : s.cells) EXPECT_FALSE(c);
    auto bad = empty;
    bad[4] = v.id("red");
    EXPECT_EQ(error_code([&] { parse_image(bad, v); }), "BadModality");
    bad.pop_back();
    EXPECT_EQ(error_code([&] { parse_image(bad, v); }), "BadModality");
}

TEST(ParseImage, ExhaustiveRoundTripOnSmallWorld) {
    const World w = World::subset(3, 3, 2, 2);
    Vocabulary v(w);
    for (long i = 0; i < testkit::scene_count(w); ++i) {
        const auto s = testkit::scene_from_index(i, w);
        ASSERT_EQ(parse_image(encode_scene(s, v), v), s);
    }
}

TEST(OracleJudge, Examples) {
    const auto red_circle = parse("a red circle");
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) EXPECT_EQ(oracle_judge(red_circle, scene_with({{r, c, kCircle, kRed}})).score, 1);
    EXPECT_EQ(oracle_judge(red_circle, scene_with({{0, 0, kCircle, kBlue}})).score, 0);

    const auto two_blue = parse("two blue squares");
    EXPECT_EQ(oracle_judge(two_blue, scene_with({{0, 0, kSquare, kBlue}, {1, 1, kSquare, kBlue}})).score, 1);
    EXPECT_EQ(oracle_judge(two_blue, scene_with({{0, 0, kSquare, kBlue}, {1, 1, kSquare, kBlue}, {2, 2, kSquare, kBlue}})).score, 0);
    EXPECT_EQ(oracle_judge(two_blue, scene_with({{0, 0, kSquare, kBlue}, {1, 1, kSquare, kBlue}, {2, 2, kSquare, kRed}})).score, 0);

    const auto left = parse("a red circle left of a blue square");
    EXPECT_EQ(oracle_judge(left, scene_with({{0, 0, kCircle, kRed}, {2, 1, kSquare, kBlue}})).score, 1);
    EXPECT_EQ(oracle_judge(left, scene_with({{0, 1, kCircle, kRed}, {2, 1, kSquare, kBlue}})).score, 0);  // tie
    EXPECT_EQ(oracle_judge(left, scene_with({{0, 2, kCircle, kRed}, {2, 1, kSquare, kBlue}})).score, 0);
}

TEST(OracleJudge, WrongColorScoresZero) {
    const auto spec = parse("a red circle and a blue square");
    EXPECT_EQ(oracle_judge(spec, scene_with({{0, 0, kCircle, kRed}, {1, 1, kSquare, kBlue}})).score, 1);
    EXPECT_EQ(oracle_judge(spec, scene_with({{0, 0, kCircle, kRed}, {1, 1, kSquare, kGreen}})).score, 0);
}

TEST(ParseBoxed, Classes) {
    EXPECT_EQ(parse_boxed("...the image matches. \\boxed{1}"), 1);
    EXPECT_EQ(parse_boxed("\\boxed{1} no wait \\boxed{0}"), 0);
    EXPECT_EQ(error_code([] { parse_boxed("\\boxed{2}"); }), "BadBox");
    EXPECT_EQ(error_code([] { parse_boxed("reasoning only, no box"); }), "NoBox");
}

TEST(RemoteJudge, RequestBodyMatchesGolden) {
    const World w;
    const auto body = remote_request_body("a red circle left of a blue square",
                                          scene_with({{0, 0, kCircle, kRed}, {1, 2, kSquare, kBlue}, {2, 1, kStar, kGreen}}), w);
    EXPECT_EQ(body, golden("reward_request.json"));
    EXPECT_NE(body.find("Be extremly strict and precise"), std::string::npos);
}

namespace {

/// Local test double for a VLM rewarder.
class MockRewarder {
   public:
    explicit MockRewarder(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Post("/judge", std::move(handler));
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~MockRewarder() {
        server_.stop();
        thread_.join();
    }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/judge"; }

   private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

}  // namespace

TEST(RemoteJudge, HappyPathAndFailures) {
    const World w;
    std::string last_body;
    MockRewarder ok([&](const httplib::Request& req, httplib::Response& res) {
        last_body = req.body;
        res.set_content(nlohmann::json{{"text", "the scene has one red circle \\boxed{1}"}}.dump(), "application/json");
    });
    RemoteJudge judge(RemoteJudgeOptions{ok.endpoint(), 2000, 2}, w);
    const auto scene = scene_with({{0, 0, kCircle, kRed}});
    const auto j = judge("a red circle", scene);
    EXPECT_EQ(j.score, 1);
    EXPECT_EQ(j.source, JudgeSource::kRemote);
    EXPECT_EQ(last_body, remote_request_body("a red circle", scene, w));

    MockRewarder prose([](const httplib::Request&, httplib::Response& res) {
        res.set_content(nlohmann::json{{"text", "looks fine to me"}}.dump(), "application/json");
    });
    RemoteJudge j2(RemoteJudgeOptions{prose.endpoint(), 2000, 1}, w);
    try {
        j2("a red circle", scene);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "JudgeFailure");
        EXPECT_NE(std::string(e.what()).find("NoBox"), std::string::npos);
    }

    MockRewarder down([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
    RemoteJudge j3(RemoteJudgeOptions{down.endpoint(), 2000, 1}, w);
    EXPECT_EQ(error_code([&] { j3("a red circle", scene); }), "JudgeFailure");

    RemoteJudge j4(RemoteJudgeOptions{"http://127.0.0.1:1/judge", 500, 1}, w);
    EXPECT_EQ(error_code([&] { j4("a red circle", scene); }), "JudgeFailure");
}

TEST(RemoteJudge, BoundsConcurrentRequests) {
    std::atomic<int> live{0}, peak{0};
    MockRewarder slow([&](const httplib::Request&, httplib::Response& res) {
        const int now = ++live;
        int p = peak.load();
        while (now > p && !peak.compare_exchange_weak(p, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(30));
        --live;
        res.set_content(nlohmann::json{{"text", "\\boxed{0}"}}.dump(), "application/json");
    });
    auto client = std::make_shared<RemoteJudge>(RemoteJudgeOptions{slow.endpoint(), 5000, 2}, World{});
    const auto judge = make_remote_judge(client);
    const auto spec = parse("a red circle");
    parallel_for(8, 8, [&](std::size_t) { EXPECT_EQ(judge(spec, SceneSpec(3, 3)).score, 0); });
    EXPECT_LE(peak.load(), 2);
}

// -- evalbench -----------------------------------------------------------------

TEST(WordFrequency, HandCount) {
    const auto out = word_frequency({"a calm scene", "a calm day"});
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[0], (WordStat{"calm", 1.0, 1.0}));
    EXPECT_EQ(out[1], (WordStat{"day", 0.5, 0.5}));
    EXPECT_EQ(out[2], (WordStat{"scene", 0.5, 0.5}));
    EXPECT_TRUE(word_frequency({}).empty());
    EXPECT_TRUE(word_frequency({"an apple and a pear"}, 0.2).size() == 2);
}

TEST(EvalReport, JsonRoundTripAndTable) {
    EvalReport r;
    r.categories = {{Category::kColors, 0.25, 8}, {Category::kPosition, 1.0, 4}};
    r.overall = 0.625;
    r.config.seed = 3;
    r.config.categories = {Category::kColors, Category::kPosition};
    const auto path = (fs::temp_directory_path() / "thinkgen_report.json").string();
    write_report(r, path);
    EXPECT_EQ(load_report(path), r);
    const auto table = read_file(path + ".txt");
    EXPECT_NE(table.find("COLORS"), std::string::npos);
    EXPECT_NE(table.find("OVERALL"), std::string::npos);
    std::remove(path.c_str());
    std::remove((path + ".txt").c_str());
}

TEST(GenEvalMini, DegeneratePerfectPolicyScoresOne) {
    // a policy whose image logits strongly prefer "red circle" in every cell
    auto vocab = std::make_shared<const Vocabulary>(World{});
    PolicyConfig pc;
    pc.embed_dim = 8;
    pc.layers = 1;
    Policy p(vocab, pc, 1);
    p.zero_output();
    p.params().get("out.b").values[static_cast<std::size_t>(vocab->cell_token(kCircle, kRed))] = 60.0;
    EvalConfig cfg;
    cfg.categories = {Category::kSingleObject};
    cfg.prompts_per_category = 3;
    cfg.samples_per_prompt = 2;
    // judged against the exact prompt "a red circle"
    const auto judge = [](const PromptSpec&, const SceneSpec& s) { return oracle_judge(parse("a red circle"), s); };
    EXPECT_DOUBLE_EQ(run_geneval_mini(p, cfg, judge).overall, 1.0);
}

TEST(GenEvalMini, UniformPolicyMatchesChanceRate) {
    // P(at least one of 9 cells shows the object) with 6 of 49 image tokens per cell
    const double chance = 1.0 - std::pow(1.0 - 6.0 / 49.0, 9);
    auto vocab = std::make_shared<const Vocabulary>(World{});
    PolicyConfig pc;
    pc.embed_dim = 8;
    pc.layers = 1;
    Policy p(vocab, pc, 2);
    p.zero_output();
    EvalConfig cfg;
    cfg.categories = {Category::kSingleObject};
    cfg.prompts_per_category = 100;
    cfg.samples_per_prompt = 8;
    cfg.cfg_scale = 1.0;
    const auto rep = run_geneval_mini(p, cfg, make_oracle_judge());
    const int n = rep.categories[0].samples;
    const int k = static_cast<int>(std::lround(rep.categories[0].score * n));
    // two-sided exact binomial test at 1e-3
    boost::math::binomial_distribution<> bin(n, chance);
    const double lo = boost::math::cdf(bin, k), hi = boost::math::cdf(boost::math::complement(bin, k - 1));
    EXPECT_GT(2.0 * std::min(lo, hi), 1e-3) << "score " << rep.categories[0].score << " chance " << chance;
}

TEST(GenEvalMini, DeterministicAndRejectsLeaks) {
    auto vocab = std::make_shared<const Vocabulary>(World{});
    PolicyConfig pc;
    pc.embed_dim = 8;
    pc.layers = 1;
    Policy p(vocab, pc, 3);
    EvalConfig cfg;
    cfg.prompts_per_category = 3;
    cfg.samples_per_prompt = 1;
    const auto a = run_geneval_mini(p, cfg, make_oracle_judge());
    const auto b = run_geneval_mini(p, cfg, make_oracle_judge());
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
    std::set<std::uint64_t> leak{eval_prompt_seed(0, Category::kPosition, 1)};
    EXPECT_EQ(error_code([&] { run_geneval_mini(p, cfg, make_oracle_judge(), leak); }), "LeakedSeed");
}
