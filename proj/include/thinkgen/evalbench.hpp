#pragma once

// GenEval-style per-category evaluation and CoT word statistics.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinkgen/common.hpp"
#include "thinkgen/genpolicy.hpp"
#include "thinkgen/judge.hpp"
#include "thinkgen/scenegen.hpp"
#include "thinkgen/sftrain.hpp"

#ifndef THINKGEN_BUILD
#define THINKGEN_BUILD "unknown"
#endif

namespace thinkgen {

inline constexpr double kEvalCfgScale = 5.0;

struct EvalConfig {
    std::vector<Category> categories{kBenchmarkCategories.begin(), kBenchmarkCategories.end()};
    int prompts_per_category = 50;
    int samples_per_prompt = 4;
    std::uint64_t seed = 0;
    double cfg_scale = kEvalCfgScale;
    double temperature = 1.0;
    int workers = 1;
};

struct CategoryScore {
    Category category;
    double score = 0.0;
    int samples = 0;
};

struct EvalReport {
    std::vector<CategoryScore> categories;
    double overall = 0.0;
    EvalConfig config;
    std::string build = THINKGEN_BUILD;

    bool operator==(const EvalReport& o) const { return to_json() == o.to_json(); }

    nlohmann::json to_json() const {
        nlohmann::json cats = nlohmann::json::array();
        for (const auto& c : categories) cats.push_back({{"category", category_name(c.category)}, {"score", c.score}, {"samples", c.samples}});
        nlohmann::json req = nlohmann::json::array();
        for (auto c : config.categories) req.push_back(category_name(c));
        return {{"categories", cats},
                {"overall", overall},
                {"config",
                 {{"categories", req},
                  {"prompts_per_category", config.prompts_per_category},
                  {"samples_per_prompt", config.samples_per_prompt},
                  {"seed", config.seed},
                  {"cfg_scale", config.cfg_scale},
                  {"temperature", config.temperature}}},
                {"build", build}};
    }

    static EvalReport from_json(const nlohmann::json& j) {
        EvalReport r;
        const auto& c = j.at("config");
        r.config.categories.clear();
        for (const auto& s : c.at("categories")) r.config.categories.push_back(parse_category(s.get<std::string>()));
        r.config.prompts_per_category = c.at("prompts_per_category").get<int>();
        r.config.samples_per_prompt = c.at("samples_per_prompt").get<int>();
        r.config.seed = c.at("seed").get<std::uint64_t>();
        r.config.cfg_scale = c.at("cfg_scale").get<double>();
        r.config.temperature = c.at("temperature").get<double>();
        for (const auto& e : j.at("categories"))
            r.categories.push_back({parse_category(e.at("category").get<std::string>()), e.at("score").get<double>(), e.at("samples").get<int>()});
        r.overall = j.at("overall").get<double>();
        r.build = j.at("build").get<std::string>();
        return r;
    }
};

/// Seed of the i-th held-out prompt of a category.
inline std::uint64_t eval_prompt_seed(std::uint64_t seed, Category c, std::size_t i) {
    return example_seed(seed, std::string("eval/") + category_name(c), i);
}

inline std::vector<PromptSpec> eval_prompts(const EvalConfig& cfg, Category c, const World& w) {
    std::vector<PromptSpec> out;
    for (int i = 0; i < cfg.prompts_per_category; ++i) {
        Rng rng(eval_prompt_seed(cfg.seed, c, static_cast<std::size_t>(i)));
        out.push_back(gen_prompt(c, w, rng));
    }
    return out;
}

/// Per-category mean judge score at the evaluation guidance scale. Throws
/// LeakedSeed if any held-out prompt seed is in `training_seeds`.
inline EvalReport run_geneval_mini(const Policy& policy, const EvalConfig& cfg, const JudgeFn& judge,
                                   const std::set<std::uint64_t>& training_seeds = {}) {
    if (cfg.prompts_per_category < 1 || cfg.samples_per_prompt < 1) throw config_error("BadEvalConfig", "need at least one prompt and sample");
    EvalReport rep;
    rep.config = cfg;
    const auto& vocab = policy.vocab();
    for (auto c : cfg.categories) {
        for (int i = 0; i < cfg.prompts_per_category; ++i)
            if (training_seeds.count(eval_prompt_seed(cfg.seed, c, static_cast<std::size_t>(i))))
                throw data_error("LeakedSeed", std::string("evaluation prompt seed overlaps training data in ") + category_name(c));
        const auto prompts = eval_prompts(cfg, c, vocab.world());
        const std::size_t s = static_cast<std::size_t>(cfg.samples_per_prompt);
        std::vector<int> scores(prompts.size() * s, 0);
        parallel_for(scores.size(), cfg.workers, [&](std::size_t idx) {
            const auto& spec = prompts[idx / s];
            Rng rng(derive_seed(cfg.seed, std::string("eval-sample/") + category_name(c), idx));
            const auto r = sample(policy, prompt_with_bridge(spec.surface, vocab), SampleOptions{cfg.temperature, cfg.cfg_scale}, rng);
            scores[idx] = judge(spec, parse_image(r.seq.image_tokens(), vocab)).score;
        });
        double sum = 0.0;
        for (int v : scores) sum += v;
        rep.categories.push_back({c, sum / static_cast<double>(scores.size()), static_cast<int>(scores.size())});
    }
    double tot = 0.0;
    for (const auto& c : rep.categories) tot += c.score;
    rep.overall = rep.categories.empty() ? 0.0 : tot / static_cast<double>(rep.categories.size());
    return rep;
}

inline std::string report_table(const EvalReport& r) {
    std::string out;
    char buf[96];
    std::snprintf(buf, sizeof buf, "%-20s %8s %8s\n", "category", "score", "samples");
    out += buf;
    for (const auto& c : r.categories) {
        std::snprintf(buf, sizeof buf, "%-20s %8.4f %8d\n", category_name(c.category), c.score, c.samples);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "%-20s %8.4f\n", "OVERALL", r.overall);
    out += buf;
    return out;
}

/// Writes the JSON report to `path` and the text table next to it (`path` + ".txt").
inline void write_report(const EvalReport& r, const std::string& path) {
    auto put = [](const std::string& p, const std::string& text) {
        std::ofstream f(p, std::ios::binary | std::ios::trunc);
        if (!f) throw data_error("IOError", "cannot write " + p);
        f << text;
        if (!f) throw data_error("IOError", "write failed: " + p);
    };
    put(path, r.to_json().dump(2) + "\n");
    put(path + ".txt", report_table(r));
}

inline EvalReport load_report(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("IOError", "cannot read " + path);
    try {
        return EvalReport::from_json(nlohmann::json::parse(f));
    } catch (const nlohmann::json::exception& e) {
        throw data_error("ParseError", path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------

struct WordStat {
    std::string word;
    double fraction = 0.0;          // share of CoTs containing the word
    double mean_occurrences = 0.0;  // occurrences per CoT

    bool operator==(const WordStat&) const = default;
};

/// Document frequency of each word over `cots` (a/an/and ignored), keeping
/// words in at least `threshold` of them; sorted by fraction, then word.
inline std::vector<WordStat> word_frequency(const std::vector<std::string>& cots, double threshold = 0.20) {
    static const std::set<std::string> stop{"a", "an", "and"};
    std::map<std::string, std::pair<int, int>> counts;  // docs, occurrences
    for (const auto& cot : cots) {
        std::set<std::string> seen;
        for (const auto& w : split_words(cot)) {
            if (stop.count(w)) continue;
            auto& c = counts[w];
            ++c.second;
            if (seen.insert(w).second) ++c.first;
        }
    }
    std::vector<WordStat> out;
    const double n = static_cast<double>(cots.size());
    for (const auto& [w, c] : counts) {
        const double frac = c.first / n;
        if (frac >= threshold) out.push_back({w, frac, c.second / n});
    }
    std::stable_sort(out.begin(), out.end(), [](const WordStat& a, const WordStat& b) { return a.fraction > b.fraction; });
    return out;
}

/// Reasoning text of `n` rollouts, prompts used round-robin.
inline std::vector<std::string> sample_cots(const Policy& policy, const std::vector<PromptSpec>& prompts, int n, std::uint64_t seed,
                                            int workers = 1) {
    std::vector<std::string> out(static_cast<std::size_t>(n));
    parallel_for(out.size(), workers, [&](std::size_t i) {
        Rng rng(derive_seed(seed, "cot-sample", i));
        const auto& spec = prompts[i % prompts.size()];
        const auto r = sample(policy, prompt_with_bridge(spec.surface, policy.vocab()), SampleOptions{}, rng);
        out[i] = detokenize(r.seq.reasoning_tokens(), policy.vocab());
    });
    return out;
}

}  // namespace thinkgen
