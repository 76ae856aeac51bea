// thinkgen: data generation, SFT, RL, evaluation and inspection from one binary.
//
// Exit codes: 1 config error, 2 data error, 3 numerical fault. Failures print
// one line "error[<kind>] <Code>: <detail>" on stderr.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "thinkgen/config.hpp"
#include "thinkgen/evalbench.hpp"
#include "thinkgen/grpo.hpp"
#include "thinkgen/sftrain.hpp"

namespace fs = std::filesystem;
using namespace thinkgen;

namespace {

struct JudgeArgs {
    std::string kind = "oracle";
    std::string endpoint;
    int timeout_ms = 30000;
};

JudgeFn make_judge(const JudgeArgs& a, const World& w, int workers) {
    if (a.kind == "oracle") return make_oracle_judge();
    if (a.kind != "remote") throw config_error("BadJudge", "--judge must be oracle or remote");
    if (a.endpoint.empty()) throw config_error("BadJudge", "--judge remote needs --judge-endpoint");
    return make_remote_judge(std::make_shared<RemoteJudge>(RemoteJudgeOptions{a.endpoint, a.timeout_ms, workers}, w));
}

std::vector<Category> parse_categories(const std::string& list) {
    std::vector<Category> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(parse_category(item));
    if (out.empty()) throw config_error("NoCategories", "empty category list");
    return out;
}

PolicyConfig policy_config(const KvConfig& kv) {
    PolicyConfig c;
    c.embed_dim = kv.get("embed_dim", c.embed_dim);
    c.layers = kv.get("layers", c.layers);
    c.heads = kv.get("heads", c.heads);
    c.context = kv.get("context", c.context);
    c.ffn_mult = kv.get("ffn_mult", c.ffn_mult);
    c.max_reasoning = kv.get("max_reasoning", c.max_reasoning);
    c.init_std = kv.get("init_std", c.init_std);
    c.tie_image_words = kv.get("tie_image_words", c.tie_image_words);
    return c;
}

KvConfig load_kv(const std::string& path) { return path.empty() ? KvConfig{} : KvConfig::load(path); }

std::ofstream open_log(const fs::path& p, bool append) {
    std::ofstream f(p, append ? std::ios::app : std::ios::trunc);
    if (!f) throw data_error("IOError", "cannot write " + p.string());
    return f;
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw data_error("IOError", "cannot create " + p.string() + ": " + ec.message());
}

std::shared_ptr<const Vocabulary> default_vocab() { return std::make_shared<const Vocabulary>(World{}); }

// -- gen-data ------------------------------------------------------------------

struct GenArgs {
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::string out;
    std::string categories = "SINGLE_OBJECT,TWO_OBJECT,COUNTING,COLORS,POSITION,COLOR_ATTRIBUTION,TWO_OBJECT_COUNTS";
};

int run_gen(const GenArgs& a) {
    emit_dataset(a.n, a.seed, a.out, parse_categories(a.categories), World{});
    std::cout << nlohmann::json{{"records", a.n}, {"out", a.out}}.dump() << "\n";
    return 0;
}

// -- sft -----------------------------------------------------------------------

struct SftArgs {
    std::string config, data, out_dir;
    std::optional<std::uint64_t> seed;
    bool resume = false;
    int workers = 1;
};

const std::set<std::string> kSftKeys{"lr",         "weight_decay",    "batch_size", "epochs",        "warmup_ratio", "cond_dropout",
                                     "seed",       "checkpoint_every", "embed_dim", "layers",        "heads",        "context",
                                     "ffn_mult",   "max_reasoning",   "init_std",   "tie_image_words"};

int run_sft(const SftArgs& a) {
    const auto kv = load_kv(a.config);
    kv.check_keys(kSftKeys);
    SftConfig cfg;
    cfg.lr = kv.get("lr", cfg.lr);
    cfg.weight_decay = kv.get("weight_decay", cfg.weight_decay);
    cfg.batch_size = kv.get("batch_size", cfg.batch_size);
    cfg.epochs = kv.get("epochs", cfg.epochs);
    cfg.warmup_ratio = kv.get("warmup_ratio", cfg.warmup_ratio);
    cfg.cond_dropout = kv.get("cond_dropout", cfg.cond_dropout);
    cfg.seed = a.seed ? *a.seed : static_cast<std::uint64_t>(kv.get("seed", 0L));
    cfg.checkpoint_every = kv.get("checkpoint_every", 0);
    cfg.workers = a.workers;

    auto vocab = default_vocab();
    const auto data = load_dataset(a.data, vocab->world());
    Policy policy(vocab, policy_config(kv), derive_seed(cfg.seed, "sft-init"));
    grad::AdamState adam(policy.params(), grad::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

    ensure_dir(a.out_dir);
    const fs::path dir(a.out_dir), latest = dir / "sft_latest.ckpt";
    bool resumed = false;
    if (a.resume && fs::exists(latest)) {
        const auto ck = grad::load_checkpoint(latest.string());
        policy = policy_from_checkpoint(ck, vocab);
        adam = grad::AdamState(policy.params(), adam.config);
        grad::restore_adam(ck, policy.params(), adam, "adam/");
        resumed = true;
    }
    auto log = open_log(dir / "sft_log.jsonl", resumed);
    SftHooks hooks;
    hooks.on_log = [&](const SftLogEntry& e) {
        log << nlohmann::json{{"step", e.step}, {"loss", e.loss}, {"wall_time", e.wall_time}}.dump() << "\n" << std::flush;
    };
    hooks.on_checkpoint = [&](long step, const grad::AdamState& st) {
        auto ck = policy_checkpoint(policy, {{"stage", "sft"}, {"step", step}});
        grad::append_adam(ck, policy.params(), st, "adam/");
        grad::save_checkpoint(latest.string(), ck);
    };
    const auto res = train_sft(policy, data, cfg, adam, hooks);
    grad::save_checkpoint((dir / "sft_final.ckpt").string(), policy_checkpoint(policy, {{"stage", "sft"}, {"step", adam.step}}));
    std::cout << nlohmann::json{{"steps", adam.step}, {"final_loss", res.final_loss}, {"resumed", resumed}}.dump() << "\n";
    return 0;
}

// -- rl ------------------------------------------------------------------------

struct RlArgs {
    std::string config, init, data, out_dir;
    std::optional<std::uint64_t> seed;
    bool allow_kl = false;
    bool resume = false;
    int workers = 1;
    JudgeArgs judge;
};

const std::set<std::string> kRlKeys{"learning_rate", "rollouts_per_prompt", "rollout_batch_size", "effective_batch_size", "clip_eps",
                                    "kl_coeff",      "steps",               "seed",               "inner_epochs",         "lr_phi",
                                    "phi_init",      "entropy_term",        "val_every",          "val_prompts",          "val_samples",
                                    "checkpoint_every", "weight_decay",     "entropy_probe_rollouts", "cfg_rollout",      "temperature"};

int run_rl(const RlArgs& a) {
    const auto kv = load_kv(a.config);
    kv.check_keys(kRlKeys);
    RlConfig cfg;
    cfg.learning_rate = kv.get("learning_rate", cfg.learning_rate);
    cfg.rollouts_per_prompt = kv.get("rollouts_per_prompt", cfg.rollouts_per_prompt);
    cfg.rollout_batch_size = kv.get("rollout_batch_size", cfg.rollout_batch_size);
    cfg.effective_batch_size = kv.get("effective_batch_size", cfg.effective_batch_size);
    cfg.clip_eps = kv.get("clip_eps", cfg.clip_eps);
    cfg.kl_coeff = kv.get("kl_coeff", cfg.kl_coeff);
    cfg.allow_kl = a.allow_kl;
    cfg.steps = kv.get("steps", cfg.steps);
    cfg.seed = a.seed ? *a.seed : static_cast<std::uint64_t>(kv.get("seed", 0L));
    cfg.inner_epochs = kv.get("inner_epochs", cfg.inner_epochs);
    cfg.lr_phi = kv.get("lr_phi", cfg.lr_phi);
    cfg.phi_init = kv.get("phi_init", cfg.phi_init);
    const auto term = kv.get("entropy_term", "expected");
    if (term != "expected" && term != "sampled") throw config_error("BadValue", "entropy_term must be expected or sampled");
    cfg.entropy_term = term == "sampled" ? EntropyTerm::kSampled : EntropyTerm::kExpected;
    cfg.val_every = kv.get("val_every", cfg.val_every);
    cfg.val_prompts = kv.get("val_prompts", cfg.val_prompts);
    cfg.val_samples = kv.get("val_samples", cfg.val_samples);
    cfg.checkpoint_every = kv.get("checkpoint_every", 10);
    cfg.weight_decay = kv.get("weight_decay", cfg.weight_decay);
    cfg.cfg_rollout = kv.get("cfg_rollout", cfg.cfg_rollout);
    cfg.temperature = kv.get("temperature", cfg.temperature);
    cfg.workers = a.workers;
    cfg.validate();
    const int probe = kv.get("entropy_probe_rollouts", 256);

    auto vocab = default_vocab();
    const auto data = load_dataset(a.data, vocab->world());
    if (data.empty()) throw data_error("EmptyDataset", a.data + " has no records");
    const auto train = prompt_items(data, *vocab);
    const auto val = validation_prompts(static_cast<std::size_t>(cfg.val_prompts), cfg.seed, data, *vocab);
    const auto judge = make_judge(a.judge, vocab->world(), a.workers);

    Policy policy = policy_from_checkpoint(grad::load_checkpoint(a.init), vocab);
    std::optional<Policy> reference;
    if (cfg.kl_coeff != 0.0) reference.emplace(policy);

    ensure_dir(a.out_dir);
    const fs::path dir(a.out_dir), latest = dir / "rl_latest.ckpt", best = dir / "rl_best.ckpt";
    RlState st;
    bool resumed = false;
    if (a.resume && fs::exists(latest)) {
        st = make_rl_state(policy, cfg, 0.0, 0.0);
        restore_rl(grad::load_checkpoint(latest.string()), policy, st);
        resumed = true;
    } else {
        std::vector<std::vector<TokenId>> probe_prompts;
        for (std::size_t i = 0; i < std::min<std::size_t>(train.size(), 256); ++i) probe_prompts.push_back(train[i].tokens);
        const auto h = post_sft_entropy(policy, probe_prompts, probe, derive_seed(cfg.seed, "entropy-targets"), a.workers);
        st = make_rl_state(policy, cfg, h.text, h.image);
    }
    auto log = open_log(dir / "rl_log.jsonl", resumed);
    RlHooks hooks;
    hooks.on_step = [&](const RlMetrics& m) { log << m.to_json().dump() << "\n" << std::flush; };
    hooks.on_checkpoint = [&](const Policy& p, const RlState& s) { grad::save_checkpoint(latest.string(), rl_checkpoint(p, s)); };
    hooks.on_best = [&](const Policy& p, const RlState& s) {
        grad::save_checkpoint(best.string(), policy_checkpoint(p, {{"stage", "rl-best"}, {"step", s.step}, {"val_reward", s.best_val}}));
    };
    const auto res = train_rl(policy, st, train, val, judge, cfg, reference ? &*reference : nullptr, hooks);
    grad::save_checkpoint(latest.string(), rl_checkpoint(policy, st));
    std::cout << nlohmann::json{{"steps", st.step},
                                {"best_val_reward", res.best_val},
                                {"best_step", res.best_step},
                                {"target_text", st.text.target},
                                {"target_image", st.image.target},
                                {"resumed", resumed}}
                     .dump()
              << "\n";
    return 0;
}

// -- eval ----------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt, out, train_data;
    std::string categories = "SINGLE_OBJECT,TWO_OBJECT,COUNTING,COLORS,POSITION,COLOR_ATTRIBUTION";
    int prompts = 50;
    int samples = 4;
    std::uint64_t seed = 0;
    double cfg_scale = kEvalCfgScale;
    int workers = 1;
    JudgeArgs judge;
};

int run_eval(const EvalArgs& a) {
    auto vocab = default_vocab();
    const auto policy = policy_from_checkpoint(grad::load_checkpoint(a.ckpt), vocab);
    EvalConfig cfg;
    cfg.categories = parse_categories(a.categories);
    cfg.prompts_per_category = a.prompts;
    cfg.samples_per_prompt = a.samples;
    cfg.seed = a.seed;
    cfg.cfg_scale = a.cfg_scale;
    cfg.workers = a.workers;
    std::set<std::uint64_t> train_seeds;
    if (!a.train_data.empty())
        for (const auto& d : load_dataset(a.train_data, vocab->world())) train_seeds.insert(d.seed);
    const auto rep = run_geneval_mini(policy, cfg, make_judge(a.judge, vocab->world(), a.workers), train_seeds);
    if (!a.out.empty()) write_report(rep, a.out);
    std::cout << report_table(rep);
    return 0;
}

// -- rollout -------------------------------------------------------------------

struct RolloutArgs {
    std::string ckpt, prompt;
    std::uint64_t seed = 0;
    double cfg_scale = kEvalCfgScale;
};

std::string render_grid(const SceneSpec& s, const World& w) {
    std::vector<std::string> cells;
    std::size_t width = 1;
    for (const auto& c : s.cells) {
        cells.push_back(c ? w.colors[static_cast<std::size_t>(c->color)] + "-" + w.objects[static_cast<std::size_t>(c->object)] : ".");
        width = std::max(width, cells.back().size());
    }
    std::string out;
    for (int r = 0; r < s.rows; ++r) {
        for (int c = 0; c < s.cols; ++c) {
            const auto& t = cells[static_cast<std::size_t>(r * s.cols + c)];
            out += t + std::string(width - t.size() + (c + 1 < s.cols ? 1 : 0), ' ');
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += "\n";
    }
    return out;
}

int run_rollout(const RolloutArgs& a) {
    auto vocab = default_vocab();
    const auto policy = policy_from_checkpoint(grad::load_checkpoint(a.ckpt), vocab);
    const auto spec = parse_prompt(a.prompt, vocab->world());
    if (!spec) throw data_error("UnparseablePrompt", "'" + a.prompt + "' is outside the prompt grammar");
    Rng rng(derive_seed(a.seed, "rollout-cli"));
    const auto r = sample(policy, prompt_with_bridge(a.prompt, *vocab), SampleOptions{1.0, a.cfg_scale}, rng);
    const auto scene = parse_image(r.seq.image_tokens(), *vocab);
    std::cout << "prompt: " << a.prompt << "\n"
              << "cot: " << detokenize(r.seq.reasoning_tokens(), *vocab) << "\n"
              << render_grid(scene, vocab->world()) << "reward: " << oracle_judge(*spec, scene).score << "\n";
    return 0;
}

// -- wordfreq ------------------------------------------------------------------

struct WordArgs {
    std::string ckpt, cots, data;
    int n = 1000;
    double threshold = 0.20;
    std::uint64_t seed = 0;
    int workers = 1;
};

int run_wordfreq(const WordArgs& a) {
    std::vector<std::string> cots;
    if (!a.cots.empty()) {
        std::ifstream f(a.cots);
        if (!f) throw data_error("IOError", "cannot open " + a.cots);
        for (std::string line; std::getline(f, line);) cots.push_back(line);
    } else {
        if (a.ckpt.empty()) throw config_error("MissingInput", "wordfreq needs --cots or --ckpt");
        auto vocab = default_vocab();
        const auto policy = policy_from_checkpoint(grad::load_checkpoint(a.ckpt), vocab);
        std::vector<PromptSpec> prompts;
        if (!a.data.empty())
            for (const auto& d : load_dataset(a.data, vocab->world())) prompts.push_back(d.spec);
        else
            for (const auto& d : generate_dataset(256, a.seed, {kAllCategories.begin(), kAllCategories.end()}, vocab->world(), "wordfreq"))
                prompts.push_back(d.spec);
        if (prompts.empty()) throw data_error("EmptyDataset", "no prompts to roll out");
        cots = sample_cots(policy, prompts, a.n, a.seed, a.workers);
    }
    for (const auto& w : word_frequency(cots, a.threshold))
        std::cout << nlohmann::json{{"word", w.word}, {"fraction", w.fraction}, {"mean_occurrences", w.mean_occurrences}}.dump() << "\n";
    return 0;
}

const char* kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::kConfig: return "config";
        case ErrorKind::kData: return "data";
        case ErrorKind::kNumeric: return "numeric";
    }
    return "unknown";
}

std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"thinkgen: think-then-generate toy pipeline"};
    app.set_version_flag("--version", std::string("thinkgen ") + THINKGEN_BUILD);
    app.require_subcommand(1);
    const int workers_default = default_workers();

    GenArgs gen;
    auto* g = app.add_subcommand("gen-data", "generate a synthetic SFT dataset (JSON Lines)");
    g->add_option("--n", gen.n, "number of records")->required();
    g->add_option("--seed", gen.seed, "global seed");
    g->add_option("--out", gen.out, "output path")->required();
    g->add_option("--categories", gen.categories, "comma-separated categories");

    SftArgs sft;
    sft.workers = workers_default;
    auto* s = app.add_subcommand("sft", "supervised fine-tuning on interleaved sequences");
    s->add_option("--config", sft.config, "key-value config file");
    s->add_option("--data", sft.data, "dataset from gen-data")->required();
    s->add_option("--out-dir", sft.out_dir, "checkpoint/log directory")->required();
    s->add_option("--seed", sft.seed, "overrides the config seed");
    s->add_flag("--resume", sft.resume, "continue from sft_latest.ckpt");
    s->add_option("--workers", sft.workers, "worker threads");

    RlArgs rl;
    rl.workers = workers_default;
    auto* r = app.add_subcommand("rl", "GRPO with adaptive entropy control");
    r->add_option("--config", rl.config, "key-value config file");
    r->add_option("--init", rl.init, "SFT checkpoint")->required();
    r->add_option("--data", rl.data, "prompt dataset")->required();
    r->add_option("--out-dir", rl.out_dir, "checkpoint/log directory")->required();
    r->add_option("--seed", rl.seed, "overrides the config seed");
    r->add_flag("--allow-kl", rl.allow_kl, "permit a nonzero kl_coeff (ablation)");
    r->add_flag("--resume", rl.resume, "continue from rl_latest.ckpt");
    r->add_option("--workers", rl.workers, "worker threads / judge concurrency");
    r->add_option("--judge", rl.judge.kind, "oracle or remote");
    r->add_option("--judge-endpoint", rl.judge.endpoint, "http://host:port/path");
    r->add_option("--judge-timeout-ms", rl.judge.timeout_ms, "remote judge timeout");

    EvalArgs ev;
    ev.workers = workers_default;
    auto* e = app.add_subcommand("eval", "per-category held-out evaluation");
    e->add_option("--ckpt", ev.ckpt, "policy checkpoint")->required();
    e->add_option("--out", ev.out, "report path (JSON; table at <out>.txt)");
    e->add_option("--categories", ev.categories, "comma-separated categories");
    e->add_option("--prompts-per-category", ev.prompts, "prompts per category");
    e->add_option("--samples", ev.samples, "samples per prompt");
    e->add_option("--seed", ev.seed, "evaluation seed");
    e->add_option("--cfg", ev.cfg_scale, "guidance scale");
    e->add_option("--train-data", ev.train_data, "training dataset, checked for seed overlap");
    e->add_option("--workers", ev.workers, "worker threads");
    e->add_option("--judge", ev.judge.kind, "oracle or remote");
    e->add_option("--judge-endpoint", ev.judge.endpoint, "http://host:port/path");
    e->add_option("--judge-timeout-ms", ev.judge.timeout_ms, "remote judge timeout");

    RolloutArgs ro;
    auto* o = app.add_subcommand("rollout", "sample and print one rollout");
    o->add_option("--ckpt", ro.ckpt, "policy checkpoint")->required();
    o->add_option("--prompt", ro.prompt, "prompt text")->required();
    o->add_option("--seed", ro.seed, "sampling seed");
    o->add_option("--cfg", ro.cfg_scale, "guidance scale");

    WordArgs wf;
    wf.workers = workers_default;
    auto* w = app.add_subcommand("wordfreq", "ranked CoT word frequencies");
    w->add_option("--ckpt", wf.ckpt, "policy checkpoint to sample CoTs from");
    w->add_option("--cots", wf.cots, "file with one CoT per line instead of sampling");
    w->add_option("--data", wf.data, "prompt dataset for sampling");
    w->add_option("--n", wf.n, "number of rollouts");
    w->add_option("--threshold", wf.threshold, "minimum document fraction");
    w->add_option("--seed", wf.seed, "sampling seed");
    w->add_option("--workers", wf.workers, "worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        if (err.get_exit_code() == 0) return app.exit(err);
        std::cerr << "error[config] BadArguments: " << one_line(err.what()) << "\n";
        return 1;
    }

    try {
        if (*g) return run_gen(gen);
        if (*s) return run_sft(sft);
        if (*r) return run_rl(rl);
        if (*e) return run_eval(ev);
        if (*o) return run_rollout(ro);
        if (*w) return run_wordfreq(wf);
    } catch (const Error& err) {
        std::cerr << "error[" << kind_name(err.kind()) << "] " << one_line(err.what()) << "\n";
        return static_cast<int>(err.kind());
    } catch (const std::exception& err) {
        std::cerr << "error[data] Unexpected: " << one_line(err.what()) << "\n";
        return 2;
    }
    return 1;
}
