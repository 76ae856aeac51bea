#pragma once

// Reward judges. The oracle decides prompt/scene consistency exactly; the
// remote client speaks the VLM-rewarder wire protocol (JSON over HTTP POST).

#include <condition_variable>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "thinkgen/common.hpp"
#include "thinkgen/corelex.hpp"
#include "thinkgen/scenegen.hpp"

namespace thinkgen {

enum class JudgeSource { kOracle, kRemote };

struct Judgment {
    int score = 0;
    JudgeSource source = JudgeSource::kOracle;
    std::optional<std::string> rationale;
};

/// Inverse of the cell encoding.
inline SceneSpec parse_image(std::span<const TokenId> image, const Vocabulary& vocab) {
    const auto& w = vocab.world();
    if (static_cast<int>(image.size()) != w.cells())
        throw data_error("BadModality", "expected " + std::to_string(w.cells()) + " image tokens, got " + std::to_string(image.size()));
    SceneSpec s(w.rows, w.cols);
    for (std::size_t i = 0; i < image.size(); ++i) {
        if (!vocab.is_image(image[i])) throw data_error("BadModality", "token " + std::to_string(image[i]) + " at cell " + std::to_string(i));
        if (auto oc = vocab.cell_of(image[i])) s.cells[i] = Cell{oc->first, oc->second};
    }
    return s;
}

inline std::vector<TokenId> encode_scene(const SceneSpec& s, const Vocabulary& vocab) {
    std::vector<TokenId> out;
    out.reserve(s.cells.size());
    for (const auto& c : s.cells) out.push_back(c ? vocab.cell_token(c->object, c->color) : vocab.empty_cell());
    return out;
}

namespace detail {

struct Centroid {
    double row = 0.0;
    double col = 0.0;
};

inline std::vector<int> matching_cells(const Constraint& c, const SceneSpec& s) {
    std::vector<int> out;
    for (std::size_t i = 0; i < s.cells.size(); ++i) {
        const auto& cell = s.cells[i];
        if (cell && cell->object == c.object && (!c.color || cell->color == *c.color)) out.push_back(static_cast<int>(i));
    }
    return out;
}

inline Centroid centroid(const std::vector<int>& cells, int cols) {
    Centroid m;
    for (int i : cells) {
        m.row += i / cols;
        m.col += i % cols;
    }
    m.row /= static_cast<double>(cells.size());
    m.col /= static_cast<double>(cells.size());
    return m;
}

}  // namespace detail

/// Exact consistency check. Uncounted constraints need at least one matching
/// cell; counted ones need exactly n cells of the object, all matching; a
/// relation compares centroids strictly (ties fail).
inline Judgment oracle_judge(const PromptSpec& spec, const SceneSpec& scene) {
    Judgment j;
    j.source = JudgeSource::kOracle;
    std::vector<std::vector<int>> matched;
    for (const auto& c : spec.constraints) {
        auto m = detail::matching_cells(c, scene);
        if (c.count) {
            int all = 0;
            for (const auto& cell : scene.cells) all += cell && cell->object == c.object;
            if (static_cast<int>(m.size()) != *c.count || all != *c.count) return j;
        } else if (m.empty()) {
            return j;
        }
        matched.push_back(std::move(m));
    }
    for (std::size_t k = 0; k < spec.constraints.size(); ++k) {
        const auto& c = spec.constraints[k];
        if (c.relation == Relation::kNone) continue;
        if (c.target < 0 || c.target >= static_cast<int>(matched.size())) return j;
        const auto a = detail::centroid(matched[k], scene.cols);
        const auto b = detail::centroid(matched[static_cast<std::size_t>(c.target)], scene.cols);
        const bool ok = (c.relation == Relation::kLeftOf && a.col < b.col) || (c.relation == Relation::kRightOf && a.col > b.col) ||
                        (c.relation == Relation::kAbove && a.row < b.row) || (c.relation == Relation::kBelow && a.row > b.row);
        if (!ok) return j;
    }
    j.score = 1;
    return j;
}

/// Digit inside the last \boxed{...} of a judge response.
inline int parse_boxed(const std::string& text) {
    static const std::string open = "\\boxed{";
    const auto pos = text.rfind(open);
    if (pos == std::string::npos) throw data_error("NoBox", "no \\boxed{} in response");
    const auto start = pos + open.size();
    const auto close = text.find('}', start);
    if (close == std::string::npos) throw data_error("BadBox", "unterminated \\boxed{");
    const std::string inner = text.substr(start, close - start);
    if (inner == "0") return 0;
    if (inner == "1") return 1;
    throw data_error("BadBox", "non-binary content '" + inner + "'");
}

/// Rewarder prompt; {prompt} and <image> are substituted per request.
inline const std::string& reward_template() {
    static const std::string t =
        "You are given a text prompt: \"{prompt}\"\n"
        "Below is one generated image:\n"
        "<image>\n"
        "1. Describe the image thoroughly (objects, colors, layout, etc.), do not be affected by the prompt.\n"
        "2. Identify key visual elements and instructions from the prompt.\n"
        "3. Evaluate how well the image follows the prompt:\n"
        "   - Are all required elements present?\n"
        "   - Are object counts, colors, and positions accurate?\n"
        "Be extremly strict and precise:\n"
        "Only if the image matches the prompt perfectly, respond with: \\boxed{1}.\n"
        "Otherwise, respond with: \\boxed{0}\n"
        "Reason before your final boxed answer. Only one number should appear inside the box.";
    return t;
}

/// Row-major "r,c: color object" lines; empty cells are omitted.
inline std::string describe_scene(const SceneSpec& s, const World& w) {
    std::string out;
    for (int r = 0; r < s.rows; ++r)
        for (int c = 0; c < s.cols; ++c) {
            const auto& cell = s.at(r, c);
            if (!cell) continue;
            if (!out.empty()) out += '\n';
            out += std::to_string(r) + "," + std::to_string(c) + ": " + w.colors[static_cast<std::size_t>(cell->color)] + " " +
                   w.objects[static_cast<std::size_t>(cell->object)];
        }
    return out;
}

inline std::string instantiate_reward_prompt(const std::string& prompt, const SceneSpec& scene, const World& w) {
    std::string t = reward_template();
    const auto p = t.find("{prompt}");
    t.replace(p, 8, prompt);
    const auto i = t.find("<image>");
    t.replace(i, 7, describe_scene(scene, w));
    return t;
}

/// Exact JSON request body sent to a remote judge.
inline std::string remote_request_body(const std::string& prompt, const SceneSpec& scene, const World& w) {
    return nlohmann::json{{"prompt", instantiate_reward_prompt(prompt, scene, w)}}.dump();
}

struct RemoteJudgeOptions {
    std::string endpoint;  // http://host:port/path
    int timeout_ms = 30000;
    int max_in_flight = 4;
};

/// HTTP client for a VLM rewarder. Any transport fault, non-2xx status or
/// unparseable box raises JudgeFailure; there are no retries.
class RemoteJudge {
   public:
    RemoteJudge(RemoteJudgeOptions opt, World world) : opt_(std::move(opt)), world_(std::move(world)) {
        const auto scheme = opt_.endpoint.find("://");
        const auto path = opt_.endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
        host_ = path == std::string::npos ? opt_.endpoint : opt_.endpoint.substr(0, path);
        path_ = path == std::string::npos ? "/" : opt_.endpoint.substr(path);
        if (opt_.max_in_flight < 1) throw config_error("BadJudgeConfig", "max_in_flight must be >= 1");
    }

    Judgment operator()(const std::string& prompt, const SceneSpec& scene) {
        Slot slot(*this);
        httplib::Client cli(host_);
        const auto to = std::chrono::milliseconds(opt_.timeout_ms);
        cli.set_connection_timeout(to);
        cli.set_read_timeout(to);
        cli.set_write_timeout(to);
        auto res = cli.Post(path_, remote_request_body(prompt, scene, world_), "application/json");
        if (!res) throw data_error("JudgeFailure", "transport: " + httplib::to_string(res.error()));
        if (res->status < 200 || res->status >= 300) throw data_error("JudgeFailure", "status " + std::to_string(res->status));
        std::string text;
        try {
            text = nlohmann::json::parse(res->body).at("text").get<std::string>();
        } catch (const std::exception& e) {
            throw data_error("JudgeFailure", std::string("bad response body: ") + e.what());
        }
        Judgment j;
        j.source = JudgeSource::kRemote;
        j.rationale = text;
        try {
            j.score = parse_boxed(text);
        } catch (const Error& e) {
            throw data_error("JudgeFailure", e.code());
        }
        return j;
    }

   private:
    struct Slot {
        explicit Slot(RemoteJudge& j) : judge(j) {
            std::unique_lock lk(judge.mu_);
            judge.cv_.wait(lk, [&] { return judge.in_flight_ < judge.opt_.max_in_flight; });
            ++judge.in_flight_;
        }
        ~Slot() {
            {
                std::lock_guard lk(judge.mu_);
                --judge.in_flight_;
            }
            judge.cv_.notify_one();
        }
        RemoteJudge& judge;
    };

    RemoteJudgeOptions opt_;
    World world_;
    std::string host_, path_;
    std::mutex mu_;
    std::condition_variable cv_;
    int in_flight_ = 0;
};

/// Reward function used by training and evaluation.
using JudgeFn = std::function<Judgment(const PromptSpec&, const SceneSpec&)>;

inline JudgeFn make_oracle_judge() {
    return [](const PromptSpec& spec, const SceneSpec& scene) { return oracle_judge(spec, scene); };
}

inline JudgeFn make_remote_judge(std::shared_ptr<RemoteJudge> client) {
    return [client](const PromptSpec& spec, const SceneSpec& scene) { return (*client)(spec.surface, scene); };
}

}  // namespace thinkgen
