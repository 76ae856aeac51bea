#pragma once

// Compact causal transformer over the interleaved vocabulary. Two forward
// paths share the parameters: a recorded Graph path used for training and an
// incremental cached path used for sampling and inspection.

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "thinkgen/common.hpp"
#include "thinkgen/corelex.hpp"
#include "thinkgen/gradcore.hpp"

namespace thinkgen {

struct PolicyConfig {
    int embed_dim = 32;
    int layers = 2;
    int heads = 2;
    int context = 64;
    int ffn_mult = 4;
    int max_reasoning = 24;
    double init_std = 0.02;
    bool tie_image_words = true;  // cell tokens add their object and color word vectors

    void validate(int grid_cells) const {
        if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
            throw config_error("BadPolicyConfig", "embed_dim must be a positive multiple of heads");
        if (layers <= 0 || ffn_mult <= 0) throw config_error("BadPolicyConfig", "layers/ffn_mult must be positive");
        if (max_reasoning < 0 || context < max_reasoning + 1 + grid_cells + 1)
            throw config_error("BadPolicyConfig", "context too short for reasoning + image span");
    }
};

/// Which distribution a response position is drawn from.
enum class Phase {
    kText,    // words, <eot> or <img>
    kForced,  // <img> after <eot> or a full reasoning budget; probability one
    kImage,   // image cells only
};

inline Modality phase_modality(Phase p) {
    switch (p) {
        case Phase::kText: return Modality::kText;
        case Phase::kImage: return Modality::kImage;
        case Phase::kForced: return Modality::kSpecial;
    }
    return Modality::kSpecial;
}

class Policy {
   public:
    Policy(std::shared_ptr<const Vocabulary> vocab, PolicyConfig cfg, std::uint64_t init_seed = 0)
        : vocab_(std::move(vocab)), cfg_(cfg) {
        cfg_.validate(vocab_->world().cells());
        build(init_seed);
        build_masks();
    }

    const Vocabulary& vocab() const { return *vocab_; }
    std::shared_ptr<const Vocabulary> vocab_ptr() const { return vocab_; }
    const PolicyConfig& config() const { return cfg_; }
    grad::ParamSet& params() { return params_; }
    const grad::ParamSet& params() const { return params_; }
    int grid_cells() const { return vocab_->world().cells(); }

    /// Output projection and bias set to zero: every masked distribution becomes uniform.
    void zero_output() {
        std::fill(params_.get("out.w").values.begin(), params_.get("out.w").values.end(), 0.0);
        std::fill(params_.get("out.b").values.begin(), params_.get("out.b").values.end(), 0.0);
    }

    const std::vector<std::uint8_t>& support(Phase p) const {
        switch (p) {
            case Phase::kText: return text_mask_;
            case Phase::kImage: return image_mask_;
            case Phase::kForced: return forced_mask_;
        }
        return text_mask_;
    }
    int support_size(Phase p) const {
        int n = 0;
        for (auto m : support(p)) n += m;
        return n;
    }

    /// Phase of every response position (prompt_len .. end) of a sequence.
    std::vector<Phase> phases(const InterleavedSequence& seq) const {
        if (seq.reasoning_len > cfg_.max_reasoning)
            throw data_error("InvalidSequence", "reasoning longer than the configured budget");
        std::vector<Phase> out;
        out.reserve(static_cast<std::size_t>(seq.response_len()));
        for (int i = 0; i < seq.reasoning_len; ++i) out.push_back(Phase::kText);
        const bool after_eot =
            seq.reasoning_len > 0 && seq.tokens[static_cast<std::size_t>(seq.img_start_pos() - 1)] == vocab_->specials().eot;
        out.push_back(after_eot || seq.reasoning_len == cfg_.max_reasoning ? Phase::kForced : Phase::kText);
        for (int i = 0; i < seq.image_len; ++i) out.push_back(Phase::kImage);
        return out;
    }

    // -- recorded (training) path -------------------------------------------

    /// Parameter leaves of one graph. Empty sinks record no gradient.
    struct Bound {
        std::vector<grad::Var> vars;
        const Policy* policy = nullptr;
        grad::Var operator[](const std::string& name) const { return vars[policy->index_.at(name)]; }
    };

    Bound bind(grad::Graph& g, grad::GradBuffer* sink = nullptr) const {
        Bound b;
        b.policy = this;
        const auto& ts = params_.tensors();
        for (std::size_t i = 0; i < ts.size(); ++i) {
            std::span<double> s;
            if (sink) s = std::span<double>(sink->grads[i]);
            b.vars.push_back(g.param(ts[i], s));
        }
        return b;
    }

    /// Final hidden states for `tokens`; the first `null_prefix` positions use
    /// the learned null-prompt embedding instead of their token embedding.
    grad::Var hidden(grad::Graph& /*g*/, const Bound& p, std::span<const TokenId> tokens, int null_prefix = 0) const {
        using namespace grad;
        const int t = static_cast<int>(tokens.size());
        if (t == 0) throw data_error("InvalidSequence", "empty input");
        if (t > cfg_.context) throw data_error("ContextOverflow", std::to_string(t) + " > " + std::to_string(cfg_.context));
        const int v = vocab_->size();
        std::vector<int> idx(tokens.begin(), tokens.end());
        Var table = p["tok_emb"];
        if (null_prefix > 0) {
            table = concat_rows(table, p["null_prompt"]);
            for (int i = 0; i < null_prefix && i < t; ++i) idx[static_cast<std::size_t>(i)] = v;
        }
        std::vector<int> pos(static_cast<std::size_t>(t));
        for (int i = 0; i < t; ++i) pos[static_cast<std::size_t>(i)] = i;
        Var e = gather_rows(table, idx);
        if (cfg_.tie_image_words) {
            std::vector<int> ow(idx.size()), cw(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const bool word = idx[i] < v;
                ow[i] = word ? obj_word_[static_cast<std::size_t>(idx[i])] : -1;
                cw[i] = word ? col_word_[static_cast<std::size_t>(idx[i])] : -1;
            }
            e = add(e, add(gather_rows(p["tok_emb"], std::move(ow)), gather_rows(p["tok_emb"], std::move(cw))));
        }
        Var x = add(e, gather_rows(p["pos_emb"], std::move(pos)));
        const int d = cfg_.embed_dim, dh = d / cfg_.heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string pre = "l" + std::to_string(l) + ".";
            Var h = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]);
            Var qkv = add_row(matmul(h, p[pre + "qkv.w"]), p[pre + "qkv.b"]);
            std::vector<Var> heads;
            for (int hd = 0; hd < cfg_.heads; ++hd) {
                Var q = slice_cols(qkv, hd * dh, dh);
                Var k = slice_cols(qkv, d + hd * dh, dh);
                Var vv = slice_cols(qkv, 2 * d + hd * dh, dh);
                heads.push_back(matmul(softmax_rows(causal_scores(q, k, sc)), vv));
            }
            Var o = heads.size() == 1 ? heads[0] : concat_cols(heads);
            x = add(x, add_row(matmul(o, p[pre + "proj.w"]), p[pre + "proj.b"]));
            Var h2 = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]);
            Var f = gelu(add_row(matmul(h2, p[pre + "ff1.w"]), p[pre + "ff1.b"]));
            x = add(x, add_row(matmul(f, p[pre + "ff2.w"]), p[pre + "ff2.b"]));
        }
        return layer_norm(x, p["lnf.g"], p["lnf.b"]);
    }

    grad::Var logits_of(const Bound& p, grad::Var hidden_rows) const {
        grad::Var l = grad::matmul(hidden_rows, p["out.w"]);
        if (cfg_.tie_image_words) l = grad::add(l, grad::add(grad::gather_cols(l, obj_word_), grad::gather_cols(l, col_word_)));
        return grad::add_row(l, p["out.b"]);
    }

    /// Recorded per-response-token terms for one sequence.
    struct ResponseTerms {
        grad::Var logits;     // response_len x V (raw)
        grad::Var log_probs;  // response_len x 1, masked distribution
        std::vector<Phase> phases;
        std::vector<std::uint8_t> mask;  // response_len x V support mask
    };

    ResponseTerms response_terms(grad::Graph& g, const Bound& p, const InterleavedSequence& seq, int null_prefix = 0) const {
        if (auto bad = validate_sequence(seq, *vocab_)) throw data_error("InvalidSequence", bad->invariant + ": " + bad->detail);
        if (seq.prompt_len < 1) throw data_error("InvalidSequence", "prompt must be non-empty");
        ResponseTerms rt;
        rt.phases = phases(seq);
        const int t = static_cast<int>(seq.tokens.size());
        const int n = seq.response_len();
        std::span<const TokenId> input(seq.tokens.data(), static_cast<std::size_t>(t - 1));
        grad::Var h = hidden(g, p, input, null_prefix);
        rt.logits = logits_of(p, grad::slice_rows(h, seq.prompt_len - 1, n));
        const int v = vocab_->size();
        rt.mask.resize(static_cast<std::size_t>(n) * v);
        std::vector<int> targets(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const auto& m = support(rt.phases[static_cast<std::size_t>(i)]);
            std::copy(m.begin(), m.end(), rt.mask.begin() + static_cast<std::ptrdiff_t>(i) * v);
            targets[static_cast<std::size_t>(i)] = seq.tokens[static_cast<std::size_t>(seq.prompt_len + i)];
            if (!m[static_cast<std::size_t>(targets[static_cast<std::size_t>(i)])])
                throw data_error("InvalidSequence", "token outside its phase support at " + std::to_string(seq.prompt_len + i));
        }
        rt.log_probs = grad::pick(grad::log_softmax_rows(rt.logits, rt.mask), std::move(targets));
        return rt;
    }

    /// log pi(o_t | q, o_<t) for every response token (masked distribution).
    std::vector<double> log_prob(const InterleavedSequence& seq) const {
        grad::Graph g;
        auto p = bind(g);
        return response_terms(g, p, seq).log_probs.value();
    }

    // -- incremental (inference) path ----------------------------------------

    /// Key/value cache for one decoding stream.
    class Decoder {
       public:
        explicit Decoder(const Policy& policy) : pol_(&policy) {
            const auto& c = policy.cfg_;
            keys_.assign(static_cast<std::size_t>(c.layers), {});
            values_.assign(static_cast<std::size_t>(c.layers), {});
            last_.assign(static_cast<std::size_t>(c.embed_dim), 0.0);
        }

        int length() const { return len_; }

        void push(TokenId tok) {
            const auto e = pol_->row("tok_emb", tok);
            if (!pol_->cfg_.tie_image_words) return step(e);
            std::vector<double> x(e.begin(), e.end());
            const int ow = pol_->obj_word_[static_cast<std::size_t>(tok)], cw = pol_->col_word_[static_cast<std::size_t>(tok)];
            for (std::size_t j = 0; j < x.size(); ++j)
                x[j] += (ow >= 0 ? pol_->row("tok_emb", ow)[j] : 0.0) + (cw >= 0 ? pol_->row("tok_emb", cw)[j] : 0.0);
            step(x);
        }
        void push_null() {
            const auto e = pol_->row("null_prompt", 0);
            if (!pol_->cfg_.tie_image_words) return step(e);
            std::vector<double> x(e.begin(), e.end());
            for (double& xv : x) xv += 0.0 + 0.0;
            step(x);
        }

        /// Raw next-token logits after the tokens pushed so far.
        std::vector<double> logits() const {
            if (len_ == 0) throw data_error("InvalidSequence", "no context");
            const auto& c = pol_->cfg_;
            const int v = pol_->vocab_->size();
            std::vector<double> h = layer_norm_row(last_, pol_->params_.get("lnf.g").values, pol_->params_.get("lnf.b").values);
            std::vector<double> out(static_cast<std::size_t>(v), 0.0);
            const auto& w = pol_->params_.get("out.w").values;
            for (int p = 0; p < c.embed_dim; ++p) {
                const double hv = h[static_cast<std::size_t>(p)];
                for (int j = 0; j < v; ++j) out[static_cast<std::size_t>(j)] += hv * w[static_cast<std::size_t>(p) * v + j];
            }
            if (c.tie_image_words) {
                std::vector<double> l = out;
                for (int j = 0; j < v; ++j) {
                    const int ow = pol_->obj_word_[static_cast<std::size_t>(j)], cw = pol_->col_word_[static_cast<std::size_t>(j)];
                    out[static_cast<std::size_t>(j)] = l[static_cast<std::size_t>(j)] + ((ow >= 0 ? l[static_cast<std::size_t>(ow)] : 0.0) +
                                                                                         (cw >= 0 ? l[static_cast<std::size_t>(cw)] : 0.0));
                }
            }
            const auto& b = pol_->params_.get("out.b").values;
            for (int j = 0; j < v; ++j) out[static_cast<std::size_t>(j)] += b[static_cast<std::size_t>(j)];
            return out;
        }

       private:
        void step(std::span<const double> embedding) {
            const auto& c = pol_->cfg_;
            if (len_ >= c.context) throw data_error("ContextOverflow", std::to_string(len_ + 1) + " > " + std::to_string(c.context));
            const int d = c.embed_dim, dh = d / c.heads;
            const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
            std::vector<double> x(embedding.begin(), embedding.end());
            const auto pos = pol_->row("pos_emb", len_);
            for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += pos[static_cast<std::size_t>(j)];
            const auto& P = pol_->params_;
            for (int l = 0; l < c.layers; ++l) {
                const std::string pre = "l" + std::to_string(l) + ".";
                auto h = layer_norm_row(x, P.get(pre + "ln1.g").values, P.get(pre + "ln1.b").values);
                auto qkv = affine(h, P.get(pre + "qkv.w"), P.get(pre + "qkv.b"));
                auto& K = keys_[static_cast<std::size_t>(l)];
                auto& V = values_[static_cast<std::size_t>(l)];
                K.insert(K.end(), qkv.begin() + d, qkv.begin() + 2 * d);
                V.insert(V.end(), qkv.begin() + 2 * d, qkv.end());
                const int n = len_ + 1;
                std::vector<double> o(static_cast<std::size_t>(d), 0.0);
                std::vector<double> s(static_cast<std::size_t>(n));
                for (int hd = 0; hd < c.heads; ++hd) {
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int p = 0; p < dh; ++p)
                            acc += qkv[static_cast<std::size_t>(hd * dh + p)] * K[static_cast<std::size_t>(j) * d + hd * dh + p];
                        s[static_cast<std::size_t>(j)] = sc * acc;
                    }
                    const double mx = *std::max_element(s.begin(), s.end());
                    double tot = 0.0;
                    for (double& e : s) tot += (e = std::exp(e - mx));
                    for (double& e : s) e /= tot;
                    for (int j = 0; j < n; ++j) {
                        const double a = s[static_cast<std::size_t>(j)];
                        for (int p = 0; p < dh; ++p)
                            o[static_cast<std::size_t>(hd * dh + p)] += a * V[static_cast<std::size_t>(j) * d + hd * dh + p];
                    }
                }
                auto proj = affine(o, P.get(pre + "proj.w"), P.get(pre + "proj.b"));
                for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += proj[static_cast<std::size_t>(j)];
                auto h2 = layer_norm_row(x, P.get(pre + "ln2.g").values, P.get(pre + "ln2.b").values);
                auto f = affine(h2, P.get(pre + "ff1.w"), P.get(pre + "ff1.b"));
                for (double& e : f) e = gelu_scalar(e);
                auto f2 = affine(f, P.get(pre + "ff2.w"), P.get(pre + "ff2.b"));
                for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += f2[static_cast<std::size_t>(j)];
            }
            last_ = std::move(x);
            ++len_;
        }

        static std::vector<double> affine(const std::vector<double>& x, const grad::Tensor& w, const grad::Tensor& b) {
            std::vector<double> out(static_cast<std::size_t>(w.cols), 0.0);
            for (int p = 0; p < w.rows; ++p) {
                const double xv = x[static_cast<std::size_t>(p)];
                for (int j = 0; j < w.cols; ++j) out[static_cast<std::size_t>(j)] += xv * w.values[static_cast<std::size_t>(p) * w.cols + j];
            }
            for (int j = 0; j < w.cols; ++j) out[static_cast<std::size_t>(j)] += b.values[static_cast<std::size_t>(j)];
            return out;
        }

        static double gelu_scalar(double x) {
            constexpr double k = 0.7978845608028654;
            return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
        }

        static std::vector<double> layer_norm_row(const std::vector<double>& x, const std::vector<double>& g,
                                                  const std::vector<double>& b) {
            const std::size_t c = x.size();
            double mean = 0.0;
            for (double v : x) mean += v;
            mean /= static_cast<double>(c);
            double var = 0.0;
            for (double v : x) var += (v - mean) * (v - mean);
            var /= static_cast<double>(c);
            const double is = 1.0 / std::sqrt(var + 1e-5);
            std::vector<double> out(c);
            for (std::size_t j = 0; j < c; ++j) out[j] = (x[j] - mean) * is * g[j] + b[j];
            return out;
        }

        const Policy* pol_;
        std::vector<std::vector<double>> keys_, values_;
        std::vector<double> last_;
        int len_ = 0;
    };

    /// Raw logits for the position after `prefix`.
    std::vector<double> forward_logits(std::span<const TokenId> prefix) const {
        if (static_cast<int>(prefix.size()) >= cfg_.context)
            throw data_error("ContextOverflow", std::to_string(prefix.size()) + " >= " + std::to_string(cfg_.context));
        Decoder dec(*this);
        for (TokenId t : prefix) dec.push(t);
        return dec.logits();
    }

   private:
    std::span<const double> row(const std::string& name, int r) const {
        const auto& t = params_.get(name);
        if (r < 0 || r >= t.rows) throw data_error("InvalidSequence", name + " row " + std::to_string(r));
        return {t.values.data() + static_cast<std::size_t>(r) * t.cols, static_cast<std::size_t>(t.cols)};
    }

    // Embedding rows draw from N(0, init_std^2); weight matrices from N(0, 1/fan_in).
    void add_param(const std::string& name, int r, int c, Rng* init, double fill = 0.0, bool matrix = false) {
        auto& t = params_.add(name, r, c, fill);
        const double sd = matrix ? 1.0 / std::sqrt(static_cast<double>(r)) : cfg_.init_std;
        if (init)
            for (double& v : t.values) v = sd * init->normal();
        index_[name] = params_.tensors().size() - 1;
    }

    void build(std::uint64_t seed) {
        Rng rng(derive_seed(seed, "policy-init"));
        const int v = vocab_->size(), d = cfg_.embed_dim, f = cfg_.ffn_mult * d;
        add_param("tok_emb", v, d, &rng);
        add_param("null_prompt", 1, d, &rng);
        add_param("pos_emb", cfg_.context, d, &rng);
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string pre = "l" + std::to_string(l) + ".";
            add_param(pre + "ln1.g", 1, d, nullptr, 1.0);
            add_param(pre + "ln1.b", 1, d, nullptr);
            add_param(pre + "qkv.w", d, 3 * d, &rng, 0.0, true);
            add_param(pre + "qkv.b", 1, 3 * d, nullptr);
            add_param(pre + "proj.w", d, d, &rng, 0.0, true);
            add_param(pre + "proj.b", 1, d, nullptr);
            add_param(pre + "ln2.g", 1, d, nullptr, 1.0);
            add_param(pre + "ln2.b", 1, d, nullptr);
            add_param(pre + "ff1.w", d, f, &rng, 0.0, true);
            add_param(pre + "ff1.b", 1, f, nullptr);
            add_param(pre + "ff2.w", f, d, &rng, 0.0, true);
            add_param(pre + "ff2.b", 1, d, nullptr);
        }
        add_param("lnf.g", 1, d, nullptr, 1.0);
        add_param("lnf.b", 1, d, nullptr);
        add_param("out.w", d, v, &rng, 0.0, true);
        add_param("out.b", 1, v, nullptr);
    }

    void build_masks() {
        const int v = vocab_->size();
        text_mask_.assign(static_cast<std::size_t>(v), 0);
        image_mask_.assign(static_cast<std::size_t>(v), 0);
        forced_mask_.assign(static_cast<std::size_t>(v), 0);
        for (int t = 0; t < v; ++t) {
            if (vocab_->is_text(t)) text_mask_[static_cast<std::size_t>(t)] = 1;
            if (vocab_->is_image(t)) image_mask_[static_cast<std::size_t>(t)] = 1;
        }
        text_mask_[static_cast<std::size_t>(vocab_->specials().eot)] = 1;
        text_mask_[static_cast<std::size_t>(vocab_->specials().img_start)] = 1;
        forced_mask_[static_cast<std::size_t>(vocab_->specials().img_start)] = 1;
        obj_word_.assign(static_cast<std::size_t>(v), -1);
        col_word_.assign(static_cast<std::size_t>(v), -1);
        const auto& w = vocab_->world();
        for (int t = 0; t < v; ++t)
            if (auto oc = vocab_->cell_of(t)) {
                obj_word_[static_cast<std::size_t>(t)] = vocab_->id(w.objects[static_cast<std::size_t>(oc->first)]);
                col_word_[static_cast<std::size_t>(t)] = vocab_->id(w.colors[static_cast<std::size_t>(oc->second)]);
            }
    }

    std::shared_ptr<const Vocabulary> vocab_;
    PolicyConfig cfg_;
    grad::ParamSet params_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::uint8_t> text_mask_, image_mask_, forced_mask_;
    std::vector<int> obj_word_, col_word_;  // word ids a cell token is tied to, -1 otherwise
};

// ---------------------------------------------------------------------------
// Distributions over masked logits

/// Log-probabilities of softmax(logits / temperature) restricted to `mask`;
/// excluded entries are -infinity.
inline std::vector<double> masked_log_softmax(std::span<const double> logits, std::span<const std::uint8_t> mask,
                                              double temperature = 1.0) {
    if (!(temperature > 0.0)) throw config_error("BadTemperature", "temperature must be positive");
    const std::size_t v = logits.size();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j)
        if (mask.empty() || mask[j]) mx = std::max(mx, logits[j] / temperature);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j)
        if (mask.empty() || mask[j]) s += std::exp(logits[j] / temperature - mx);
    const double lse = mx + std::log(s);
    std::vector<double> out(v, -std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j < v; ++j)
        if (mask.empty() || mask[j]) out[j] = logits[j] / temperature - lse;
    return out;
}

/// Entropy in nats of the (optionally masked) tempered softmax.
inline double token_entropy(std::span<const double> logits, double temperature = 1.0, std::span<const std::uint8_t> mask = {}) {
    const auto lp = masked_log_softmax(logits, mask, temperature);
    double h = 0.0;
    for (double l : lp)
        if (std::isfinite(l)) h -= std::exp(l) * l;
    return std::max(h, 0.0);
}

/// Classifier-free guidance: uncond + scale * (cond - uncond). Scale 1 returns
/// the conditional logits unchanged.
inline std::vector<double> guided_logits(std::span<const double> cond, std::span<const double> uncond, double scale) {
    if (cond.size() != uncond.size()) throw numeric_error("ShapeMismatch", "guided_logits");
    std::vector<double> out(cond.begin(), cond.end());
    if (scale == 1.0) return out;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = uncond[j] + scale * (cond[j] - uncond[j]);
    return out;
}

struct SampleOptions {
    double temperature = 1.0;
    double cfg_scale = 1.0;
};

/// A sampled sequence plus the per-response-token statistics of the
/// distribution each token was drawn from.
struct Rollout {
    InterleavedSequence seq;
    std::vector<double> log_probs;  // sampling log-probabilities
    std::vector<double> entropies;  // analytic entropy of the sampling distribution
    std::vector<Phase> phases;
};

/// Inverse-CDF draw from a log-probability vector.
inline int draw(std::span<const double> logp, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    int last = -1;
    for (std::size_t j = 0; j < logp.size(); ++j) {
        if (!std::isfinite(logp[j])) continue;
        acc += std::exp(logp[j]);
        last = static_cast<int>(j);
        if (u < acc) return last;
    }
    return last;
}

/// Autoregressive sampling under the modality grammar: reasoning words until
/// <eot>/<img> or the reasoning budget, then <img>, then exactly one token per
/// grid cell. Guidance is applied to image positions only.
inline Rollout sample(const Policy& policy, std::span<const TokenId> prompt, const SampleOptions& opt, Rng& rng) {
    if (!(opt.temperature > 0.0)) throw config_error("BadTemperature", "temperature must be positive");
    if (prompt.empty()) throw data_error("InvalidSequence", "prompt must be non-empty");
    const auto& vocab = policy.vocab();
    const auto& sp = vocab.specials();
    const bool guided = opt.cfg_scale != 1.0;
    Rollout r;
    r.seq.tokens.assign(prompt.begin(), prompt.end());
    r.seq.prompt_len = static_cast<int>(prompt.size());
    r.seq.image_len = policy.grid_cells();
    Policy::Decoder cond(policy);
    std::optional<Policy::Decoder> uncond;
    for (TokenId t : prompt) cond.push(t);
    if (guided) {
        uncond.emplace(policy);
        for (std::size_t i = 0; i < prompt.size(); ++i) uncond->push_null();
    }
    auto emit = [&](TokenId tok, double lp, double h, Phase ph) {
        r.seq.tokens.push_back(tok);
        r.log_probs.push_back(lp);
        r.entropies.push_back(h);
        r.phases.push_back(ph);
    };
    auto advance = [&](TokenId tok) {
        cond.push(tok);
        if (uncond) uncond->push(tok);
    };

    // reasoning
    bool closed = false;
    while (!closed) {
        if (r.seq.reasoning_len == policy.config().max_reasoning) break;
        const auto logits = cond.logits();
        const auto lp = masked_log_softmax(logits, policy.support(Phase::kText), opt.temperature);
        const int tok = draw(lp, rng);
        const double h = token_entropy(logits, opt.temperature, policy.support(Phase::kText));
        if (tok == sp.img_start) {
            emit(tok, lp[static_cast<std::size_t>(tok)], h, Phase::kText);
            advance(tok);
            closed = true;
        } else {
            emit(tok, lp[static_cast<std::size_t>(tok)], h, Phase::kText);
            ++r.seq.reasoning_len;
            advance(tok);
            if (tok == sp.eot) break;
        }
    }
    if (!closed) {
        emit(sp.img_start, 0.0, 0.0, Phase::kForced);
        advance(sp.img_start);
    }

    // image cells
    const auto& imask = policy.support(Phase::kImage);
    for (int i = 0; i < r.seq.image_len; ++i) {
        auto logits = cond.logits();
        if (guided) logits = guided_logits(logits, uncond->logits(), opt.cfg_scale);
        const auto lp = masked_log_softmax(logits, imask, opt.temperature);
        const int tok = draw(lp, rng);
        emit(tok, lp[static_cast<std::size_t>(tok)], token_entropy(logits, opt.temperature, imask), Phase::kImage);
        if (i + 1 < r.seq.image_len) advance(tok);
    }
    return r;
}

/// Builds one graph per item and back-propagates its scalar into per-chunk
/// buffers, which are then added to the policy's gradients in index order
/// (so results do not depend on the worker count). Returns the summed item values.
inline double accumulate_gradients(Policy& policy, std::size_t n, int workers,
                                   const std::function<grad::Var(grad::Graph&, const Policy::Bound&, std::size_t)>& item) {
    constexpr std::size_t kChunk = 4;
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    std::vector<grad::GradBuffer> bufs(chunks, grad::GradBuffer(policy.params()));
    std::vector<double> values(n, 0.0);
    parallel_for(chunks, workers, [&](std::size_t c) {
        for (std::size_t i = c * kChunk; i < std::min(n, (c + 1) * kChunk); ++i) {
            grad::Graph g;
            auto bound = policy.bind(g, &bufs[c]);
            grad::Var v = item(g, bound, i);
            values[i] = v.item();
            g.backward(v);
        }
    });
    for (const auto& b : bufs) b.add_to(policy.params());
    double total = 0.0;
    for (double v : values) total += v;
    return total;
}

// -- persistence ---------------------------------------------------------------

inline nlohmann::json to_json(const PolicyConfig& c) {
    return {{"embed_dim", c.embed_dim}, {"layers", c.layers},   {"heads", c.heads},   {"context", c.context},
            {"ffn_mult", c.ffn_mult},   {"max_reasoning", c.max_reasoning}, {"init_std", c.init_std},
            {"tie_image_words", c.tie_image_words}};
}

inline PolicyConfig policy_config_from_json(const nlohmann::json& j) {
    PolicyConfig c;
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.context = j.value("context", c.context);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.max_reasoning = j.value("max_reasoning", c.max_reasoning);
    c.init_std = j.value("init_std", c.init_std);
    c.tie_image_words = j.value("tie_image_words", c.tie_image_words);
    return c;
}

/// Checkpoint holding the policy parameters, its config under meta["policy"], plus `meta`.
inline grad::Checkpoint policy_checkpoint(const Policy& p, nlohmann::json meta = nlohmann::json::object()) {
    grad::Checkpoint ck;
    ck.meta = std::move(meta);
    ck.meta["policy"] = to_json(p.config());
    grad::append_params(ck, p.params());
    return ck;
}

inline Policy policy_from_checkpoint(const grad::Checkpoint& ck, std::shared_ptr<const Vocabulary> vocab) {
    if (!ck.meta.contains("policy")) throw data_error("BadCheckpoint", "checkpoint has no policy config");
    Policy p(std::move(vocab), policy_config_from_json(ck.meta.at("policy")));
    grad::restore_params(ck, p.params());
    return p;
}

}  // namespace thinkgen
