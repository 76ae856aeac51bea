#pragma once

// Token vocabulary, modality tagging and the interleaved
// prompt -> reasoning -> <img> -> image-cells sequence layout.

#include <algorithm>
#include <cctype>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "thinkgen/common.hpp"

namespace thinkgen {

enum class Modality { kText, kImage, kSpecial };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::kText: return "text";
        case Modality::kImage: return "image";
        case Modality::kSpecial: return "special";
    }
    return "?";
}

using TokenId = int;

/// The closed synthetic world: shape objects, colors and the grid the
/// image tokens tile.
struct World {
    std::vector<std::string> objects{"circle", "square", "triangle", "star",
                                     "heart",  "diamond", "cross",   "ring"};
    std::vector<std::string> plurals{"circles", "squares", "triangles", "stars",
                                     "hearts",  "diamonds", "crosses",  "rings"};
    std::vector<std::string> colors{"red", "blue", "green", "yellow", "purple", "orange"};
    int rows = 3;
    int cols = 3;

    int cells() const { return rows * cols; }
    int num_objects() const { return static_cast<int>(objects.size()); }
    int num_colors() const { return static_cast<int>(colors.size()); }

    /// First `n_obj` objects and `n_col` colors of the default world on an r x c grid.
    static World subset(int n_obj, int n_col, int r, int c) {
        World w;
        w.objects.resize(n_obj);
        w.plurals.resize(n_obj);
        w.colors.resize(n_col);
        w.rows = r;
        w.cols = c;
        return w;
    }
};

/// Template glue shared by prompts, chains of thought and tags.
inline const std::vector<std::string>& glue_words() {
    static const std::vector<std::string> words{
        // articles, counts, relations
        "a", "an", "the", "one", "two", "three", "four", "left", "right", "above", "below", "of",
        // connectives
        "and", "is", "there", "are", "in", "with",
        // prompt styles
        "image", "shows", "picture", "scene", "simple", "drawing", "photo", "minimal", "poster",
        // bridge
        "output", "richly", "detailed", "prompt",
        // reasoning filler
        "features", "soft", "natural", "warm", "golden", "bright", "studio", "cool", "morning",
        "light", "highlights", "calm", "cheerful", "quiet", "vivid", "mood",
        // tag filler
        "flat", "shapes", "grid", "clean", "art"};
    return words;
}

struct Specials {
    TokenId bos = -1;
    TokenId eot = -1;
    TokenId img_start = -1;
    TokenId pad = -1;
};

class Vocabulary {
   public:
    struct Entry {
        TokenId id;
        std::string surface;
        Modality modality;
    };

    explicit Vocabulary(World world = World{}) : world_(std::move(world)) {
        for (const auto& w : glue_words()) add(w, Modality::kText);
        for (const auto& w : world_.objects) add(w, Modality::kText);
        for (const auto& w : world_.plurals) add(w, Modality::kText);
        for (const auto& w : world_.colors) add(w, Modality::kText);
        num_words_ = size();
        specials_.bos = add("<bos>", Modality::kSpecial);
        specials_.eot = add("<eot>", Modality::kSpecial);
        specials_.img_start = add("<img>", Modality::kSpecial);
        specials_.pad = add("<pad>", Modality::kSpecial);
        image_base_ = size();
        add("<empty>", Modality::kImage);
        for (const auto& o : world_.objects)
            for (const auto& c : world_.colors) add("<" + c + "_" + o + ">", Modality::kImage);
    }

    const World& world() const { return world_; }
    int size() const { return static_cast<int>(entries_.size()); }
    const std::vector<Entry>& entries() const { return entries_; }
    const Specials& specials() const { return specials_; }

    int num_words() const { return num_words_; }
    int image_base() const { return image_base_; }
    int num_image_tokens() const { return 1 + world_.num_objects() * world_.num_colors(); }
    /// Tokens the policy may emit while reasoning: every word, <eot> and <img>.
    int text_support_size() const { return num_words_ + 2; }

    Modality modality(TokenId id) const { return entries_.at(static_cast<std::size_t>(id)).modality; }
    bool is_text(TokenId id) const { return in_range(id) && modality(id) == Modality::kText; }
    bool is_image(TokenId id) const { return in_range(id) && modality(id) == Modality::kImage; }
    bool is_special(TokenId id) const { return in_range(id) && modality(id) == Modality::kSpecial; }
    bool in_range(TokenId id) const { return id >= 0 && id < size(); }

    const std::string& surface(TokenId id) const { return entries_.at(static_cast<std::size_t>(id)).surface; }

    std::optional<TokenId> find(const std::string& word) const {
        auto it = index_.find(word);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    TokenId id(const std::string& word) const {
        auto t = find(word);
        if (!t) throw data_error("UnknownWord", word);
        return *t;
    }

    TokenId empty_cell() const { return image_base_; }
    TokenId cell_token(int object, int color) const {
        return image_base_ + 1 + object * world_.num_colors() + color;
    }
    /// (object, color) of an image token, or nullopt for EMPTY.
    std::optional<std::pair<int, int>> cell_of(TokenId id) const {
        if (id <= image_base_ || !is_image(id)) return std::nullopt;
        const int k = id - image_base_ - 1;
        return std::make_pair(k / world_.num_colors(), k % world_.num_colors());
    }

    nlohmann::json to_json() const {
        nlohmann::json tokens = nlohmann::json::array();
        for (const auto& e : entries_)
            tokens.push_back({{"id", e.id}, {"surface", e.surface}, {"modality", modality_name(e.modality)}});
        return {{"tokens", tokens},
                {"specials",
                 {{"bos", specials_.bos}, {"eot", specials_.eot}, {"img_start", specials_.img_start}, {"pad", specials_.pad}}}};
    }

   private:
    TokenId add(const std::string& surface, Modality m) {
        const TokenId id = size();
        if (!index_.emplace(surface, id).second) throw config_error("DuplicateToken", surface);
        entries_.push_back({id, surface, m});
        return id;
    }

    World world_;
    std::vector<Entry> entries_;
    std::unordered_map<std::string, TokenId> index_;
    Specials specials_;
    int num_words_ = 0;
    int image_base_ = 0;
};

/// Case-folded words with every non-alphanumeric character dropped.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string raw;
    while (in >> raw) {
        std::string w;
        for (unsigned char c : raw)
            if (std::isalnum(c)) w.push_back(static_cast<char>(std::tolower(c)));
        if (!w.empty()) out.push_back(std::move(w));
    }
    return out;
}

inline std::vector<TokenId> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<TokenId> ids;
    for (const auto& w : split_words(text)) {
        auto t = vocab.find(w);
        if (!t || !vocab.is_text(*t)) throw data_error("UnknownWord", w);
        ids.push_back(*t);
    }
    return ids;
}

inline std::string detokenize(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
    std::string out;
    for (TokenId t : ids) {
        if (!out.empty()) out.push_back(' ');
        out += vocab.surface(t);
    }
    return out;
}

struct InterleavedSequence {
    std::vector<TokenId> tokens;
    int prompt_len = 0;
    int reasoning_len = 0;
    int image_len = 0;

    int response_len() const { return reasoning_len + 1 + image_len; }
    int img_start_pos() const { return prompt_len + reasoning_len; }
    std::vector<TokenId> image_tokens() const {
        return {tokens.end() - image_len, tokens.end()};
    }
    std::vector<TokenId> reasoning_tokens() const {
        return {tokens.begin() + prompt_len, tokens.begin() + prompt_len + reasoning_len};
    }
    bool operator==(const InterleavedSequence&) const = default;
};

struct Violation {
    std::string invariant;
    std::string detail;
};

/// Returns the first violated layout invariant, or nullopt when well formed.
inline std::optional<Violation> validate_sequence(const InterleavedSequence& seq, const Vocabulary& vocab) {
    const int expected = seq.prompt_len + seq.reasoning_len + 1 + seq.image_len;
    if (seq.prompt_len < 0 || seq.reasoning_len < 0 || seq.image_len < 0 ||
        static_cast<int>(seq.tokens.size()) != expected)
        return Violation{"length", "tokens.size()=" + std::to_string(seq.tokens.size()) +
                                       " expected " + std::to_string(expected)};
    if (seq.image_len != vocab.world().cells())
        return Violation{"image_len", std::to_string(seq.image_len) + " != " + std::to_string(vocab.world().cells())};
    for (TokenId t : seq.tokens)
        if (!vocab.in_range(t)) return Violation{"token range", std::to_string(t)};
    const auto& sp = vocab.specials();
    if (seq.tokens[static_cast<std::size_t>(seq.img_start_pos())] != sp.img_start)
        return Violation{"img_start", "marker missing at position " + std::to_string(seq.img_start_pos())};
    for (int i = 0; i < seq.prompt_len; ++i)
        if (!vocab.is_text(seq.tokens[static_cast<std::size_t>(i)]))
            return Violation{"modality grammar", "non-text token in prompt at " + std::to_string(i)};
    for (int i = 0; i < seq.reasoning_len; ++i) {
        const TokenId t = seq.tokens[static_cast<std::size_t>(seq.prompt_len + i)];
        const bool last = i + 1 == seq.reasoning_len;
        if (!(vocab.is_text(t) || (last && t == sp.eot)))
            return Violation{"modality grammar", "non-text token in reasoning at " + std::to_string(seq.prompt_len + i)};
    }
    for (int i = seq.img_start_pos() + 1; i < expected; ++i)
        if (!vocab.is_image(seq.tokens[static_cast<std::size_t>(i)]))
            return Violation{"modality grammar", "non-image token in image span at " + std::to_string(i)};
    return std::nullopt;
}

}  // namespace thinkgen
