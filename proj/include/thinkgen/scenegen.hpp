#pragma once

// Deterministic synthetic world: compositional prompts, scenes that satisfy
// them, template chains of thought and augmentation records.

#include <algorithm>
#include <array>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinkgen/common.hpp"
#include "thinkgen/corelex.hpp"

namespace thinkgen {

enum class Category { kSingleObject, kTwoObject, kCounting, kColors, kPosition, kColorAttribution, kTwoObjectCounts };

inline constexpr std::array<Category, 7> kAllCategories{Category::kSingleObject, Category::kTwoObject,
                                                        Category::kCounting,     Category::kColors,
                                                        Category::kPosition,     Category::kColorAttribution,
                                                        Category::kTwoObjectCounts};

/// The six benchmark-style columns (the two-objects-with-counts variant is extra).
inline constexpr std::array<Category, 6> kBenchmarkCategories{Category::kSingleObject, Category::kTwoObject,
                                                              Category::kCounting,     Category::kColors,
                                                              Category::kPosition,     Category::kColorAttribution};

inline const char* category_name(Category c) {
    switch (c) {
        case Category::kSingleObject: return "SINGLE_OBJECT";
        case Category::kTwoObject: return "TWO_OBJECT";
        case Category::kCounting: return "COUNTING";
        case Category::kColors: return "COLORS";
        case Category::kPosition: return "POSITION";
        case Category::kColorAttribution: return "COLOR_ATTRIBUTION";
        case Category::kTwoObjectCounts: return "TWO_OBJECT_COUNTS";
    }
    return "?";
}

inline Category parse_category(const std::string& s) {
    for (Category c : kAllCategories)
        if (s == category_name(c)) return c;
    throw config_error("UnknownCategory", s);
}

enum class Relation { kNone, kLeftOf, kRightOf, kAbove, kBelow };

inline const char* relation_name(Relation r) {
    switch (r) {
        case Relation::kNone: return "NONE";
        case Relation::kLeftOf: return "LEFT_OF";
        case Relation::kRightOf: return "RIGHT_OF";
        case Relation::kAbove: return "ABOVE";
        case Relation::kBelow: return "BELOW";
    }
    return "?";
}

inline Relation parse_relation(const std::string& s) {
    for (Relation r : {Relation::kNone, Relation::kLeftOf, Relation::kRightOf, Relation::kAbove, Relation::kBelow})
        if (s == relation_name(r)) return r;
    throw data_error("UnknownRelation", s);
}

inline Relation inverse(Relation r) {
    switch (r) {
        case Relation::kLeftOf: return Relation::kRightOf;
        case Relation::kRightOf: return Relation::kLeftOf;
        case Relation::kAbove: return Relation::kBelow;
        case Relation::kBelow: return Relation::kAbove;
        case Relation::kNone: return Relation::kNone;
    }
    return Relation::kNone;
}

/// One demanded object. Uncounted means "at least one"; a count means exactly
/// that many cells of the object, all of the given color when one is set.
struct Constraint {
    int object = 0;
    std::optional<int> color;
    std::optional<int> count;
    Relation relation = Relation::kNone;
    int target = -1;  // index of the related constraint

    bool operator==(const Constraint&) const = default;
};

struct PromptSpec {
    Category category = Category::kSingleObject;
    std::vector<Constraint> constraints;
    std::string surface;

    int demanded_cells() const {
        int n = 0;
        for (const auto& c : constraints) n += c.count.value_or(1);
        return n;
    }
    bool operator==(const PromptSpec&) const = default;
};

struct Cell {
    int object = 0;
    int color = 0;
    bool operator==(const Cell&) const = default;
};

/// Row-major grid; nullopt is an empty cell.
struct SceneSpec {
    int rows = 0;
    int cols = 0;
    std::vector<std::optional<Cell>> cells;

    SceneSpec() = default;
    SceneSpec(int r, int c) : rows(r), cols(c), cells(static_cast<std::size_t>(r) * c) {}
    std::optional<Cell>& at(int r, int c) { return cells[static_cast<std::size_t>(r) * cols + c]; }
    const std::optional<Cell>& at(int r, int c) const { return cells[static_cast<std::size_t>(r) * cols + c]; }
    bool operator==(const SceneSpec&) const = default;
};

struct PromptRecord {
    std::string concise_caption;
    std::vector<std::string> paraphrases;
    std::vector<std::string> tags;
    std::vector<std::string> varied_captions;
    std::vector<std::string> object_prompts;
    std::string detailed_caption;

    bool operator==(const PromptRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Surface templates

namespace text {

inline const std::array<const char*, 5> kCountWords{"zero", "one", "two", "three", "four"};

inline std::string count_word(int n) {
    if (n < 1 || n > 4) throw data_error("BadCount", std::to_string(n));
    return kCountWords[static_cast<std::size_t>(n)];
}

inline std::string article_for(const std::string& next) {
    return std::string("aeiou").find(next.front()) != std::string::npos ? "an" : "a";
}

inline std::string relation_phrase(Relation r) {
    switch (r) {
        case Relation::kLeftOf: return "left of";
        case Relation::kRightOf: return "right of";
        case Relation::kAbove: return "above";
        case Relation::kBelow: return "below";
        case Relation::kNone: break;
    }
    return "";
}

inline std::string relation_word(Relation r) {
    switch (r) {
        case Relation::kLeftOf: return "left";
        case Relation::kRightOf: return "right";
        case Relation::kAbove: return "above";
        case Relation::kBelow: return "below";
        case Relation::kNone: break;
    }
    return "";
}

/// Noun phrase as it appears in prompts. Related objects read "a red circle"
/// even though they demand exactly one.
inline std::string prompt_np(const Constraint& c, const World& w, bool relational) {
    std::string tail = c.color ? w.colors[static_cast<std::size_t>(*c.color)] + " " : "";
    if (c.count && !relational) {
        const int n = *c.count;
        tail += n > 1 ? w.plurals[static_cast<std::size_t>(c.object)] : w.objects[static_cast<std::size_t>(c.object)];
        return count_word(n) + " " + tail;
    }
    tail += w.objects[static_cast<std::size_t>(c.object)];
    return article_for(tail) + " " + tail;
}

/// Noun phrase as it appears in chains of thought: always spelled with a count word.
inline std::string cot_np(const Constraint& c, const World& w) {
    const int n = c.count.value_or(1);
    std::string s = count_word(n) + " ";
    if (c.color) s += w.colors[static_cast<std::size_t>(*c.color)] + " ";
    s += n > 1 ? w.plurals[static_cast<std::size_t>(c.object)] : w.objects[static_cast<std::size_t>(c.object)];
    return s;
}

inline bool relational(const PromptSpec& s) { return s.category == Category::kPosition; }

/// Prompt body; `swapped` reverses the two objects (inverting any relation).
inline std::string body(const PromptSpec& s, const World& w, bool swapped = false) {
    const auto& cs = s.constraints;
    if (cs.size() == 1) return prompt_np(cs[0], w, false);
    const bool rel = relational(s);
    const Constraint& a = swapped ? cs[1] : cs[0];
    const Constraint& b = swapped ? cs[0] : cs[1];
    if (rel) {
        const Relation r = swapped ? inverse(cs[0].relation) : cs[0].relation;
        return prompt_np(a, w, true) + " " + relation_phrase(r) + " " + prompt_np(b, w, true);
    }
    return prompt_np(a, w, false) + " and " + prompt_np(b, w, false);
}

// Stylistic filler for chains of thought, chosen from the constraint tuple.
inline const std::array<const char*, 4> kLights{"soft natural light", "warm golden light", "bright studio light",
                                                "cool morning light"};
inline const std::array<const char*, 4> kMoods{"calm", "cheerful", "quiet", "vivid"};
inline const std::array<const char*, 8> kTagFiller{"scene", "simple", "shapes", "flat", "grid", "minimal", "clean", "art"};

inline std::size_t style_key(const PromptSpec& s) {
    std::size_t key = 0;
    for (std::size_t k = 0; k < s.constraints.size(); ++k) {
        const auto& c = s.constraints[k];
        key += (k + 1) * static_cast<std::size_t>(c.object * 7 + c.color.value_or(0) * 3 + c.count.value_or(0) * 5 +
                                                  static_cast<int>(c.relation) * 11);
    }
    return key;
}

}  // namespace text

inline std::string render_concise(const PromptSpec& s, const World& w) { return text::body(s, w); }

// ---------------------------------------------------------------------------
// Generation

/// Samples a satisfiable compositional prompt of the given category.
inline PromptSpec gen_prompt(Category cat, const World& w, Rng& rng) {
    const int n_obj = w.num_objects(), n_col = w.num_colors(), cap = w.cells();
    auto two_objects = [&]() {
        if (n_obj < 2) throw config_error("SmallWorld", "two-object categories need at least two objects");
        const int a = static_cast<int>(rng.below(static_cast<std::size_t>(n_obj)));
        int b = static_cast<int>(rng.below(static_cast<std::size_t>(n_obj - 1)));
        if (b >= a) ++b;
        return std::pair{a, b};
    };
    auto any_color = [&]() { return static_cast<int>(rng.below(static_cast<std::size_t>(n_col))); };
    auto maybe_color = [&]() -> std::optional<int> {
        if (rng.bernoulli(0.5)) return any_color();
        return std::nullopt;
    };
    const int max_count = std::min(4, cap);

    PromptSpec s;
    s.category = cat;
    switch (cat) {
        case Category::kSingleObject:
            s.constraints.push_back({static_cast<int>(rng.below(static_cast<std::size_t>(n_obj)))});
            break;
        case Category::kColors:
            s.constraints.push_back({static_cast<int>(rng.below(static_cast<std::size_t>(n_obj))), any_color()});
            break;
        case Category::kCounting: {
            Constraint c{static_cast<int>(rng.below(static_cast<std::size_t>(n_obj)))};
            c.color = maybe_color();
            c.count = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(max_count)));
            s.constraints.push_back(c);
            break;
        }
        case Category::kTwoObject: {
            auto [a, b] = two_objects();
            s.constraints.push_back({a});
            s.constraints.push_back({b});
            break;
        }
        case Category::kColorAttribution: {
            auto [a, b] = two_objects();
            const int ca = any_color();
            int cb = n_col > 1 ? static_cast<int>(rng.below(static_cast<std::size_t>(n_col - 1))) : ca;
            if (n_col > 1 && cb >= ca) ++cb;
            s.constraints.push_back({a, ca});
            s.constraints.push_back({b, cb});
            break;
        }
        case Category::kPosition: {
            auto [a, b] = two_objects();
            static constexpr std::array<Relation, 4> rels{Relation::kLeftOf, Relation::kRightOf, Relation::kAbove,
                                                          Relation::kBelow};
            Relation r = rels[rng.below(4)];
            // a 1-row or 1-column grid cannot host vertical or horizontal relations
            if (w.rows < 2) r = rng.bernoulli(0.5) ? Relation::kLeftOf : Relation::kRightOf;
            if (w.cols < 2) r = rng.bernoulli(0.5) ? Relation::kAbove : Relation::kBelow;
            Constraint ca{a, maybe_color(), 1, r, 1};
            Constraint cb{b, maybe_color(), 1};
            s.constraints.push_back(ca);
            s.constraints.push_back(cb);
            break;
        }
        case Category::kTwoObjectCounts: {
            auto [a, b] = two_objects();
            int na, nb;
            do {
                na = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(max_count)));
                nb = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(max_count)));
            } while (na + nb > cap);
            s.constraints.push_back({a, maybe_color(), na});
            s.constraints.push_back({b, maybe_color(), nb});
            break;
        }
    }
    s.surface = render_concise(s, w);
    return s;
}

/// Places the demanded cells, then fills every other cell with EMPTY (p=0.8)
/// or a distractor object that no constraint mentions.
inline SceneSpec realize_scene(const PromptSpec& spec, const World& w, Rng& rng, double distractor_p = 0.2) {
    if (spec.demanded_cells() > w.cells())
        throw data_error("Unsatisfiable", spec.surface + " needs " + std::to_string(spec.demanded_cells()) + " cells");
    SceneSpec scene(w.rows, w.cols);
    auto color_of = [&](const Constraint& c) {
        return c.color ? *c.color : static_cast<int>(rng.below(static_cast<std::size_t>(w.num_colors())));
    };
    std::vector<int> free;
    for (int i = 0; i < w.cells(); ++i) free.push_back(i);

    if (spec.category == Category::kPosition) {
        const auto& a = spec.constraints.at(0);
        const auto& b = spec.constraints.at(1);
        std::vector<std::pair<int, int>> pairs;
        for (int i = 0; i < w.cells(); ++i)
            for (int j = 0; j < w.cells(); ++j) {
                if (i == j) continue;
                const int ri = i / w.cols, ci = i % w.cols, rj = j / w.cols, cj = j % w.cols;
                const bool ok = (a.relation == Relation::kLeftOf && ci < cj) || (a.relation == Relation::kRightOf && ci > cj) ||
                                (a.relation == Relation::kAbove && ri < rj) || (a.relation == Relation::kBelow && ri > rj);
                if (ok) pairs.emplace_back(i, j);
            }
        if (pairs.empty()) throw data_error("Unsatisfiable", spec.surface);
        const auto [i, j] = pairs[rng.below(pairs.size())];
        scene.cells[static_cast<std::size_t>(i)] = Cell{a.object, color_of(a)};
        scene.cells[static_cast<std::size_t>(j)] = Cell{b.object, color_of(b)};
        std::erase(free, i);
        std::erase(free, j);
    } else {
        rng.shuffle(free);
        std::size_t next = 0;
        for (const auto& c : spec.constraints)
            for (int k = 0; k < c.count.value_or(1); ++k)
                scene.cells[static_cast<std::size_t>(free[next++])] = Cell{c.object, color_of(c)};
        free.erase(free.begin(), free.begin() + static_cast<std::ptrdiff_t>(next));
        std::sort(free.begin(), free.end());
    }

    std::vector<int> others;
    for (int o = 0; o < w.num_objects(); ++o) {
        bool used = false;
        for (const auto& c : spec.constraints) used = used || c.object == o;
        if (!used) others.push_back(o);
    }
    for (int i : free) {
        if (others.empty() || !rng.bernoulli(distractor_p)) continue;
        const int o = others[rng.below(others.size())];
        scene.cells[static_cast<std::size_t>(i)] = Cell{o, static_cast<int>(rng.below(static_cast<std::size_t>(w.num_colors())))};
    }
    return scene;
}

/// Template chain of thought built only from prompt-visible facts.
inline std::string render_detailed(const PromptSpec& spec, const World& w) {
    const auto& cs = spec.constraints;
    std::string out = "a scene features ";
    if (cs.size() == 1) {
        out += text::cot_np(cs[0], w);
    } else if (text::relational(spec)) {
        out += text::cot_np(cs[0], w) + " " + text::relation_phrase(cs[0].relation) + " " + text::cot_np(cs[1], w);
    } else {
        out += text::cot_np(cs[0], w) + " and " + text::cot_np(cs[1], w);
    }
    const std::size_t key = text::style_key(spec);
    const auto& c0 = cs[0];
    std::string head = c0.color ? w.colors[static_cast<std::size_t>(*c0.color)] + " " : "";
    head += c0.count.value_or(1) > 1 ? w.plurals[static_cast<std::size_t>(c0.object)] : w.objects[static_cast<std::size_t>(c0.object)];
    out += ", ";
    out += text::kLights[key % text::kLights.size()];
    out += " highlights the " + head + ", ";
    out += text::kMoods[(key / text::kLights.size()) % text::kMoods.size()];
    out += " mood";
    return out;
}

inline std::string render_detailed(const PromptSpec& spec, const SceneSpec& /*scene*/, const World& w) {
    return render_detailed(spec, w);
}

/// Augmentation record: paraphrases and varied captions keep every constraint.
inline PromptRecord augment(const PromptSpec& spec, const World& w) {
    PromptRecord r;
    r.concise_caption = render_concise(spec, w);
    const std::string body = text::body(spec, w);
    const std::string swapped = text::body(spec, w, true);
    r.paraphrases = {"the image shows " + body, body + " in the scene", "a picture of " + swapped};
    r.varied_captions = {"a simple drawing of " + body, "a photo of " + swapped, "a minimal poster with " + body};

    const bool rel = text::relational(spec);
    auto add_tag = [&](const std::string& t) {
        if (std::find(r.tags.begin(), r.tags.end(), t) == r.tags.end()) r.tags.push_back(t);
    };
    for (const auto& c : spec.constraints) {
        if (c.count && !rel) add_tag(text::count_word(*c.count));
        if (c.color) add_tag(w.colors[static_cast<std::size_t>(*c.color)]);
        add_tag(w.objects[static_cast<std::size_t>(c.object)]);
        if (c.relation != Relation::kNone) add_tag(text::relation_word(c.relation));
    }
    const std::size_t want = std::max<std::size_t>(r.tags.size(), 5 + text::style_key(spec) % 4);
    for (const char* f : text::kTagFiller) {
        if (r.tags.size() >= std::min<std::size_t>(want, 8)) break;
        add_tag(f);
    }
    for (std::size_t k = 0; k < spec.constraints.size() && k < 3; ++k)
        r.object_prompts.push_back(text::prompt_np(spec.constraints[k], w, rel));
    r.detailed_caption = render_detailed(spec, w);
    return r;
}

// ---------------------------------------------------------------------------
// Parsing surfaces back to constraints (inverse of the templates above)

/// Parses any concise, paraphrase or varied-caption surface. Returns nullopt
/// for strings outside the template grammar.
inline std::optional<PromptSpec> parse_prompt(const std::string& surface, const World& w) {
    auto words = split_words(surface);
    static const std::vector<std::vector<std::string>> prefixes{{"the", "image", "shows"},
                                                                {"a", "picture", "of"},
                                                                {"a", "simple", "drawing", "of"},
                                                                {"a", "photo", "of"},
                                                                {"a", "minimal", "poster", "with"}};
    for (const auto& p : prefixes)
        if (words.size() > p.size() && std::equal(p.begin(), p.end(), words.begin())) {
            words.erase(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(p.size()));
            break;
        }
    const std::vector<std::string> suffix{"in", "the", "scene"};
    if (words.size() > suffix.size() && std::equal(suffix.begin(), suffix.end(), words.end() - 3)) words.resize(words.size() - 3);

    std::size_t i = 0;
    auto find_in = [](const std::vector<std::string>& v, const std::string& s) -> int {
        auto it = std::find(v.begin(), v.end(), s);
        return it == v.end() ? -1 : static_cast<int>(it - v.begin());
    };
    struct Np {
        Constraint c;
        bool article = false;
    };
    auto np = [&]() -> std::optional<Np> {
        if (i >= words.size()) return std::nullopt;
        Np out;
        const std::string& det = words[i];
        if (det == "a" || det == "an") {
            out.article = true;
        } else {
            int n = -1;
            for (int k = 1; k <= 4; ++k)
                if (det == text::count_word(k)) n = k;
            if (n < 0) return std::nullopt;
            out.c.count = n;
        }
        ++i;
        if (i < words.size()) {
            const int col = find_in(w.colors, words[i]);
            if (col >= 0) {
                out.c.color = col;
                ++i;
            }
        }
        if (i >= words.size()) return std::nullopt;
        int obj = find_in(w.objects, words[i]);
        if (obj < 0) obj = find_in(w.plurals, words[i]);
        if (obj < 0) return std::nullopt;
        out.c.object = obj;
        ++i;
        return out;
    };

    auto first = np();
    if (!first) return std::nullopt;
    PromptSpec s;
    if (i == words.size()) {
        s.constraints.push_back(first->c);
        s.category = first->c.count ? Category::kCounting : (first->c.color ? Category::kColors : Category::kSingleObject);
        s.surface = render_concise(s, w);
        return s;
    }
    Relation rel = Relation::kNone;
    if (words[i] == "and") {
        ++i;
    } else if ((words[i] == "left" || words[i] == "right") && i + 1 < words.size() && words[i + 1] == "of") {
        rel = words[i] == "left" ? Relation::kLeftOf : Relation::kRightOf;
        i += 2;
    } else if (words[i] == "above" || words[i] == "below") {
        rel = words[i] == "above" ? Relation::kAbove : Relation::kBelow;
        ++i;
    } else {
        return std::nullopt;
    }
    auto second = np();
    if (!second || i != words.size()) return std::nullopt;
    Constraint a = first->c, b = second->c;
    if (rel != Relation::kNone) {
        if (!first->article || !second->article) return std::nullopt;
        a.count = 1;
        b.count = 1;
        a.relation = rel;
        a.target = 1;
        s.category = Category::kPosition;
    } else if (a.count && b.count) {
        s.category = Category::kTwoObjectCounts;
    } else if (!a.count && !b.count && a.color && b.color) {
        s.category = Category::kColorAttribution;
    } else if (!a.count && !b.count && !a.color && !b.color) {
        s.category = Category::kTwoObject;
    } else {
        return std::nullopt;
    }
    s.constraints = {a, b};
    s.surface = render_concise(s, w);
    return s;
}

/// Order-independent form of a spec's constraints: relations point LEFT_OF or
/// ABOVE, unrelated pairs sorted.
inline std::vector<Constraint> canonical_constraints(const PromptSpec& s) {
    auto cs = s.constraints;
    if (cs.size() == 2) {
        if (cs[0].relation == Relation::kRightOf || cs[0].relation == Relation::kBelow) {
            Constraint a = cs[1], b = cs[0];
            a.relation = inverse(b.relation);
            a.target = 1;
            b.relation = Relation::kNone;
            b.target = -1;
            cs = {a, b};
        } else if (cs[0].relation == Relation::kNone) {
            auto key = [](const Constraint& c) { return std::tuple(c.object, c.color.value_or(-1), c.count.value_or(-1)); };
            if (key(cs[1]) < key(cs[0])) std::swap(cs[0], cs[1]);
        }
    }
    return cs;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const PromptSpec& s, const World& w) {
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : s.constraints) {
        nlohmann::json j;
        j["object"] = w.objects.at(static_cast<std::size_t>(c.object));
        j["color"] = c.color ? nlohmann::json(w.colors.at(static_cast<std::size_t>(*c.color))) : nlohmann::json(nullptr);
        j["count"] = c.count ? nlohmann::json(*c.count) : nlohmann::json(nullptr);
        j["relation"] = relation_name(c.relation);
        j["target"] = c.target;
        cs.push_back(j);
    }
    return {{"category", category_name(s.category)}, {"constraints", cs}, {"surface", s.surface}};
}

namespace detail {
inline int index_of(const std::vector<std::string>& v, const std::string& s, const char* what) {
    auto it = std::find(v.begin(), v.end(), s);
    if (it == v.end()) throw data_error("UnknownName", std::string(what) + " '" + s + "'");
    return static_cast<int>(it - v.begin());
}
}  // namespace detail

inline PromptSpec prompt_spec_from_json(const nlohmann::json& j, const World& w) {
    PromptSpec s;
    s.category = parse_category(j.at("category").get<std::string>());
    for (const auto& cj : j.at("constraints")) {
        Constraint c;
        c.object = detail::index_of(w.objects, cj.at("object").get<std::string>(), "object");
        if (!cj.at("color").is_null()) c.color = detail::index_of(w.colors, cj.at("color").get<std::string>(), "color");
        if (!cj.at("count").is_null()) c.count = cj.at("count").get<int>();
        c.relation = parse_relation(cj.at("relation").get<std::string>());
        c.target = cj.at("target").get<int>();
        s.constraints.push_back(c);
    }
    s.surface = j.at("surface").get<std::string>();
    return s;
}

inline nlohmann::json to_json(const SceneSpec& s, const World& w) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : s.cells) {
        if (c)
            cells.push_back({{"object", w.objects.at(static_cast<std::size_t>(c->object))},
                             {"color", w.colors.at(static_cast<std::size_t>(c->color))}});
        else
            cells.push_back(nullptr);
    }
    return {{"rows", s.rows}, {"cols", s.cols}, {"cells", cells}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j, const World& w) {
    SceneSpec s(j.at("rows").get<int>(), j.at("cols").get<int>());
    const auto& cells = j.at("cells");
    if (cells.size() != s.cells.size()) throw data_error("ParseError", "scene cell count");
    for (std::size_t i = 0; i < cells.size(); ++i)
        if (!cells[i].is_null())
            s.cells[i] = Cell{detail::index_of(w.objects, cells[i].at("object").get<std::string>(), "object"),
                              detail::index_of(w.colors, cells[i].at("color").get<std::string>(), "color")};
    return s;
}

inline nlohmann::json to_json(const PromptRecord& r) {
    return {{"concise_caption", r.concise_caption}, {"paraphrases", r.paraphrases},       {"tags", r.tags},
            {"varied_captions", r.varied_captions}, {"object_prompts", r.object_prompts}, {"detailed_caption", r.detailed_caption}};
}

inline PromptRecord record_from_json(const nlohmann::json& j) {
    PromptRecord r;
    r.concise_caption = j.at("concise_caption").get<std::string>();
    r.paraphrases = j.at("paraphrases").get<std::vector<std::string>>();
    r.tags = j.at("tags").get<std::vector<std::string>>();
    r.varied_captions = j.at("varied_captions").get<std::vector<std::string>>();
    r.object_prompts = j.at("object_prompts").get<std::vector<std::string>>();
    r.detailed_caption = j.at("detailed_caption").get<std::string>();
    if (r.paraphrases.size() != 3 || r.varied_captions.size() != 3 || r.tags.size() < 5 || r.tags.size() > 8 ||
        r.object_prompts.empty() || r.object_prompts.size() > 3)
        throw data_error("ParseError", "record field cardinality");
    return r;
}

// ---------------------------------------------------------------------------
// Datasets (JSON Lines)

struct DataRecord {
    std::uint64_t seed = 0;
    PromptSpec spec;
    SceneSpec scene;
    PromptRecord record;

    bool operator==(const DataRecord&) const = default;
};

/// Per-record seed of the i-th example drawn from `stream` (e.g. "data", "eval").
inline std::uint64_t example_seed(std::uint64_t seed, std::string_view stream, std::uint64_t i) {
    return derive_seed(seed, stream, i);
}

inline DataRecord make_record(std::uint64_t example_seed, const std::vector<Category>& categories, const World& w) {
    if (categories.empty()) throw config_error("NoCategories", "at least one category is required");
    Rng rng(example_seed);
    DataRecord r;
    r.seed = example_seed;
    r.spec = gen_prompt(categories[rng.below(categories.size())], w, rng);
    r.scene = realize_scene(r.spec, w, rng);
    r.record = augment(r.spec, w);
    return r;
}

inline std::vector<DataRecord> generate_dataset(std::size_t n, std::uint64_t seed, const std::vector<Category>& categories,
                                                const World& w, std::string_view stream = "data") {
    std::vector<DataRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_record(example_seed(seed, stream, i), categories, w));
    return out;
}

inline std::string record_line(const DataRecord& r, const World& w) {
    nlohmann::json j{{"seed", r.seed}, {"prompt_spec", to_json(r.spec, w)}, {"scene", to_json(r.scene, w)}, {"record", to_json(r.record)}};
    return j.dump();
}

inline void write_dataset(const std::string& path, const std::vector<DataRecord>& records, const World& w) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("IOError", "cannot write " + path);
    for (const auto& r : records) out << record_line(r, w) << '\n';
    if (!out) throw data_error("IOError", "short write " + path);
}

inline void emit_dataset(std::size_t n, std::uint64_t seed, const std::string& path, const std::vector<Category>& categories,
                         const World& w) {
    write_dataset(path, generate_dataset(n, seed, categories, w), w);
}

inline std::vector<DataRecord> load_dataset(const std::string& path, const World& w) {
    std::ifstream in(path);
    if (!in) throw data_error("IOError", "cannot open " + path);
    std::vector<DataRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            DataRecord r;
            r.seed = j.at("seed").get<std::uint64_t>();
            r.spec = prompt_spec_from_json(j.at("prompt_spec"), w);
            r.scene = scene_from_json(j.at("scene"), w);
            r.record = record_from_json(j.at("record"));
            out.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw data_error("ParseError", path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace thinkgen
