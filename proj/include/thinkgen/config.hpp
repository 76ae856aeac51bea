#pragma once

// Plain-text `key = value` files; '#' starts a comment.

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "thinkgen/common.hpp"

namespace thinkgen {

class KvConfig {
   public:
    KvConfig() = default;

    static KvConfig parse(std::istream& in, const std::string& origin = "<config>") {
        KvConfig c;
        std::string line;
        int n = 0;
        while (std::getline(in, line)) {
            ++n;
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw config_error("ParseError", origin + ":" + std::to_string(n) + ": expected key = value");
            const auto key = trim(line.substr(0, eq));
            if (key.empty()) throw config_error("ParseError", origin + ":" + std::to_string(n) + ": empty key");
            if (c.values_.count(key)) throw config_error("ParseError", origin + ":" + std::to_string(n) + ": duplicate key " + key);
            c.values_[key] = trim(line.substr(eq + 1));
        }
        return c;
    }

    static KvConfig parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static KvConfig load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw config_error("ConfigNotFound", "cannot open " + path);
        return parse(f, path);
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get(const std::string& key, const std::string& fallback) const { return lookup(key).value_or(fallback); }
    std::string get(const std::string& key, const char* fallback) const { return get(key, std::string(fallback)); }

    double get(const std::string& key, double fallback) const {
        auto v = lookup(key);
        if (!v) return fallback;
        try {
            std::size_t used = 0;
            const double d = std::stod(*v, &used);
            if (used != v->size()) throw std::invalid_argument(*v);
            return d;
        } catch (const std::exception&) {
            throw config_error("BadValue", key + " = " + *v + " is not a number");
        }
    }

    long get(const std::string& key, long fallback) const {
        auto v = lookup(key);
        if (!v) return fallback;
        try {
            std::size_t used = 0;
            const long l = std::stol(*v, &used);
            if (used != v->size()) throw std::invalid_argument(*v);
            return l;
        } catch (const std::exception&) {
            throw config_error("BadValue", key + " = " + *v + " is not an integer");
        }
    }

    int get(const std::string& key, int fallback) const { return static_cast<int>(get(key, static_cast<long>(fallback))); }

    bool get(const std::string& key, bool fallback) const {
        auto v = lookup(key);
        if (!v) return fallback;
        if (*v == "true" || *v == "1" || *v == "yes") return true;
        if (*v == "false" || *v == "0" || *v == "no") return false;
        throw config_error("BadValue", key + " = " + *v + " is not a boolean");
    }

    /// Throws UnknownKey for any key outside `known`.
    void check_keys(const std::set<std::string>& known) const {
        for (const auto& [k, v] : values_)
            if (!known.count(k)) throw config_error("UnknownKey", "unknown config key '" + k + "'");
    }

    const std::map<std::string, std::string>& values() const { return values_; }

   private:
    std::optional<std::string> lookup(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace thinkgen
