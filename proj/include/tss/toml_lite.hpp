#pragma once

#include <cctype>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tss/tensor.hpp"

namespace tss {

struct ConfigError : TensorError {
    using TensorError::TensorError;
};

// Minimal TOML-style key/value reader: [section] headers, `key = value`
// lines, # comments. Values: integers, floats, booleans, "strings", and
// [v, v, ...] integer lists. Enough to round-trip every config this project
// writes; anything fancier is rejected loudly.
class TomlLite {
public:
    static TomlLite parse(const std::string& text) {
        TomlLite t;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#') continue;
            if (s.front() == '[') {
                if (s.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
                section = strip(s.substr(1, s.size() - 2));
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            std::string key = strip(s.substr(0, eq));
            std::string value = strip(s.substr(eq + 1));
            if (key.empty() || value.empty())
                throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
            t.values_[section.empty() ? key : section + "." + key] = value;
        }
        return t;
    }

    bool contains(const std::string& key) const { return values_.count(key) > 0; }

    const std::map<std::string, std::string>& entries() const { return values_; }

    std::string get_string(const std::string& key) const {
        std::string raw = fetch(key);
        if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"') return raw.substr(1, raw.size() - 2);
        return raw;
    }

    int64_t get_int(const std::string& key) const {
        try {
            size_t pos = 0;
            int64_t v = std::stoll(fetch(key), &pos);
            if (pos != fetch(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected integer, got '" + fetch(key) + "'");
        }
    }

    double get_double(const std::string& key) const {
        try {
            size_t pos = 0;
            double v = std::stod(fetch(key), &pos);
            if (pos != fetch(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected number, got '" + fetch(key) + "'");
        }
    }

    bool get_bool(const std::string& key) const {
        std::string v = fetch(key);
        if (v == "true") return true;
        if (v == "false") return false;
        throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
    }

    std::vector<int64_t> get_int_list(const std::string& key) const {
        std::string v = fetch(key);
        if (v.size() < 2 || v.front() != '[' || v.back() != ']')
            throw ConfigError("config key '" + key + "': expected [list]");
        std::vector<int64_t> out;
        std::string body = v.substr(1, v.size() - 2);
        std::istringstream in(body);
        std::string item;
        while (std::getline(in, item, ',')) {
            std::string s = strip(item);
            if (s.empty()) continue;
            try {
                out.push_back(std::stoll(s));
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': bad list element '" + s + "'");
            }
        }
        return out;
    }

    // Marks a key as consumed; leftover keys after parsing are reported as
    // unknown so typos never pass silently.
    void expect_only(const std::vector<std::string>& known) const {
        for (const auto& [k, v] : values_) {
            bool ok = false;
            for (const auto& name : known) ok = ok || k == name;
            if (!ok) throw ConfigError("unknown config key '" + k + "'");
        }
    }

private:
    std::string fetch(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
        return it->second;
    }

    static std::string strip(const std::string& s) {
        size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace tss
