#include "dvit/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "dvit/errors.hpp"

namespace dvit {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

}  // namespace

Config Config::parse_string(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        cfg.set(section.empty() ? key : section + "." + key, value);
    }
    return cfg;
}

Config Config::parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str());
}

void Config::set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must be key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_)
        if (k == key) {
            v = value;
            return;
        }
    entries_.emplace_back(key, value);
}

const std::string* Config::lookup(const std::string& key) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return &v;
    return nullptr;
}

bool Config::has(const std::string& key) const { return lookup(key) != nullptr; }

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
    const auto* v = lookup(key);
    return v ? *v : fallback;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
    const auto* v = lookup(key);
    if (!v) return fallback;
    try {
        std::size_t used = 0;
        const std::int64_t parsed = std::stoll(*v, &used);
        if (used != v->size()) throw std::invalid_argument("");
        return parsed;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + *v + "' as integer");
    }
}

double Config::get_double(const std::string& key, double fallback) const {
    const auto* v = lookup(key);
    if (!v) return fallback;
    try {
        std::size_t used = 0;
        const double parsed = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument("");
        return parsed;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + *v + "' as number");
    }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    const auto* v = lookup(key);
    if (!v) return fallback;
    std::string lower = *v;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "true" || lower == "1" || lower == "yes" || lower == "on") return true;
    if (lower == "false" || lower == "0" || lower == "no" || lower == "off") return false;
    throw ConfigError("config key '" + key + "': cannot parse '" + *v + "' as bool");
}

std::string Config::dump() const {
    // Group by section, preserving first-appearance order.
    std::vector<std::string> sections;
    auto section_of = [](const std::string& key) {
        const auto dot = key.find('.');
        return dot == std::string::npos ? std::string() : key.substr(0, dot);
    };
    for (const auto& [k, v] : entries_) {
        const auto s = section_of(k);
        if (std::find(sections.begin(), sections.end(), s) == sections.end()) sections.push_back(s);
    }
    std::ostringstream out;
    bool first = true;
    for (const auto& s : sections) {
        if (!first) out << "\n";
        first = false;
        if (!s.empty()) out << "[" << s << "]\n";
        for (const auto& [k, v] : entries_) {
            if (section_of(k) != s) continue;
            const auto dot = k.find('.');
            out << (dot == std::string::npos ? k : k.substr(dot + 1)) << " = " << v << "\n";
        }
    }
    return out.str();
}

}  // namespace dvit
