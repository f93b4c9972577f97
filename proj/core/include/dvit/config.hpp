#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dvit {

/// Flat-sectioned key-value config (INI-style). Parse rules: lines are
/// trimmed of surrounding whitespace; empty lines and lines starting with
/// '#' or ';' are skipped; '[section]' opens a section; 'key = value' binds
/// the trimmed value verbatim (no quoting, no inline comments, no nesting).
/// Keys are addressed as "section.key"; keys before any section header live
/// in the "" section and are addressed bare.
class Config {
public:
    static Config parse_string(const std::string& text);
    static Config parse_file(const std::filesystem::path& path);

    /// Apply a "section.key=value" override (the CLI --set flag).
    void set_override(const std::string& assignment);

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;

    std::string get_str(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    /// Entries in insertion order.
    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    std::string dump() const;

private:
    const std::string* lookup(const std::string& key) const;
    std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace dvit
