#pragma once

#include "lorp/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace lorp {

// SHA-256, used for content hashes in run manifests.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);
void append_line(const std::filesystem::path& path, const std::string& line);

// Deterministic float formatting for CSV output.
std::string fmt_double(double v, int precision = 8);

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat key-value config with dotted namespaces, e.g. "lora.r = 16".
// Lines starting with '#' are comments. Getters mark keys as consumed so
// callers can reject unknown keys after parsing a known schema.
class KeyValueConfig {
public:
    KeyValueConfig() = default;
    static KeyValueConfig parse_string(const std::string& text);
    static KeyValueConfig parse_file(const std::filesystem::path& path);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& def) const;
    long long get_int(const std::string& key, long long def) const;
    double get_double(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& def) const;
    std::vector<std::string> get_string_list(const std::string& key,
                                             const std::vector<std::string>& def) const;

    // Keys present in the file but never read through a getter.
    std::vector<std::string> unconsumed_keys() const;
    std::string canonical_text() const;  // sorted "key=value" lines

private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> consumed_;
};

std::vector<std::string> split(const std::string& s, char sep);
std::string join(const std::vector<std::string>& parts, const std::string& sep);

}  // namespace lorp
