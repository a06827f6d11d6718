#pragma once

#include "sgs/core.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sgs {

/// Flat key = value configuration. Lines hold `key = value`; `#` starts a
/// comment; `include = other.cfg` splices another file (relative to the
/// including file) at that point. Later assignments override earlier ones.
/// Every value remembers where it was set, and errors quote that location.
class Config {
 public:
  struct Entry {
    std::string value;
    std::string origin;  ///< "file:line" or "--set"
  };

  static Config load(const std::filesystem::path& path);
  static Config parse(std::string_view text, const std::string& source = "<text>",
                      const std::filesystem::path& base_dir = ".");

  /// Command-line override.
  void set(const std::string& key, const std::string& value, const std::string& origin = "--set");
  /// Parses "key=value".
  void set_assignment(std::string_view assignment);

  [[nodiscard]] bool has(const std::string& key) const { return entries_.count(key) != 0; }

  [[nodiscard]] std::string get_string(const std::string& key) const;
  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const;
  [[nodiscard]] double get_double(const std::string& key) const;
  [[nodiscard]] double get_double(const std::string& key, double fallback) const;
  [[nodiscard]] std::uint64_t get_u64(const std::string& key) const;
  [[nodiscard]] std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  [[nodiscard]] std::size_t get_size(const std::string& key, std::size_t fallback) const;
  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const;
  /// Comma-separated numbers.
  [[nodiscard]] std::vector<double> get_doubles(const std::string& key) const;
  [[nodiscard]] std::vector<std::size_t> get_sizes(const std::string& key, std::vector<std::size_t> fallback) const;
  [[nodiscard]] std::vector<std::uint64_t> get_u64s(const std::string& key) const;
  [[nodiscard]] Vec3 get_vec3(const std::string& key, const Vec3& fallback) const;

  /// Throws ConfigError naming the first key outside `allowed`.
  void require_known(const std::vector<std::string>& allowed) const;
  [[nodiscard]] std::map<std::string, std::string> snapshot() const;

 private:
  void parse_into(std::string_view text, const std::string& source, const std::filesystem::path& base_dir,
                  std::vector<std::filesystem::path>& stack);
  [[nodiscard]] const Entry& at(const std::string& key) const;
  [[noreturn]] void bad_value(const std::string& key, const std::string& expected) const;

  std::map<std::string, Entry> entries_;
};

}  // namespace sgs
