#include "sgs/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace sgs {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool valid_key(const std::string& k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-';
  });
}

template <typename T>
std::optional<T> parse_number(const std::string& s) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace

Config Config::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Config c;
  std::vector<fs::path> stack{fs::weakly_canonical(path)};
  c.parse_into(ss.str(), path.string(), path.parent_path(), stack);
  return c;
}

Config Config::parse(std::string_view text, const std::string& source, const fs::path& base_dir) {
  Config c;
  std::vector<fs::path> stack;
  c.parse_into(text, source, base_dir, stack);
  return c;
}

void Config::parse_into(std::string_view text, const std::string& source, const fs::path& base_dir,
                        std::vector<fs::path>& stack) {
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    std::string line = raw.substr(0, raw.find('#'));
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(where + ": invalid key '" + key + "'");
    if (key == "include") {
      if (value.empty()) throw ConfigError(where + ": include needs a file name");
      const fs::path p = base_dir / value;
      std::ifstream f(p);
      if (!f) throw ConfigError(where + ": cannot open included file " + p.string());
      const fs::path canon = fs::weakly_canonical(p);
      if (std::find(stack.begin(), stack.end(), canon) != stack.end())
        throw ConfigError(where + ": include cycle through " + p.string());
      std::stringstream ss;
      ss << f.rdbuf();
      stack.push_back(canon);
      parse_into(ss.str(), p.string(), p.parent_path(), stack);
      stack.pop_back();
      continue;
    }
    entries_[key] = {value, where};
  }
}

void Config::set(const std::string& key, const std::string& value, const std::string& origin) {
  if (!valid_key(key)) throw ConfigError(origin + ": invalid key '" + key + "'");
  entries_[key] = {value, origin};
}

void Config::set_assignment(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError("--set: expected key=value, got '" + std::string(assignment) + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const Config::Entry& Config::at(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("missing required key '" + key + "'");
  return it->second;
}

void Config::bad_value(const std::string& key, const std::string& expected) const {
  const Entry& e = at(key);
  throw ConfigError(e.origin + ": key '" + key + "': expected " + expected + ", got '" + e.value + "'");
}

std::string Config::get_string(const std::string& key) const { return at(key).value; }

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get_string(key) : fallback;
}

double Config::get_double(const std::string& key) const {
  const auto v = parse_number<double>(at(key).value);
  if (!v) bad_value(key, "a number");
  return *v;
}

double Config::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

std::uint64_t Config::get_u64(const std::string& key) const {
  const auto v = parse_number<std::uint64_t>(at(key).value);
  if (!v) bad_value(key, "a non-negative integer");
  return *v;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? get_u64(key) : fallback;
}

std::size_t Config::get_size(const std::string& key, std::size_t fallback) const {
  return has(key) ? static_cast<std::size_t>(get_u64(key)) : fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& v = at(key).value;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, "true or false");
}

std::vector<double> Config::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split_list(at(key).value)) {
    const auto v = parse_number<double>(item);
    if (!v) bad_value(key, "a comma-separated list of numbers");
    out.push_back(*v);
  }
  return out;
}

std::vector<std::size_t> Config::get_sizes(const std::string& key, std::vector<std::size_t> fallback) const {
  if (!has(key)) return fallback;
  std::vector<std::size_t> out;
  for (const auto& u : get_u64s(key)) out.push_back(static_cast<std::size_t>(u));
  return out;
}

std::vector<std::uint64_t> Config::get_u64s(const std::string& key) const {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(at(key).value)) {
    const auto v = parse_number<std::uint64_t>(item);
    if (!v) bad_value(key, "a comma-separated list of non-negative integers");
    out.push_back(*v);
  }
  return out;
}

Vec3 Config::get_vec3(const std::string& key, const Vec3& fallback) const {
  if (!has(key)) return fallback;
  const auto v = get_doubles(key);
  if (v.size() != 3) bad_value(key, "three comma-separated numbers");
  return {v[0], v[1], v[2]};
}

void Config::require_known(const std::vector<std::string>& allowed) const {
  for (const auto& [key, e] : entries_)
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(e.origin + ": unknown key '" + key + "'");
}

std::map<std::string, std::string> Config::snapshot() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, e] : entries_) out[k] = e.value;
  return out;
}

}  // namespace sgs
