#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace prunevolve {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One `[header]` block. `[task foo]` splits into kind "task", id "foo";
// single-word headers like `[evolution]` have an empty id.
struct ConfigSection {
  std::string kind;
  std::string id;
  int line = 0;  // header line, 1-based

  struct Entry {
    std::string value;
    int line = 0;
  };
  std::map<std::string, Entry> entries;

  bool has(const std::string& key) const { return entries.count(key) != 0; }

  // Typed getters. The required forms throw ConfigError naming the section
  // and line; the defaulted forms fall back when the key is absent.
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_real(const std::string& key) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<long long> get_int_list(const std::string& key,
                                      const std::vector<long long>& fallback) const;

  std::string label() const;  // "[task foo]" for messages
};

// Plain-text run configuration: `[section]` headers, `key = value` lines,
// `#` comments (whole-line or trailing), blank lines ignored.
struct ConfigFile {
  std::string name;  // source label used in error messages
  std::vector<ConfigSection> sections;

  const ConfigSection* find(const std::string& kind, const std::string& id = "") const;
  const ConfigSection& require(const std::string& kind, const std::string& id = "") const;
  std::vector<const ConfigSection*> all(const std::string& kind) const;
};

// Parses config text. Throws ConfigError with "<name>:<line>: ..." on
// malformed headers, lines outside any section, or duplicate keys.
ConfigFile parse_config(const std::string& text, const std::string& name = "<config>");

// Reads and parses a file; ConfigError if unreadable.
ConfigFile load_config(const std::string& path);

}  // namespace prunevolve
