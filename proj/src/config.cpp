#include "prunevolve/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace prunevolve {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

[[noreturn]] void fail_at(const std::string& name, int line, const std::string& msg) {
  throw ConfigError(name + ":" + std::to_string(line) + ": " + msg);
}

}  // namespace

std::string ConfigSection::label() const {
  return "[" + kind + (id.empty() ? "" : " " + id) + "]";
}

std::string ConfigSection::get_string(const std::string& key) const {
  const auto it = entries.find(key);
  if (it == entries.end())
    throw ConfigError(label() + ": missing required key '" + key + "'");
  return it->second.value;
}

std::string ConfigSection::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = entries.find(key);
  return it == entries.end() ? fallback : it->second.value;
}

long long ConfigSection::get_int(const std::string& key) const {
  const auto it = entries.find(key);
  if (it == entries.end())
    throw ConfigError(label() + ": missing required key '" + key + "'");
  const std::string& v = it->second.value;
  char* end = nullptr;
  const long long n = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError(label() + " line " + std::to_string(it->second.line) + ": '" + key +
                      "' expects an integer, got '" + v + "'");
  return n;
}

long long ConfigSection::get_int(const std::string& key, long long fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double ConfigSection::get_real(const std::string& key) const {
  const auto it = entries.find(key);
  if (it == entries.end())
    throw ConfigError(label() + ": missing required key '" + key + "'");
  const std::string& v = it->second.value;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError(label() + " line " + std::to_string(it->second.line) + ": '" + key +
                      "' expects a number, got '" + v + "'");
  return x;
}

double ConfigSection::get_real(const std::string& key, double fallback) const {
  return has(key) ? get_real(key) : fallback;
}

bool ConfigSection::get_bool(const std::string& key, bool fallback) const {
  const auto it = entries.find(key);
  if (it == entries.end()) return fallback;
  const std::string& v = it->second.value;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(label() + " line " + std::to_string(it->second.line) + ": '" + key +
                    "' expects true/false, got '" + v + "'");
}

std::vector<long long> ConfigSection::get_int_list(const std::string& key,
                                                   const std::vector<long long>& fallback) const {
  const auto it = entries.find(key);
  if (it == entries.end()) return fallback;
  std::vector<long long> out;
  std::stringstream ss(it->second.value);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    char* end = nullptr;
    const long long n = std::strtoll(part.c_str(), &end, 10);
    if (part.empty() || end == part.c_str() || *end != '\0')
      throw ConfigError(label() + " line " + std::to_string(it->second.line) + ": '" + key +
                        "' expects comma-separated integers, got '" + it->second.value + "'");
    out.push_back(n);
  }
  if (out.empty())
    throw ConfigError(label() + " line " + std::to_string(it->second.line) + ": '" + key +
                      "' is empty");
  return out;
}

const ConfigSection* ConfigFile::find(const std::string& kind, const std::string& id) const {
  for (const ConfigSection& s : sections)
    if (s.kind == kind && s.id == id) return &s;
  return nullptr;
}

const ConfigSection& ConfigFile::require(const std::string& kind, const std::string& id) const {
  const ConfigSection* s = find(kind, id);
  if (!s)
    throw ConfigError(name + ": missing required section [" + kind +
                      (id.empty() ? "" : " " + id) + "]");
  return *s;
}

std::vector<const ConfigSection*> ConfigFile::all(const std::string& kind) const {
  std::vector<const ConfigSection*> out;
  for (const ConfigSection& s : sections)
    if (s.kind == kind) out.push_back(&s);
  return out;
}

ConfigFile parse_config(const std::string& text, const std::string& name) {
  ConfigFile file;
  file.name = name;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  ConfigSection* cur = nullptr;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') fail_at(name, lineno, "unterminated section header");
      const std::string head = trim(line.substr(1, line.size() - 2));
      if (head.empty()) fail_at(name, lineno, "empty section header");
      ConfigSection sec;
      const std::size_t sp = head.find_first_of(" \t");
      if (sp == std::string::npos) {
        sec.kind = head;
      } else {
        sec.kind = head.substr(0, sp);
        sec.id = trim(head.substr(sp));
      }
      sec.line = lineno;
      if (file.find(sec.kind, sec.id))
        fail_at(name, lineno, "duplicate section " + sec.label());
      file.sections.push_back(std::move(sec));
      cur = &file.sections.back();
      continue;
    }

    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) fail_at(name, lineno, "expected 'key = value' or '[section]'");
    if (!cur) fail_at(name, lineno, "key outside any section");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail_at(name, lineno, "empty key");
    if (cur->entries.count(key))
      fail_at(name, lineno, "duplicate key '" + key + "' in " + cur->label());
    cur->entries[key] = {value, lineno};
  }
  return file;
}

ConfigFile load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path);
}

}  // namespace prunevolve
