#include "ctnet/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "ctnet/error.hpp"

namespace ctnet {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

const std::string* ConfigSection::find(std::string_view key) const {
  for (const auto& [k, v] : entries) {
    if (k == key) return &v;
  }
  return nullptr;
}

void ConfigSection::set(std::string key, std::string value) {
  for (auto& [k, v] : entries) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries.emplace_back(std::move(key), std::move(value));
}

ConfigDocument ConfigDocument::parse(std::string_view text) {
  ConfigDocument doc;
  ConfigSection* current = &doc.sections_.front();
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      const std::string name(trim(line.substr(1, line.size() - 2)));
      if (name.empty()) throw ConfigError(where + "empty section name");
      if (doc.find(name)) throw ConfigError(where + "duplicate section [" + name + "]");
      doc.sections_.push_back(ConfigSection{name, {}});
      current = &doc.sections_.back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError(where + "missing key");
    if (current->find(key)) throw ConfigError(where + "duplicate key '" + key + "'");
    current->entries.emplace_back(key, std::string(trim(line.substr(eq + 1))));
  }
  return doc;
}

ConfigDocument ConfigDocument::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ConfigDocument::print() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& s : sections_) {
    if (!s.name.empty()) {
      if (!first) os << '\n';
      os << '[' << s.name << "]\n";
    }
    for (const auto& [k, v] : s.entries) os << k << " = " << v << '\n';
    first = false;
  }
  return os.str();
}

const ConfigSection* ConfigDocument::find(std::string_view section) const {
  for (const auto& s : sections_) {
    if (s.name == section) return &s;
  }
  return nullptr;
}

ConfigSection& ConfigDocument::section(const std::string& name) {
  for (auto& s : sections_) {
    if (s.name == name) return s;
  }
  sections_.push_back(ConfigSection{name, {}});
  return sections_.back();
}

std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_real(std::string_view text, std::string_view what) {
  double v = 0;
  const auto t = trim(text);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc{} || res.ptr != t.data() + t.size()) {
    throw ConfigError(std::string(what) + ": expected a number, got '" + std::string(text) + "'");
  }
  return v;
}

std::size_t parse_count(std::string_view text, std::string_view what) {
  std::size_t v = 0;
  const auto t = trim(text);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc{} || res.ptr != t.data() + t.size()) {
    throw ConfigError(std::string(what) + ": expected a non-negative integer, got '" + std::string(text) + "'");
  }
  return v;
}

bool parse_bool(std::string_view text, std::string_view what) {
  const auto t = trim(text);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError(std::string(what) + ": expected true/false, got '" + std::string(text) + "'");
}

}  // namespace ctnet
