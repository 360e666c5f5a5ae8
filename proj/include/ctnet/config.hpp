#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

// Line-oriented "key = value" text with optional "[section]" headers.
//
//   document := { line }
//   line     := blank | comment | header | entry
//   comment  := optional spaces, '#', anything
//   header   := '[' name ']'
//   entry    := key '=' value        (key and value are trimmed; value may be empty)
//
// Entries before the first header belong to the unnamed global section. Keys
// are unique within a section and section names are unique in a document.
namespace ctnet {

struct ConfigSection {
  std::string name;
  std::vector<std::pair<std::string, std::string>> entries;

  const std::string* find(std::string_view key) const;
  void set(std::string key, std::string value);
};

class ConfigDocument {
 public:
  // Throws ConfigError with the 1-based line number on malformed input.
  static ConfigDocument parse(std::string_view text);
  static ConfigDocument load(const std::string& path);

  std::string print() const;

  ConfigSection& global() { return sections_.front(); }
  const ConfigSection& global() const { return sections_.front(); }
  const ConfigSection* find(std::string_view section) const;
  ConfigSection& section(const std::string& name);  // created when missing
  const std::vector<ConfigSection>& sections() const { return sections_; }

  ConfigDocument() : sections_(1) {}

 private:
  std::vector<ConfigSection> sections_;
};

// Shortest decimal text that parses back to the same double.
std::string format_real(double v);

double parse_real(std::string_view text, std::string_view what);
std::size_t parse_count(std::string_view text, std::string_view what);
bool parse_bool(std::string_view text, std::string_view what);

}  // namespace ctnet
