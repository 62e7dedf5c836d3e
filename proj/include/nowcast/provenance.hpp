#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>

#include "nowcast/text.hpp"

namespace nowcast {

inline constexpr const char* kToolVersion = "0.1.0";

/// Stamp written as `# key=value` lines at the top of every text artifact.
struct Provenance {
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  std::string config_hash = "0000000000000000";

  void write(std::ostream& out) const {
    out << "# tool_version=" << tool_version << '\n'
        << "# seed=" << seed << '\n'
        << "# config_hash=" << config_hash << '\n';
  }

  static Provenance from_header(const std::map<std::string, std::string>& header) {
    Provenance p;
    if (auto it = header.find("tool_version"); it != header.end()) p.tool_version = it->second;
    if (auto it = header.find("seed"); it != header.end()) {
      p.seed = text::parse_number<std::uint64_t>(it->second, "seed");
    }
    if (auto it = header.find("config_hash"); it != header.end()) p.config_hash = it->second;
    return p;
  }

  bool operator==(const Provenance&) const = default;
};

/// Splits a `# key=value` header line; returns false for anything else.
inline bool parse_header_line(const std::string& line, std::map<std::string, std::string>& out) {
  if (line.size() < 2 || line[0] != '#') return false;
  const auto body = text::trim(std::string_view(line).substr(1));
  const auto eq = body.find('=');
  if (eq == std::string_view::npos) return true;
  out[std::string(text::trim(body.substr(0, eq)))] = std::string(text::trim(body.substr(eq + 1)));
  return true;
}

}  // namespace nowcast
