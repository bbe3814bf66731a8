#pragma once

#include <cstdio>
#include <string>
#include <string_view>

#include <fmt/format.h>

namespace lwmerge::log {

// One logfmt-style line per event on stderr: level=info event=merge.done k=v ...

inline bool& quiet() {
  static bool value = false;
  return value;
}

inline void emit(std::string_view level, std::string_view event, std::string_view fields = {}) {
  if (quiet() && level != "error") return;
  if (fields.empty()) {
    fmt::print(stderr, "level={} event={}\n", level, event);
  } else {
    fmt::print(stderr, "level={} event={} {}\n", level, event, fields);
  }
}

inline void info(std::string_view event, std::string_view fields = {}) { emit("info", event, fields); }
inline void warn(std::string_view event, std::string_view fields = {}) { emit("warn", event, fields); }
inline void error(std::string_view event, std::string_view fields = {}) { emit("error", event, fields); }

/// Quote a value for a log field when it contains spaces or quotes.
inline std::string quoted(std::string_view value) {
  std::string out = "\"";
  for (char c : value) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace lwmerge::log
