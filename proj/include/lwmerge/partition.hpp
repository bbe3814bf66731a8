#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "lwmerge/archive.hpp"
#include "lwmerge/error.hpp"

namespace lwmerge {

/// Which of the three input checkpoints a tensor comes from.
enum class Source : std::uint8_t { Base = 0, Vision = 1, Reasoning = 2 };

inline constexpr std::array<Source, 3> kAllSources{Source::Base, Source::Vision, Source::Reasoning};

constexpr std::string_view source_name(Source s) {
  switch (s) {
    case Source::Base: return "base";
    case Source::Vision: return "vision";
    case Source::Reasoning: return "reasoning";
  }
  return "?";
}

inline std::optional<Source> parse_source(std::string_view name) {
  if (name == "base") return Source::Base;
  if (name == "vision") return Source::Vision;
  if (name == "reasoning") return Source::Reasoning;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Layer pattern

/// Regular expression with exactly one capture group holding a 0-based
/// decoder block index, e.g. `model\.layers\.(\d+)\.`. Matching is a search,
/// so the pattern may cover a prefix of the name.
class LayerPattern {
 public:
  LayerPattern() = default;
  explicit LayerPattern(std::string text) : text_(std::move(text)) {
    try {
      regex_ = std::regex(text_, std::regex::ECMAScript);
    } catch (const std::regex_error& e) {
      throw Error(ErrorKind::InvalidPattern, fmt::format("layer_pattern '{}': {}", text_, e.what()));
    }
    if (regex_.mark_count() != 1) {
      throw Error(ErrorKind::InvalidPattern,
                  fmt::format("layer_pattern '{}' must have exactly one capture group, found {}",
                              text_, regex_.mark_count()));
    }
  }

  const std::string& text() const { return text_; }

  /// The captured 0-based index, or nullopt when the name does not match.
  std::optional<std::uint64_t> capture(const std::string& name) const {
    std::smatch match;
    if (!std::regex_search(name, match, regex_)) return std::nullopt;
    const std::string digits = match[1].str();
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }) ||
        digits.size() > 9) {
      throw Error(ErrorKind::InvalidPattern,
                  fmt::format("layer_pattern '{}' captured '{}' from '{}', not a layer index", text_,
                              digits, name));
    }
    return std::stoull(digits);
  }

 private:
  std::string text_;
  std::regex regex_;
};

/// Decoder block in 1..L, or the NonDecoder pool.
struct LayerAssignment {
  std::uint32_t layer = 0;  // 0 encodes NonDecoder

  static LayerAssignment non_decoder() { return {}; }
  static LayerAssignment decoder(std::uint32_t l) { return {l}; }
  bool is_decoder() const { return layer != 0; }
  friend bool operator==(const LayerAssignment&, const LayerAssignment&) = default;
};

/// Archives count blocks from 0; reports and plans count from 1.
inline LayerAssignment parse_layer_index(const std::string& name, const LayerPattern& pattern) {
  const auto captured = pattern.capture(name);
  if (!captured) return LayerAssignment::non_decoder();
  return LayerAssignment::decoder(static_cast<std::uint32_t>(*captured + 1));
}

// ---------------------------------------------------------------------------
// Remapping

struct RemapRule {
  enum class Kind { StripPrefix, AddPrefix, ReplacePrefix, ExplicitPair };
  Kind kind = Kind::StripPrefix;
  std::string prefix;  // StripPrefix / AddPrefix
  std::string from;    // ReplacePrefix / ExplicitPair
  std::string to;

  static RemapRule strip_prefix(std::string p) { return {Kind::StripPrefix, std::move(p), {}, {}}; }
  static RemapRule add_prefix(std::string p) { return {Kind::AddPrefix, std::move(p), {}, {}}; }
  static RemapRule replace_prefix(std::string f, std::string t) {
    return {Kind::ReplacePrefix, {}, std::move(f), std::move(t)};
  }
  static RemapRule explicit_pair(std::string f, std::string t) {
    return {Kind::ExplicitPair, {}, std::move(f), std::move(t)};
  }

  void validate() const {
    if (kind == Kind::ReplacePrefix) {
      if (from.empty()) throw Error(ErrorKind::ConfigError, "replace_prefix needs a non-empty prefix to replace");
      return;
    }
    if (kind != Kind::ExplicitPair && prefix.empty()) {
      throw Error(ErrorKind::ConfigError, "remap prefix must be non-empty");
    }
    if (kind == Kind::ExplicitPair && (from.empty() || to.empty())) {
      throw Error(ErrorKind::ConfigError, "explicit remap pair needs both names");
    }
  }
};

/// An explicit pair for the name wins outright; otherwise prefix rules apply
/// in order. StripPrefix and ReplacePrefix leave names without the prefix
/// untouched; AddPrefix applies to every name.
inline std::string apply_remap(const std::string& name, const std::vector<RemapRule>& rules) {
  for (const auto& rule : rules) {
    if (rule.kind == RemapRule::Kind::ExplicitPair && rule.from == name) return rule.to;
  }
  std::string out = name;
  for (const auto& rule : rules) {
    switch (rule.kind) {
      case RemapRule::Kind::StripPrefix:
        if (out.starts_with(rule.prefix)) out.erase(0, rule.prefix.size());
        break;
      case RemapRule::Kind::AddPrefix:
        out.insert(0, rule.prefix);
        break;
      case RemapRule::Kind::ReplacePrefix:
        if (out.starts_with(rule.from)) out.replace(0, rule.from.size(), rule.to);
        break;
      case RemapRule::Kind::ExplicitPair:
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alignment

using Catalog = std::map<std::string, TensorMeta>;

struct AlignmentRow {
  std::string canonical;
  std::array<std::optional<std::string>, 3> names;  // indexed by Source
  std::array<std::optional<Shape>, 3> shapes;
  std::array<std::optional<DType>, 3> dtypes;
  bool decoder = false;  // canonical name matched the layer pattern
  bool demoted = false;  // decoder name with a missing counterpart, forced to NonDecoder

  bool has(Source s) const { return names[static_cast<int>(s)].has_value(); }
  const std::string& name(Source s) const { return *names[static_cast<int>(s)]; }
  const Shape& shape(Source s) const { return *shapes[static_cast<int>(s)]; }
  DType dtype(Source s) const { return *dtypes[static_cast<int>(s)]; }
};

struct AlignmentTable {
  std::vector<AlignmentRow> rows;       // sorted by canonical name
  std::vector<std::string> unmatched;   // branch decoder tensors with no base counterpart
  std::vector<std::string> warnings;

  const AlignmentRow* find(const std::string& canonical) const {
    auto it = std::lower_bound(rows.begin(), rows.end(), canonical,
                               [](const AlignmentRow& r, const std::string& n) { return r.canonical < n; });
    return (it != rows.end() && it->canonical == canonical) ? &*it : nullptr;
  }
};

struct AlignOptions {
  LayerPattern pattern;
  std::array<std::vector<RemapRule>, 3> rules;  // indexed by Source
  bool allow_missing = false;  // demote decoder tensors lacking a counterpart instead of failing
};

namespace detail {

inline std::map<std::string, std::string> remap_catalog(const Catalog& catalog,
                                                        const std::vector<RemapRule>& rules,
                                                        Source source) {
  for (const auto& rule : rules) {
    rule.validate();
    if (rule.kind == RemapRule::Kind::ExplicitPair && catalog.count(rule.from) == 0) {
      throw Error(ErrorKind::ConfigError,
                  fmt::format("explicit remap source '{}' is not in the {} archive", rule.from,
                              source_name(source)));
    }
  }
  std::map<std::string, std::string> canonical_to_original;
  for (const auto& [name, _] : catalog) {
    std::string canonical = apply_remap(name, rules);
    auto [it, inserted] = canonical_to_original.emplace(canonical, name);
    if (!inserted) {
      throw Error(ErrorKind::AmbiguousRemap,
                  fmt::format("{} tensors '{}' and '{}' both map to '{}'", source_name(source),
                              it->second, name, canonical));
    }
  }
  return canonical_to_original;
}

}  // namespace detail

/// Map every archive's names onto canonical (base) names and check that
/// decoder tensors line up. Branch-only non-decoder tensors (vision tower,
/// projector) get their own rows; branch-only decoder tensors are reported in
/// `unmatched`.
inline AlignmentTable align_names(const Catalog& base, const Catalog& vision, const Catalog& reasoning,
                                  const AlignOptions& options) {
  const std::array<const Catalog*, 3> catalogs{&base, &vision, &reasoning};
  std::array<std::map<std::string, std::string>, 3> remapped;
  for (Source s : kAllSources) {
    const int i = static_cast<int>(s);
    remapped[i] = detail::remap_catalog(*catalogs[i], options.rules[i], s);
  }

  std::set<std::string> all_names;
  for (const auto& m : remapped) {
    for (const auto& [canonical, _] : m) all_names.insert(canonical);
  }

  AlignmentTable table;
  for (const std::string& canonical : all_names) {
    AlignmentRow row;
    row.canonical = canonical;
    for (Source s : kAllSources) {
      const int i = static_cast<int>(s);
      auto it = remapped[i].find(canonical);
      if (it == remapped[i].end()) continue;
      const TensorMeta& meta = catalogs[i]->at(it->second);
      row.names[i] = it->second;
      row.shapes[i] = meta.shape;
      row.dtypes[i] = meta.dtype;
    }
    row.decoder = parse_layer_index(canonical, options.pattern).is_decoder();

    if (row.decoder && !row.has(Source::Base)) {
      for (Source s : {Source::Vision, Source::Reasoning}) {
        if (row.has(s)) table.unmatched.push_back(fmt::format("{}:{}", source_name(s), row.name(s)));
      }
      continue;
    }
    if (row.decoder) {
      for (Source s : {Source::Vision, Source::Reasoning}) {
        if (row.has(s)) continue;
        if (!options.allow_missing) {
          throw Error(ErrorKind::MissingCounterpart,
                      fmt::format("decoder tensor '{}' has no counterpart in the {} archive", canonical,
                                  source_name(s)));
        }
        row.demoted = true;
        table.warnings.push_back(fmt::format(
            "decoder tensor '{}' missing from the {} archive; treated as NonDecoder", canonical,
            source_name(s)));
      }
      for (Source s : {Source::Vision, Source::Reasoning}) {
        if (row.has(s) && row.shape(s) != row.shape(Source::Base)) {
          throw Error(ErrorKind::ShapeMismatch,
                      fmt::format("decoder tensor '{}': base shape {} but {} shape {}", canonical,
                                  shape_string(row.shape(Source::Base)), source_name(s),
                                  shape_string(row.shape(s))));
        }
      }
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

inline AlignmentTable align_names(const TensorArchive& base, const TensorArchive& vision,
                                  const TensorArchive& reasoning, const AlignOptions& options) {
  return align_names(base.entries(), vision.entries(), reasoning.entries(), options);
}

// ---------------------------------------------------------------------------
// Partition

struct LayerPartition {
  std::uint32_t num_layers = 0;
  std::map<std::string, LayerAssignment> assignment;  // canonical name -> slot
  std::string layer_pattern;

  /// Canonical names in layer `l`, ascending.
  std::vector<std::string> layer_tensors(std::uint32_t l) const {
    std::vector<std::string> out;
    for (const auto& [name, a] : assignment) {
      if (a.layer == l) out.push_back(name);
    }
    return out;
  }

  std::vector<std::vector<std::string>> by_layer() const {
    std::vector<std::vector<std::string>> out(num_layers + 1);
    for (const auto& [name, a] : assignment) out[a.layer].push_back(name);
    return out;  // out[0] is the NonDecoder pool
  }
};

inline LayerPartition build_partition(const AlignmentTable& table, const LayerPattern& pattern) {
  LayerPartition partition;
  partition.layer_pattern = pattern.text();
  std::uint32_t max_layer = 0;
  for (const auto& row : table.rows) {
    LayerAssignment a = row.demoted ? LayerAssignment::non_decoder()
                                    : parse_layer_index(row.canonical, pattern);
    max_layer = std::max(max_layer, a.layer);
    partition.assignment.emplace(row.canonical, a);
  }
  if (max_layer == 0) {
    throw Error(ErrorKind::EmptyDecoder,
                fmt::format("no tensor matches layer_pattern '{}'", pattern.text()));
  }
  std::vector<bool> present(max_layer + 1, false);
  for (const auto& [_, a] : partition.assignment) present[a.layer] = true;
  std::vector<std::uint32_t> missing;
  for (std::uint32_t l = 1; l <= max_layer; ++l) {
    if (!present[l]) missing.push_back(l - 1);
  }
  if (!missing.empty()) {
    throw Error(ErrorKind::GappedLayers,
                fmt::format("decoder blocks {} (0-based) have no tensors but block {} does",
                            fmt::join(missing, ","), max_layer - 1));
  }
  partition.num_layers = max_layer;
  return partition;
}

}  // namespace lwmerge
