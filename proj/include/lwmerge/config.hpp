#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "lwmerge/archive.hpp"
#include "lwmerge/error.hpp"
#include "lwmerge/fusion.hpp"
#include "lwmerge/merge.hpp"
#include "lwmerge/parallel.hpp"
#include "lwmerge/partition.hpp"
#include "lwmerge/prior.hpp"
#include "lwmerge/taskvec.hpp"

namespace lwmerge {

inline constexpr const char* kDefaultLayerPattern = R"(model\.layers\.(\d+)\.)";

struct PriorConfig {
  PriorMode mode = PriorMode::Uniform;
  std::optional<std::filesystem::path> attention_stats;
  std::optional<double> alpha;  // literal mode, or minmax without attention stats
  MinMaxRange range;
};

struct FusionConfig {
  std::optional<FusionMode> mode;  // unset: prior-guided when a prior is configured, else closed-form
  std::optional<FixedPreset> preset;
  std::optional<double> lambda_V;
  std::optional<double> lambda_R;
};

struct VerifyConfig {
  double fraction = 0.01;
  std::uint64_t tol_ulps = 2;
};

struct MergeConfig {
  std::filesystem::path base;
  std::filesystem::path vision;
  std::filesystem::path reasoning;
  std::string layer_pattern = kDefaultLayerPattern;
  std::array<std::vector<RemapRule>, 3> remap;
  bool allow_missing = false;
  PriorConfig prior;
  FusionConfig fusion;
  Source non_decoder_default = Source::Vision;
  std::vector<NonDecoderPolicy::Override> non_decoder_overrides;
  DtypeRule dtype = DtypeRule::PreserveBase;
  unsigned threads = 0;  // 0 picks the hardware concurrency
  VerifyConfig verify;

  unsigned worker_count() const { return threads == 0 ? default_threads() : threads; }

  FusionMode effective_fusion_mode() const {
    if (fusion.mode) return *fusion.mode;
    return prior.mode == PriorMode::Uniform ? FusionMode::ClosedForm : FusionMode::PriorGuided;
  }

  NonDecoderPolicy policy() const { return NonDecoderPolicy(non_decoder_default, non_decoder_overrides); }

  AlignOptions align_options() const {
    return AlignOptions{LayerPattern(layer_pattern), remap, allow_missing};
  }

  /// Structural checks; everything a subcommand needs before touching data.
  void validate() const {
    auto fail = [](const std::string& why) { return Error(ErrorKind::ConfigError, why); };
    for (const auto& [what, path] : {std::pair{"base", &base}, {"vision", &vision}, {"reasoning", &reasoning}}) {
      if (path->empty()) throw fail(fmt::format("config: '{}' archive path is missing", what));
      if (!std::filesystem::exists(*path)) {
        throw fail(fmt::format("config: {} archive '{}' does not exist", what, path->string()));
      }
    }
    LayerPattern{layer_pattern};
    for (const auto& rules : remap) {
      for (const auto& r : rules) r.validate();
    }
    policy();
    if (prior.attention_stats && !std::filesystem::exists(*prior.attention_stats)) {
      throw fail(fmt::format("config: attention stats '{}' do not exist", prior.attention_stats->string()));
    }
    switch (prior.mode) {
      case PriorMode::Fitted:
        if (!prior.attention_stats) throw fail("config: prior mode 'fitted' needs attention_stats");
        break;
      case PriorMode::Literal16:
        if (!prior.alpha) throw fail("config: prior mode 'literal' needs alpha");
        break;
      case PriorMode::MinMax:
        if (!prior.alpha && !prior.attention_stats) throw fail("config: prior mode 'minmax' needs alpha or attention_stats");
        break;
      case PriorMode::Uniform:
        break;
    }
    const FusionMode mode = effective_fusion_mode();
    const bool has_pair = fusion.lambda_V.has_value() || fusion.lambda_R.has_value();
    if (mode == FusionMode::FixedPair) {
      if (fusion.preset && has_pair) throw fail("config: give either a preset or lambda_v/lambda_r, not both");
      if (!fusion.preset && !(fusion.lambda_V && fusion.lambda_R)) {
        throw fail("config: fusion mode 'fixed' needs a preset or both lambda_v and lambda_r");
      }
    } else if (fusion.preset || has_pair) {
      throw fail(fmt::format("config: preset and explicit lambdas apply only to mode 'fixed', not '{}'",
                             fusion_mode_name(mode)));
    }
    if (!(verify.fraction > 0.0) || verify.fraction > 1.0) {
      throw fail(fmt::format("config: verify fraction {} outside (0, 1]", verify.fraction));
    }
  }
};

namespace detail {

inline Source config_source(const nlohmann::json& v, const char* key) {
  if (!v.is_string()) throw Error(ErrorKind::ConfigError, fmt::format("config: '{}' must be a string", key));
  auto s = parse_source(v.get<std::string>());
  if (!s) throw Error(ErrorKind::ConfigError, fmt::format("config: unknown source '{}'", v.get<std::string>()));
  return *s;
}

inline std::vector<RemapRule> parse_remap_rules(const nlohmann::json& list) {
  if (!list.is_array()) throw Error(ErrorKind::ConfigError, "config: remap rules must be a list");
  std::vector<RemapRule> rules;
  for (const auto& item : list) {
    if (item.contains("strip_prefix")) {
      rules.push_back(RemapRule::strip_prefix(item["strip_prefix"].get<std::string>()));
    } else if (item.contains("add_prefix")) {
      rules.push_back(RemapRule::add_prefix(item["add_prefix"].get<std::string>()));
    } else if (item.contains("replace_prefix") && item["replace_prefix"].is_array() &&
               item["replace_prefix"].size() == 2) {
      rules.push_back(RemapRule::replace_prefix(item["replace_prefix"][0].get<std::string>(),
                                                item["replace_prefix"][1].get<std::string>()));
    } else if (item.contains("pair") && item["pair"].is_array() && item["pair"].size() == 2) {
      rules.push_back(RemapRule::explicit_pair(item["pair"][0].get<std::string>(), item["pair"][1].get<std::string>()));
    } else {
      throw Error(ErrorKind::ConfigError, fmt::format("config: unrecognized remap rule {}", item.dump()));
    }
  }
  return rules;
}

}  // namespace detail

/// Relative paths resolve against `config_dir`.
inline MergeConfig parse_merge_config(const nlohmann::json& doc, const std::filesystem::path& config_dir) {
  if (!doc.is_object()) throw Error(ErrorKind::ConfigError, "config must be a JSON object");
  auto resolve = [&](const nlohmann::json& v) {
    std::filesystem::path p = v.get<std::string>();
    return p.is_absolute() ? p : config_dir / p;
  };
  // null means the same as absent, which is what to_json writes for unset optionals
  auto present = [](const nlohmann::json& obj, const char* key) { return obj.contains(key) && !obj[key].is_null(); };
  MergeConfig cfg;
  try {
    if (present(doc, "base")) cfg.base = resolve(doc["base"]);
    if (present(doc, "vision")) cfg.vision = resolve(doc["vision"]);
    if (present(doc, "reasoning")) cfg.reasoning = resolve(doc["reasoning"]);
    if (present(doc, "layer_pattern")) cfg.layer_pattern = doc["layer_pattern"].get<std::string>();
    if (present(doc, "allow_missing")) cfg.allow_missing = doc["allow_missing"].get<bool>();
    if (present(doc, "remap")) {
      for (const auto& [key, list] : doc["remap"].items()) {
        cfg.remap[static_cast<int>(detail::config_source(nlohmann::json(key), "remap"))] =
            detail::parse_remap_rules(list);
      }
    }
    if (present(doc, "prior")) {
      const auto& p = doc["prior"];
      if (present(p, "mode")) {
        auto mode = parse_prior_mode(p["mode"].get<std::string>());
        if (!mode) throw Error(ErrorKind::ConfigError, fmt::format("config: unknown prior mode {}", p["mode"].dump()));
        cfg.prior.mode = *mode;
      } else if (present(p, "attention_stats")) {
        cfg.prior.mode = PriorMode::Fitted;
      }
      if (present(p, "attention_stats")) cfg.prior.attention_stats = resolve(p["attention_stats"]);
      if (present(p, "alpha")) cfg.prior.alpha = p["alpha"].get<double>();
      if (present(p, "w_min")) cfg.prior.range.w_min = p["w_min"].get<double>();
      if (present(p, "w_max")) cfg.prior.range.w_max = p["w_max"].get<double>();
    }
    if (present(doc, "fusion")) {
      const auto& f = doc["fusion"];
      if (present(f, "mode")) {
        auto mode = parse_fusion_mode(f["mode"].get<std::string>());
        if (!mode) throw Error(ErrorKind::ConfigError, fmt::format("config: unknown fusion mode {}", f["mode"].dump()));
        cfg.fusion.mode = *mode;
      }
      if (present(f, "preset")) {
        auto preset = parse_preset(f["preset"].get<std::string>());
        if (!preset) throw Error(ErrorKind::ConfigError, fmt::format("config: unknown preset {}", f["preset"].dump()));
        cfg.fusion.preset = *preset;
      }
      if (present(f, "lambda_v")) cfg.fusion.lambda_V = f["lambda_v"].get<double>();
      if (present(f, "lambda_r")) cfg.fusion.lambda_R = f["lambda_r"].get<double>();
    }
    if (present(doc, "non_decoder")) {
      const auto& nd = doc["non_decoder"];
      if (present(nd, "default")) cfg.non_decoder_default = detail::config_source(nd["default"], "non_decoder.default");
      if (present(nd, "overrides")) {
        for (const auto& o : nd["overrides"]) {
          cfg.non_decoder_overrides.push_back(
              {o.at("pattern").get<std::string>(), detail::config_source(o.at("source"), "source")});
        }
      }
    }
    if (present(doc, "dtype")) {
      auto rule = parse_dtype_rule(doc["dtype"].get<std::string>());
      if (!rule) throw Error(ErrorKind::ConfigError, fmt::format("config: unknown dtype rule {}", doc["dtype"].dump()));
      cfg.dtype = *rule;
    }
    if (present(doc, "threads")) cfg.threads = doc["threads"].get<unsigned>();
    if (present(doc, "verify")) {
      const auto& v = doc["verify"];
      if (present(v, "fraction")) cfg.verify.fraction = v["fraction"].get<double>();
      if (present(v, "tol_ulps")) cfg.verify.tol_ulps = v["tol_ulps"].get<std::uint64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, fmt::format("config: {}", e.what()));
  }
  return cfg;
}

inline MergeConfig load_merge_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, fmt::format("cannot read config '{}'", path.string()));
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigError, fmt::format("config '{}': {}", path.string(), e.what()));
  }
  return parse_merge_config(doc, path.parent_path());
}

inline nlohmann::json to_json(const MergeConfig& cfg) {
  nlohmann::json doc;
  doc["base"] = cfg.base.string();
  doc["vision"] = cfg.vision.string();
  doc["reasoning"] = cfg.reasoning.string();
  doc["layer_pattern"] = cfg.layer_pattern;
  doc["allow_missing"] = cfg.allow_missing;
  doc["remap"] = nlohmann::json::object();
  for (Source s : kAllSources) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& r : cfg.remap[static_cast<int>(s)]) {
      switch (r.kind) {
        case RemapRule::Kind::StripPrefix: list.push_back({{"strip_prefix", r.prefix}}); break;
        case RemapRule::Kind::AddPrefix: list.push_back({{"add_prefix", r.prefix}}); break;
        case RemapRule::Kind::ReplacePrefix: list.push_back({{"replace_prefix", {r.from, r.to}}}); break;
        case RemapRule::Kind::ExplicitPair: list.push_back({{"pair", {r.from, r.to}}}); break;
      }
    }
    doc["remap"][std::string(source_name(s))] = list;
  }
  doc["prior"] = {{"mode", std::string(prior_mode_name(cfg.prior.mode))},
                  {"attention_stats", cfg.prior.attention_stats ? nlohmann::json(cfg.prior.attention_stats->string())
                                                                : nlohmann::json(nullptr)},
                  {"alpha", cfg.prior.alpha ? nlohmann::json(*cfg.prior.alpha) : nlohmann::json(nullptr)},
                  {"w_min", cfg.prior.range.w_min},
                  {"w_max", cfg.prior.range.w_max}};
  doc["fusion"] = {{"mode", std::string(fusion_mode_name(cfg.effective_fusion_mode()))}};
  if (cfg.fusion.preset) {
    doc["fusion"]["preset"] = *cfg.fusion.preset == FixedPreset::TaskArithmetic ? "task-arithmetic" : "vlm-merging";
  }
  if (cfg.fusion.lambda_V) doc["fusion"]["lambda_v"] = *cfg.fusion.lambda_V;
  if (cfg.fusion.lambda_R) doc["fusion"]["lambda_r"] = *cfg.fusion.lambda_R;
  doc["non_decoder"] = {{"default", std::string(source_name(cfg.non_decoder_default))},
                        {"overrides", nlohmann::json::array()}};
  for (const auto& o : cfg.non_decoder_overrides) {
    doc["non_decoder"]["overrides"].push_back({{"pattern", o.pattern}, {"source", std::string(source_name(o.source))}});
  }
  doc["dtype"] = std::string(dtype_rule_name(cfg.dtype));
  doc["threads"] = cfg.threads;
  doc["verify"] = {{"fraction", cfg.verify.fraction}, {"tol_ulps", cfg.verify.tol_ulps}};
  return doc;
}

// ---------------------------------------------------------------------------
// Pipeline wiring shared by the subcommands

struct LoadedInputs {
  ModelArchives archives;
  AlignmentTable table;
  LayerPartition partition;
};

inline LoadedInputs load_inputs(const MergeConfig& cfg) {
  LoadedInputs in;
  in.archives = ModelArchives::open(cfg.base, cfg.vision, cfg.reasoning);
  const AlignOptions options = cfg.align_options();
  in.table = align_names(in.archives[Source::Base], in.archives[Source::Vision], in.archives[Source::Reasoning], options);
  in.partition = build_partition(in.table, options.pattern);
  return in;
}

struct ResolvedPrior {
  std::optional<AttentionProfile> profile;
  std::optional<DecayFit> fit;
  ModalityPrior prior;
};

inline ResolvedPrior resolve_prior(const PriorConfig& cfg, std::size_t L) {
  ResolvedPrior out;
  if (cfg.attention_stats) {
    out.profile = load_attention_stats(*cfg.attention_stats);
    if (out.profile->num_layers() != L) {
      throw Error(ErrorKind::LengthMismatch, fmt::format("attention stats cover {} layers but the decoder has {}",
                                                         out.profile->num_layers(), L));
    }
    out.fit = fit_exponential_decay(*out.profile);
  }
  switch (cfg.mode) {
    case PriorMode::Uniform:
      out.prior = uniform_prior(L);
      break;
    case PriorMode::Fitted:
      if (!out.fit) throw Error(ErrorKind::ConfigError, "fitted prior needs attention stats");
      out.prior = compute_priors(out.fit->alpha_hat, L, PriorMode::Fitted);
      break;
    case PriorMode::Literal16:
      if (!cfg.alpha) throw Error(ErrorKind::ConfigError, "literal prior needs alpha");
      out.prior = compute_priors(*cfg.alpha, L, PriorMode::Literal16);
      break;
    case PriorMode::MinMax: {
      const std::optional<double> alpha = cfg.alpha ? cfg.alpha : (out.fit ? std::optional(out.fit->alpha_hat) : std::nullopt);
      if (!alpha) throw Error(ErrorKind::ConfigError, "minmax prior needs alpha or attention stats");
      out.prior = compute_priors(*alpha, L, PriorMode::MinMax, cfg.range);
      break;
    }
  }
  return out;
}

inline FusionPlan build_plan(const MergeConfig& cfg, const TaskVectorStats& stats, const ModalityPrior& prior) {
  switch (cfg.effective_fusion_mode()) {
    case FusionMode::ClosedForm:
      return norm_ratio_weights(stats);
    case FusionMode::PriorGuided:
      return closed_form_weights(stats, prior);
    case FusionMode::FixedPair:
      if (cfg.fusion.preset) return fixed_weights(*cfg.fusion.preset, stats.num_layers());
      return fixed_weights(*cfg.fusion.lambda_V, *cfg.fusion.lambda_R, stats.num_layers());
    case FusionMode::GlobalNorm:
      return global_norm_weights(stats);
  }
  throw Error(ErrorKind::ConfigError, "unknown fusion mode");
}

}  // namespace lwmerge
