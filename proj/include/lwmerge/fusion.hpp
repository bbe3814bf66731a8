#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "lwmerge/error.hpp"
#include "lwmerge/hash.hpp"
#include "lwmerge/prior.hpp"
#include "lwmerge/taskvec.hpp"

namespace lwmerge {

enum class FusionMode { ClosedForm, PriorGuided, FixedPair, GlobalNorm };

inline std::string_view fusion_mode_name(FusionMode mode) {
  switch (mode) {
    case FusionMode::ClosedForm: return "closed-form";
    case FusionMode::PriorGuided: return "prior-guided";
    case FusionMode::FixedPair: return "fixed";
    case FusionMode::GlobalNorm: return "global-norm";
  }
  return "?";
}

inline std::optional<FusionMode> parse_fusion_mode(std::string_view name) {
  if (name == "closed-form") return FusionMode::ClosedForm;
  if (name == "prior-guided") return FusionMode::PriorGuided;
  if (name == "fixed") return FusionMode::FixedPair;
  if (name == "global-norm") return FusionMode::GlobalNorm;
  return std::nullopt;
}

struct LayerWeights {
  std::uint32_t layer = 0;
  double lambda_V = 0.0;
  double lambda_R = 0.0;
  // context carried into reports; absent for plans built without it
  std::optional<double> w_V, w_R;
  std::optional<double> sq_norm_V, sq_norm_R;
};

struct FusionPlan {
  FusionMode mode = FusionMode::ClosedForm;
  std::string provenance;
  std::optional<double> alpha_hat;
  std::vector<LayerWeights> per_layer;

  std::size_t num_layers() const { return per_layer.size(); }
};

// ---------------------------------------------------------------------------
// Closed forms

/// λ_t = ‖τ_t‖² / (‖τ_V‖² + ‖τ_R‖²) per layer. Layers with no task vector at
/// all get (1/2, 1/2); the merge leaves them equal to base either way.
inline FusionPlan norm_ratio_weights(const TaskVectorStats& stats) {
  FusionPlan plan;
  plan.mode = FusionMode::ClosedForm;
  plan.provenance = "norm ratio per layer";
  for (const auto& layer : stats.per_layer) {
    LayerWeights w;
    w.layer = layer.layer;
    const double denom = layer.sq_norm_V + layer.sq_norm_R;
    if (denom > 0.0) {
      w.lambda_V = layer.sq_norm_V / denom;
      w.lambda_R = layer.sq_norm_R / denom;
    } else {
      w.lambda_V = w.lambda_R = 0.5;
    }
    w.sq_norm_V = layer.sq_norm_V;
    w.sq_norm_R = layer.sq_norm_R;
    plan.per_layer.push_back(w);
  }
  return plan;
}

/// λ_t = w_t‖τ_t‖² / (w_V‖τ_V‖² + w_R‖τ_R‖²) per layer. With a uniform prior
/// this is the norm ratio, bit for bit (halving is exact).
inline FusionPlan closed_form_weights(const TaskVectorStats& stats, const ModalityPrior& prior) {
  if (prior.num_layers() != stats.num_layers()) {
    throw Error(ErrorKind::LengthMismatch, fmt::format("prior covers {} layers but stats cover {}",
                                                       prior.num_layers(), stats.num_layers()));
  }
  FusionPlan plan;
  plan.mode = prior.mode == PriorMode::Uniform ? FusionMode::ClosedForm : FusionMode::PriorGuided;
  plan.alpha_hat = prior.alpha;
  plan.provenance = fmt::format("prior-weighted norm ratio, prior={}", prior_mode_name(prior.mode));
  for (std::size_t i = 0; i < stats.num_layers(); ++i) {
    const LayerStats& layer = stats.per_layer[i];
    LayerWeights w;
    w.layer = layer.layer;
    const double weighted_V = prior.w_V[i] * layer.sq_norm_V;
    const double weighted_R = prior.w_R[i] * layer.sq_norm_R;
    const double denom = weighted_V + weighted_R;
    if (denom > 0.0) {
      w.lambda_V = weighted_V / denom;
      w.lambda_R = weighted_R / denom;
    } else {
      w.lambda_V = w.lambda_R = 0.5;
    }
    w.w_V = prior.w_V[i];
    w.w_R = prior.w_R[i];
    w.sq_norm_V = layer.sq_norm_V;
    w.sq_norm_R = layer.sq_norm_R;
    plan.per_layer.push_back(w);
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Baselines

enum class FixedPreset { TaskArithmetic, VlmMerging };

inline std::pair<double, double> preset_pair(FixedPreset preset) {
  switch (preset) {
    case FixedPreset::TaskArithmetic: return {0.3, 0.3};
    case FixedPreset::VlmMerging: return {0.9, 0.1};
  }
  return {0.0, 0.0};
}

inline std::optional<FixedPreset> parse_preset(std::string_view name) {
  if (name == "task-arithmetic") return FixedPreset::TaskArithmetic;
  if (name == "vlm-merging") return FixedPreset::VlmMerging;
  return std::nullopt;
}

inline FusionPlan fixed_weights(double lambda_V, double lambda_R, std::size_t L) {
  if (!(lambda_V >= 0.0) || !(lambda_R >= 0.0)) {
    throw Error(ErrorKind::NegativeWeight,
                fmt::format("fixed weights ({}, {}) must be non-negative", lambda_V, lambda_R));
  }
  FusionPlan plan;
  plan.mode = FusionMode::FixedPair;
  plan.provenance = fmt::format("fixed pair ({}, {})", lambda_V, lambda_R);
  for (std::size_t i = 0; i < L; ++i) {
    LayerWeights w;
    w.layer = static_cast<std::uint32_t>(i + 1);
    w.lambda_V = lambda_V;
    w.lambda_R = lambda_R;
    plan.per_layer.push_back(w);
  }
  return plan;
}

inline FusionPlan fixed_weights(FixedPreset preset, std::size_t L) {
  const auto [v, r] = preset_pair(preset);
  FusionPlan plan = fixed_weights(v, r, L);
  plan.provenance = preset == FixedPreset::TaskArithmetic ? "preset task-arithmetic" : "preset vlm-merging";
  return plan;
}

/// One whole-model norm ratio applied at every layer.
inline FusionPlan global_norm_weights(const TaskVectorStats& stats) {
  const double denom = stats.total_sq_norm_V + stats.total_sq_norm_R;
  if (!(denom > 0.0)) {
    throw Error(ErrorKind::BothZero, "both task vectors are zero; a global norm ratio is undefined");
  }
  const double lambda_V = stats.total_sq_norm_V / denom;
  const double lambda_R = stats.total_sq_norm_R / denom;
  FusionPlan plan;
  plan.mode = FusionMode::GlobalNorm;
  plan.provenance = "whole-model norm ratio";
  for (const auto& layer : stats.per_layer) {
    LayerWeights w;
    w.layer = layer.layer;
    w.lambda_V = lambda_V;
    w.lambda_R = lambda_R;
    w.sq_norm_V = layer.sq_norm_V;
    w.sq_norm_R = layer.sq_norm_R;
    plan.per_layer.push_back(w);
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Quadratic bound and its brute-force minimizer

/// One layer of the bound: squared norms, curvature scalars δ_t, priors w_t.
struct OracleInstance {
  double sq_norm_V = 0.0;
  double sq_norm_R = 0.0;
  double delta_V = 1.0;
  double delta_R = 1.0;
  double w_V = 1.0;
  double w_R = 1.0;
};

/// ½ Σ_t w_t δ_t ‖τ_t‖² [(1−λ_t)²‖τ_t‖² + λ_k²‖τ_k‖²], k the other branch.
inline double lald_bound(const OracleInstance& in, double lambda_V, double lambda_R) {
  const double a = in.sq_norm_V;
  const double b = in.sq_norm_R;
  const double vision_term = in.w_V * in.delta_V * a *
                             ((1.0 - lambda_V) * (1.0 - lambda_V) * a + lambda_R * lambda_R * b);
  const double reasoning_term = in.w_R * in.delta_R * b *
                                ((1.0 - lambda_R) * (1.0 - lambda_R) * b + lambda_V * lambda_V * a);
  return 0.5 * (vision_term + reasoning_term);
}

/// Exhaustive search over λ_V ∈ {0, step, …, 1} with λ_R = 1 − λ_V. Ties go
/// to the smaller λ_V.
inline std::pair<double, double> brute_force_weights(const OracleInstance& in, double grid_step) {
  if (!(grid_step > 0.0) || grid_step > 0.01) {
    throw Error(ErrorKind::ConfigError, fmt::format("grid_step {} outside (0, 0.01]", grid_step));
  }
  const auto steps = static_cast<std::uint64_t>(std::floor(1.0 / grid_step + 1e-9));
  double best_lambda = 0.0;
  double best_value = lald_bound(in, 0.0, 1.0);
  auto consider = [&](double lambda_V) {
    const double value = lald_bound(in, lambda_V, 1.0 - lambda_V);
    if (value < best_value) {
      best_value = value;
      best_lambda = lambda_V;
    }
  };
  for (std::uint64_t k = 1; k <= steps; ++k) consider(std::min(1.0, static_cast<double>(k) * grid_step));
  if (static_cast<double>(steps) * grid_step < 1.0) consider(1.0);
  return {best_lambda, 1.0 - best_lambda};
}

/// Minimizer of lald_bound on the simplex for arbitrary curvature:
/// λ_t = w_t δ_t ‖τ_t‖² / Σ_k w_k δ_k ‖τ_k‖².
inline std::pair<double, double> curvature_weighted_weights(const OracleInstance& in) {
  const double v = in.w_V * in.delta_V * in.sq_norm_V;
  const double r = in.w_R * in.delta_R * in.sq_norm_R;
  if (!(v + r > 0.0)) return {0.5, 0.5};
  return {v / (v + r), r / (v + r)};
}

// ---------------------------------------------------------------------------
// Plan files

namespace detail {
inline nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
inline std::optional<double> read_optional(const nlohmann::json& obj, const char* key) {
  if (!obj.contains(key) || obj[key].is_null()) return std::nullopt;
  if (!obj[key].is_number()) throw Error(ErrorKind::SchemaError, fmt::format("'{}' must be a number", key));
  return obj[key].get<double>();
}
}  // namespace detail

inline nlohmann::json to_json(const FusionPlan& plan) {
  nlohmann::json doc;
  doc["mode"] = std::string(fusion_mode_name(plan.mode));
  doc["provenance"] = plan.provenance;
  doc["alpha_hat"] = detail::optional_number(plan.alpha_hat);
  doc["layers"] = nlohmann::json::array();
  for (const auto& w : plan.per_layer) {
    doc["layers"].push_back({{"layer", w.layer},
                             {"lambda_V", w.lambda_V},
                             {"lambda_R", w.lambda_R},
                             {"w_V", detail::optional_number(w.w_V)},
                             {"w_R", detail::optional_number(w.w_R)},
                             {"sq_norm_V", detail::optional_number(w.sq_norm_V)},
                             {"sq_norm_R", detail::optional_number(w.sq_norm_R)}});
  }
  return doc;
}

/// Parse a plan file. Hand-edited plans are welcome; the simplex is checked
/// only for the closed-form modes.
inline FusionPlan plan_from_json(const nlohmann::json& doc) {
  auto schema = [](const std::string& why) { return Error(ErrorKind::SchemaError, "plan: " + why); };
  if (!doc.is_object() || !doc.contains("mode") || !doc["mode"].is_string()) throw schema("missing mode");
  const auto mode = parse_fusion_mode(doc["mode"].get<std::string>());
  if (!mode) throw schema("unknown mode '" + doc["mode"].get<std::string>() + "'");
  FusionPlan plan;
  plan.mode = *mode;
  if (doc.contains("provenance") && doc["provenance"].is_string()) {
    plan.provenance = doc["provenance"].get<std::string>();
  }
  plan.alpha_hat = detail::read_optional(doc, "alpha_hat");
  if (!doc.contains("layers") || !doc["layers"].is_array()) throw schema("missing layers");
  for (const auto& item : doc["layers"]) {
    if (!item.is_object() || !item.contains("lambda_V") || !item.contains("lambda_R") ||
        !item["lambda_V"].is_number() || !item["lambda_R"].is_number()) {
      throw schema("each layer needs numeric lambda_V and lambda_R");
    }
    LayerWeights w;
    w.layer = static_cast<std::uint32_t>(plan.per_layer.size() + 1);
    if (item.contains("layer") && item["layer"].get<std::uint32_t>() != w.layer) {
      throw schema(fmt::format("layers must be listed 1..L in order; found {} at position {}",
                               item["layer"].get<std::uint32_t>(), w.layer));
    }
    w.lambda_V = item["lambda_V"].get<double>();
    w.lambda_R = item["lambda_R"].get<double>();
    if (!(w.lambda_V >= 0.0) || !(w.lambda_R >= 0.0)) {
      throw Error(ErrorKind::NegativeWeight, fmt::format("layer {} has a negative weight", w.layer));
    }
    w.w_V = detail::read_optional(item, "w_V");
    w.w_R = detail::read_optional(item, "w_R");
    w.sq_norm_V = detail::read_optional(item, "sq_norm_V");
    w.sq_norm_R = detail::read_optional(item, "sq_norm_R");
    plan.per_layer.push_back(w);
  }
  return plan;
}

inline FusionPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, fmt::format("cannot read plan '{}'", path.string()));
  try {
    return plan_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SchemaError, fmt::format("plan '{}': {}", path.string(), e.what()));
  }
}

/// Fingerprint of what the merge actually consumes: mode and the λ pairs.
inline std::string plan_hash(const FusionPlan& plan) {
  nlohmann::json doc;
  doc["mode"] = std::string(fusion_mode_name(plan.mode));
  doc["lambdas"] = nlohmann::json::array();
  for (const auto& w : plan.per_layer) doc["lambdas"].push_back({w.lambda_V, w.lambda_R});
  return hex64(fnv1a64(doc.dump()));
}

}  // namespace lwmerge
