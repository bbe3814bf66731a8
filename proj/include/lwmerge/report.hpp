#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "lwmerge/error.hpp"
#include "lwmerge/fusion.hpp"
#include "lwmerge/prior.hpp"
#include "lwmerge/taskvec.hpp"

namespace lwmerge {

inline constexpr double kCosineFlagThreshold = 0.1;

struct ReportBundle {
  std::optional<TaskVectorStats> stats;
  std::optional<AttentionProfile> profile;
  std::optional<DecayFit> fit;
  std::optional<ModalityPrior> prior;
  std::vector<std::pair<std::string, FusionPlan>> plans;

  /// Every present member must describe the same number of layers.
  std::size_t validate() const {
    std::optional<std::size_t> L;
    auto check = [&](const char* what, std::size_t n) {
      if (!L) {
        L = n;
      } else if (*L != n) {
        throw Error(ErrorKind::LengthMismatch, fmt::format("report bundle: {} has {} layers, expected {}", what, n, *L));
      }
    };
    if (stats) check("stats", stats->num_layers());
    if (profile) check("attention profile", profile->num_layers());
    if (fit) check("fit residuals", fit->residuals.size());
    if (prior) check("prior", prior->num_layers());
    for (const auto& [name, plan] : plans) check(name.c_str(), plan.num_layers());
    return L.value_or(0);
  }
};

inline std::string fmt_number(double v) { return fmt::format("{:.17g}", v); }

inline std::string fmt_number(const std::optional<double>& v) { return v ? fmt_number(*v) : std::string(); }

// ---------------------------------------------------------------------------
// Cosine report

inline bool cosine_flagged(const LayerStats& layer) {
  return layer.cosine && std::fabs(*layer.cosine) > kCosineFlagThreshold;
}

inline const TaskVectorStats& require_stats(const ReportBundle& bundle) {
  if (!bundle.stats) throw Error(ErrorKind::ConfigError, "report needs task-vector stats");
  return *bundle.stats;
}

inline std::string render_cosine_csv(const ReportBundle& bundle) {
  bundle.validate();
  const TaskVectorStats& stats = require_stats(bundle);
  std::string out = "layer,params,sq_norm_V,sq_norm_R,dot_VR,cosine,flagged\n";
  for (const auto& layer : stats.per_layer) {
    out += fmt::format("{},{},{},{},{},{},{}\n", layer.layer, layer.params, fmt_number(layer.sq_norm_V),
                       fmt_number(layer.sq_norm_R), fmt_number(layer.dot_VR), fmt_number(layer.cosine),
                       cosine_flagged(layer) ? 1 : 0);
  }
  return out;
}

inline nlohmann::json cosine_json(const ReportBundle& bundle) {
  bundle.validate();
  const TaskVectorStats& stats = require_stats(bundle);
  nlohmann::json doc;
  doc["threshold"] = kCosineFlagThreshold;
  doc["total_sq_norm_V"] = stats.total_sq_norm_V;
  doc["total_sq_norm_R"] = stats.total_sq_norm_R;
  doc["layers"] = nlohmann::json::array();
  doc["flagged"] = nlohmann::json::array();
  for (const auto& layer : stats.per_layer) {
    doc["layers"].push_back({{"layer", layer.layer},
                             {"params", layer.params},
                             {"sq_norm_V", layer.sq_norm_V},
                             {"sq_norm_R", layer.sq_norm_R},
                             {"dot_VR", layer.dot_VR},
                             {"cosine", layer.cosine ? nlohmann::json(*layer.cosine) : nlohmann::json(nullptr)}});
    if (cosine_flagged(layer)) doc["flagged"].push_back(layer.layer);
  }
  return doc;
}

inline std::vector<std::uint32_t> flagged_layers(const TaskVectorStats& stats) {
  std::vector<std::uint32_t> out;
  for (const auto& layer : stats.per_layer) {
    if (cosine_flagged(layer)) out.push_back(layer.layer);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prior report

inline std::string render_prior_csv(const ReportBundle& bundle) {
  bundle.validate();
  if (!bundle.fit || !bundle.prior || !bundle.profile) {
    throw Error(ErrorKind::ConfigError, "prior report needs the attention profile, fit and prior");
  }
  const DecayFit& fit = *bundle.fit;
  std::string out = "layer,a,fitted,log_residual,w_V,w_R\n";
  for (std::size_t i = 0; i < bundle.profile->num_layers(); ++i) {
    out += fmt::format("{},{},{},{},{},{}\n", i + 1, fmt_number(bundle.profile->ratios[i]),
                       fmt_number(fit.predict(static_cast<double>(i + 1))), fmt_number(fit.residuals[i]),
                       fmt_number(bundle.prior->w_V[i]), fmt_number(bundle.prior->w_R[i]));
  }
  return out;
}

inline nlohmann::json prior_json(const ReportBundle& bundle) {
  bundle.validate();
  if (!bundle.fit || !bundle.prior || !bundle.profile) {
    throw Error(ErrorKind::ConfigError, "prior report needs the attention profile, fit and prior");
  }
  const DecayFit& fit = *bundle.fit;
  nlohmann::json doc;
  doc["model_id"] = bundle.profile->model_id;
  doc["alpha_hat"] = fit.alpha_hat;
  doc["C_hat"] = fit.C_hat;
  doc["r_squared"] = fit.r_squared;
  doc["prior_mode"] = std::string(prior_mode_name(bundle.prior->mode));
  doc["layers"] = nlohmann::json::array();
  for (std::size_t i = 0; i < bundle.profile->num_layers(); ++i) {
    doc["layers"].push_back({{"layer", i + 1},
                             {"a", bundle.profile->ratios[i]},
                             {"fitted", fit.predict(static_cast<double>(i + 1))},
                             {"log_residual", fit.residuals[i]},
                             {"w_V", bundle.prior->w_V[i]},
                             {"w_R", bundle.prior->w_R[i]}});
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Plan comparison

struct PlanSummary {
  double mean_lambda_V = 0.0;
  double min_lambda_V = 0.0;
  double max_lambda_V = 0.0;
  double mean_lambda_R = 0.0;
  double min_lambda_R = 0.0;
  double max_lambda_R = 0.0;
};

inline PlanSummary summarize(const FusionPlan& plan) {
  PlanSummary s;
  if (plan.per_layer.empty()) return s;
  CompensatedSum v, r;
  s.min_lambda_V = s.max_lambda_V = plan.per_layer[0].lambda_V;
  s.min_lambda_R = s.max_lambda_R = plan.per_layer[0].lambda_R;
  for (const auto& w : plan.per_layer) {
    v.add(w.lambda_V);
    r.add(w.lambda_R);
    s.min_lambda_V = std::min(s.min_lambda_V, w.lambda_V);
    s.max_lambda_V = std::max(s.max_lambda_V, w.lambda_V);
    s.min_lambda_R = std::min(s.min_lambda_R, w.lambda_R);
    s.max_lambda_R = std::max(s.max_lambda_R, w.lambda_R);
  }
  const double n = static_cast<double>(plan.per_layer.size());
  s.mean_lambda_V = v.value() / n;
  s.mean_lambda_R = r.value() / n;
  return s;
}

inline void require_plans(const ReportBundle& bundle) {
  if (bundle.plans.size() < 2) {
    throw Error(ErrorKind::ConfigError, fmt::format("plan comparison needs at least 2 plans, got {}", bundle.plans.size()));
  }
}

inline std::string render_plans_csv(const ReportBundle& bundle) {
  require_plans(bundle);
  const std::size_t L = bundle.validate();
  std::string out = "layer";
  for (const auto& [name, _] : bundle.plans) out += fmt::format(",{0}.lambda_V,{0}.lambda_R", name);
  out += '\n';
  for (std::size_t i = 0; i < L; ++i) {
    out += std::to_string(i + 1);
    for (const auto& [_, plan] : bundle.plans) {
      out += fmt::format(",{},{}", fmt_number(plan.per_layer[i].lambda_V), fmt_number(plan.per_layer[i].lambda_R));
    }
    out += '\n';
  }
  return out;
}

inline nlohmann::json plans_json(const ReportBundle& bundle) {
  require_plans(bundle);
  bundle.validate();
  nlohmann::json doc;
  doc["plans"] = nlohmann::json::array();
  for (const auto& [name, plan] : bundle.plans) {
    const PlanSummary s = summarize(plan);
    doc["plans"].push_back({{"name", name},
                            {"mode", std::string(fusion_mode_name(plan.mode))},
                            {"mean_lambda_V", s.mean_lambda_V},
                            {"min_lambda_V", s.min_lambda_V},
                            {"max_lambda_V", s.max_lambda_V},
                            {"mean_lambda_R", s.mean_lambda_R},
                            {"min_lambda_R", s.min_lambda_R},
                            {"max_lambda_R", s.max_lambda_R},
                            {"plan_hash", plan_hash(plan)}});
  }
  return doc;
}

/// One plan as the table the `plan` subcommand writes next to its JSON.
inline std::string render_plan_csv(const FusionPlan& plan) {
  std::string out = "layer,lambda_V,lambda_R,w_V,w_R,sq_norm_V,sq_norm_R\n";
  for (const auto& w : plan.per_layer) {
    out += fmt::format("{},{},{},{},{},{},{}\n", w.layer, fmt_number(w.lambda_V), fmt_number(w.lambda_R),
                       fmt_number(w.w_V), fmt_number(w.w_R), fmt_number(w.sq_norm_V), fmt_number(w.sq_norm_R));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Emission. `path` names the CSV; the JSON goes next to it with a .json
// extension.

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, fmt::format("cannot write '{}'", path.string()));
  out << text;
  out.flush();
  if (!out) throw Error(ErrorKind::IoFailure, fmt::format("write to '{}' failed", path.string()));
}

inline std::pair<std::filesystem::path, std::filesystem::path> report_paths(std::filesystem::path path) {
  std::filesystem::path csv = path;
  if (csv.extension() != ".csv") csv += ".csv";
  std::filesystem::path json = csv;
  json.replace_extension(".json");
  return {csv, json};
}

inline void emit_cosine_report(const ReportBundle& bundle, const std::filesystem::path& path) {
  const auto [csv, json] = report_paths(path);
  const std::string table = render_cosine_csv(bundle);
  const std::string doc = cosine_json(bundle).dump(2) + "\n";
  write_text(csv, table);
  write_text(json, doc);
}

inline void emit_prior_report(const ReportBundle& bundle, const std::filesystem::path& path) {
  const auto [csv, json] = report_paths(path);
  const std::string table = render_prior_csv(bundle);
  const std::string doc = prior_json(bundle).dump(2) + "\n";
  write_text(csv, table);
  write_text(json, doc);
}

inline void compare_plans(const ReportBundle& bundle, const std::filesystem::path& path) {
  const auto [csv, json] = report_paths(path);
  const std::string table = render_plans_csv(bundle);
  const std::string doc = plans_json(bundle).dump(2) + "\n";
  write_text(csv, table);
  write_text(json, doc);
}

}  // namespace lwmerge
