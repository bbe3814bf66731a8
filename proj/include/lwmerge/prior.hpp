#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "lwmerge/error.hpp"
#include "lwmerge/summation.hpp"

namespace lwmerge {

/// Per-layer fraction of text-query attention mass that lands on visual keys.
struct AttentionProfile {
  std::string model_id;
  std::optional<std::int64_t> num_samples;
  std::vector<double> ratios;  // ratios[l - 1] = a_l

  std::size_t num_layers() const { return ratios.size(); }
};

inline AttentionProfile parse_attention_profile(const nlohmann::json& doc) {
  auto schema = [](const std::string& why) { return Error(ErrorKind::SchemaError, why); };
  if (!doc.is_object()) throw schema("attention profile must be a JSON object");
  AttentionProfile profile;
  if (doc.contains("model_id")) {
    if (!doc["model_id"].is_string()) throw schema("model_id must be a string");
    profile.model_id = doc["model_id"].get<std::string>();
  }
  if (doc.contains("num_samples")) {
    const auto& n = doc["num_samples"];
    if (!n.is_number_integer() || n.get<std::int64_t>() < 1) {
      throw schema("num_samples must be a positive integer");
    }
    profile.num_samples = n.get<std::int64_t>();
  }
  if (!doc.contains("layers") || !doc["layers"].is_array()) throw schema("missing 'layers' array");

  std::vector<std::pair<std::int64_t, double>> entries;
  for (const auto& item : doc["layers"]) {
    if (!item.is_object() || !item.contains("index") || !item.contains("a")) {
      throw schema("each layer needs 'index' and 'a'");
    }
    if (!item["index"].is_number_integer() || item["index"].get<std::int64_t>() < 1) {
      throw schema("layer index must be an integer >= 1");
    }
    if (!item["a"].is_number()) throw schema("layer 'a' must be a number");
    const std::int64_t index = item["index"].get<std::int64_t>();
    const double a = item["a"].get<double>();
    if (!std::isfinite(a)) throw schema(fmt::format("layer {} has a non-finite ratio", index));
    if (a <= 0.0) {
      throw Error(ErrorKind::NonPositiveAttention,
                  fmt::format("layer {} has attention ratio {}; the log fit needs a > 0", index, a));
    }
    if (a > 1.0) throw schema(fmt::format("layer {} has attention ratio {} > 1", index, a));
    entries.emplace_back(index, a);
  }
  std::sort(entries.begin(), entries.end());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (i > 0 && entries[i].first == entries[i - 1].first) {
      throw schema(fmt::format("layer {} listed twice", entries[i].first));
    }
    const auto expected = static_cast<std::int64_t>(i + 1);
    if (entries[i].first != expected) {
      throw Error(ErrorKind::LayerGap,
                  fmt::format("layers must be consecutive from 1; layer {} is missing", expected));
    }
    profile.ratios.push_back(entries[i].second);
  }
  return profile;
}

inline AttentionProfile load_attention_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, fmt::format("cannot read '{}'", path.string()));
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SchemaError, fmt::format("'{}': {}", path.string(), e.what()));
  }
  return parse_attention_profile(doc);
}

inline nlohmann::json to_json(const AttentionProfile& profile) {
  nlohmann::json doc;
  doc["model_id"] = profile.model_id;
  if (profile.num_samples) doc["num_samples"] = *profile.num_samples;
  doc["layers"] = nlohmann::json::array();
  for (std::size_t i = 0; i < profile.ratios.size(); ++i) {
    doc["layers"].push_back({{"index", i + 1}, {"a", profile.ratios[i]}});
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Exponential decay fit

struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
  double r_squared = 1.0;
  std::vector<double> residuals;
};

/// Ordinary least squares y ≈ b0 + b1·x through the centred normal equations.
inline LineFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::LengthMismatch, "x and y differ in length");
  if (x.size() < 2) throw Error(ErrorKind::DegenerateFit, "a line fit needs at least two points");
  const double n = static_cast<double>(x.size());
  double x_mean = 0.0, y_mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    x_mean += x[i];
    y_mean += y[i];
  }
  x_mean /= n;
  y_mean /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - x_mean;
    const double dy = y[i] - y_mean;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (!(sxx > 0.0)) throw Error(ErrorKind::DegenerateFit, "all x values coincide");

  LineFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = y_mean - fit.slope * x_mean;
  double ss_res = 0.0;
  fit.residuals.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    fit.residuals[i] = y[i] - (fit.intercept + fit.slope * x[i]);
    ss_res += fit.residuals[i] * fit.residuals[i];
  }
  // a constant series is fit perfectly by the zero-slope line
  fit.r_squared = syy > 0.0 ? std::clamp(1.0 - ss_res / syy, 0.0, 1.0) : 1.0;
  return fit;
}

struct DecayFit {
  double alpha_hat = 0.0;  // a_l ≈ C_hat · exp(−alpha_hat · l)
  double C_hat = 1.0;
  double r_squared = 1.0;
  std::vector<double> residuals;  // ln a_l − fitted, per layer

  double predict(double l) const { return C_hat * std::exp(-alpha_hat * l); }
};

/// Regress ln a_l on l = 1..L.
inline DecayFit fit_exponential_decay(const AttentionProfile& profile) {
  const std::size_t L = profile.num_layers();
  if (L < 2) throw Error(ErrorKind::DegenerateFit, fmt::format("need at least 2 layers, got {}", L));
  std::vector<double> x(L), y(L);
  for (std::size_t i = 0; i < L; ++i) {
    x[i] = static_cast<double>(i + 1);
    y[i] = std::log(profile.ratios[i]);
  }
  LineFit line = fit_line(x, y);
  DecayFit fit;
  fit.alpha_hat = -line.slope;
  fit.C_hat = std::exp(line.intercept);
  fit.r_squared = line.r_squared;
  fit.residuals = std::move(line.residuals);
  return fit;
}

// ---------------------------------------------------------------------------
// Modality priors

enum class PriorMode {
  Fitted,     // normalized exponential with the fitted decay rate
  Uniform,    // w_V = w_R = 1/2
  Literal16,  // normalized exponential with a caller-chosen decay rate
  MinMax,     // exp(−α l) rescaled onto [w_min, w_max]; opt-in alternative
};

inline std::string_view prior_mode_name(PriorMode mode) {
  switch (mode) {
    case PriorMode::Fitted: return "fitted";
    case PriorMode::Uniform: return "uniform";
    case PriorMode::Literal16: return "literal";
    case PriorMode::MinMax: return "minmax";
  }
  return "?";
}

inline std::optional<PriorMode> parse_prior_mode(std::string_view name) {
  if (name == "fitted") return PriorMode::Fitted;
  if (name == "uniform") return PriorMode::Uniform;
  if (name == "literal") return PriorMode::Literal16;
  if (name == "minmax") return PriorMode::MinMax;
  return std::nullopt;
}

struct MinMaxRange {
  double w_min = 0.1;
  double w_max = 0.9;
};

struct ModalityPrior {
  PriorMode mode = PriorMode::Uniform;
  std::optional<double> alpha;  // decay rate used, when the mode has one
  std::vector<double> w_V;
  std::vector<double> w_R;

  std::size_t num_layers() const { return w_V.size(); }
};

inline ModalityPrior uniform_prior(std::size_t L) {
  ModalityPrior prior;
  prior.mode = PriorMode::Uniform;
  prior.w_V.assign(L, 0.5);
  prior.w_R.assign(L, 0.5);
  return prior;
}

/// w_V(l) = exp(−α l) / Σ_j exp(−α j), w_R = 1 − w_V, in the Fitted and
/// Literal16 modes. Exponents are shifted by their maximum before exp().
inline ModalityPrior compute_priors(double alpha_hat, std::size_t L, PriorMode mode,
                                    MinMaxRange range = {}) {
  if (L < 1) throw Error(ErrorKind::LengthMismatch, "a prior needs at least one layer");
  if (mode == PriorMode::Uniform) return uniform_prior(L);
  if (!std::isfinite(alpha_hat)) {
    throw Error(ErrorKind::DegenerateFit, fmt::format("decay rate {} is not finite", alpha_hat));
  }

  std::vector<double> exponent(L);
  for (std::size_t i = 0; i < L; ++i) exponent[i] = -alpha_hat * static_cast<double>(i + 1);
  const double shift = *std::max_element(exponent.begin(), exponent.end());
  std::vector<double> unnormalized(L);
  for (std::size_t i = 0; i < L; ++i) unnormalized[i] = std::exp(exponent[i] - shift);

  ModalityPrior prior;
  prior.mode = mode;
  prior.alpha = alpha_hat;
  prior.w_V.resize(L);
  prior.w_R.resize(L);
  if (mode == PriorMode::MinMax) {
    if (!(range.w_min > 0.0) || !(range.w_max < 1.0) || !(range.w_min <= range.w_max)) {
      throw Error(ErrorKind::ConfigError,
                  fmt::format("minmax range [{}, {}] must satisfy 0 < w_min <= w_max < 1", range.w_min,
                              range.w_max));
    }
    const auto [lo, hi] = std::minmax_element(unnormalized.begin(), unnormalized.end());
    const double span = *hi - *lo;
    for (std::size_t i = 0; i < L; ++i) {
      const double t = span > 0.0 ? (unnormalized[i] - *lo) / span : 0.5;
      prior.w_V[i] = range.w_min + t * (range.w_max - range.w_min);
      prior.w_R[i] = 1.0 - prior.w_V[i];
    }
    return prior;
  }
  CompensatedSum sum;
  for (double u : unnormalized) sum.add(u);
  const double total = sum.value();
  for (std::size_t i = 0; i < L; ++i) {
    prior.w_V[i] = unnormalized[i] / total;
    prior.w_R[i] = 1.0 - prior.w_V[i];
  }
  return prior;
}

inline nlohmann::json to_json(const DecayFit& fit) {
  return {{"alpha_hat", fit.alpha_hat},
          {"C_hat", fit.C_hat},
          {"r_squared", fit.r_squared},
          {"residuals", fit.residuals}};
}

inline nlohmann::json to_json(const ModalityPrior& prior) {
  nlohmann::json doc;
  doc["mode"] = std::string(prior_mode_name(prior.mode));
  doc["alpha"] = prior.alpha ? nlohmann::json(*prior.alpha) : nlohmann::json(nullptr);
  doc["layers"] = nlohmann::json::array();
  for (std::size_t i = 0; i < prior.num_layers(); ++i) {
    doc["layers"].push_back({{"layer", i + 1}, {"w_V", prior.w_V[i]}, {"w_R", prior.w_R[i]}});
  }
  return doc;
}

}  // namespace lwmerge
