#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "lwmerge/archive.hpp"
#include "lwmerge/error.hpp"
#include "lwmerge/fusion.hpp"
#include "lwmerge/partition.hpp"
#include "lwmerge/taskvec.hpp"

namespace lwmerge::testbed {

enum class DeltaKind { OrthogonalPair, RandomGaussian };

struct SyntheticSpec {
  std::uint32_t L = 4;
  std::uint32_t tensors_per_layer = 4;
  Shape shape{32, 32};
  DType dtype = DType::F32;
  DeltaKind kind = DeltaKind::OrthogonalPair;
  double scale_V = 1.0;
  double scale_R = 1.0;
  std::uint64_t seed = 1;
  double rho = 0.0;                   // RandomGaussian correlation
  std::vector<double> layer_scale_V;  // optional per-layer multipliers, length L
  std::vector<double> layer_scale_R;
  bool non_decoder = true;  // embeddings, final norm, head, and a vision-only tower tensor
};

struct SidecarLayer {
  std::uint32_t layer = 0;
  std::uint64_t params = 0;
  double sq_norm_V = 0.0;
  double sq_norm_R = 0.0;
  double dot_VR = 0.0;
};

struct Sidecar {
  std::vector<SidecarLayer> layers;

  std::size_t num_layers() const { return layers.size(); }
};

struct GeneratedModels {
  std::filesystem::path base;
  std::filesystem::path vision;
  std::filesystem::path reasoning;
  std::filesystem::path sidecar;
  Sidecar truth;
};

inline std::string decoder_tensor_name(std::uint32_t layer0, std::uint32_t j) {
  static const char* kParts[] = {"self_attn.q_proj.weight", "self_attn.k_proj.weight", "self_attn.v_proj.weight",
                                 "self_attn.o_proj.weight", "mlp.gate_proj.weight",    "mlp.up_proj.weight",
                                 "mlp.down_proj.weight",    "input_layernorm.weight"};
  constexpr std::uint32_t kNamed = sizeof(kParts) / sizeof(kParts[0]);
  if (j < kNamed) return fmt::format("model.layers.{}.{}", layer0, kParts[j]);
  return fmt::format("model.layers.{}.extra_{}.weight", layer0, j);
}

inline nlohmann::json to_json(const Sidecar& sidecar) {
  nlohmann::json doc;
  doc["layers"] = nlohmann::json::array();
  for (const auto& l : sidecar.layers) {
    doc["layers"].push_back({{"layer", l.layer},
                             {"params", l.params},
                             {"sq_norm_V", l.sq_norm_V},
                             {"sq_norm_R", l.sq_norm_R},
                             {"dot_VR", l.dot_VR}});
  }
  return doc;
}

inline Sidecar sidecar_from_json(const nlohmann::json& doc) {
  Sidecar sidecar;
  for (const auto& item : doc.at("layers")) {
    sidecar.layers.push_back({item.at("layer").get<std::uint32_t>(), item.at("params").get<std::uint64_t>(),
                              item.at("sq_norm_V").get<double>(), item.at("sq_norm_R").get<double>(),
                              item.at("dot_VR").get<double>()});
  }
  return sidecar;
}

inline Sidecar load_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, fmt::format("cannot read sidecar '{}'", path.string()));
  return sidecar_from_json(nlohmann::json::parse(in));
}

/// Write base/vision/reasoning archives whose per-layer deltas follow `spec`.
/// Ground truth is accumulated in extended precision from the stored values,
/// independently of the library's statistics path.
inline GeneratedModels generate(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.L == 0 || spec.tensors_per_layer == 0) throw Error(ErrorKind::ConfigError, "synthetic spec needs L, tensors > 0");
  if (!spec.layer_scale_V.empty() && spec.layer_scale_V.size() != spec.L) {
    throw Error(ErrorKind::LengthMismatch, "layer_scale_V must have L entries");
  }
  if (!spec.layer_scale_R.empty() && spec.layer_scale_R.size() != spec.L) {
    throw Error(ErrorKind::LengthMismatch, "layer_scale_R must have L entries");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, fmt::format("cannot create '{}': {}", out_dir.string(), ec.message()));

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  const std::uint64_t n = element_count(spec.shape);

  std::vector<NamedTensor> base, vision, reasoning;
  GeneratedModels out;
  for (std::uint32_t l = 0; l < spec.L; ++l) {
    const double mV = spec.layer_scale_V.empty() ? 1.0 : spec.layer_scale_V[l];
    const double mR = spec.layer_scale_R.empty() ? 1.0 : spec.layer_scale_R[l];
    long double sq_v = 0.0L, sq_r = 0.0L, dot = 0.0L;
    for (std::uint32_t j = 0; j < spec.tensors_per_layer; ++j) {
      Tensor b(spec.dtype, spec.shape), v(spec.dtype, spec.shape), r(spec.dtype, spec.shape);
      for (std::uint64_t k = 0; k < n; ++k) {
        double base_value, dv, dr;
        if (spec.kind == DeltaKind::OrthogonalPair) {
          // dyadic base values; vision moves even slots, reasoning odd slots
          base_value = static_cast<double>(static_cast<std::int64_t>((k * 7 + j * 3 + l) % 16) - 8) / 16.0;
          const double u = uniform(rng);
          dv = (k % 2 == 0) ? spec.scale_V * mV * u : 0.0;
          dr = (k % 2 == 1) ? spec.scale_R * mR * u : 0.0;
        } else {
          base_value = 0.02 * normal(rng);
          const double z1 = normal(rng);
          const double z2 = normal(rng);
          dv = spec.scale_V * mV * z1;
          dr = spec.scale_R * mR * (spec.rho * z1 + std::sqrt(1.0 - spec.rho * spec.rho) * z2);
        }
        b.set(k, base_value);
        v.set(k, base_value + dv);
        r.set(k, base_value + dr);
        const long double tv = static_cast<long double>(v.at(k)) - b.at(k);
        const long double tr = static_cast<long double>(r.at(k)) - b.at(k);
        sq_v += tv * tv;
        sq_r += tr * tr;
        dot += tv * tr;
      }
      const std::string name = decoder_tensor_name(l, j);
      base.push_back({name, std::move(b)});
      vision.push_back({name, std::move(v)});
      reasoning.push_back({name, std::move(r)});
    }
    out.truth.layers.push_back({l + 1, n * spec.tensors_per_layer, static_cast<double>(sq_v),
                                static_cast<double>(sq_r), static_cast<double>(dot)});
  }

  if (spec.non_decoder) {
    const std::uint64_t hidden = spec.shape.back();
    auto filled = [&](Shape shape, double offset) {
      Tensor t(spec.dtype, std::move(shape));
      for (std::uint64_t k = 0; k < t.elements(); ++k) t.set(k, offset + static_cast<double>(k % 32) / 64.0);
      return t;
    };
    for (auto& [models, offset] : {std::pair{&base, 0.0}, {&vision, 1.0}, {&reasoning, 2.0}}) {
      models->push_back({"model.embed_tokens.weight", filled({16, hidden}, offset)});
      models->push_back({"model.norm.weight", filled({hidden}, offset)});
      models->push_back({"lm_head.weight", filled({16, hidden}, offset)});
    }
    vision.push_back({"vision_tower.patch_embed.weight", filled({8, hidden}, 3.0)});
  }

  out.base = out_dir / "base.safetensors";
  out.vision = out_dir / "vision.safetensors";
  out.reasoning = out_dir / "reasoning.safetensors";
  out.sidecar = out_dir / "sidecar.json";
  write_archive(base, out.base, {{"role", "base"}});
  write_archive(vision, out.vision, {{"role", "vision"}});
  write_archive(reasoning, out.reasoning, {{"role", "reasoning"}});
  std::ofstream side(out.sidecar);
  side << to_json(out.truth).dump(2) << "\n";
  if (!side) throw Error(ErrorKind::IoFailure, fmt::format("cannot write '{}'", out.sidecar.string()));
  return out;
}

/// Per-layer weights and curvatures for the quadratic objective.
struct QuadraticWeights {
  double delta_V = 1.0;
  double delta_R = 1.0;
  std::vector<double> w_V;  // empty means 1 at every layer
  std::vector<double> w_R;
};

/// Squared distances ‖θ_f − θ_t‖² for one layer.
struct BranchDistances {
  double to_V = 0.0;
  double to_R = 0.0;
};

/// Closed expressions for θ_f = θ₀ + λ_V τ_V + λ_R τ_R, including the cross term.
inline BranchDistances distances_from_truth(const SidecarLayer& layer, double lambda_V, double lambda_R) {
  const double a = layer.sq_norm_V, b = layer.sq_norm_R, c = layer.dot_VR;
  BranchDistances d;
  d.to_V = (1.0 - lambda_V) * (1.0 - lambda_V) * a + lambda_R * lambda_R * b - 2.0 * (1.0 - lambda_V) * lambda_R * c;
  d.to_R = (1.0 - lambda_R) * (1.0 - lambda_R) * b + lambda_V * lambda_V * a - 2.0 * (1.0 - lambda_R) * lambda_V * c;
  return d;
}

/// Loss per branch: L_t(θ) = δ_t ‖τ_t‖² ‖θ − θ_t‖²; objective ½ Σ_t w_t [L_t(θ_f) − L_t(θ_t)].
/// For orthogonal task vectors this equals lald_bound exactly.
inline double quadratic_lald(const SidecarLayer& layer, const BranchDistances& d, const QuadraticWeights& q,
                             std::size_t index) {
  const double w_V = q.w_V.empty() ? 1.0 : q.w_V[index];
  const double w_R = q.w_R.empty() ? 1.0 : q.w_R[index];
  return 0.5 * (w_V * q.delta_V * layer.sq_norm_V * d.to_V + w_R * q.delta_R * layer.sq_norm_R * d.to_R);
}

inline std::vector<double> evaluate_quadratic_lald(const Sidecar& sidecar, const FusionPlan& plan,
                                                   const QuadraticWeights& q = {}) {
  if (plan.num_layers() != sidecar.num_layers() || (!q.w_V.empty() && q.w_V.size() != sidecar.num_layers()) ||
      (!q.w_R.empty() && q.w_R.size() != sidecar.num_layers())) {
    throw Error(ErrorKind::LengthMismatch, "plan, sidecar and priors must cover the same layers");
  }
  std::vector<double> out(sidecar.num_layers());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& w = plan.per_layer[i];
    out[i] = quadratic_lald(sidecar.layers[i], distances_from_truth(sidecar.layers[i], w.lambda_V, w.lambda_R), q, i);
  }
  return out;
}

/// ‖θ_f − θ_t‖² per layer measured directly from a merged archive.
inline std::vector<BranchDistances> measure_distances(const TensorArchive& merged, const ModelArchives& archives,
                                                      const AlignmentTable& table, const LayerPartition& partition) {
  std::vector<BranchDistances> out(partition.num_layers);
  for (std::uint32_t l = 1; l <= partition.num_layers; ++l) {
    long double to_V = 0.0L, to_R = 0.0L;
    for (const std::string& canonical : partition.layer_tensors(l)) {
      const AlignmentRow* row = table.find(canonical);
      const Tensor f = merged.read_tensor(canonical);
      const Tensor v = archives[Source::Vision].read_tensor(row->name(Source::Vision));
      const Tensor r = archives[Source::Reasoning].read_tensor(row->name(Source::Reasoning));
      for (std::uint64_t k = 0; k < f.elements(); ++k) {
        const long double ev = static_cast<long double>(f.at(k)) - v.at(k);
        const long double er = static_cast<long double>(f.at(k)) - r.at(k);
        to_V += ev * ev;
        to_R += er * er;
      }
    }
    out[l - 1] = {static_cast<double>(to_V), static_cast<double>(to_R)};
  }
  return out;
}

}  // namespace lwmerge::testbed
