#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "lwmerge/archive.hpp"
#include "lwmerge/parallel.hpp"
#include "lwmerge/partition.hpp"
#include "lwmerge/summation.hpp"

namespace lwmerge {

/// The three opened checkpoints, indexed by Source.
struct ModelArchives {
  std::array<TensorArchive, 3> archives;

  const TensorArchive& operator[](Source s) const { return archives[static_cast<int>(s)]; }

  static ModelArchives open(const std::filesystem::path& base, const std::filesystem::path& vision,
                            const std::filesystem::path& reasoning) {
    return {{open_archive(base), open_archive(vision), open_archive(reasoning)}};
  }

  Catalog catalog(Source s) const { return (*this)[s].entries(); }
};

struct LayerStats {
  std::uint32_t layer = 0;  // 1-based
  std::uint64_t params = 0;
  double sq_norm_V = 0.0;
  double sq_norm_R = 0.0;
  double dot_VR = 0.0;
  std::optional<double> cosine;  // undefined unless both norms are positive
};

struct TaskVectorStats {
  std::vector<LayerStats> per_layer;
  double total_sq_norm_V = 0.0;
  double total_sq_norm_R = 0.0;

  std::size_t num_layers() const { return per_layer.size(); }
};

inline std::optional<double> cosine_of(double sq_norm_V, double sq_norm_R, double dot) {
  if (!(sq_norm_V > 0.0) || !(sq_norm_R > 0.0)) return std::nullopt;
  return dot / std::sqrt(sq_norm_V * sq_norm_R);
}

namespace detail {

inline constexpr std::uint64_t kStatsChunk = 1u << 16;

/// Visit every element of layer `l` as (base, vision, reasoning) values in
/// widened F64. Tensors go in ascending canonical order, elements in storage
/// order, so any accumulation done in `visit` has a fixed order.
template <typename Visit>
void visit_layer(std::uint32_t l, const AlignmentTable& table, const LayerPartition& partition,
                 const ModelArchives& archives, Visit&& visit) {
  std::array<std::vector<std::byte>, 3> raw;
  std::array<std::vector<double>, 3> values;
  for (const std::string& canonical : partition.layer_tensors(l)) {
    const AlignmentRow* row = table.find(canonical);
    if (row == nullptr) {
      throw Error(ErrorKind::UnresolvedTensor, fmt::format("'{}' is not in the alignment table", canonical));
    }
    std::array<const TensorMeta*, 3> metas{};
    for (Source s : kAllSources) metas[static_cast<int>(s)] = &archives[s].meta(row->name(s));
    const std::uint64_t count = metas[0]->elements();
    for (std::uint64_t first = 0; first < count; first += kStatsChunk) {
      const std::uint64_t n = std::min(kStatsChunk, count - first);
      for (Source s : kAllSources) {
        const int i = static_cast<int>(s);
        const DType dt = metas[i]->dtype;
        raw[i].resize(n * dtype_size(dt));
        archives[s].read_elements(*metas[i], first, n, raw[i]);
        values[i].resize(n);
        for (std::uint64_t k = 0; k < n; ++k) values[i][k] = load_element(raw[i].data() + k * dtype_size(dt), dt);
      }
      for (std::uint64_t k = 0; k < n; ++k) visit(values[0][k], values[1][k], values[2][k]);
    }
  }
}

}  // namespace detail

/// Σ over layer-l tensors of (θ_branch − θ_base)², compensated, fixed order.
inline double layer_sq_norm(Source branch, std::uint32_t l, const AlignmentTable& table,
                            const LayerPartition& partition, const ModelArchives& archives) {
  if (branch == Source::Base) throw Error(ErrorKind::ConfigError, "the base model has no task vector");
  CompensatedSum sum;
  detail::visit_layer(l, table, partition, archives, [&](double b, double v, double r) {
    const double d = (branch == Source::Vision ? v : r) - b;
    sum.add(d * d);
  });
  return sum.value();
}

/// Σ over layer-l tensors of (θ_V − θ_0)(θ_R − θ_0), same order contract.
inline double layer_dot(std::uint32_t l, const AlignmentTable& table, const LayerPartition& partition,
                        const ModelArchives& archives) {
  CompensatedSum sum;
  detail::visit_layer(l, table, partition, archives,
                      [&](double b, double v, double r) { sum.add((v - b) * (r - b)); });
  return sum.value();
}

inline LayerStats layer_stats(std::uint32_t l, const AlignmentTable& table, const LayerPartition& partition,
                              const ModelArchives& archives) {
  CompensatedSum sq_v, sq_r, dot;
  std::uint64_t params = 0;
  detail::visit_layer(l, table, partition, archives, [&](double b, double v, double r) {
    const double dv = v - b;
    const double dr = r - b;
    sq_v.add(dv * dv);
    sq_r.add(dr * dr);
    dot.add(dv * dr);
    ++params;
  });
  LayerStats stats;
  stats.layer = l;
  stats.params = params;
  stats.sq_norm_V = sq_v.value();
  stats.sq_norm_R = sq_r.value();
  stats.dot_VR = dot.value();
  stats.cosine = cosine_of(stats.sq_norm_V, stats.sq_norm_R, stats.dot_VR);
  return stats;
}

/// Totals are compensated sums of the per-layer values in layer order.
inline void fill_totals(TaskVectorStats& stats) {
  CompensatedSum v, r;
  for (const auto& layer : stats.per_layer) {
    v.add(layer.sq_norm_V);
    r.add(layer.sq_norm_R);
  }
  stats.total_sq_norm_V = v.value();
  stats.total_sq_norm_R = r.value();
}

/// Layers are processed concurrently, each one sequentially, so results are
/// bit-identical for any thread count.
inline TaskVectorStats compute_stats(const AlignmentTable& table, const LayerPartition& partition,
                                     const ModelArchives& archives, unsigned threads = 1) {
  TaskVectorStats stats;
  stats.per_layer.resize(partition.num_layers);
  parallel_for(partition.num_layers, threads, [&](std::size_t i) {
    stats.per_layer[i] = layer_stats(static_cast<std::uint32_t>(i + 1), table, partition, archives);
  });
  fill_totals(stats);
  return stats;
}

}  // namespace lwmerge
