#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "lwmerge/archive.hpp"
#include "lwmerge/error.hpp"
#include "lwmerge/fusion.hpp"
#include "lwmerge/hash.hpp"
#include "lwmerge/parallel.hpp"
#include "lwmerge/partition.hpp"
#include "lwmerge/taskvec.hpp"

namespace lwmerge {

/// Where tensors outside the decoder blocks come from. Overrides are full
/// regex matches on the canonical name; the first match wins.
class NonDecoderPolicy {
 public:
  struct Override {
    std::string pattern;
    Source source;
  };

  NonDecoderPolicy() = default;
  explicit NonDecoderPolicy(Source default_source, std::vector<Override> overrides = {})
      : default_source_(default_source), overrides_(std::move(overrides)) {
    for (const auto& o : overrides_) {
      try {
        compiled_.emplace_back(o.pattern, std::regex::ECMAScript);
      } catch (const std::regex_error& e) {
        throw Error(ErrorKind::InvalidPattern, fmt::format("override pattern '{}': {}", o.pattern, e.what()));
      }
    }
  }

  Source default_source() const { return default_source_; }
  const std::vector<Override>& overrides() const { return overrides_; }

  Source resolve(const std::string& canonical) const {
    for (std::size_t i = 0; i < compiled_.size(); ++i) {
      if (std::regex_match(canonical, compiled_[i])) return overrides_[i].source;
    }
    return default_source_;
  }

 private:
  Source default_source_ = Source::Vision;
  std::vector<Override> overrides_;
  std::vector<std::regex> compiled_;
};

enum class DtypeRule { PreserveBase, ForceF32, ForceBF16 };

inline std::string_view dtype_rule_name(DtypeRule rule) {
  switch (rule) {
    case DtypeRule::PreserveBase: return "preserve-base";
    case DtypeRule::ForceF32: return "f32";
    case DtypeRule::ForceBF16: return "bf16";
  }
  return "?";
}

inline std::optional<DtypeRule> parse_dtype_rule(std::string_view name) {
  if (name == "preserve-base") return DtypeRule::PreserveBase;
  if (name == "f32") return DtypeRule::ForceF32;
  if (name == "bf16") return DtypeRule::ForceBF16;
  return std::nullopt;
}

struct TensorAction {
  enum class Kind { Fuse, Copy };
  Kind kind = Kind::Copy;
  std::uint32_t layer = 0;  // Fuse
  double lambda_V = 0.0;
  double lambda_R = 0.0;
  Source source = Source::Base;  // Copy
};

struct ManifestEntry {
  std::string name;  // canonical, also the output name
  TensorAction action;
  DType out_dtype = DType::F32;
  Shape shape;
  std::array<std::optional<std::string>, 3> inputs;  // per-source names
};

struct MergeManifest {
  std::vector<ManifestEntry> entries;  // ascending by name
  std::vector<std::string> omitted;    // branch-only tensors the policy does not pick up
  FusionPlan plan;
  NonDecoderPolicy policy;
  DtypeRule dtype_rule = DtypeRule::PreserveBase;
  std::uint64_t seed = 0;

  nlohmann::json to_json(bool with_seed = true) const {
    nlohmann::json doc;
    doc["plan_mode"] = std::string(fusion_mode_name(plan.mode));
    doc["plan_hash"] = plan_hash(plan);
    doc["dtype_rule"] = std::string(dtype_rule_name(dtype_rule));
    doc["non_decoder_default"] = std::string(source_name(policy.default_source()));
    doc["overrides"] = nlohmann::json::array();
    for (const auto& o : policy.overrides()) {
      doc["overrides"].push_back({{"pattern", o.pattern}, {"source", std::string(source_name(o.source))}});
    }
    doc["tensors"] = nlohmann::json::array();
    for (const auto& e : entries) {
      nlohmann::json t{{"name", e.name},
                       {"dtype", std::string(dtype_name(e.out_dtype))},
                       {"shape", e.shape}};
      if (e.action.kind == TensorAction::Kind::Fuse) {
        t["action"] = "fuse";
        t["layer"] = e.action.layer;
        t["lambda_V"] = e.action.lambda_V;
        t["lambda_R"] = e.action.lambda_R;
      } else {
        t["action"] = "copy";
        t["source"] = std::string(source_name(e.action.source));
      }
      doc["tensors"].push_back(std::move(t));
    }
    doc["omitted"] = omitted;
    if (with_seed) doc["verify_seed"] = hex64(seed);
    return doc;
  }

  std::string hash() const { return hex64(fnv1a64(to_json(false).dump())); }
};

inline DType output_dtype(DtypeRule rule, DType preserved) {
  switch (rule) {
    case DtypeRule::PreserveBase: return preserved;
    case DtypeRule::ForceF32: return DType::F32;
    case DtypeRule::ForceBF16: return DType::BF16;
  }
  return preserved;
}

/// Resolve every aligned tensor to Fuse(l) or Copy(source).
inline MergeManifest plan_merge(const AlignmentTable& table, const LayerPartition& partition,
                                const FusionPlan& plan, const NonDecoderPolicy& policy, DtypeRule dtype_rule) {
  if (plan.num_layers() != partition.num_layers) {
    throw Error(ErrorKind::LengthMismatch, fmt::format("plan has {} layers but the decoder has {}",
                                                       plan.num_layers(), partition.num_layers));
  }
  MergeManifest manifest;
  manifest.plan = plan;
  manifest.policy = policy;
  manifest.dtype_rule = dtype_rule;
  for (const auto& row : table.rows) {
    auto it = partition.assignment.find(row.canonical);
    if (it == partition.assignment.end()) {
      throw Error(ErrorKind::UnresolvedTensor, fmt::format("'{}' has no layer assignment", row.canonical));
    }
    ManifestEntry entry;
    entry.name = row.canonical;
    entry.inputs = row.names;
    if (it->second.is_decoder()) {
      const LayerWeights& w = plan.per_layer[it->second.layer - 1];
      entry.action.kind = TensorAction::Kind::Fuse;
      entry.action.layer = it->second.layer;
      entry.action.lambda_V = w.lambda_V;
      entry.action.lambda_R = w.lambda_R;
      entry.shape = row.shape(Source::Base);
      entry.out_dtype = output_dtype(dtype_rule, row.dtype(Source::Base));
    } else {
      Source source = policy.resolve(row.canonical);
      if (!row.has(source) && row.demoted) source = Source::Base;
      if (!row.has(source)) {
        if (row.has(Source::Base)) {
          throw Error(ErrorKind::UnresolvedTensor,
                      fmt::format("'{}' should be copied from {} but that archive lacks it; add an override",
                                  row.canonical, source_name(source)));
        }
        manifest.omitted.push_back(row.canonical);
        continue;
      }
      entry.action.kind = TensorAction::Kind::Copy;
      entry.action.source = source;
      entry.shape = row.shape(source);
      const DType preserved = row.has(Source::Base) ? row.dtype(Source::Base) : row.dtype(source);
      entry.out_dtype = output_dtype(dtype_rule, preserved);
    }
    manifest.entries.push_back(std::move(entry));
  }
  manifest.seed = fnv1a64(manifest.to_json(false).dump());
  return manifest;
}

struct MergeOptions {
  unsigned threads = 1;
  std::uint64_t max_chunk_elements = 1u << 20;
};

struct MergeReport {
  std::vector<std::pair<double, double>> applied;  // per layer
  std::size_t fused = 0;
  std::size_t copied = 0;
  std::size_t omitted = 0;
  std::size_t total = 0;
  std::optional<double> max_residual;  // set after verification
  double seconds = 0.0;
  std::uint64_t bytes_read = 0;
  std::uint64_t bytes_written = 0;
  std::uint64_t largest_tensor_bytes = 0;
  std::uint64_t peak_buffer_bytes = 0;
  Metadata metadata;

  nlohmann::json to_json() const {
    nlohmann::json doc;
    doc["fused"] = fused;
    doc["copied"] = copied;
    doc["omitted"] = omitted;
    doc["total"] = total;
    doc["seconds"] = seconds;
    doc["bytes_read"] = bytes_read;
    doc["bytes_written"] = bytes_written;
    doc["largest_tensor_bytes"] = largest_tensor_bytes;
    doc["peak_buffer_bytes"] = peak_buffer_bytes;
    doc["max_residual"] = max_residual ? nlohmann::json(*max_residual) : nlohmann::json(nullptr);
    doc["applied"] = nlohmann::json::array();
    for (std::size_t i = 0; i < applied.size(); ++i) {
      doc["applied"].push_back({{"layer", i + 1}, {"lambda_V", applied[i].first}, {"lambda_R", applied[i].second}});
    }
    doc["metadata"] = metadata;
    return doc;
  }
};

inline std::string format_alpha(const std::optional<double>& alpha) {
  return alpha ? fmt::format("{:.17g}", *alpha) : std::string("none");
}

/// Base header metadata, extended with merge provenance.
inline Metadata merge_metadata(const MergeManifest& manifest, const ModelArchives& archives) {
  Metadata metadata = archives[Source::Base].metadata();
  metadata["lwmerge.mode"] = std::string(fusion_mode_name(manifest.plan.mode));
  metadata["lwmerge.alpha_hat"] = format_alpha(manifest.plan.alpha_hat);
  metadata["lwmerge.plan_hash"] = plan_hash(manifest.plan);
  metadata["lwmerge.manifest_hash"] = manifest.hash();
  metadata["lwmerge.dtype_rule"] = std::string(dtype_rule_name(manifest.dtype_rule));
  return metadata;
}

namespace detail {

class BufferMeter {
 public:
  class Lease {
   public:
    Lease(BufferMeter& meter, std::uint64_t bytes) : meter_(meter), bytes_(bytes) {
      const std::uint64_t now = meter_.current_.fetch_add(bytes_) + bytes_;
      std::uint64_t seen = meter_.peak_.load();
      while (now > seen && !meter_.peak_.compare_exchange_weak(seen, now)) {
      }
    }
    ~Lease() { meter_.current_.fetch_sub(bytes_); }
    Lease(const Lease&) = delete;
    Lease& operator=(const Lease&) = delete;

   private:
    BufferMeter& meter_;
    std::uint64_t bytes_;
  };

  std::uint64_t peak() const { return peak_.load(); }

 private:
  std::atomic<std::uint64_t> current_{0};
  std::atomic<std::uint64_t> peak_{0};
};

struct ChunkTask {
  std::size_t entry = 0;
  std::uint64_t first = 0;
  std::uint64_t count = 0;
};

inline std::array<const TensorMeta*, 3> fuse_inputs(const ManifestEntry& e, const ModelArchives& archives) {
  std::array<const TensorMeta*, 3> metas{};
  for (Source s : kAllSources) metas[static_cast<int>(s)] = &archives[s].meta(*e.inputs[static_cast<int>(s)]);
  return metas;
}

inline std::uint64_t bytes_per_element(const ManifestEntry& e, const ModelArchives& archives) {
  if (e.action.kind == TensorAction::Kind::Fuse) {
    std::uint64_t cost = dtype_size(e.out_dtype);
    for (const TensorMeta* m : fuse_inputs(e, archives)) cost += dtype_size(m->dtype);
    return cost;
  }
  const TensorMeta& src = archives[e.action.source].meta(*e.inputs[static_cast<int>(e.action.source)]);
  return dtype_size(src.dtype) + (src.dtype == e.out_dtype ? 0 : dtype_size(e.out_dtype));
}

inline std::uint64_t largest_tensor_bytes(const MergeManifest& manifest, const ModelArchives& archives) {
  std::uint64_t largest = 0;
  for (const auto& e : manifest.entries) {
    largest = std::max(largest, element_count(e.shape) * dtype_size(e.out_dtype));
    for (Source s : kAllSources) {
      const auto& name = e.inputs[static_cast<int>(s)];
      if (name) largest = std::max(largest, archives[s].meta(*name).bytes());
    }
  }
  return largest;
}

}  // namespace detail

/// θ_f = θ₀ + λ_V(θ_V − θ₀) + λ_R(θ_R − θ₀) elementwise in F64, narrowed to
/// the output dtype. Work is split into element chunks written at their final
/// offsets, so output bytes do not depend on the worker count. Chunk sizes
/// keep all in-flight buffers within 4 × the largest single tensor.
inline MergeReport execute_merge(const MergeManifest& manifest, const ModelArchives& archives,
                                 const std::filesystem::path& out_path, const MergeOptions& options = {}) {
  const auto started = std::chrono::steady_clock::now();
  const unsigned threads = std::max(1u, options.threads);

  MergeReport report;
  report.metadata = merge_metadata(manifest, archives);
  for (const auto& w : manifest.plan.per_layer) report.applied.emplace_back(w.lambda_V, w.lambda_R);
  report.largest_tensor_bytes = detail::largest_tensor_bytes(manifest, archives);
  const std::uint64_t budget = 4 * report.largest_tensor_bytes;

  std::vector<TensorSpec> specs;
  specs.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) specs.push_back({e.name, e.out_dtype, e.shape});
  ArchiveWriter writer(out_path, std::move(specs), report.metadata);

  std::vector<detail::ChunkTask> tasks;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const ManifestEntry& e = manifest.entries[i];
    const std::uint64_t count = element_count(e.shape);
    const std::uint64_t per_element = detail::bytes_per_element(e, archives);
    const std::uint64_t chunk =
        std::clamp<std::uint64_t>(budget / (std::uint64_t{threads} * per_element), 1, options.max_chunk_elements);
    for (std::uint64_t first = 0; first < count; first += chunk) {
      tasks.push_back({i, first, std::min(chunk, count - first)});
    }
  }

  detail::BufferMeter meter;
  std::atomic<std::uint64_t> bytes_read{0};
  parallel_for(tasks.size(), threads, [&](std::size_t t) {
    const detail::ChunkTask& task = tasks[t];
    const ManifestEntry& e = manifest.entries[task.entry];
    const std::size_t out_width = dtype_size(e.out_dtype);

    if (e.action.kind == TensorAction::Kind::Copy) {
      const Source s = e.action.source;
      const TensorMeta& src = archives[s].meta(*e.inputs[static_cast<int>(s)]);
      const std::size_t in_width = dtype_size(src.dtype);
      const std::uint64_t in_bytes = task.count * in_width;
      const std::uint64_t out_bytes = src.dtype == e.out_dtype ? 0 : task.count * out_width;
      detail::BufferMeter::Lease lease(meter, in_bytes + out_bytes);
      std::vector<std::byte> in(in_bytes);
      archives[s].read_elements(src, task.first, task.count, in);
      bytes_read += in_bytes;
      if (src.dtype == e.out_dtype) {
        writer.write_elements(e.name, task.first, in);
        return;
      }
      std::vector<std::byte> out(out_bytes);
      for (std::uint64_t k = 0; k < task.count; ++k) {
        store_element(out.data() + k * out_width, e.out_dtype, load_element(in.data() + k * in_width, src.dtype));
      }
      writer.write_elements(e.name, task.first, out);
      return;
    }

    const auto metas = detail::fuse_inputs(e, archives);
    std::uint64_t lease_bytes = task.count * out_width;
    for (const TensorMeta* m : metas) lease_bytes += task.count * dtype_size(m->dtype);
    detail::BufferMeter::Lease lease(meter, lease_bytes);
    std::array<std::vector<std::byte>, 3> in;
    for (Source s : kAllSources) {
      const int i = static_cast<int>(s);
      in[i].resize(task.count * dtype_size(metas[i]->dtype));
      archives[s].read_elements(*metas[i], task.first, task.count, in[i]);
      bytes_read += in[i].size();
    }
    std::vector<std::byte> out(task.count * out_width);
    const double lambda_V = e.action.lambda_V;
    const double lambda_R = e.action.lambda_R;
    const DType dt0 = metas[0]->dtype, dtV = metas[1]->dtype, dtR = metas[2]->dtype;
    const std::size_t w0 = dtype_size(dt0), wV = dtype_size(dtV), wR = dtype_size(dtR);
    for (std::uint64_t k = 0; k < task.count; ++k) {
      const double base = load_element(in[0].data() + k * w0, dt0);
      const double vision = load_element(in[1].data() + k * wV, dtV);
      const double reasoning = load_element(in[2].data() + k * wR, dtR);
      const double fused = base + lambda_V * (vision - base) + lambda_R * (reasoning - base);
      store_element(out.data() + k * out_width, e.out_dtype, fused);
    }
    writer.write_elements(e.name, task.first, out);
  });
  writer.finish();

  for (const auto& e : manifest.entries) {
    (e.action.kind == TensorAction::Kind::Fuse ? report.fused : report.copied) += 1;
  }
  report.omitted = manifest.omitted.size();
  report.total = manifest.entries.size();
  report.bytes_read = bytes_read.load();
  report.bytes_written = writer.total_bytes();
  report.peak_buffer_bytes = meter.peak();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

// ---------------------------------------------------------------------------
// Verification

struct VerifyOptions {
  double sample_fraction = 0.01;
  std::uint64_t tol_ulps = 2;
  unsigned threads = 1;
};

struct VerifyResult {
  std::uint64_t checked = 0;
  double max_abs_residual = 0.0;
  std::uint64_t max_ulps = 0;
  std::string worst_tensor;
  std::uint64_t worst_index = 0;
  bool passed = true;

  nlohmann::json to_json() const {
    return {{"checked", checked},         {"max_abs_residual", max_abs_residual},
            {"max_ulps", max_ulps},       {"worst_tensor", worst_tensor},
            {"worst_index", worst_index}, {"passed", passed}};
  }
};

/// Counter-based sample selection; identical for every run with one seed.
inline bool sampled(std::uint64_t seed, std::size_t tensor, std::uint64_t element, double fraction) {
  if (fraction >= 1.0) return true;
  const std::uint64_t r = mix64(seed ^ mix64(tensor) ^ mix64(element + 0x632be59bd9b4e019ULL));
  return static_cast<double>(r >> 11) * 0x1.0p-53 < fraction;
}

/// Recompute the fusion formula on a deterministic sample of elements and
/// compare with what is stored in `merged`.
inline VerifyResult verify_merge(const TensorArchive& merged, const ModelArchives& archives,
                                 const MergeManifest& manifest, const VerifyOptions& options) {
  if (!(options.sample_fraction > 0.0) || options.sample_fraction > 1.0) {
    throw Error(ErrorKind::ConfigError,
                fmt::format("sample_fraction {} outside (0, 1]", options.sample_fraction));
  }
  VerifyResult structural;
  structural.passed = false;
  if (merged.size() != manifest.entries.size()) {
    structural.worst_tensor = fmt::format("<{} tensors, expected {}>", merged.size(), manifest.entries.size());
    return structural;
  }
  for (const auto& e : manifest.entries) {
    if (!merged.contains(e.name) || merged.meta(e.name).dtype != e.out_dtype || merged.meta(e.name).shape != e.shape) {
      structural.worst_tensor = e.name;
      return structural;
    }
  }

  struct Worst {
    std::uint64_t checked = 0;
    double residual = 0.0;
    std::uint64_t ulps = 0;
    std::uint64_t index = 0;
  };
  std::vector<Worst> per_tensor(manifest.entries.size());
  constexpr std::uint64_t kChunk = 1u << 16;

  parallel_for(manifest.entries.size(), options.threads, [&](std::size_t t) {
    const ManifestEntry& e = manifest.entries[t];
    const TensorMeta& out_meta = merged.meta(e.name);
    const std::uint64_t count = out_meta.elements();
    const std::size_t out_width = dtype_size(e.out_dtype);
    std::vector<const TensorMeta*> metas;
    std::vector<Source> sources;
    if (e.action.kind == TensorAction::Kind::Fuse) {
      sources = {Source::Base, Source::Vision, Source::Reasoning};
    } else {
      sources = {e.action.source};
    }
    for (Source s : sources) metas.push_back(&archives[s].meta(*e.inputs[static_cast<int>(s)]));

    Worst& worst = per_tensor[t];
    std::vector<std::byte> observed;
    std::vector<std::vector<std::byte>> in(metas.size());
    std::array<std::byte, 8> expected_buf{};
    for (std::uint64_t first = 0; first < count; first += kChunk) {
      const std::uint64_t n = std::min(kChunk, count - first);
      observed.resize(n * out_width);
      merged.read_elements(out_meta, first, n, observed);
      for (std::size_t i = 0; i < metas.size(); ++i) {
        in[i].resize(n * dtype_size(metas[i]->dtype));
        archives[sources[i]].read_elements(*metas[i], first, n, in[i]);
      }
      for (std::uint64_t k = 0; k < n; ++k) {
        if (!sampled(manifest.seed, t, first + k, options.sample_fraction)) continue;
        auto value = [&](std::size_t i) {
          return load_element(in[i].data() + k * dtype_size(metas[i]->dtype), metas[i]->dtype);
        };
        double recomputed;
        if (e.action.kind == TensorAction::Kind::Fuse) {
          const double base = value(0);
          recomputed = base + e.action.lambda_V * (value(1) - base) + e.action.lambda_R * (value(2) - base);
        } else {
          recomputed = value(0);
        }
        const std::byte* obs = observed.data() + k * out_width;
        store_element(expected_buf.data(), e.out_dtype, recomputed);
        const std::uint64_t ulps =
            ulp_distance(load_bits(obs, e.out_dtype), load_bits(expected_buf.data(), e.out_dtype), e.out_dtype);
        const double residual = std::fabs(load_element(obs, e.out_dtype) - recomputed);
        ++worst.checked;
        if (ulps > worst.ulps || (ulps == worst.ulps && residual > worst.residual)) {
          worst.ulps = ulps;
          worst.index = first + k;
        }
        if (residual > worst.residual || std::isnan(residual)) {
          worst.residual = std::isnan(residual) ? std::numeric_limits<double>::infinity() : residual;
        }
      }
    }
  });

  VerifyResult result;
  for (std::size_t t = 0; t < per_tensor.size(); ++t) {
    const Worst& w = per_tensor[t];
    result.checked += w.checked;
    result.max_abs_residual = std::max(result.max_abs_residual, w.residual);
    if (w.checked > 0 && (result.worst_tensor.empty() || w.ulps > result.max_ulps)) {
      result.max_ulps = w.ulps;
      result.worst_tensor = manifest.entries[t].name;
      result.worst_index = w.index;
    }
  }
  result.passed = result.max_ulps <= options.tol_ulps;
  return result;
}

inline void require_verified(const VerifyResult& result, std::uint64_t tol_ulps) {
  if (!result.passed) {
    throw Error(ErrorKind::VerificationFailed,
                fmt::format("'{}' element {} is {} ulp from the recomputed value (tolerance {}); "
                            "max abs residual {:.17g}",
                            result.worst_tensor, result.worst_index, result.max_ulps, tol_ulps,
                            result.max_abs_residual));
  }
}

}  // namespace lwmerge
