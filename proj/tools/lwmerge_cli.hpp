#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "lwmerge/config.hpp"
#include "lwmerge/error.hpp"
#include "lwmerge/fusion.hpp"
#include "lwmerge/log.hpp"
#include "lwmerge/merge.hpp"
#include "lwmerge/prior.hpp"
#include "lwmerge/report.hpp"
#include "lwmerge/taskvec.hpp"
#include "lwmerge/testbed.hpp"

namespace lwmerge::cli {

inline nlohmann::json stats_to_json(const TaskVectorStats& stats) {
  nlohmann::json doc;
  doc["total_sq_norm_V"] = stats.total_sq_norm_V;
  doc["total_sq_norm_R"] = stats.total_sq_norm_R;
  doc["layers"] = nlohmann::json::array();
  for (const auto& l : stats.per_layer) {
    doc["layers"].push_back({{"layer", l.layer},
                             {"params", l.params},
                             {"sq_norm_V", l.sq_norm_V},
                             {"sq_norm_R", l.sq_norm_R},
                             {"dot_VR", l.dot_VR},
                             {"cosine", l.cosine ? nlohmann::json(*l.cosine) : nlohmann::json(nullptr)}});
  }
  return doc;
}

struct Options {
  // shared
  std::string config;
  std::string base, vision, reasoning;
  std::string layer_pattern;
  std::optional<unsigned> threads;
  bool allow_missing = false;
  bool dry_run = false;
  bool quiet = false;
  std::string out;

  // prior and fusion
  std::string prior_mode;
  std::string attention_stats;
  std::optional<double> alpha, w_min, w_max;
  std::string fusion_mode;
  std::string preset;
  std::optional<double> lambda_V, lambda_R;

  // merge / verify
  std::string plan;
  std::string dtype;
  std::string merged;
  std::string report;
  std::optional<double> verify_fraction;
  std::optional<std::uint64_t> tol_ulps;
  bool no_verify = false;

  // report
  std::string kind;
  std::vector<std::string> plans;

  // synth
  testbed::SyntheticSpec synth;
  std::string synth_kind = "orthogonal";
};

inline void write_file(const std::filesystem::path& path, const std::string& text) { write_text(path, text); }

class Runner {
 public:
  Runner(Options opts, std::ostream& out) : o_(std::move(opts)), out_(out) {}

  MergeConfig config(bool need_archives) const {
    MergeConfig cfg = o_.config.empty() ? MergeConfig{} : load_merge_config(o_.config);
    if (!o_.base.empty()) cfg.base = o_.base;
    if (!o_.vision.empty()) cfg.vision = o_.vision;
    if (!o_.reasoning.empty()) cfg.reasoning = o_.reasoning;
    if (!o_.layer_pattern.empty()) cfg.layer_pattern = o_.layer_pattern;
    if (o_.allow_missing) cfg.allow_missing = true;
    if (o_.threads) cfg.threads = *o_.threads;
    if (!o_.attention_stats.empty()) {
      cfg.prior.attention_stats = o_.attention_stats;
      if (o_.prior_mode.empty()) cfg.prior.mode = PriorMode::Fitted;
    }
    if (!o_.prior_mode.empty()) cfg.prior.mode = require(parse_prior_mode(o_.prior_mode), "prior mode", o_.prior_mode);
    if (o_.alpha) cfg.prior.alpha = o_.alpha;
    if (o_.w_min) cfg.prior.range.w_min = *o_.w_min;
    if (o_.w_max) cfg.prior.range.w_max = *o_.w_max;
    if (!o_.fusion_mode.empty()) {
      cfg.fusion.mode = require(parse_fusion_mode(o_.fusion_mode), "fusion mode", o_.fusion_mode);
      cfg.fusion.preset.reset();
      cfg.fusion.lambda_V.reset();
      cfg.fusion.lambda_R.reset();
    }
    if (!o_.preset.empty()) {
      cfg.fusion.mode = FusionMode::FixedPair;
      cfg.fusion.preset = require(parse_preset(o_.preset), "preset", o_.preset);
      cfg.fusion.lambda_V.reset();
      cfg.fusion.lambda_R.reset();
    }
    if (o_.lambda_V || o_.lambda_R) {
      cfg.fusion.mode = FusionMode::FixedPair;
      cfg.fusion.preset.reset();
      cfg.fusion.lambda_V = o_.lambda_V;
      cfg.fusion.lambda_R = o_.lambda_R;
    }
    if (!o_.dtype.empty()) cfg.dtype = require(parse_dtype_rule(o_.dtype), "dtype rule", o_.dtype);
    if (o_.verify_fraction) cfg.verify.fraction = *o_.verify_fraction;
    if (o_.tol_ulps) cfg.verify.tol_ulps = *o_.tol_ulps;
    if (need_archives) {
      cfg.validate();
    } else {
      LayerPattern{cfg.layer_pattern};
    }
    return cfg;
  }

  int stats() {
    const MergeConfig cfg = config(true);
    if (o_.dry_run) return dry("stats", cfg);
    const LoadedInputs in = load(cfg);
    const TaskVectorStats stats = compute_stats(in.table, in.partition, in.archives, cfg.worker_count());
    log::info("stats.done", fmt::format("layers={} total_sq_norm_V={:.17g} total_sq_norm_R={:.17g}", stats.num_layers(),
                                        stats.total_sq_norm_V, stats.total_sq_norm_R));
    emit_json(stats_to_json(stats));
    return 0;
  }

  int fit_prior() {
    const MergeConfig cfg = config(false);
    if (!cfg.prior.attention_stats) throw Error(ErrorKind::ConfigError, "fit-prior needs --attention-stats or a config prior");
    if (o_.dry_run) return dry("fit-prior", cfg);
    PriorConfig prior_cfg = cfg.prior;
    if (prior_cfg.mode == PriorMode::Uniform && o_.prior_mode.empty()) prior_cfg.mode = PriorMode::Fitted;
    const AttentionProfile profile = load_attention_stats(*prior_cfg.attention_stats);
    const ResolvedPrior resolved = resolve_prior(prior_cfg, profile.num_layers());
    log::info("fit-prior.done", fmt::format("layers={} alpha_hat={:.17g} C_hat={:.17g} r_squared={:.17g}",
                                            profile.num_layers(), resolved.fit->alpha_hat, resolved.fit->C_hat,
                                            resolved.fit->r_squared));
    emit_json({{"model_id", profile.model_id}, {"fit", to_json(*resolved.fit)}, {"prior", to_json(resolved.prior)}});
    return 0;
  }

  int plan() {
    const MergeConfig cfg = config(true);
    if (o_.dry_run) return dry("plan", cfg);
    const LoadedInputs in = load(cfg);
    const FusionPlan plan = compute_plan(cfg, in).plan;
    if (o_.out.empty()) {
      out_ << to_json(plan).dump(2) << "\n";
    } else {
      const auto [csv, json] = report_paths(std::filesystem::path(o_.out).replace_extension(".csv"));
      write_file(json, to_json(plan).dump(2) + "\n");
      write_file(csv, render_plan_csv(plan));
      log::info("plan.written", fmt::format("json={} csv={}", log::quoted(json.string()), log::quoted(csv.string())));
    }
    log::info("plan.done", fmt::format("mode={} layers={} plan_hash={}", fusion_mode_name(plan.mode),
                                       plan.num_layers(), plan_hash(plan)));
    return 0;
  }

  int merge() {
    const MergeConfig cfg = config(true);
    if (o_.out.empty() && !o_.dry_run) throw Error(ErrorKind::ConfigError, "merge needs --out");
    const LoadedInputs in = load(cfg);
    const FusionPlan plan = o_.plan.empty() ? compute_plan(cfg, in).plan : load_plan(o_.plan);
    const MergeManifest manifest = plan_merge(in.table, in.partition, plan, cfg.policy(), cfg.dtype);
    if (o_.dry_run) {
      nlohmann::json doc = dry_doc("merge", cfg);
      doc["out"] = o_.out;
      doc["manifest"] = manifest.to_json();
      out_ << doc.dump(2) << "\n";
      return 0;
    }
    MergeReport report = execute_merge(manifest, in.archives, o_.out, {cfg.worker_count()});
    log::info("merge.written", fmt::format("out={} fused={} copied={} omitted={} bytes_written={} seconds={:.3f} "
                                           "peak_buffer_bytes={}",
                                           log::quoted(o_.out), report.fused, report.copied, report.omitted,
                                           report.bytes_written, report.seconds, report.peak_buffer_bytes));
    for (const auto& name : manifest.omitted) log::warn("merge.omitted", fmt::format("tensor={}", log::quoted(name)));
    std::optional<VerifyResult> verified;
    if (!o_.no_verify) {
      const TensorArchive merged = open_archive(o_.out);
      verified = verify_merge(merged, in.archives, manifest,
                              {cfg.verify.fraction, cfg.verify.tol_ulps, cfg.worker_count()});
      report.max_residual = verified->max_abs_residual;
      log::info("verify.done", fmt::format("checked={} max_ulps={} max_abs_residual={:.17g} passed={}",
                                           verified->checked, verified->max_ulps, verified->max_abs_residual,
                                           verified->passed));
    }
    if (!o_.report.empty()) {
      nlohmann::json doc = report.to_json();
      if (verified) doc["verification"] = verified->to_json();
      write_file(o_.report, doc.dump(2) + "\n");
    }
    if (verified) require_verified(*verified, cfg.verify.tol_ulps);
    return 0;
  }

  int verify() {
    const MergeConfig cfg = config(true);
    if (o_.merged.empty()) throw Error(ErrorKind::ConfigError, "verify needs --merged");
    const LoadedInputs in = load(cfg);
    const FusionPlan plan = o_.plan.empty() ? compute_plan(cfg, in).plan : load_plan(o_.plan);
    const MergeManifest manifest = plan_merge(in.table, in.partition, plan, cfg.policy(), cfg.dtype);
    if (o_.dry_run) {
      nlohmann::json doc = dry_doc("verify", cfg);
      doc["merged"] = o_.merged;
      doc["manifest_hash"] = manifest.hash();
      out_ << doc.dump(2) << "\n";
      return 0;
    }
    const TensorArchive merged = open_archive(o_.merged);
    const VerifyResult result =
        verify_merge(merged, in.archives, manifest, {cfg.verify.fraction, cfg.verify.tol_ulps, cfg.worker_count()});
    emit_json(result.to_json());
    log::info("verify.done", fmt::format("checked={} max_ulps={} passed={}", result.checked, result.max_ulps,
                                         result.passed));
    require_verified(result, cfg.verify.tol_ulps);
    return 0;
  }

  int report() {
    const bool needs_archives = o_.kind == "cosine" || (o_.kind == "plans" && o_.plans.empty());
    const MergeConfig cfg = config(needs_archives);
    if (o_.dry_run) {
      nlohmann::json doc = dry_doc("report", cfg);
      doc["kind"] = o_.kind;
      doc["plans"] = o_.plans;
      out_ << doc.dump(2) << "\n";
      return 0;
    }
    ReportBundle bundle;
    if (o_.kind == "cosine") {
      const LoadedInputs in = load(cfg);
      bundle.stats = compute_stats(in.table, in.partition, in.archives, cfg.worker_count());
      for (auto l : flagged_layers(*bundle.stats)) log::warn("report.cosine_flagged", fmt::format("layer={}", l));
      finish_report(bundle, render_cosine_csv, emit_cosine_report);
    } else if (o_.kind == "prior") {
      if (!cfg.prior.attention_stats) throw Error(ErrorKind::ConfigError, "prior report needs attention stats");
      PriorConfig prior_cfg = cfg.prior;
      if (prior_cfg.mode == PriorMode::Uniform && o_.prior_mode.empty()) prior_cfg.mode = PriorMode::Fitted;
      const AttentionProfile profile = load_attention_stats(*prior_cfg.attention_stats);
      ResolvedPrior resolved = resolve_prior(prior_cfg, profile.num_layers());
      bundle.profile = resolved.profile;
      bundle.fit = resolved.fit;
      bundle.prior = resolved.prior;
      finish_report(bundle, render_prior_csv, emit_prior_report);
    } else {
      if (o_.plans.empty()) {
        const LoadedInputs in = load(cfg);
        const ComputedPlan computed = compute_plan(cfg, in);
        bundle.plans.emplace_back("configured", computed.plan);
        bundle.plans.emplace_back("closed-form", norm_ratio_weights(computed.stats));
        bundle.plans.emplace_back("global-norm", global_norm_weights(computed.stats));
        bundle.plans.emplace_back("task-arithmetic", fixed_weights(FixedPreset::TaskArithmetic, computed.stats.num_layers()));
        bundle.plans.emplace_back("vlm-merging", fixed_weights(FixedPreset::VlmMerging, computed.stats.num_layers()));
      } else {
        for (const auto& p : o_.plans) bundle.plans.emplace_back(std::filesystem::path(p).stem().string(), load_plan(p));
      }
      finish_report(bundle, render_plans_csv, compare_plans);
    }
    return 0;
  }

  int synth() {
    testbed::SyntheticSpec spec = o_.synth;
    if (o_.synth_kind == "orthogonal") {
      spec.kind = testbed::DeltaKind::OrthogonalPair;
    } else if (o_.synth_kind == "gaussian") {
      spec.kind = testbed::DeltaKind::RandomGaussian;
    } else {
      throw Error(ErrorKind::ConfigError, fmt::format("unknown synthetic kind '{}'", o_.synth_kind));
    }
    if (o_.out.empty()) throw Error(ErrorKind::ConfigError, "synth needs --out <directory>");
    if (o_.dry_run) {
      out_ << nlohmann::json({{"subcommand", "synth"},
                              {"out", o_.out},
                              {"kind", o_.synth_kind},
                              {"layers", spec.L},
                              {"tensors_per_layer", spec.tensors_per_layer},
                              {"shape", spec.shape},
                              {"scale_v", spec.scale_V},
                              {"scale_r", spec.scale_R},
                              {"seed", spec.seed},
                              {"rho", spec.rho}})
                  .dump(2)
           << "\n";
      return 0;
    }
    const testbed::GeneratedModels models = testbed::generate(spec, o_.out);
    nlohmann::json cfg{{"base", models.base.filename().string()},
                       {"vision", models.vision.filename().string()},
                       {"reasoning", models.reasoning.filename().string()},
                       {"layer_pattern", kDefaultLayerPattern}};
    write_file(std::filesystem::path(o_.out) / "config.json", cfg.dump(2) + "\n");
    log::info("synth.done", fmt::format("out={} layers={}", log::quoted(o_.out), spec.L));
    return 0;
  }

 private:
  struct ComputedPlan {
    TaskVectorStats stats;
    FusionPlan plan;
  };

  template <typename T>
  static T require(std::optional<T> value, const char* what, const std::string& text) {
    if (!value) throw Error(ErrorKind::ConfigError, fmt::format("unknown {} '{}'", what, text));
    return *value;
  }

  LoadedInputs load(const MergeConfig& cfg) const {
    LoadedInputs in = load_inputs(cfg);
    for (const auto& w : in.table.warnings) log::warn("align.warning", fmt::format("detail={}", log::quoted(w)));
    for (const auto& u : in.table.unmatched) log::warn("align.unmatched", fmt::format("tensor={}", log::quoted(u)));
    log::info("align.done", fmt::format("rows={} layers={}", in.table.rows.size(), in.partition.num_layers));
    return in;
  }

  ComputedPlan compute_plan(const MergeConfig& cfg, const LoadedInputs& in) const {
    ComputedPlan out;
    out.stats = compute_stats(in.table, in.partition, in.archives, cfg.worker_count());
    const ResolvedPrior prior = resolve_prior(cfg.prior, out.stats.num_layers());
    if (prior.fit) {
      log::info("prior.fit", fmt::format("alpha_hat={:.17g} r_squared={:.17g}", prior.fit->alpha_hat, prior.fit->r_squared));
    }
    out.plan = build_plan(cfg, out.stats, prior.prior);
    return out;
  }

  nlohmann::json dry_doc(const char* subcommand, const MergeConfig& cfg) const {
    return {{"subcommand", subcommand}, {"dry_run", true}, {"config", to_json(cfg)}};
  }

  int dry(const char* subcommand, const MergeConfig& cfg) {
    nlohmann::json doc = dry_doc(subcommand, cfg);
    if (!o_.out.empty()) doc["out"] = o_.out;
    out_ << doc.dump(2) << "\n";
    return 0;
  }

  void emit_json(const nlohmann::json& doc) {
    if (o_.out.empty()) {
      out_ << doc.dump(2) << "\n";
    } else {
      write_file(o_.out, doc.dump(2) + "\n");
    }
  }

  template <typename Render, typename Emit>
  void finish_report(const ReportBundle& bundle, Render render, Emit emit) {
    if (o_.out.empty()) {
      out_ << render(bundle);
    } else {
      emit(bundle, o_.out);
      log::info("report.written", fmt::format("kind={} out={}", o_.kind, log::quoted(o_.out)));
    }
  }

  Options o_;
  std::ostream& out_;
};

/// Parse and run; returns the process exit code. Results go to `out`,
/// diagnostics to stderr.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout) {
  Options o;
  CLI::App app{"lwmerge: training-free merging of a vision-tuned and a reasoning-tuned checkpoint"};
  app.require_subcommand(1);

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "merge configuration (JSON)");
    sub->add_option("--base", o.base, "base archive (overrides config)");
    sub->add_option("--vision", o.vision, "vision-tuned archive (overrides config)");
    sub->add_option("--reasoning", o.reasoning, "reasoning-tuned archive (overrides config)");
    sub->add_option("--layer-pattern", o.layer_pattern, "regex with one capture for the 0-based block index");
    sub->add_flag("--allow-missing", o.allow_missing, "demote decoder tensors missing from a branch");
    sub->add_option("-j,--threads", o.threads, "worker threads");
    sub->add_flag("--dry-run", o.dry_run, "print resolved inputs and exit without writing");
    sub->add_flag("-q,--quiet", o.quiet, "suppress log lines");
    sub->add_option("-o,--out", o.out, "output path");
  };
  auto planning = [&](CLI::App* sub) {
    sub->add_option("--prior", o.prior_mode, "fitted | uniform | literal | minmax");
    sub->add_option("--attention-stats", o.attention_stats, "attention profile JSON");
    sub->add_option("--alpha", o.alpha, "decay rate for the literal and minmax priors");
    sub->add_option("--w-min", o.w_min, "minmax prior lower bound");
    sub->add_option("--w-max", o.w_max, "minmax prior upper bound");
    sub->add_option("--mode", o.fusion_mode, "closed-form | prior-guided | fixed | global-norm");
    sub->add_option("--preset", o.preset, "task-arithmetic | vlm-merging");
    sub->add_option("--lambda-v", o.lambda_V, "fixed vision weight");
    sub->add_option("--lambda-r", o.lambda_R, "fixed reasoning weight");
    sub->add_option("--dtype", o.dtype, "preserve-base | f32 | bf16");
  };

  auto* stats = app.add_subcommand("stats", "per-layer task-vector norms, dot products and cosines");
  common(stats);
  auto* fit = app.add_subcommand("fit-prior", "fit the attention decay and compute modality priors");
  common(fit);
  planning(fit);
  auto* plan = app.add_subcommand("plan", "compute per-layer fusion weights");
  common(plan);
  planning(plan);
  auto* merge = app.add_subcommand("merge", "write the merged archive");
  common(merge);
  planning(merge);
  merge->add_option("--plan", o.plan, "plan JSON from the plan subcommand");
  merge->add_option("--report", o.report, "write the merge report JSON here");
  merge->add_option("--verify-fraction", o.verify_fraction, "fraction of elements to recheck");
  merge->add_option("--tol-ulps", o.tol_ulps, "verification tolerance in storage ulps");
  merge->add_flag("--no-verify", o.no_verify, "skip post-merge verification");
  auto* verify = app.add_subcommand("verify", "recheck a merged archive against its inputs");
  common(verify);
  planning(verify);
  verify->add_option("--merged", o.merged, "merged archive")->required();
  verify->add_option("--plan", o.plan, "plan JSON used for the merge");
  verify->add_option("--verify-fraction", o.verify_fraction, "fraction of elements to recheck");
  verify->add_option("--tol-ulps", o.tol_ulps, "tolerance in storage ulps");
  auto* report = app.add_subcommand("report", "diagnostic tables");
  common(report);
  planning(report);
  report->add_option("--kind", o.kind, "cosine | prior | plans")
      ->required()
      ->check(CLI::IsMember({"cosine", "prior", "plans"}));
  report->add_option("--plans", o.plans, "plan JSON files to compare");
  auto* synth = app.add_subcommand("synth", "generate synthetic homologous archives");
  synth->add_option("-o,--out", o.out, "output directory")->required();
  synth->add_flag("--dry-run", o.dry_run, "print the spec and exit");
  synth->add_flag("-q,--quiet", o.quiet, "suppress log lines");
  synth->add_option("--kind", o.synth_kind, "orthogonal | gaussian");
  synth->add_option("--layers", o.synth.L, "decoder layers");
  synth->add_option("--tensors", o.synth.tensors_per_layer, "tensors per layer");
  synth->add_option("--shape", o.synth.shape, "tensor shape");
  synth->add_option("--scale-v", o.synth.scale_V, "vision delta scale");
  synth->add_option("--scale-r", o.synth.scale_R, "reasoning delta scale");
  synth->add_option("--seed", o.synth.seed, "generator seed");
  synth->add_option("--rho", o.synth.rho, "gaussian delta correlation");

  std::vector<std::string> argv_storage = args;
  argv_storage.insert(argv_storage.begin(), "lwmerge");
  std::vector<char*> argv;
  for (auto& a : argv_storage) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    std::ostringstream msg, err;
    const int code = app.exit(e, msg, err);
    out << msg.str();
    std::cerr << err.str();
    return code == 0 ? 0 : 2;
  }

  const bool previous_quiet = log::quiet();
  log::quiet() = o.quiet;
  int code = 0;
  try {
    Runner runner(o, out);
    if (stats->parsed()) code = runner.stats();
    else if (fit->parsed()) code = runner.fit_prior();
    else if (plan->parsed()) code = runner.plan();
    else if (merge->parsed()) code = runner.merge();
    else if (verify->parsed()) code = runner.verify();
    else if (report->parsed()) code = runner.report();
    else if (synth->parsed()) code = runner.synth();
  } catch (const Error& e) {
    log::error("failed", fmt::format("kind={} message={}", to_string(e.kind()), log::quoted(e.what())));
    code = exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    log::error("failed", fmt::format("kind=IoFailure message={}", log::quoted(e.what())));
    code = 4;
  } catch (const std::exception& e) {
    log::error("failed", fmt::format("kind=Internal message={}", log::quoted(e.what())));
    code = 1;
  }
  log::quiet() = previous_quiet;
  return code;
}

}  // namespace lwmerge::cli
