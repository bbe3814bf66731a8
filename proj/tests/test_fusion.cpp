#include <doctest.h>

#include <bit>
#include <random>

#include "lwmerge/fusion.hpp"

using namespace lwmerge;

namespace {

TaskVectorStats stats_from(const std::vector<std::pair<double, double>>& norms) {
  TaskVectorStats s;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    LayerStats l;
    l.layer = static_cast<std::uint32_t>(i + 1);
    l.sq_norm_V = norms[i].first;
    l.sq_norm_R = norms[i].second;
    s.per_layer.push_back(l);
  }
  fill_totals(s);
  return s;
}

}  // namespace

TEST_SUITE("fusion") {
  TEST_CASE("norm ratio weights") {
    const FusionPlan p = norm_ratio_weights(stats_from({{3.0, 1.0}, {0.0, 2.0}, {0.0, 0.0}}));
    CHECK(p.mode == FusionMode::ClosedForm);
    CHECK(p.per_layer[0].lambda_V == 0.75);
    CHECK(p.per_layer[0].lambda_R == 0.25);
    CHECK(p.per_layer[1].lambda_V == 0.0);
    CHECK(p.per_layer[1].lambda_R == 1.0);
    CHECK(p.per_layer[2].lambda_V == 0.5);
    CHECK(p.per_layer[2].lambda_R == 0.5);
  }

  TEST_CASE("uniform prior reduces to the norm ratio bit for bit") {
    std::mt19937_64 rng(5);
    std::lognormal_distribution<double> norm(0.0, 3.0);
    for (int round = 0; round < 200; ++round) {
      std::vector<std::pair<double, double>> norms(1 + rng() % 64);
      for (auto& n : norms) n = {norm(rng), norm(rng)};
      const TaskVectorStats s = stats_from(norms);
      const FusionPlan a = norm_ratio_weights(s);
      const FusionPlan b = closed_form_weights(s, uniform_prior(s.num_layers()));
      CHECK(b.mode == FusionMode::ClosedForm);
      for (std::size_t i = 0; i < norms.size(); ++i) {
        REQUIRE(std::bit_cast<std::uint64_t>(a.per_layer[i].lambda_V) ==
                std::bit_cast<std::uint64_t>(b.per_layer[i].lambda_V));
        REQUIRE(std::bit_cast<std::uint64_t>(a.per_layer[i].lambda_R) ==
                std::bit_cast<std::uint64_t>(b.per_layer[i].lambda_R));
      }
    }
  }

  TEST_CASE("prior-weighted closed form") {
    const TaskVectorStats s = stats_from({{1.0, 1.0}, {1.0, 1.0}});
    const FusionPlan p = closed_form_weights(s, compute_priors(std::log(2.0), 2, PriorMode::Fitted));
    CHECK(p.mode == FusionMode::PriorGuided);
    CHECK(p.alpha_hat == doctest::Approx(std::log(2.0)));
    CHECK(p.per_layer[0].lambda_V == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(p.per_layer[1].lambda_V == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(p.per_layer[0].w_V.has_value());
    CHECK_THROWS_AS(closed_form_weights(s, uniform_prior(3)), Error);
    // zero weighted denominator falls back to an even split
    const FusionPlan z = closed_form_weights(stats_from({{0.0, 0.0}}), uniform_prior(1));
    CHECK(z.per_layer[0].lambda_V == 0.5);
  }

  TEST_CASE("baseline presets and the global ratio") {
    const FusionPlan ta = fixed_weights(FixedPreset::TaskArithmetic, 4);
    const FusionPlan vm = fixed_weights(FixedPreset::VlmMerging, 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(ta.per_layer[i].lambda_V == 0.3);
      CHECK(ta.per_layer[i].lambda_R == 0.3);
      CHECK(vm.per_layer[i].lambda_V == 0.9);
      CHECK(vm.per_layer[i].lambda_R == 0.1);
    }
    CHECK(parse_preset("task-arithmetic") == FixedPreset::TaskArithmetic);
    CHECK_FALSE(parse_preset("ties").has_value());
    CHECK_THROWS_AS(fixed_weights(-0.1, 0.5, 2), Error);

    const FusionPlan g = global_norm_weights(stats_from({{1.0, 1.0}, {2.0, 0.0}, {0.0, 0.0}}));
    for (const auto& w : g.per_layer) {
      CHECK(w.lambda_V == 0.75);
      CHECK(w.lambda_R == 0.25);
    }
    try {
      global_norm_weights(stats_from({{0.0, 0.0}}));
      FAIL("both-zero accepted");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::BothZero);
    }
  }

  TEST_CASE("closed form minimizes the bound") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.01, 10.0);
    for (int i = 0; i < 50; ++i) {
      const OracleInstance in{u(rng), u(rng)};
      const double a = in.sq_norm_V, b = in.sq_norm_R;
      const auto [bv, br] = brute_force_weights(in, 0.001);
      CHECK(std::fabs(bv - a / (a + b)) <= 0.001);
      CHECK(br == 1.0 - bv);
      // no grid point beats the closed form
      const double best = lald_bound(in, a / (a + b), b / (a + b));
      CHECK(best <= lald_bound(in, bv, br) * (1 + 1e-12));
    }
  }

  TEST_CASE("curvature-weighted minimizer tracks brute force") {
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(0.1, 5.0);
    for (int i = 0; i < 50; ++i) {
      const OracleInstance in{u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
      const auto [cv, cr] = curvature_weighted_weights(in);
      const auto [bv, br] = brute_force_weights(in, 0.001);
      CHECK(std::fabs(cv - bv) <= 0.001);
      CHECK(cv + cr == doctest::Approx(1.0));
    }
    CHECK_THROWS_AS(brute_force_weights(OracleInstance{1, 1}, 0.05), Error);
    CHECK_THROWS_AS(brute_force_weights(OracleInstance{1, 1}, 0.0), Error);
  }

  TEST_CASE("bound at the endpoints") {
    const OracleInstance in{4.0, 1.0};
    // λ = (1, 0): vision term vanishes, reasoning pays ‖τ_R‖²(‖τ_R‖² + ‖τ_V‖²)
    CHECK(lald_bound(in, 1.0, 0.0) == doctest::Approx(0.5 * (1.0 * (1.0 + 4.0))));
    CHECK(lald_bound(in, 0.0, 1.0) == doctest::Approx(0.5 * (4.0 * (4.0 + 1.0))));
  }

  TEST_CASE("plan files round-trip exactly") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::pair<double, double>> norms(9);
    for (auto& n : norms) n = {u(rng), u(rng)};
    const FusionPlan p = closed_form_weights(stats_from(norms), compute_priors(0.137, 9, PriorMode::Fitted));
    const FusionPlan q = plan_from_json(nlohmann::json::parse(to_json(p).dump()));
    CHECK(plan_hash(p) == plan_hash(q));
    CHECK(q.mode == p.mode);
    CHECK(q.alpha_hat == p.alpha_hat);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(q.per_layer[i].lambda_V == p.per_layer[i].lambda_V);
      CHECK(q.per_layer[i].w_R == p.per_layer[i].w_R);
    }
    FusionPlan edited = q;
    edited.per_layer[3].lambda_V += 1e-9;
    CHECK(plan_hash(edited) != plan_hash(p));
    edited = q;
    edited.provenance = "edited by hand";
    CHECK(plan_hash(edited) == plan_hash(p));
  }

  TEST_CASE("plan file validation") {
    auto kind = [](const nlohmann::json& doc) {
      try {
        plan_from_json(doc);
      } catch (const Error& e) {
        return e.kind();
      }
      return ErrorKind::ConfigError;
    };
    CHECK(kind({{"layers", nlohmann::json::array()}}) == ErrorKind::SchemaError);
    CHECK(kind({{"mode", "nope"}, {"layers", nlohmann::json::array()}}) == ErrorKind::SchemaError);
    CHECK(kind({{"mode", "fixed"}, {"layers", {{{"layer", 2}, {"lambda_V", 0.1}, {"lambda_R", 0.1}}}}}) ==
          ErrorKind::SchemaError);
    CHECK(kind({{"mode", "fixed"}, {"layers", {{{"lambda_V", -0.1}, {"lambda_R", 0.1}}}}}) == ErrorKind::NegativeWeight);
    const FusionPlan minimal = plan_from_json({{"mode", "fixed"}, {"layers", {{{"lambda_V", 0.2}, {"lambda_R", 0.7}}}}});
    CHECK(minimal.per_layer[0].layer == 1);
    CHECK_FALSE(minimal.alpha_hat.has_value());
  }

  TEST_CASE("mode names round-trip") {
    for (FusionMode m : {FusionMode::ClosedForm, FusionMode::PriorGuided, FusionMode::FixedPair, FusionMode::GlobalNorm}) {
      CHECK(parse_fusion_mode(fusion_mode_name(m)) == m);
    }
  }
}
