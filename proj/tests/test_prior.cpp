#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "lwmerge/prior.hpp"

using namespace lwmerge;

namespace {

nlohmann::json profile_doc(const std::vector<std::pair<int, double>>& layers) {
  nlohmann::json doc{{"model_id", "m"}, {"num_samples", 3}, {"layers", nlohmann::json::array()}};
  for (const auto& [i, a] : layers) doc["layers"].push_back({{"index", i}, {"a", a}});
  return doc;
}

ErrorKind parse_kind(const nlohmann::json& doc) {
  try {
    parse_attention_profile(doc);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("profile accepted");
  return ErrorKind::ConfigError;
}

AttentionProfile exponential(double C, double alpha, std::size_t L) {
  AttentionProfile p;
  for (std::size_t l = 1; l <= L; ++l) p.ratios.push_back(C * std::exp(-alpha * static_cast<double>(l)));
  return p;
}

}  // namespace

TEST_SUITE("prior") {
  TEST_CASE("golden profile from the extractor contract parses and fits") {
    const AttentionProfile p = load_attention_stats(LWMERGE_TEST_DATA "/golden_attention_profile.json");
    CHECK(p.model_id == "stub-uniform-attention");
    CHECK(p.num_samples == 1000);
    REQUIRE(p.num_layers() == 8);
    for (double a : p.ratios) CHECK(a == 0.25);
    const DecayFit fit = fit_exponential_decay(p);
    CHECK(fit.alpha_hat == 0.0);
    CHECK(fit.r_squared == 1.0);
    const ModalityPrior prior = compute_priors(fit.alpha_hat, 8, PriorMode::Fitted);
    for (double w : prior.w_V) CHECK(w == 0.125);
  }

  TEST_CASE("schema violations") {
    CHECK(parse_kind(profile_doc({{1, 0.5}, {2, 0.0}})) == ErrorKind::NonPositiveAttention);
    CHECK(parse_kind(profile_doc({{1, 0.5}, {2, -0.1}})) == ErrorKind::NonPositiveAttention);
    CHECK(parse_kind(profile_doc({{1, 1.5}})) == ErrorKind::SchemaError);
    CHECK(parse_kind(profile_doc({{1, 0.5}, {3, 0.4}})) == ErrorKind::LayerGap);
    CHECK(parse_kind(profile_doc({{2, 0.5}})) == ErrorKind::LayerGap);
    CHECK(parse_kind(profile_doc({{1, 0.5}, {1, 0.4}})) == ErrorKind::SchemaError);
    CHECK(parse_kind(nlohmann::json{{"model_id", "m"}}) == ErrorKind::SchemaError);
    CHECK(parse_kind(nlohmann::json{{"layers", {{{"index", 1}}}}}) == ErrorKind::SchemaError);
    CHECK(parse_kind(nlohmann::json::array()) == ErrorKind::SchemaError);
  }

  TEST_CASE("out-of-order layers are sorted") {
    const AttentionProfile p = parse_attention_profile(profile_doc({{2, 0.2}, {1, 0.4}}));
    CHECK(p.ratios == std::vector<double>{0.4, 0.2});
    CHECK(parse_attention_profile(to_json(p)).ratios == p.ratios);
  }

  TEST_CASE("noiseless exponential decay is recovered") {
    const DecayFit fit = fit_exponential_decay(exponential(0.8, 0.1, 12));
    CHECK(fit.alpha_hat == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(fit.C_hat == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(fit.r_squared == 1.0);
    for (double r : fit.residuals) CHECK(std::fabs(r) < 1e-12);
    CHECK(fit.predict(3.0) == doctest::Approx(0.8 * std::exp(-0.3)).epsilon(1e-12));
  }

  TEST_CASE("two layers determine the line; one does not") {
    const DecayFit fit = fit_exponential_decay(exponential(0.5, 0.7, 2));
    CHECK(fit.r_squared == 1.0);
    CHECK(fit.alpha_hat == doctest::Approx(0.7).epsilon(1e-12));
    CHECK_THROWS_AS(fit_exponential_decay(exponential(0.5, 0.7, 1)), Error);
  }

  TEST_CASE("noisy data lowers R squared but keeps it in range") {
    AttentionProfile p = exponential(0.9, 0.05, 40);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> noise(0.0, 0.2);
    for (double& a : p.ratios) a = std::min(1.0, a * std::exp(noise(rng)));
    const DecayFit fit = fit_exponential_decay(p);
    CHECK(fit.r_squared < 1.0);
    CHECK(fit.r_squared >= 0.0);
    const LineFit flat = fit_line(std::vector<double>{1, 2, 3}, std::vector<double>{1, 1, 1});
    CHECK(flat.slope == 0.0);
    CHECK(flat.r_squared == 1.0);
  }

  TEST_CASE("normalized exponential prior") {
    const ModalityPrior two = compute_priors(std::log(2.0), 2, PriorMode::Fitted);
    CHECK(std::fabs(two.w_V[0] - 2.0 / 3.0) <= 1e-15);
    CHECK(std::fabs(two.w_V[1] - 1.0 / 3.0) <= 1e-15);
    CHECK(two.w_R[0] == 1.0 - two.w_V[0]);
    for (double alpha : {-0.3, 0.0, 0.01, 0.5, 3.0, 50.0, 800.0}) {
      for (std::size_t L : {1u, 2u, 12u, 48u}) {
        const ModalityPrior prior = compute_priors(alpha, L, PriorMode::Fitted);
        long double sum = 0;
        for (std::size_t i = 0; i < L; ++i) {
          REQUIRE(std::isfinite(prior.w_V[i]));
          // independent evaluation: ratio of exponentials relative to layer 1
          long double denom = 0;
          for (std::size_t j = 0; j < L; ++j) denom += std::exp(-static_cast<long double>(alpha) * (static_cast<long double>(j) - static_cast<long double>(i)));
          CHECK(prior.w_V[i] == doctest::Approx(static_cast<double>(1.0L / denom)).epsilon(1e-12));
          sum += prior.w_V[i];
        }
        CHECK(std::fabs(static_cast<double>(sum) - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("literal, uniform and minmax modes") {
    const ModalityPrior literal = compute_priors(0.5, 4, PriorMode::Literal16);
    CHECK(literal.mode == PriorMode::Literal16);
    CHECK(literal.w_V == compute_priors(0.5, 4, PriorMode::Fitted).w_V);
    const ModalityPrior u = compute_priors(0.5, 3, PriorMode::Uniform);
    CHECK(u.w_V == std::vector<double>{0.5, 0.5, 0.5});
    CHECK_FALSE(u.alpha.has_value());

    const ModalityPrior mm = compute_priors(0.2, 5, PriorMode::MinMax);
    CHECK(mm.w_V.front() == doctest::Approx(0.9));
    CHECK(mm.w_V.back() == doctest::Approx(0.1));
    for (std::size_t i = 1; i < 5; ++i) CHECK(mm.w_V[i] < mm.w_V[i - 1]);
    const ModalityPrior flat = compute_priors(0.0, 5, PriorMode::MinMax);
    for (double w : flat.w_V) CHECK(w == doctest::Approx(0.5));
    CHECK_THROWS_AS(compute_priors(0.2, 5, PriorMode::MinMax, {0.0, 0.9}), Error);
    CHECK_THROWS_AS(compute_priors(NAN, 5, PriorMode::Fitted), Error);
    CHECK_THROWS_AS(compute_priors(0.1, 0, PriorMode::Fitted), Error);
  }

  TEST_CASE("mode names round-trip") {
    for (PriorMode m : {PriorMode::Fitted, PriorMode::Uniform, PriorMode::Literal16, PriorMode::MinMax}) {
      CHECK(parse_prior_mode(prior_mode_name(m)) == m);
    }
  }
}
