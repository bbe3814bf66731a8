#include <doctest.h>

#include <random>
#include <sstream>

#include "lwmerge/report.hpp"
#include "support.hpp"

using namespace lwmerge;
using lwmerge::test::TempDir;

namespace {

TaskVectorStats stats_with(const std::vector<std::tuple<double, double, double>>& layers) {
  TaskVectorStats s;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto [a, b, dot] = layers[i];
    LayerStats l;
    l.layer = static_cast<std::uint32_t>(i + 1);
    l.params = 10;
    l.sq_norm_V = a;
    l.sq_norm_R = b;
    l.dot_VR = dot;
    l.cosine = cosine_of(a, b, dot);
    s.per_layer.push_back(l);
  }
  fill_totals(s);
  return s;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_SUITE("report") {
  TEST_CASE("cosine flags") {
    ReportBundle orthogonal;
    orthogonal.stats = stats_with({{1, 1, 0}, {2, 3, 0}, {5, 1, 0}});
    CHECK(flagged_layers(*orthogonal.stats).empty());
    CHECK(cosine_json(orthogonal)["flagged"].empty());

    ReportBundle identical;
    identical.stats = stats_with({{1, 1, 1}, {4, 4, 4}});
    CHECK(flagged_layers(*identical.stats) == std::vector<std::uint32_t>{1, 2});

    ReportBundle mixed;
    mixed.stats = stats_with({{1, 1, 0.05}, {1, 1, -0.2}, {1, 1, 0.1}, {1, 1, 0.5}, {0, 1, 0}});
    CHECK(flagged_layers(*mixed.stats) == std::vector<std::uint32_t>{2, 4});
    const auto rows = parse_csv(render_cosine_csv(mixed));
    REQUIRE(rows.size() == 6);
    CHECK(rows[0][0] == "layer");
    CHECK(rows[5][5].empty());  // undefined cosine
    CHECK(cosine_json(mixed)["layers"][4]["cosine"].is_null());
  }

  TEST_CASE("prior table") {
    AttentionProfile p;
    for (int l = 1; l <= 6; ++l) p.ratios.push_back(0.5 * std::exp(-0.25 * l));
    ReportBundle b;
    b.profile = p;
    b.fit = fit_exponential_decay(p);
    b.prior = compute_priors(b.fit->alpha_hat, 6, PriorMode::Fitted);
    const auto rows = parse_csv(render_prior_csv(b));
    REQUIRE(rows.size() == 7);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(std::fabs(std::stod(rows[i][3])) < 1e-12);
    CHECK(prior_json(b)["r_squared"] == 1.0);

    ReportBundle flat;
    flat.profile = AttentionProfile{"x", std::nullopt, {0.3, 0.3, 0.3}};
    flat.fit = fit_exponential_decay(*flat.profile);
    flat.prior = compute_priors(flat.fit->alpha_hat, 3, PriorMode::Fitted);
    const auto flat_rows = parse_csv(render_prior_csv(flat));
    CHECK(flat_rows[1][2] == flat_rows[2][2]);
    CHECK(flat_rows[2][2] == flat_rows[3][2]);

    ReportBundle two;
    two.profile = AttentionProfile{"x", std::nullopt, {0.6, 0.2}};
    two.fit = fit_exponential_decay(*two.profile);
    two.prior = compute_priors(two.fit->alpha_hat, 2, PriorMode::Fitted);
    CHECK(parse_csv(render_prior_csv(two)).size() == 3);
    CHECK(two.fit->r_squared == 1.0);

    ReportBundle missing;
    missing.profile = p;
    CHECK_THROWS_AS(render_prior_csv(missing), Error);
  }

  TEST_CASE("plan comparison") {
    const TaskVectorStats uniform_stats = stats_with({{3, 1, 0}, {3, 1, 0}, {3, 1, 0}, {3, 1, 0}});
    ReportBundle b;
    b.plans = {{"closed", norm_ratio_weights(uniform_stats)}, {"global", global_norm_weights(uniform_stats)},
               {"ta", fixed_weights(FixedPreset::TaskArithmetic, 4)}};
    const auto rows = parse_csv(render_plans_csv(b));
    REQUIRE(rows.size() == 5);
    CHECK(rows[0] == std::vector<std::string>{"layer", "closed.lambda_V", "closed.lambda_R", "global.lambda_V",
                                              "global.lambda_R", "ta.lambda_V", "ta.lambda_R"});
    for (std::size_t i = 1; i < rows.size(); ++i) {
      CHECK(rows[i][1] == rows[i][3]);
      CHECK(rows[i][2] == rows[i][4]);
      CHECK(rows[i][5] == rows[1][5]);
    }
    const auto summary = plans_json(b)["plans"];
    CHECK(summary[2]["mean_lambda_V"] == 0.3);
    CHECK(summary[2]["min_lambda_V"] == summary[2]["max_lambda_V"]);

    ReportBundle single;
    single.plans = {{"only", fixed_weights(0.5, 0.5, 4)}};
    CHECK_THROWS_AS(render_plans_csv(single), Error);
    ReportBundle uneven;
    uneven.plans = {{"a", fixed_weights(0.5, 0.5, 4)}, {"b", fixed_weights(0.5, 0.5, 3)}};
    CHECK_THROWS_AS(render_plans_csv(uneven), Error);
  }

  TEST_CASE("prior guidance moves weight toward vision in early layers") {
    const TaskVectorStats s = stats_with({{2, 2, 0}, {2, 2, 0}, {2, 2, 0}, {2, 2, 0}, {2, 2, 0}, {2, 2, 0}});
    const FusionPlan closed = norm_ratio_weights(s);
    const FusionPlan guided = closed_form_weights(s, compute_priors(0.4, 6, PriorMode::Fitted));
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < 6; ++i) {
      const double gap = guided.per_layer[i].lambda_V - closed.per_layer[i].lambda_V;
      CHECK(gap < previous);
      previous = gap;
    }
  }

  TEST_CASE("emission is a pure function of the bundle") {
    TempDir dir("report");
    ReportBundle b;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::tuple<double, double, double>> layers(12);
    for (auto& l : layers) l = {u(rng), u(rng), u(rng) * 0.01};
    b.stats = stats_with(layers);
    emit_cosine_report(b, dir / "one.csv");
    emit_cosine_report(b, dir / "two");
    CHECK(test::read_bytes(dir / "one.csv") == test::read_bytes(dir / "two.csv"));
    CHECK(test::read_bytes(dir / "one.json") == test::read_bytes(dir / "two.json"));

    // spot check three cells against the bundle
    const auto rows = parse_csv(render_cosine_csv(b));
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = rng() % 12;
      CHECK(std::stod(rows[i + 1][2]) == b.stats->per_layer[i].sq_norm_V);
      CHECK(std::stod(rows[i + 1][4]) == b.stats->per_layer[i].dot_VR);
      CHECK(std::stod(rows[i + 1][5]) == *b.stats->per_layer[i].cosine);
    }
    CHECK_THROWS_AS(emit_cosine_report(b, dir / "missing" / "x.csv"), Error);
  }

  TEST_CASE("bundle members must agree on L") {
    ReportBundle b;
    b.stats = stats_with({{1, 1, 0}, {1, 1, 0}});
    b.prior = uniform_prior(3);
    CHECK_THROWS_AS(b.validate(), Error);
    b.prior = uniform_prior(2);
    CHECK(b.validate() == 2);
  }

  TEST_CASE("plan csv columns") {
    const FusionPlan p = closed_form_weights(stats_with({{1, 3, 0}}), uniform_prior(1));
    const auto rows = parse_csv(render_plan_csv(p));
    CHECK(rows[0] == std::vector<std::string>{"layer", "lambda_V", "lambda_R", "w_V", "w_R", "sq_norm_V", "sq_norm_R"});
    CHECK(rows[1][1] == "0.25");
    CHECK(rows[1][3] == "0.5");
  }
}
