#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "lwmerge_cli.hpp"
#include "support.hpp"

using namespace lwmerge;
using lwmerge::test::TempDir;

namespace {

struct Run {
  int code;
  std::string out;
};

Run invoke(std::vector<std::string> args) {
  args.push_back("--quiet");
  std::ostringstream out;
  const int code = lwmerge::cli::run(args, out);
  return {code, out.str()};
}

std::string read_text(const std::filesystem::path& p) {
  const auto bytes = test::read_bytes(p);
  return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

struct Synthetic {
  TempDir dir{"cli"};
  std::string config;
  explicit Synthetic(std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"synth", "-o", dir.path().string(), "--layers", "3", "--tensors", "2", "--shape", "8",
                                  "8"};
    args.insert(args.end(), extra.begin(), extra.end());
    REQUIRE(invoke(args).code == 0);
    config = (dir / "config.json").string();
  }
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("synth writes a loadable config") {
    Synthetic s;
    for (const char* f : {"base.safetensors", "vision.safetensors", "reasoning.safetensors", "sidecar.json"}) {
      CHECK(std::filesystem::exists(s.dir / f));
    }
    const Run r = invoke({"stats", "-c", s.config});
    REQUIRE(r.code == 0);
    const auto doc = nlohmann::json::parse(r.out);
    const testbed::Sidecar truth = testbed::load_sidecar(s.dir / "sidecar.json");
    REQUIRE(doc["layers"].size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(doc["layers"][i]["sq_norm_V"].get<double>() == doctest::Approx(truth.layers[i].sq_norm_V).epsilon(1e-12));
      CHECK(doc["layers"][i]["cosine"].get<double>() == 0.0);
    }
  }

  TEST_CASE("uniform plan is the norm ratio") {
    Synthetic s({"--kind", "gaussian", "--scale-r", "0.5"});
    const Run r = invoke({"plan", "-c", s.config, "--prior", "uniform", "--mode", "prior-guided"});
    REQUIRE(r.code == 0);
    const FusionPlan plan = plan_from_json(nlohmann::json::parse(r.out));
    const MergeConfig cfg = load_merge_config(s.config);
    const LoadedInputs in = load_inputs(cfg);
    const FusionPlan ratio = norm_ratio_weights(compute_stats(in.table, in.partition, in.archives, 1));
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(plan.per_layer[i].lambda_V == ratio.per_layer[i].lambda_V);
      CHECK(plan.per_layer[i].lambda_R == ratio.per_layer[i].lambda_R);
    }
  }

  TEST_CASE("flag overrides") {
    Synthetic s;
    Run r = invoke({"plan", "-c", s.config, "--preset", "vlm-merging"});
    REQUIRE(r.code == 0);
    CHECK(plan_from_json(nlohmann::json::parse(r.out)).per_layer[1].lambda_V == 0.9);
    r = invoke({"plan", "-c", s.config, "--lambda-v", "0.25", "--lambda-r", "0.5"});
    REQUIRE(r.code == 0);
    CHECK(plan_from_json(nlohmann::json::parse(r.out)).per_layer[0].lambda_R == 0.5);
    CHECK(invoke({"plan", "-c", s.config, "--lambda-v", "0.25"}).code == 2);
    CHECK(invoke({"plan", "-c", s.config, "--mode", "sideways"}).code == 2);
    CHECK(invoke({"plan", "-c", s.config, "--prior", "literal"}).code == 2);
    CHECK(invoke({"plan", "-c", s.config, "--prior", "literal", "--alpha", "0.3"}).code == 0);
    CHECK(invoke({"plan", "--bogus-flag"}).code == 2);

    // plan --out writes the JSON and the CSV side by side
    CHECK(invoke({"plan", "-c", s.config, "-o", (s.dir / "p").string()}).code == 0);
    CHECK(std::filesystem::exists(s.dir / "p.json"));
    CHECK(read_text(s.dir / "p.csv").rfind("layer,lambda_V,lambda_R", 0) == 0);
  }

  TEST_CASE("dry run writes nothing") {
    Synthetic s;
    const auto out = s.dir / "merged.safetensors";
    const Run r = invoke({"merge", "-c", s.config, "-o", out.string(), "--dry-run"});
    REQUIRE(r.code == 0);
    CHECK_FALSE(std::filesystem::exists(out));
    const auto doc = nlohmann::json::parse(r.out);
    CHECK(doc["dry_run"] == true);
    CHECK(doc["manifest"]["tensors"].size() == 10);
  }

  TEST_CASE("plan then merge equals one-shot merge") {
    Synthetic s({"--kind", "gaussian"});
    REQUIRE(invoke({"merge", "-c", s.config, "-o", (s.dir / "one.safetensors").string()}).code == 0);
    REQUIRE(invoke({"plan", "-c", s.config, "-o", (s.dir / "plan").string()}).code == 0);
    REQUIRE(invoke({"merge", "-c", s.config, "--plan", (s.dir / "plan.json").string(), "-o",
                 (s.dir / "two.safetensors").string(), "--report", (s.dir / "report.json").string()})
                .code == 0);
    CHECK(test::file_hash(s.dir / "one.safetensors") == test::file_hash(s.dir / "two.safetensors"));
    const auto report = nlohmann::json::parse(read_text(s.dir / "report.json"));
    CHECK(report["fused"] == 6);
    CHECK(report["verification"]["passed"] == true);
  }

  TEST_CASE("verify exit codes") {
    Synthetic s({"--kind", "gaussian"});
    const auto merged = s.dir / "m.safetensors";
    REQUIRE(invoke({"merge", "-c", s.config, "-o", merged.string(), "--no-verify"}).code == 0);
    CHECK(invoke({"verify", "-c", s.config, "--merged", merged.string(), "--verify-fraction", "1"}).code == 0);

    // flip the low byte of one fused element
    const TensorArchive a = open_archive(merged);
    const auto& meta = a.entries().at(testbed::decoder_tensor_name(1, 1));
    const std::uint64_t offset = a.data_start() + meta.begin + 5 * 4;
    auto bytes = test::read_bytes(merged);
    bytes[offset] ^= std::byte{0x40};
    bytes[offset + 2] ^= std::byte{0x10};
    test::write_bytes(s.dir / "bad.safetensors", bytes);
    CHECK(invoke({"verify", "-c", s.config, "--merged", (s.dir / "bad.safetensors").string(), "--verify-fraction", "1"})
              .code == 3);
    const int missing = invoke({"verify", "-c", s.config, "--merged", (s.dir / "absent.safetensors").string()}).code;
    CHECK((missing == 2 || missing == 4));
    CHECK(invoke({"verify", "-c", (s.dir / "nope.json").string(), "--merged", merged.string()}).code == 2);
  }

  TEST_CASE("fit-prior on the golden profile") {
    const std::string golden = std::string(LWMERGE_TEST_DATA) + "/golden_attention_profile.json";
    const Run r = invoke({"fit-prior", "--attention-stats", golden});
    REQUIRE(r.code == 0);
    const auto doc = nlohmann::json::parse(r.out);
    CHECK(doc["model_id"] == "stub-uniform-attention");
    CHECK(doc["fit"]["r_squared"] == 1.0);
    CHECK(doc["prior"]["layers"].size() == 8);
    CHECK(invoke({"fit-prior"}).code == 2);
  }

  TEST_CASE("reports") {
    Synthetic s;
    Run r = invoke({"report", "-c", s.config, "--kind", "cosine"});
    REQUIRE(r.code == 0);
    CHECK(r.out.rfind("layer,params,sq_norm_V", 0) == 0);
    r = invoke({"report", "-c", s.config, "--kind", "plans"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("vlm-merging.lambda_V") != std::string::npos);
    const std::string golden = std::string(LWMERGE_TEST_DATA) + "/golden_attention_profile.json";
    CHECK(invoke({"report", "--kind", "prior", "--attention-stats", golden, "-o", (s.dir / "prior").string()}).code == 0);
    CHECK(std::filesystem::exists(s.dir / "prior.csv"));
    CHECK(std::filesystem::exists(s.dir / "prior.json"));
    CHECK(invoke({"report", "-c", s.config, "--kind", "weather"}).code == 2);
  }

  TEST_CASE("binary reports a bad layer pattern") {
    Synthetic s;
    const auto err = s.dir / "stderr.txt";
    const std::string cmd = std::string("\"") + LWMERGE_CLI_BINARY + "\" plan -c \"" + s.config +
                            "\" --layer-pattern 'layers\\.(\\d+' 2> \"" + err.string() + "\" > /dev/null";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 2);
    const std::string text = read_text(err);
    CHECK(text.find("kind=InvalidPattern") != std::string::npos);
    CHECK(text.find("layers\\\\.(\\\\d+") != std::string::npos);
  }
}
