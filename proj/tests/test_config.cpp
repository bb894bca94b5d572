// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pamoe/config.hpp"
#include "pamoe/errors.hpp"
#include "pamoe/experiment.hpp"
#include "pamoe/selfcheck.hpp"

using namespace pamoe;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in);
  return json::parse(in);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pamoe_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void plant_summary(const fs::path& dir, const std::string& arm, int seed, double success) {
  fs::create_directories(dir);
  json j = {{"arm", arm},
            {"seed", seed},
            {"overall_success", success},
            {"success", {{"Heat", success / 2}}},
            {"step_switches", 2.0 * seed}};
  std::ofstream(dir / "summary.json") << j.dump(2);
}

}  // namespace

TEST_CASE("checked-in config files match the built-in defaults") {
  const fs::path root = PAMOE_SOURCE_DIR;
  CHECK(read_json(root / "configs" / "default.json") == to_json(ExperimentConfig{}));
  CHECK(read_json(root / "configs" / "schema.json") == config_schema());
  CHECK_NOTHROW(load_config((root / "configs" / "default.json").string()));
}

TEST_CASE("config round trip") {
  ExperimentConfig c = tiny_config();
  c.experts = 6;
  c.policy.num_experts = c.router.num_experts = 6;
  c.routing = RoutingMode::Token;
  c.algorithm.tag = Algorithm::GiGPO;
  c.training.seeds = {3, 9};
  const json j = to_json(c);
  CHECK(to_json(config_from_json(j)) == j);

  ExperimentConfig s = tiny_config();
  s.experts = 0;
  s.routing = RoutingMode::None;
  s.surgery = SurgeryMode::CAGrad;
  CHECK(to_json(config_from_json(to_json(s))) == to_json(s));
  c.surgery = SurgeryMode::CAGrad;
  CHECK_THROWS_AS(config_from_json(to_json(c)), ConfigError);
}

TEST_CASE("strict parsing") {
  const json base = to_json(ExperimentConfig{});
  SUBCASE("unknown top-level key") {
    json j = base;
    j["learning_rate"] = 0.1;
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
  }
  SUBCASE("unknown nested key") {
    json j = base;
    j["router"]["temprature"] = 1.0;
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
  }
  SUBCASE("wrong type") {
    json j = base;
    j["training"]["total_steps"] = "many";
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
  }
  SUBCASE("invalid enum value") {
    json j = base;
    j["routing"] = "sentence";
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
  }
  SUBCASE("negative K") {
    json j = base;
    j["experts"] = -1;
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_config("/nonexistent/pamoe.json"), ConfigError); }
}

TEST_CASE("overrides") {
  json j = to_json(ExperimentConfig{});
  apply_overrides(j, {"training.lr=0.002", "routing=token", "training.seeds=[4,5]"});
  const ExperimentConfig c = config_from_json(j);
  CHECK(c.training.lr == 0.002);
  CHECK(c.routing == RoutingMode::Token);
  CHECK(c.training.seeds == std::vector<std::uint64_t>{4, 5});
  json bad = to_json(ExperimentConfig{});
  CHECK_THROWS_AS(apply_overrides(bad, {"no_equals_sign"}), ConfigError);
}

TEST_CASE("same config and seed give byte-identical metrics.csv") {
  const ExperimentConfig c = tiny_config();
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  run_training(c, 0, "phase", nullptr, &a);
  run_training(c, 0, "phase", nullptr, &b);
  const std::string ma = read_text(a / "metrics.csv");
  CHECK(ma.size() > 100);
  CHECK(ma == read_text(b / "metrics.csv"));
  CHECK(read_text(a / "switches.csv") == read_text(b / "switches.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("report aggregates seeds") {
  SUBCASE("empty input") {
    CHECK_THROWS_AS(build_report({}), UsageError);
    const fs::path empty = scratch("empty");
    CHECK_THROWS_AS(build_report({empty}), UsageError);
  }
  SUBCASE("single run has zero std") {
    const fs::path root = scratch("single");
    plant_summary(root / "s0", "phase", 0, 0.4);
    for (const ReportRow& r : build_report({root})) {
      CHECK(r.value.n == 1);
      CHECK(r.value.std == 0.0);
    }
  }
  SUBCASE("planted seeds") {
    const fs::path root = scratch("planted");
    plant_summary(root / "phase" / "seed0", "phase", 0, 0.2);
    plant_summary(root / "phase" / "seed1", "phase", 1, 0.4);
    plant_summary(root / "phase" / "seed2", "phase", 2, 0.9);
    plant_summary(root / "token" / "seed0", "token", 0, 0.1);
    const auto rows = build_report({root, root / "missing"});
    bool found = false;
    for (const ReportRow& r : rows) {
      if (r.arm == "phase" && r.metric == "overall_success") {
        found = true;
        // mean 0.5, deviations -0.3, -0.1, 0.4
        CHECK(r.value.mean == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(r.value.std == doctest::Approx(std::sqrt(0.26 / 3.0)).epsilon(1e-14));
        CHECK(r.value.n == 3);
      }
      if (r.arm == "phase" && r.metric == "step_switches") {
        CHECK(r.value.mean == doctest::Approx(2.0));
        CHECK(r.value.std == doctest::Approx(std::sqrt(8.0 / 3.0)));
      }
      if (r.arm == "token") CHECK(r.value.n == 1);
    }
    CHECK(found);
    std::ostringstream out;
    write_report(out, rows);
    CHECK(out.str().rfind("arm,metric,mean,std,n\n", 0) == 0);
    CHECK(out.str().find("phase,overall_success,0.5,") != std::string::npos);
  }
}

TEST_CASE("figure data") {
  const fs::path root = scratch("fig");
  fs::create_directories(root / "r0");
  fs::create_directories(root / "r1");
  const std::string header = "run_id,seed,step,name,value,tag_category,tag_expert,tag_phase\n";
  std::ofstream(root / "r0" / "metrics.csv") << header << "a,0,10,conflict_score,0.5,,,\n"
                                             << "a,0,10,success,0.3,Heat,,\n"
                                             << "a,0,10,phase_entropy_mean,1.2,,,Explore\n";
  std::ofstream(root / "r1" / "metrics.csv") << header << "b,1,20,conflict_score,0.25,,,\n";
  std::ofstream(root / "r0" / "occupancy.csv") << "run_id,expert,phase,occupancy\na,0,Explore,0.5\n";
  const fs::path out = root / "fig";
  write_figure_data(out, {root});
  CHECK(read_text(out / "conflict_trace.csv") ==
        header + "a,0,10,conflict_score,0.5,,,\nb,1,20,conflict_score,0.25,,,\n");
  CHECK(read_text(out / "entropy_profile.csv") == header + "a,0,10,phase_entropy_mean,1.2,,,Explore\n");
  CHECK(read_text(out / "occupancy.csv") == "run_id,expert,phase,occupancy\na,0,Explore,0.5\n");
  fs::remove_all(root);
}
