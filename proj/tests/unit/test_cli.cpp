#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "doctest.h"
#include "latentmap/cli/config.hpp"

using namespace latentmap;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string error_of(const json& j) {
  try {
    config_from_json(j).validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("latentmap_cli_" + name);
  fs::remove_all(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(LATENTMAP_CLI) + " " + args + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("defaults validate and round-trip") {
  RunConfig c;
  c.propagate();
  CHECK_NOTHROW(c.validate());
  const json j = to_json(c);
  CHECK(to_json(config_from_json(j)) == j);
  // Empty document gives the defaults.
  CHECK(to_json(config_from_json(json::object())) == j);
}

TEST_CASE("unknown keys are rejected with their path") {
  CHECK(error_of({{"bogus", 1}}).find("'bogus'") != std::string::npos);
  CHECK(error_of({{"grid", {{"dV", 0.5}}}}).find("'grid.dV'") != std::string::npos);
  CHECK(error_of({{"scene", {{"trajectory", {{"speed", 1}}}}}}).find("'scene.trajectory.speed'") != std::string::npos);
  CHECK(error_of({{"grid", 3}}).find("grid") != std::string::npos);
}

TEST_CASE("type errors name the field") {
  CHECK(error_of({{"grid", {{"d_V", "half"}}}}).find("grid.d_V") != std::string::npos);
  CHECK(error_of({{"stage1", {{"steps", 1.5}}}}).find("stage1.steps") != std::string::npos);
  CHECK(error_of({{"seed", -3}}).find("seed") != std::string::npos);
  CHECK(error_of({{"policy", {{"allocate_frustum", 1}}}}).find("policy.allocate_frustum") != std::string::npos);
  CHECK(error_of({{"network", {{"pool", "median"}}}}).find("network.pool") != std::string::npos);
  CHECK(error_of({{"extraction", {{"blend", "rgb"}}}}).find("extraction.blend") != std::string::npos);
  CHECK(error_of({{"compare", {{"sigmas", {0.0, "x"}}}}}).find("compare.sigmas") != std::string::npos);
  CHECK(error_of({{"sensor", {{"type", "sonar"}}}}).find("sensor.type") != std::string::npos);
}

TEST_CASE("range errors come from validation") {
  CHECK(error_of({{"grid", {{"d_V", -1.0}}}}).find("grid") != std::string::npos);
  CHECK(error_of({{"stage1", {{"min_points", 50}, {"max_points", 10}}}}).find("stage1") != std::string::npos);
  CHECK(error_of({{"scene", {{"kind", "castle"}}}}).find("scene.kind") != std::string::npos);
  CHECK(error_of({{"calibrate", {{"taus", json::array()}}}}).find("calibrate.taus") != std::string::npos);
  CHECK(error_of({{"stage1", {{"kinds", {"box", "torus"}}}}}).find("torus") != std::string::npos);
  CHECK(error_of({{"extraction", {{"tau_occ", 1.5}}}}).find("extraction") != std::string::npos);
}

TEST_CASE("shared sections reach the per-command options") {
  const RunConfig c = config_from_json({{"grid", {{"latent_channels", 8}, {"d_V", 0.4}, {"d_I", 0.6}}},
                                        {"scene", {{"kind", "room"}, {"frames", 5}}},
                                        {"policy", {{"input_subsample_fraction", 0.05}}}});
  CHECK(c.network.latent_channels == 8);
  CHECK(c.stage1.data.spec.d_V == 0.4);
  CHECK(c.stage2.data.spec.latent_channels == 8);
  CHECK(c.stage2.data.policy.input_subsample_fraction == 0.05);
  CHECK(c.compare.scene == "room");
  CHECK(c.compare.scans == 5);
  CHECK(c.compare.spec.d_I == 0.6);
  // d_q follows d_V and d_I when not given.
  CHECK(c.grid.d_q == doctest::Approx(0.5));
}

TEST_CASE("overrides") {
  json j = json::object();
  apply_override(j, "grid.d_V=0.4");
  apply_override(j, "scene.kind=room");
  apply_override(j, "compare.sigmas=[0,0.1]");
  apply_override(j, "scene.trajectory.style=lawnmower");
  apply_override(j, "policy.allocate_frustum=false");
  CHECK(j["grid"]["d_V"] == 0.4);
  CHECK(j["scene"]["kind"] == "room");
  CHECK(j["compare"]["sigmas"].size() == 2);
  const RunConfig c = config_from_json(j);
  CHECK(c.scene.trajectory.style == TrajectoryStyle::Lawnmower);
  CHECK_FALSE(c.policy.allocate_frustum);

  CHECK_THROWS_AS(apply_override(j, "no_equals"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "=3"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "grid..d_V=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "grid.d_V.x=1"), ConfigError);
  // Strings that look like numbers stay numbers; the type check then fires.
  apply_override(j, "scene.kind=3");
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
}

TEST_CASE("load_config and the resolved dump") {
  const fs::path dir = scratch("load");
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "in.json");
    os << R"({ "seed": 7, "grid": { "latent_channels": 16 } })";
  }
  const RunConfig c = load_config(dir / "in.json", {"stage1.steps=12"});
  CHECK(c.seed == 7);
  CHECK(c.network.latent_channels == 16);
  CHECK(c.stage1.train.steps == 12);
  write_resolved_config(dir / "out", c);
  const RunConfig back = load_config(dir / "out" / "config.json", {});
  CHECK(to_json(back) == to_json(c));

  CHECK_THROWS_AS(load_config(dir / "missing.json", {}), ConfigError);
  {
    std::ofstream os(dir / "broken.json");
    os << "{ \"seed\": ";
  }
  CHECK_THROWS_AS(load_config(dir / "broken.json", {}), ConfigError);
  CHECK_THROWS_AS(load_config("", {"grid.d_V=-2"}), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("binary exit codes and zero-frame map") {
  const fs::path dir = scratch("bin");
  const std::string d = dir.string();
  CHECK(run("") == 2);
  CHECK(run("map -o " + d + "/x") == 2);
  CHECK(run("gen-scenes -o " + d + "/bad --set grid.nope=1") == 2);
  CHECK_FALSE(fs::exists(dir / "bad"));

  REQUIRE(run("gen-scenes -o " + d + "/scn --set scene.frames=0") == 0);
  CHECK(fs::exists(dir / "scn" / "config.json"));
  REQUIRE(run("train-shapes -o " + d + "/w --set stage1.steps=0 --set stage1.shapes=1 --set stage1.held_out_shapes=0") ==
          0);
  REQUIRE(run("map -o " + d + "/m -s " + d + "/scn -w " + d + "/w/weights.ckpt") == 0);
  const NeuralMap m = load_snapshot(dir / "m" / "map.lmmap");
  CHECK(m.cells.empty());
  CHECK(m.stats.scans_integrated == 0);
  for (const char* f : {"config.json", "run.json", "timing.csv", "summary.json"}) CHECK(fs::exists(dir / "m" / f));
  // Reproducible from its own directory: the dump loads back unchanged.
  CHECK_NOTHROW(load_config(dir / "m" / "config.json", {}));

  // Runtime failure: a file that is not a snapshot.
  CHECK(run("extract -o " + d + "/e -m " + d + "/scn/poses.txt -w " + d + "/w/weights.ckpt") == 1);
  CHECK(fs::exists(dir / "e" / "run.log"));
  fs::remove_all(dir);
}
