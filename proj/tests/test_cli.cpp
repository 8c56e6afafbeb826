// End-to-end tests driving the installed CLI binary. GSMAP_CLI_PATH is
// injected by CMake.

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "gsmap/navigation.hpp"
#include "gsmap/scene.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gsmap;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd =
      std::string(GSMAP_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool same_bytes(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

/// Fit reports carry a wall-clock field that legitimately differs between
/// runs; strip it before comparing.
std::string strip_wall_clock(const std::string& text) {
  std::istringstream is(text);
  std::ostringstream os;
  std::string line;
  while (std::getline(is, line))
    if (line.find("wall_clock_seconds") == std::string::npos) os << line << "\n";
  return os.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

/// Writes an RGB-D(+semantic) frame set observed from a scene node in the
/// on-disk format `gsmap fit` consumes.
void write_frames_dir(const fs::path& dir, const SyntheticScene& scene, int node) {
  fs::create_directories(dir);
  ObservationConfig cfg;
  cfg.num_views = 4;
  cfg.width = 32;
  cfg.height = 32;
  const auto observations = observe(scene, node, cfg);
  const SyntheticProvider provider(std::max(1, scene.num_instances()));
  for (const Observation& obs : observations) {
    const std::string stem = "view" + std::to_string(obs.view);
    save_ppm(obs.rgb, dir / (stem + ".ppm"));
    save_depth(obs.depth, dir / (stem + ".depth"));
    const auto ann = provider.annotate(obs.view, obs.rgb, &obs.instance_ids);
    save_depth(ann.target, dir / (stem + ".sem"));
    save_depth(ann.region_ids, dir / (stem + "_mask.sem"));

    json j;
    j["intrinsics"] = {{"fx", obs.intrinsics.fx}, {"fy", obs.intrinsics.fy},
                       {"cu", obs.intrinsics.cu}, {"cv", obs.intrinsics.cv},
                       {"width", obs.intrinsics.width},
                       {"height", obs.intrinsics.height}};
    std::vector<double> r(9);
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) r[i * 3 + k] = obs.pose.rotation(i, k);
    j["pose"] = {{"rotation", r},
                 {"translation", {obs.pose.translation.x(), obs.pose.translation.y(),
                                  obs.pose.translation.z()}}};
    j["rgb"] = stem + ".ppm";
    j["depth"] = stem + ".depth";
    j["semantic"] = stem + ".sem";
    j["semantic_mask"] = stem + "_mask.sem";
    std::ofstream os(dir / (stem + ".json"));
    os << j.dump(2);
  }
}

}  // namespace

TEST_CASE("gen-scene is reproducible and emits loadable files") {
  TempDir tmp("gsmap_cli_gen");
  const std::string out_a = (tmp.path / "a").string();
  const std::string out_b = (tmp.path / "b").string();
  REQUIRE(run_cli("gen-scene --seed 11 --rooms 2x2 --instances 2 --episodes 2 --out " +
                  out_a) == 0);
  REQUIRE(run_cli("gen-scene --seed 11 --rooms 2x2 --instances 2 --episodes 2 --out " +
                  out_b) == 0);
  CHECK(same_bytes(tmp.path / "a/scene.g3dm", tmp.path / "b/scene.g3dm"));
  CHECK(same_bytes(tmp.path / "a/scene.json", tmp.path / "b/scene.json"));
  CHECK(same_bytes(tmp.path / "a/episodes/ep_000.json",
                   tmp.path / "b/episodes/ep_000.json"));
  const SyntheticScene scene = load_scene(tmp.path / "a/scene.json");
  CHECK(scene.num_instances() == 8);
  const Episode ep = load_episode(tmp.path / "a/episodes/ep_001.json");
  CHECK_NOTHROW(ep.validate(scene.graph));
  // Manifest exists and records the command.
  const std::string manifest = slurp(tmp.path / "a/manifest.json");
  CHECK(manifest.find("\"gen-scene\"") != std::string::npos);
  CHECK(manifest.find("wall_clock_seconds") != std::string::npos);
}

TEST_CASE("render is deterministic across runs and worker counts") {
  TempDir tmp("gsmap_cli_render");
  REQUIRE(run_cli("gen-scene --seed 12 --rooms 2x1 --out " +
                  (tmp.path / "world").string()) == 0);
  {
    std::ofstream os(tmp.path / "intr.json");
    os << R"({"fx":16,"fy":16,"cu":15.5,"cv":15.5,"width":32,"height":32})";
  }
  {
    std::ofstream os(tmp.path / "pose.json");
    os << R"({"rotation":[0,0,1,-1,0,0,0,-1,0],"translation":[2,2,1.2]})";
  }
  const std::string base = " --map " + (tmp.path / "world/scene.g3dm").string() +
                           " --pose " + (tmp.path / "pose.json").string() +
                           " --intrinsics " + (tmp.path / "intr.json").string();
  REQUIRE(run_cli("render" + base + " --threads 1 --out " +
                  (tmp.path / "r1/v").string()) == 0);
  REQUIRE(run_cli("render" + base + " --threads 1 --out " +
                  (tmp.path / "r2/v").string()) == 0);
  REQUIRE(run_cli("render" + base + " --threads 4 --out " +
                  (tmp.path / "r4/v").string()) == 0);
  for (const char* ext : {".ppm", ".depth", ".sem"}) {
    CHECK(same_bytes(tmp.path / ("r1/v" + std::string(ext)),
                     tmp.path / ("r2/v" + std::string(ext))));
    CHECK(same_bytes(tmp.path / ("r1/v" + std::string(ext)),
                     tmp.path / ("r4/v" + std::string(ext))));
  }
}

TEST_CASE("fit runs the requested iteration count and reproduces bit-exactly") {
  TempDir tmp("gsmap_cli_fit");
  SceneConfig cfg;
  const SyntheticScene scene = generate_scene(13, cfg);
  write_frames_dir(tmp.path / "frames", scene, 0);

  const std::string base = "fit --frames " + (tmp.path / "frames").string() +
                           " --iters 15 --voxel-cell 0.1 --seed 5";
  REQUIRE(run_cli(base + " --threads 1 --out " + (tmp.path / "m1/map.g3dm").string()) == 0);
  REQUIRE(run_cli(base + " --threads 4 --out " + (tmp.path / "m4/map.g3dm").string()) == 0);
  REQUIRE(run_cli(base + " --threads 1 --out " + (tmp.path / "m2/map.g3dm").string()) == 0);

  CHECK(same_bytes(tmp.path / "m1/map.g3dm", tmp.path / "m2/map.g3dm"));
  CHECK(same_bytes(tmp.path / "m1/map.g3dm", tmp.path / "m4/map.g3dm"));
  CHECK(strip_wall_clock(slurp(tmp.path / "m1/map.g3dm.report.json")) ==
        strip_wall_clock(slurp(tmp.path / "m4/map.g3dm.report.json")));

  const json report = json::parse(slurp(tmp.path / "m1/map.g3dm.report.json"));
  CHECK(report.at("iterations").size() == 15);
  CHECK(report.at("iterations")[0].contains("loss_rgb"));
  const GaussianMap fitted = load_map(tmp.path / "m1/map.g3dm");
  CHECK(fitted.size() > 100);
  for (const Gaussian& g : fitted.gaussians) g.validate();
}

TEST_CASE("simulate and train are deterministic and feed eval") {
  TempDir tmp("gsmap_cli_sim");
  REQUIRE(run_cli("gen-scene --seed 14 --rooms 2x2 --instances 1 --episodes 3 "
                  "--out " +
                  (tmp.path / "world").string()) == 0);

  const std::string policy =
      " --obs-size 32 --fit-iters 2 --voxel-cell 0.2 --step-cap 4";
  const std::string sim_base = "simulate --scene " +
                               (tmp.path / "world/scene.json").string() +
                               " --episodes " +
                               (tmp.path / "world/episodes").string() +
                               " --random-policy --seed 9" + policy;
  REQUIRE(run_cli(sim_base + " --threads 1 --out " + (tmp.path / "t1").string()) == 0);
  REQUIRE(run_cli(sim_base + " --threads 4 --out " + (tmp.path / "t4").string()) == 0);
  REQUIRE(run_cli(sim_base + " --threads 1 --out " + (tmp.path / "t2").string()) == 0);
  for (const char* name : {"traj_ep_000.json", "traj_ep_001.json", "traj_ep_002.json"}) {
    CHECK(same_bytes(tmp.path / "t1" / name, tmp.path / "t2" / name));
    CHECK(same_bytes(tmp.path / "t1" / name, tmp.path / "t4" / name));
  }

  // Trained scorer path end-to-end (tiny settings, smoke-level).
  fs::create_directories(tmp.path / "scenes");
  fs::copy(tmp.path / "world/scene.json", tmp.path / "scenes/scene.json");
  fs::copy(tmp.path / "world/scene.g3dm", tmp.path / "scenes/scene.g3dm");
  // Episode scene_path is relative to the episode file.
  fs::create_directories(tmp.path / "eps");
  for (const auto& entry : fs::directory_iterator(tmp.path / "world/episodes")) {
    Episode ep = load_episode(entry.path());
    ep.scene_path = "../scenes/scene.json";
    save_episode(ep, tmp.path / "eps" / entry.path().filename());
  }
  const std::string train_cmd = "train --scenes " + (tmp.path / "scenes").string() +
                                " --episodes " + (tmp.path / "eps").string() +
                                " --steps 5 --seed 3" + policy + " --out " +
                                (tmp.path / "scorer.json").string();
  REQUIRE(run_cli(train_cmd) == 0);
  CHECK_NOTHROW(load_scorer(tmp.path / "scorer.json"));
  const json curve = json::parse(slurp(tmp.path / "scorer.json.curve.json"));
  CHECK(curve.at("loss").size() == 5);

  const std::string sim_scored = "simulate --scene " +
                                 (tmp.path / "world/scene.json").string() +
                                 " --episodes " +
                                 (tmp.path / "world/episodes").string() +
                                 " --scorer " + (tmp.path / "scorer.json").string() +
                                 " --seed 9" + policy + " --out " +
                                 (tmp.path / "ts").string();
  REQUIRE(run_cli(sim_scored) == 0);

  REQUIRE(run_cli("eval --trajectories " + (tmp.path / "ts").string() +
                  " --episodes " + (tmp.path / "world/episodes").string() +
                  " --dth 3.0 --out " + (tmp.path / "metrics").string()) == 0);
  const json metrics = json::parse(slurp(tmp.path / "metrics/metrics.json"));
  CHECK(metrics.at("episode_count").get<int>() == 3);
  CHECK(metrics.at("aggregate").contains("SR"));
}

TEST_CASE("eval scores a ground-truth trajectory perfectly") {
  TempDir tmp("gsmap_cli_eval");
  REQUIRE(run_cli("gen-scene --seed 15 --rooms 2x2 --instances 1 --episodes 1 "
                  "--out " +
                  (tmp.path / "world").string()) == 0);
  const Episode ep = load_episode(tmp.path / "world/episodes/ep_000.json");

  TrajectoryRecord rec;
  rec.episode_ref = "ep_000.json";
  rec.nodes = ep.gt_path;
  rec.stop_step = static_cast<int>(ep.gt_path.size()) - 1;
  rec.grounded_instance = ep.target_instance;
  fs::create_directories(tmp.path / "trajs");
  save_trajectory(rec, tmp.path / "trajs/traj_ep_000.json");

  REQUIRE(run_cli("eval --trajectories " + (tmp.path / "trajs").string() +
                  " --episodes " + (tmp.path / "world/episodes").string() +
                  " --dth 3.0 --out " + (tmp.path / "metrics").string()) == 0);
  const json metrics = json::parse(slurp(tmp.path / "metrics/metrics.json"));
  const auto& agg = metrics.at("aggregate");
  CHECK(agg.at("SR").get<double>() == 1.0);
  CHECK(agg.at("SPL").get<double>() == doctest::Approx(1.0));
  CHECK(agg.at("nDTW").get<double>() == doctest::Approx(1.0));
  CHECK(agg.at("RGS").get<double>() == 1.0);
}

TEST_CASE("export-ply writes a parseable header") {
  TempDir tmp("gsmap_cli_ply");
  REQUIRE(run_cli("gen-scene --seed 16 --rooms 1x1 --out " +
                  (tmp.path / "world").string()) == 0);
  REQUIRE(run_cli("export-ply --map " + (tmp.path / "world/scene.g3dm").string() +
                  " --out " + (tmp.path / "scene.ply").string()) == 0);
  const std::string ply = slurp(tmp.path / "scene.ply");
  CHECK(ply.rfind("ply\nformat binary_little_endian 1.0\n", 0) == 0);
  CHECK(ply.find("property float semantic") != std::string::npos);
  const GaussianMap map = load_map(tmp.path / "world/scene.g3dm");
  const std::size_t header_end = ply.find("end_header\n") + 11;
  CHECK(ply.size() - header_end == map.size() * 23);  // 12+3+8 bytes per splat
}

TEST_CASE("cli reports input errors with exit code 1") {
  TempDir tmp("gsmap_cli_err");
  CHECK(run_cli("render --map /nonexistent.g3dm --pose x.json --intrinsics y.json "
                "--out " +
                (tmp.path / "o").string()) == 1);
  CHECK(run_cli("gen-scene --seed 1 --rooms banana --out " +
                (tmp.path / "w").string()) == 1);
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("fit --frames /nonexistent-dir --out " +
                (tmp.path / "m.g3dm").string()) == 1);
  // Corrupt map file.
  {
    std::ofstream os(tmp.path / "bad.g3dm", std::ios::binary);
    os << "NOPE";
  }
  {
    std::ofstream os(tmp.path / "intr.json");
    os << R"({"fx":16,"fy":16,"cu":15.5,"cv":15.5,"width":32,"height":32})";
  }
  {
    std::ofstream os(tmp.path / "pose.json");
    os << R"({"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0]})";
  }
  CHECK(run_cli("render --map " + (tmp.path / "bad.g3dm").string() + " --pose " +
                (tmp.path / "pose.json").string() + " --intrinsics " +
                (tmp.path / "intr.json").string() + " --out " +
                (tmp.path / "o").string()) == 1);
}
