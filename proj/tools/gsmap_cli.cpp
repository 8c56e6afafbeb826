// Command-line front end: scene generation, map fitting, rendering,
// navigation simulation, scorer training, metric evaluation, and PLY
// export. Every command writes a manifest.json next to its outputs with
// input hashes and the exact configuration used.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gsmap/eval.hpp"
#include "gsmap/manifest.hpp"
#include "gsmap/navigation.hpp"
#include "gsmap/optimizer.hpp"
#include "gsmap/scene.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gsmap;

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void finish_manifest(RunManifest& manifest, const Stopwatch& clock,
                     const fs::path& dir) {
  manifest.wall_clock_seconds = clock.seconds();
  write_manifest_atomic(manifest, dir / "manifest.json");
}

std::vector<fs::path> sorted_json_files(const fs::path& dir) {
  if (!fs::is_directory(dir))
    throw input_error(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".json" &&
        entry.path().filename() != "manifest.json")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw input_error("no .json files in " + dir.string());
  return files;
}

CameraIntrinsics intrinsics_from_json(const json& j) {
  return CameraIntrinsics(j.at("fx").get<double>(), j.at("fy").get<double>(),
                          j.at("cu").get<double>(), j.at("cv").get<double>(),
                          j.at("width").get<int>(), j.at("height").get<int>());
}

Pose pose_from_json(const json& j) {
  const auto r = j.at("rotation").get<std::vector<double>>();
  const auto t = j.at("translation").get<std::vector<double>>();
  if (r.size() != 9 || t.size() != 3)
    throw input_error("pose needs a 9-element rotation and 3-element translation");
  Mat3d rot;
  rot << r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8];
  return Pose(rot, Vec3d(t[0], t[1], t[2]));
}

json load_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw input_error("cannot open " + path.string());
  try {
    json j;
    is >> j;
    return j;
  } catch (const json::exception& e) {
    throw format_error(path.string() + ": " + e.what());
  }
}

/// Parses "RXxRY" (e.g. "2x2") or a plain count laid out on one row.
std::pair<int, int> parse_rooms(const std::string& rooms) {
  const auto x = rooms.find('x');
  try {
    if (x == std::string::npos) return {std::stoi(rooms), 1};
    return {std::stoi(rooms.substr(0, x)), std::stoi(rooms.substr(x + 1))};
  } catch (const std::exception&) {
    throw input_error("--rooms expects N or RXxRY, got '" + rooms + "'");
  }
}

// ---------------------------------------------------------------------------
// gen-scene
// ---------------------------------------------------------------------------

struct GenSceneArgs {
  uint64_t seed = 0;
  std::string rooms = "2x2";
  int instances = 1;
  int episodes = 0;
  std::string out;
};

int cmd_gen_scene(const GenSceneArgs& args) {
  Stopwatch clock;
  const auto [rx, ry] = parse_rooms(args.rooms);
  SceneConfig cfg;
  cfg.rooms_x = rx;
  cfg.rooms_y = ry;
  cfg.instances_per_room = args.instances;

  const SyntheticScene scene = generate_scene(args.seed, cfg);
  const fs::path out(args.out);
  fs::create_directories(out);
  save_scene(scene, out / "scene.json", "scene.g3dm");

  RunManifest manifest;
  manifest.command = "gen-scene";
  manifest.seed = args.seed;
  manifest.config_json = json{{"seed", args.seed},
                              {"rooms", args.rooms},
                              {"instances", args.instances},
                              {"episodes", args.episodes}}
                             .dump();
  manifest.outputs = {"scene.json", "scene.g3dm"};

  if (args.episodes > 0) {
    fs::create_directories(out / "episodes");
    Rng rng(args.seed ^ 0x9e3779b97f4a7c15ull);
    const int n_nodes = scene.graph.size();
    for (int e = 0; e < args.episodes; ++e) {
      const int start = static_cast<int>(rng.uniform_index(n_nodes));
      int goal = static_cast<int>(rng.uniform_index(n_nodes));
      while (goal == start) goal = static_cast<int>(rng.uniform_index(n_nodes));
      const int target =
          scene.num_instances() > 0
              ? 1 + static_cast<int>(rng.uniform_index(scene.num_instances()))
              : 0;
      const Episode ep = make_episode(scene, start, goal, target, "../scene.json");
      char name[32];
      std::snprintf(name, sizeof(name), "ep_%03d.json", e);
      save_episode(ep, out / "episodes" / name);
      manifest.outputs.push_back(std::string("episodes/") + name);
    }
  }
  finish_manifest(manifest, clock, out);
  std::cout << "wrote scene with " << scene.map.size() << " Gaussians, "
            << scene.graph.size() << " nodes to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct FitArgs {
  std::string frames;
  int iters = 15;
  double lambda_ssim = 0.2;
  double w_depth = 0.5;
  double w_sem = 0.5;
  double voxel_cell = 0.05;
  uint64_t seed = 0;
  int threads = 1;
  std::string out;
};

TargetFrame load_frame(const fs::path& descriptor, PointCloud* cloud) {
  const json j = load_json_file(descriptor);
  const fs::path base = descriptor.parent_path();
  TargetFrame frame;
  frame.intrinsics = intrinsics_from_json(j.at("intrinsics"));
  frame.pose = pose_from_json(j.at("pose"));
  frame.rgb = load_ppm(base / j.at("rgb").get<std::string>());
  frame.depth = load_depth(base / j.at("depth").get<std::string>());
  if (j.contains("semantic")) {
    frame.semantic = load_depth(base / j.at("semantic").get<std::string>());
    if (!j.contains("semantic_mask"))
      throw input_error(descriptor.string() +
                        ": semantic raster requires a semantic_mask");
    frame.semantic_mask =
        load_depth(base / j.at("semantic_mask").get<std::string>());
  }
  if (cloud) {
    const PointCloud pc =
        backproject_frame(frame.intrinsics, frame.pose, frame.depth, frame.rgb);
    cloud->positions.insert(cloud->positions.end(), pc.positions.begin(),
                            pc.positions.end());
    cloud->colors.insert(cloud->colors.end(), pc.colors.begin(), pc.colors.end());
  }
  return frame;
}

int cmd_fit(const FitArgs& args) {
  Stopwatch clock;
  RunManifest manifest;
  manifest.command = "fit";
  manifest.seed = args.seed;
  manifest.config_json = json{{"frames", args.frames},
                              {"iters", args.iters},
                              {"lambda_ssim", args.lambda_ssim},
                              {"w_depth", args.w_depth},
                              {"w_sem", args.w_sem},
                              {"voxel_cell", args.voxel_cell},
                              {"seed", args.seed},
                              {"threads", args.threads}}
                             .dump();

  PointCloud cloud;
  std::vector<TargetFrame> frames;
  for (const fs::path& file : sorted_json_files(args.frames)) {
    frames.push_back(load_frame(file, &cloud));
    manifest.inputs.emplace_back(file.string(), git_blob_sha1(file));
  }
  if (cloud.empty())
    throw input_error("no valid depth pixels across the frame set");

  InitConfig init_cfg;
  init_cfg.voxel_cell = args.voxel_cell;
  init_cfg.seed = args.seed;
  const InitResult init = init_from_pointcloud(cloud, init_cfg);

  FitConfig fit_cfg;
  fit_cfg.iterations = args.iters;
  fit_cfg.render.threads = args.threads;
  LossWeights weights;
  weights.lambda_ssim = args.lambda_ssim;
  weights.w_depth = args.w_depth;
  weights.w_sem = args.w_sem;

  const auto [fitted, report] = fit_map(init.map, frames, fit_cfg, weights);

  const fs::path out(args.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_map(fitted, out);
  const fs::path report_path = out.string() + ".report.json";
  {
    std::ofstream os(report_path);
    os << report.to_json();
  }
  manifest.outputs = {out.filename().string(), report_path.filename().string()};
  finish_manifest(manifest, clock,
                  out.has_parent_path() ? out.parent_path() : fs::path("."));
  std::cout << "fit " << fitted.size() << " Gaussians over " << frames.size()
            << " frames: psnr " << report.final_psnr << " dB\n";
  return 0;
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

struct RenderArgs {
  std::string map;
  std::string pose;
  std::string intrinsics;
  int threads = 1;
  std::string out;
};

int cmd_render(const RenderArgs& args) {
  Stopwatch clock;
  RunManifest manifest;
  manifest.command = "render";
  manifest.config_json = json{{"map", args.map},
                              {"pose", args.pose},
                              {"intrinsics", args.intrinsics},
                              {"threads", args.threads}}
                             .dump();
  const GaussianMap map = load_map(args.map);
  const CameraIntrinsics intr = intrinsics_from_json(load_json_file(args.intrinsics));
  const Pose pose = pose_from_json(load_json_file(args.pose));
  for (const std::string& in : {args.map, args.pose, args.intrinsics})
    manifest.inputs.emplace_back(in, git_blob_sha1(in));

  RenderConfig cfg;
  cfg.threads = args.threads;
  const RenderedFrame frame = render(map, intr, pose, cfg);

  const fs::path prefix(args.out);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  save_ppm(frame.rgb, prefix.string() + ".ppm");
  save_depth(frame.depth, prefix.string() + ".depth");
  save_depth(frame.semantic, prefix.string() + ".sem");
  manifest.outputs = {prefix.filename().string() + ".ppm",
                      prefix.filename().string() + ".depth",
                      prefix.filename().string() + ".sem"};
  finish_manifest(manifest, clock,
                  prefix.has_parent_path() ? prefix.parent_path() : fs::path("."));
  std::cout << "rendered " << map.size() << " Gaussians to " << prefix.string()
            << ".{ppm,depth,sem}\n";
  return 0;
}

// ---------------------------------------------------------------------------
// simulate / train shared policy settings
// ---------------------------------------------------------------------------

struct PolicyArgs {
  int views = 4;
  double fov_deg = 90.0;
  int obs_size = 224;
  int fit_iters = 15;
  double voxel_cell = 0.05;
  int step_cap = 15;
  double cone_deg = 60.0;
  int threads = 1;

  EpisodeConfig to_config(uint64_t seed) const {
    EpisodeConfig cfg;
    cfg.obs.num_views = views;
    cfg.obs.fov = fov_deg * M_PI / 180.0;
    cfg.obs.width = obs_size;
    cfg.obs.height = obs_size;
    cfg.obs.render.threads = threads;
    cfg.local_map.fit.iterations = fit_iters;
    cfg.local_map.fit.render.threads = threads;
    cfg.local_map.init.voxel_cell = voxel_cell;
    cfg.local_map.init.seed = seed;
    cfg.policy.step_cap = step_cap;
    cfg.policy.cone_half_angle = cone_deg * M_PI / 180.0;
    cfg.seed = seed;
    return cfg;
  }

  json to_json() const {
    return json{{"views", views},         {"fov_deg", fov_deg},
                {"obs_size", obs_size},   {"fit_iters", fit_iters},
                {"voxel_cell", voxel_cell}, {"step_cap", step_cap},
                {"cone_deg", cone_deg},   {"threads", threads}};
  }
};

void add_policy_flags(CLI::App* cmd, PolicyArgs& args) {
  cmd->add_option("--views", args.views, "panorama view count K");
  cmd->add_option("--fov-deg", args.fov_deg, "per-view horizontal FOV, degrees");
  cmd->add_option("--obs-size", args.obs_size, "observation resolution (square)");
  cmd->add_option("--fit-iters", args.fit_iters, "per-node map fit iterations");
  cmd->add_option("--voxel-cell", args.voxel_cell,
                  "point-cloud downsampling cell, meters");
  cmd->add_option("--step-cap", args.step_cap, "episode step cap");
  cmd->add_option("--cone-deg", args.cone_deg, "view cone half-angle, degrees");
  cmd->add_option("--threads", args.threads, "worker threads");
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string scene;
  std::string episodes;
  std::string scorer;
  bool random_policy = false;
  uint64_t seed = 0;
  PolicyArgs policy;
  std::string out;
};

int cmd_simulate(const SimulateArgs& args) {
  Stopwatch clock;
  RunManifest manifest;
  manifest.command = "simulate";
  manifest.seed = args.seed;
  json config = args.policy.to_json();
  config["scene"] = args.scene;
  config["episodes"] = args.episodes;
  config["scorer"] = args.scorer;
  config["random_policy"] = args.random_policy;
  config["seed"] = args.seed;
  manifest.config_json = config.dump();

  const SyntheticScene scene = load_scene(args.scene);
  manifest.inputs.emplace_back(args.scene, git_blob_sha1(args.scene));

  Scorer scorer = Scorer::zero_init();
  if (!args.scorer.empty()) {
    scorer = load_scorer(args.scorer);
    manifest.inputs.emplace_back(args.scorer, git_blob_sha1(args.scorer));
  } else if (!args.random_policy) {
    throw input_error("simulate needs --scorer or --random-policy");
  }

  std::vector<fs::path> episode_files;
  if (fs::is_directory(args.episodes))
    episode_files = sorted_json_files(args.episodes);
  else
    episode_files.push_back(args.episodes);

  EpisodeConfig cfg = args.policy.to_config(args.seed);
  cfg.random_policy = args.random_policy;

  const fs::path out(args.out);
  fs::create_directories(out);
  LocalMapCache cache;
  for (const fs::path& file : episode_files) {
    Episode ep = load_episode(file);
    manifest.inputs.emplace_back(file.string(), git_blob_sha1(file));
    TrajectoryRecord rec = run_episode(scene, ep, scorer, cfg, &cache);
    rec.episode_ref = file.filename().string();
    const std::string name = "traj_" + file.stem().string() + ".json";
    save_trajectory(rec, out / name);
    manifest.outputs.push_back(name);
  }
  finish_manifest(manifest, clock, out);
  std::cout << "simulated " << episode_files.size() << " episodes into "
            << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string scenes;
  std::string episodes;
  int steps = 300;
  double lr = 0.01;
  uint64_t seed = 1;
  PolicyArgs policy;
  std::string out;
};

int cmd_train(const TrainArgs& args) {
  Stopwatch clock;
  RunManifest manifest;
  manifest.command = "train";
  manifest.seed = args.seed;
  json config = args.policy.to_json();
  config["scenes"] = args.scenes;
  config["episodes"] = args.episodes;
  config["steps"] = args.steps;
  config["lr"] = args.lr;
  config["seed"] = args.seed;
  manifest.config_json = config.dump();

  std::vector<SyntheticScene> scenes;
  std::vector<fs::path> scene_files = sorted_json_files(args.scenes);
  std::map<std::string, std::size_t> scene_index;
  for (const fs::path& file : scene_files) {
    scene_index[fs::weakly_canonical(file).string()] = scenes.size();
    scenes.push_back(load_scene(file));
    manifest.inputs.emplace_back(file.string(), git_blob_sha1(file));
  }

  std::vector<std::vector<Episode>> episodes(scenes.size());
  for (const fs::path& file : sorted_json_files(args.episodes)) {
    Episode ep = load_episode(file);
    const fs::path scene_path =
        fs::weakly_canonical(file.parent_path() / ep.scene_path);
    const auto it = scene_index.find(scene_path.string());
    if (it == scene_index.end())
      throw input_error(file.string() + " references unknown scene " +
                        scene_path.string());
    episodes[it->second].push_back(std::move(ep));
    manifest.inputs.emplace_back(file.string(), git_blob_sha1(file));
  }

  TrainConfig cfg;
  cfg.steps = args.steps;
  cfg.lr = args.lr;
  cfg.seed = args.seed;
  cfg.episode = args.policy.to_config(args.seed);

  const TrainResult result = train_scorer(scenes, episodes, cfg);

  const fs::path out(args.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_scorer(result.scorer, out);
  const fs::path curve_path = out.string() + ".curve.json";
  {
    std::ofstream os(curve_path);
    os << json{{"loss", result.loss_curve}, {"action_ce", result.action_ce_curve}}
              .dump(2)
       << "\n";
  }
  manifest.outputs = {out.filename().string(), curve_path.filename().string()};
  finish_manifest(manifest, clock,
                  out.has_parent_path() ? out.parent_path() : fs::path("."));
  if (!result.loss_curve.empty())
    std::cout << "trained scorer: loss " << result.loss_curve.front() << " -> "
              << result.loss_curve.back() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string trajectories;
  std::string episodes;
  double dth = 3.0;
  bool euclidean_ne = false;
  std::string out;
};

int cmd_eval(const EvalArgs& args) {
  Stopwatch clock;
  RunManifest manifest;
  manifest.command = "eval";
  manifest.config_json = json{{"trajectories", args.trajectories},
                              {"episodes", args.episodes},
                              {"dth", args.dth},
                              {"euclidean_ne", args.euclidean_ne}}
                             .dump();

  std::vector<TrajectoryRecord> trajectories;
  std::vector<Episode> episodes;
  std::vector<NavGraph> graphs;
  std::map<std::string, SyntheticScene> scene_cache;

  for (const fs::path& file : sorted_json_files(args.trajectories)) {
    TrajectoryRecord rec = load_trajectory(file);
    manifest.inputs.emplace_back(file.string(), git_blob_sha1(file));
    const fs::path ep_path = fs::path(args.episodes) / rec.episode_ref;
    Episode ep = load_episode(ep_path);
    manifest.inputs.emplace_back(ep_path.string(), git_blob_sha1(ep_path));
    const fs::path scene_path =
        fs::weakly_canonical(ep_path.parent_path() / ep.scene_path);
    auto it = scene_cache.find(scene_path.string());
    if (it == scene_cache.end())
      it = scene_cache.emplace(scene_path.string(), load_scene(scene_path)).first;
    trajectories.push_back(std::move(rec));
    episodes.push_back(std::move(ep));
    graphs.push_back(it->second.graph);
  }

  MetricsConfig cfg;
  cfg.success_radius = args.dth;
  cfg.geodesic_ne = !args.euclidean_ne;
  const MetricsReport report = evaluate(trajectories, episodes, graphs, cfg);

  const fs::path out(args.out);
  fs::create_directories(out);
  {
    std::ofstream os(out / "metrics.json");
    os << report.to_json();
  }
  {
    std::ofstream os(out / "metrics.txt");
    os << report.to_table();
  }
  manifest.outputs = {"metrics.json", "metrics.txt"};
  finish_manifest(manifest, clock, out);
  std::cout << report.to_table();
  return 0;
}

// ---------------------------------------------------------------------------
// export-ply
// ---------------------------------------------------------------------------

struct ExportArgs {
  std::string map;
  std::string out;
};

int cmd_export_ply(const ExportArgs& args) {
  Stopwatch clock;
  RunManifest manifest;
  manifest.command = "export-ply";
  manifest.config_json = json{{"map", args.map}, {"out", args.out}}.dump();
  const GaussianMap map = load_map(args.map);
  manifest.inputs.emplace_back(args.map, git_blob_sha1(args.map));

  const fs::path out(args.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream os(out, std::ios::binary);
  if (!os) throw input_error("cannot open " + out.string());
  os << "ply\nformat binary_little_endian 1.0\n"
     << "element vertex " << map.size() << "\n"
     << "property float x\nproperty float y\nproperty float z\n"
     << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
     << "property float opacity\nproperty float semantic\n"
     << "end_header\n";
  for (const Gaussian& g : map.gaussians) {
    const float xyz[3] = {g.mu.x(), g.mu.y(), g.mu.z()};
    os.write(reinterpret_cast<const char*>(xyz), 12);
    const unsigned char rgb[3] = {
        static_cast<unsigned char>(std::lround(std::clamp(g.color.x(), 0.f, 1.f) * 255.f)),
        static_cast<unsigned char>(std::lround(std::clamp(g.color.y(), 0.f, 1.f) * 255.f)),
        static_cast<unsigned char>(std::lround(std::clamp(g.color.z(), 0.f, 1.f) * 255.f))};
    os.write(reinterpret_cast<const char*>(rgb), 3);
    const float rest[2] = {g.opacity, g.semantic};
    os.write(reinterpret_cast<const char*>(rest), 8);
  }
  if (!os) throw input_error("write failed for " + out.string());

  manifest.outputs = {out.filename().string()};
  finish_manifest(manifest, clock,
                  out.has_parent_path() ? out.parent_path() : fs::path("."));
  std::cout << "exported " << map.size() << " splats to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D Gaussian map construction and graph navigation toolkit"};
  app.require_subcommand(1);

  GenSceneArgs gen_args;
  auto* gen = app.add_subcommand("gen-scene", "generate a synthetic scene");
  gen->add_option("--seed", gen_args.seed, "RNG seed")->required();
  gen->add_option("--rooms", gen_args.rooms, "room grid, e.g. 2x2");
  gen->add_option("--instances", gen_args.instances, "instances per room");
  gen->add_option("--episodes", gen_args.episodes, "episodes to generate");
  gen->add_option("--out", gen_args.out, "output directory")->required();

  FitArgs fit_args;
  auto* fit = app.add_subcommand("fit", "fit a Gaussian map to RGB-D frames");
  fit->add_option("--frames", fit_args.frames, "directory of frame descriptors")
      ->required();
  fit->add_option("--iters", fit_args.iters, "optimization iterations");
  fit->add_option("--lambda-ssim", fit_args.lambda_ssim, "SSIM mix in [0,1]");
  fit->add_option("--w-depth", fit_args.w_depth, "depth loss weight");
  fit->add_option("--w-sem", fit_args.w_sem, "semantic loss weight");
  fit->add_option("--voxel-cell", fit_args.voxel_cell, "downsample cell, meters");
  fit->add_option("--seed", fit_args.seed, "semantic init seed");
  fit->add_option("--threads", fit_args.threads, "worker threads");
  fit->add_option("--out", fit_args.out, "output map path")->required();

  RenderArgs render_args;
  auto* rnd = app.add_subcommand("render", "render a map from a camera");
  rnd->add_option("--map", render_args.map, "map file")->required();
  rnd->add_option("--pose", render_args.pose, "pose JSON")->required();
  rnd->add_option("--intrinsics", render_args.intrinsics, "intrinsics JSON")
      ->required();
  rnd->add_option("--threads", render_args.threads, "worker threads");
  rnd->add_option("--out", render_args.out, "output prefix")->required();

  SimulateArgs sim_args;
  auto* sim = app.add_subcommand("simulate", "run navigation episodes");
  sim->add_option("--scene", sim_args.scene, "scene JSON")->required();
  sim->add_option("--episodes", sim_args.episodes, "episode file or directory")
      ->required();
  sim->add_option("--scorer", sim_args.scorer, "scorer JSON");
  sim->add_flag("--random-policy", sim_args.random_policy,
                "uniform-random action baseline");
  sim->add_option("--seed", sim_args.seed, "RNG seed");
  add_policy_flags(sim, sim_args.policy);
  sim->add_option("--out", sim_args.out, "output directory")->required();

  TrainArgs train_args;
  auto* trn = app.add_subcommand("train", "imitation-train the scorer");
  trn->add_option("--scenes", train_args.scenes, "directory of scene JSONs")
      ->required();
  trn->add_option("--episodes", train_args.episodes, "directory of episode JSONs")
      ->required();
  trn->add_option("--steps", train_args.steps, "gradient steps");
  trn->add_option("--lr", train_args.lr, "learning rate");
  trn->add_option("--seed", train_args.seed, "init seed");
  add_policy_flags(trn, train_args.policy);
  trn->add_option("--out", train_args.out, "output scorer path")->required();

  EvalArgs eval_args;
  auto* evl = app.add_subcommand("eval", "compute trajectory metrics");
  evl->add_option("--trajectories", eval_args.trajectories,
                  "directory of trajectory JSONs")
      ->required();
  evl->add_option("--episodes", eval_args.episodes, "directory of episode JSONs")
      ->required();
  evl->add_option("--dth", eval_args.dth, "success radius, meters");
  evl->add_flag("--euclidean-ne", eval_args.euclidean_ne,
                "straight-line NE instead of geodesic");
  evl->add_option("--out", eval_args.out, "output directory")->required();

  ExportArgs export_args;
  auto* exp = app.add_subcommand("export-ply", "export splats for viewers");
  exp->add_option("--map", export_args.map, "map file")->required();
  exp->add_option("--out", export_args.out, "output .ply path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_scene(gen_args);
    if (*fit) return cmd_fit(fit_args);
    if (*rnd) return cmd_render(render_args);
    if (*sim) return cmd_simulate(sim_args);
    if (*trn) return cmd_train(train_args);
    if (*evl) return cmd_eval(eval_args);
    if (*exp) return cmd_export_ply(export_args);
  } catch (const input_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
