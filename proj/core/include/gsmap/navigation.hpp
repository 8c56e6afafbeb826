#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gsmap/optimizer.hpp"
#include "gsmap/scene.hpp"

namespace gsmap {

struct ObservationConfig {
  int num_views = 4;          // K panoramic directions
  double fov = M_PI / 2.0;    // per-view horizontal field of view
  int width = 224, height = 224;
  double camera_height = 1.2; // meters above the node
  RenderConfig render;

  void validate() const;
};

/// One pinhole view of the panorama, rendered from the ground-truth map.
struct Observation {
  int view = 0;
  CameraIntrinsics intrinsics;
  Pose pose;  // world frame
  Image rgb;
  Image depth;
  std::vector<int> instance_ids;  // ground-truth per-pixel ids, 0 = none
};

/// World-from-camera pose for panorama direction k (azimuth 2*pi*k/K),
/// camera looking horizontally, +y down.
Pose panorama_pose(const Vec3d& eye, int view_k, int num_views);

/// K views of the ground-truth scene from a node.
std::vector<Observation> observe(const SyntheticScene& scene, int node,
                                 const ObservationConfig& cfg);

struct LocalMapConfig {
  InitConfig init;
  FitConfig fit;          // fit.iterations defaults to 15
  LossWeights weights;
};

struct LocalMapResult {
  GaussianMap map;  // egocentric at the node
  FitReport report;
  std::vector<int> gaussian_instance;  // per Gaussian source-instance id, 0 = none

  double initial_psnr() const {
    return report.iterations.empty() ? 0.0 : report.iterations.front().psnr;
  }
};

/// Back-projects all views, initializes Gaussians from the cloud, and fits
/// against the observed RGB-D plus the provider's semantic targets. The
/// resulting map is egocentric (poses shifted by -node_pos). Throws
/// input_error when no valid depth pixel exists.
LocalMapResult build_local_map(std::span<const Observation> observations,
                               const Vec3d& node_pos, int node_id,
                               const SemanticProvider& provider,
                               const LocalMapConfig& cfg);

/// Two-layer tanh scorers, one per MAP level, plus a STOP head.
struct Scorer {
  struct Net {
    Eigen::MatrixXd w1;  // hidden x in
    Eigen::VectorXd b1;  // hidden
    Eigen::VectorXd w2;  // hidden
    double b2 = 0;

    double forward(const Eigen::VectorXd& x) const;
  };

  int instr_dim = kInstructionDim;
  int hidden = 32;
  Net scene, view, instance, stop;

  static Scorer zero_init(int instr_dim = kInstructionDim, int hidden = 32);
  static Scorer random_init(uint64_t seed, int instr_dim = kInstructionDim,
                            int hidden = 32);

  /// level input: [feature(7, positions prescaled), posenc(4), pooled instr].
  static int level_input_dim(int instr_dim) { return 7 + 4 + instr_dim; }
  /// stop input: [scene feature(7), pooled instr].
  static int stop_input_dim(int instr_dim) { return 7 + instr_dim; }
};

void save_scorer(const Scorer& s, const std::filesystem::path& path);
Scorer load_scorer(const std::filesystem::path& path);

struct PolicyConfig {
  double cone_half_angle = M_PI / 3.0;  // 60 degrees
  int step_cap = 15;
  double group_tol = 0.0;  // 0 = default_grouping_tol(|codebook|)
};

struct LevelScores {
  Eigen::VectorXd scene, view, instance;  // each sums to 1 over candidates
  std::vector<bool> view_empty, instance_empty;  // zero-feature fallbacks
};

/// Scene/view/instance-level candidate distributions (Eq.-style softmax per
/// level). Candidates are given by egocentric position and offset from the
/// episode start.
LevelScores level_scores(const GaussianMap& local_map,
                         const Eigen::MatrixXd& instruction,
                         std::span<const Vec3d> cand_rel,
                         std::span<const Vec3d> cand_from_start,
                         std::span<const double> codebook, const Scorer& scorer,
                         const PolicyConfig& cfg);

/// Nearest-candidate mapping of the three level distributions onto the
/// action nodes; ties toward the lower node id. Entries lie in [0,3].
std::vector<double> map_level_scores(const LevelScores& levels,
                                     std::span<const Vec3d> level_pos,
                                     std::span<const Vec3d> action_pos,
                                     std::span<const int> action_nodes);

struct ActionDecision {
  enum class Type { kMove, kBacktrack, kStop };
  std::vector<double> p_combined;        // per action node
  std::vector<double> backtrack_scores;  // per backtrack node, in [0,3]
  double stop_score = 0;                 // in [0,3]
  Type type = Type::kStop;
  int target_node = -1;
};

/// Scores backtrack candidates with the scene-level net on their stored
/// features, the STOP head on [scene feature, instruction], and picks the
/// argmax (nodes before STOP on ties, ascending node id).
ActionDecision combine_scores(const LevelScores& levels,
                              std::span<const Vec3d> level_pos,
                              std::span<const int> action_nodes,
                              std::span<const Vec3d> action_pos,
                              std::span<const int> backtrack_nodes,
                              std::span<const GaussianFeature> backtrack_feats,
                              std::span<const Vec3d> backtrack_rel,
                              std::span<const Vec3d> backtrack_from_start,
                              const GaussianFeature& scene_feat,
                              const Eigen::MatrixXd& instruction,
                              const Scorer& scorer);

/// Visited nodes keep their pooled map feature; frontier nodes carry a
/// cone-pooled estimate from the node that observed them.
class TopologicalMemory {
 public:
  void visit(int node, const GaussianFeature& feature, int step);
  void add_frontier(int node, const GaussianFeature& feature);
  bool is_visited(int node) const { return visited_.count(node) > 0; }
  int current() const { return current_; }
  const std::map<int, std::pair<GaussianFeature, int>>& visited() const {
    return visited_;
  }
  const std::map<int, GaussianFeature>& frontier() const { return frontier_; }
  /// Visited or frontier nodes excluding `exclude` and the current node.
  std::vector<int> backtrack_candidates(std::span<const int> exclude) const;
  GaussianFeature feature_of(int node) const;

 private:
  std::map<int, std::pair<GaussianFeature, int>> visited_;
  std::map<int, GaussianFeature> frontier_;
  int current_ = -1;
};

struct StepRecord {
  int node = 0;
  std::vector<int> candidates;
  std::vector<double> p_scene, p_view, p_instance, p_combined;
  std::vector<int> backtrack_nodes;
  std::vector<double> backtrack_scores;
  double stop_score = 0;
  std::string action;  // "move:<id>" | "backtrack:<id>" | "stop"
};

struct TrajectoryRecord {
  std::string episode_ref;
  std::vector<int> nodes;  // walk on the graph including the start node
  std::vector<StepRecord> steps;
  int stop_step = -1;
  bool terminated_by_cap = false;
  int grounded_instance = 0;
};

void save_trajectory(const TrajectoryRecord& rec, const std::filesystem::path& path);
TrajectoryRecord load_trajectory(const std::filesystem::path& path);

struct EpisodeConfig {
  ObservationConfig obs;
  LocalMapConfig local_map;
  PolicyConfig policy;
  uint64_t seed = 0;           // semantic init / random policy
  bool random_policy = false;  // uniform-random action baseline
};

/// Cache of per-node local maps; content is node-deterministic so it can
/// be shared across episodes and policies.
using LocalMapCache = std::map<int, std::shared_ptr<const LocalMapResult>>;

TrajectoryRecord run_episode(const SyntheticScene& scene, const Episode& episode,
                             const Scorer& scorer, const EpisodeConfig& cfg,
                             LocalMapCache* cache = nullptr);

struct TrainConfig {
  int steps = 300;
  double lr = 0.01;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double stop_loss_weight = 1.0;
  uint64_t seed = 1;      // scorer init
  bool zero_init = false; // start from the all-zero (uniform) scorer
  EpisodeConfig episode;  // observation/fitting settings for feature extraction
};

struct TrainResult {
  Scorer scorer;
  std::vector<double> loss_curve;     // total per step
  std::vector<double> action_ce_curve;  // cross-entropy component per step
};

/// Imitation learning against oracle next hops on the ground-truth paths
/// (STOP labeled positive at the goal). Deterministic under cfg.seed.
TrainResult train_scorer(std::span<const SyntheticScene> scenes,
                         std::span<const std::vector<Episode>> episodes_per_scene,
                         const TrainConfig& cfg,
                         std::vector<LocalMapCache>* caches = nullptr);

}  // namespace gsmap
