#include "gsmap/navigation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

namespace gsmap {

void ObservationConfig::validate() const {
  if (num_views < 1) throw input_error("ObservationConfig: num_views must be >= 1");
  if (!(fov > 0.0 && fov < M_PI))
    throw input_error("ObservationConfig: fov outside (0, pi)");
  if (width < 8 || height < 8)
    throw input_error("ObservationConfig: resolution too small");
  render.validate();
}

Pose panorama_pose(const Vec3d& eye, int view_k, int num_views) {
  const double az = 2.0 * M_PI * view_k / num_views;
  const Vec3d forward(std::cos(az), std::sin(az), 0.0);
  const Vec3d right(std::sin(az), -std::cos(az), 0.0);
  const Vec3d down(0.0, 0.0, -1.0);
  Mat3d r;
  r.col(0) = right;
  r.col(1) = down;
  r.col(2) = forward;
  return Pose(r, eye);
}

std::vector<Observation> observe(const SyntheticScene& scene, int node,
                                 const ObservationConfig& cfg) {
  cfg.validate();
  if (node < 0 || node >= scene.graph.size())
    throw input_error("observe: node out of range");
  const CameraIntrinsics intr =
      CameraIntrinsics::from_fov(cfg.fov, cfg.width, cfg.height);
  const Vec3d eye = scene.graph.nodes[node] + Vec3d(0, 0, cfg.camera_height);
  const auto values = lift(scene.map);

  std::vector<Observation> out;
  out.reserve(cfg.num_views);
  for (int k = 0; k < cfg.num_views; ++k) {
    Observation obs;
    obs.view = k;
    obs.intrinsics = intr;
    obs.pose = panorama_pose(eye, k, cfg.num_views);
    RenderedFrame frame = render_values(values, intr, obs.pose, cfg.render);
    obs.rgb = std::move(frame.rgb);
    obs.depth = std::move(frame.depth);
    const auto dominant = render_dominant_index(values, intr, obs.pose, cfg.render);
    obs.instance_ids.resize(dominant.size(), 0);
    for (std::size_t i = 0; i < dominant.size(); ++i)
      obs.instance_ids[i] =
          dominant[i] >= 0 ? scene.gaussian_instance[dominant[i]] : 0;
    out.push_back(std::move(obs));
  }
  return out;
}

LocalMapResult build_local_map(std::span<const Observation> observations,
                               const Vec3d& node_pos, int node_id,
                               const SemanticProvider& provider,
                               const LocalMapConfig& cfg) {
  if (observations.empty())
    throw input_error("build_local_map: need at least one observation");

  PointCloud cloud;
  std::vector<int> point_labels;
  std::vector<TargetFrame> frames;
  frames.reserve(observations.size());

  for (const Observation& obs : observations) {
    const SemanticFrameAnnotation ann =
        provider.annotate(obs.view, obs.rgb, &obs.instance_ids);

    // Egocentric pose: same orientation, translation relative to the node.
    const Pose ego_pose(obs.pose.rotation, obs.pose.translation - node_pos);
    const PointCloud pc =
        backproject_frame(obs.intrinsics, ego_pose, obs.depth, obs.rgb);
    // backproject_frame walks pixels row-major; regenerate labels the same way.
    for (int v = 0; v < obs.depth.height(); ++v)
      for (int u = 0; u < obs.depth.width(); ++u)
        if (obs.depth.at(v, u) > 0.0)
          point_labels.push_back(static_cast<int>(ann.region_ids.at(v, u)));
    cloud.positions.insert(cloud.positions.end(), pc.positions.begin(),
                           pc.positions.end());
    cloud.colors.insert(cloud.colors.end(), pc.colors.begin(), pc.colors.end());

    TargetFrame frame;
    frame.intrinsics = obs.intrinsics;
    frame.pose = ego_pose;
    frame.rgb = obs.rgb;
    frame.depth = obs.depth;
    if (!ann.regions.empty()) {
      frame.semantic = ann.target;
      frame.semantic_mask = ann.region_ids;  // nonzero == labeled
    }
    frames.push_back(std::move(frame));
  }

  if (cloud.empty())
    throw input_error("build_local_map: no valid depth pixel in any view");

  InitResult init = init_from_pointcloud(cloud, cfg.init);
  init.map.frame = MapFrame::kEgocentric;
  init.map.frame_node = node_id;

  LocalMapResult result;
  auto [fitted, report] = fit_map(init.map, frames, cfg.fit, cfg.weights);
  result.map = std::move(fitted);
  result.report = std::move(report);
  result.gaussian_instance.resize(init.source_indices.size());
  for (std::size_t i = 0; i < init.source_indices.size(); ++i)
    result.gaussian_instance[i] = point_labels[init.source_indices[i]];
  return result;
}

// ---------------------------------------------------------------------------
// Scorer
// ---------------------------------------------------------------------------

double Scorer::Net::forward(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd h = (w1 * x + b1).array().tanh();
  return w2.dot(h) + b2;
}

static Scorer::Net make_net(int in, int hidden) {
  Scorer::Net n;
  n.w1 = Eigen::MatrixXd::Zero(hidden, in);
  n.b1 = Eigen::VectorXd::Zero(hidden);
  n.w2 = Eigen::VectorXd::Zero(hidden);
  n.b2 = 0.0;
  return n;
}

Scorer Scorer::zero_init(int instr_dim, int hidden) {
  Scorer s;
  s.instr_dim = instr_dim;
  s.hidden = hidden;
  s.scene = make_net(level_input_dim(instr_dim), hidden);
  s.view = make_net(level_input_dim(instr_dim), hidden);
  s.instance = make_net(level_input_dim(instr_dim), hidden);
  s.stop = make_net(stop_input_dim(instr_dim), hidden);
  return s;
}

Scorer Scorer::random_init(uint64_t seed, int instr_dim, int hidden) {
  Scorer s = zero_init(instr_dim, hidden);
  Rng rng(seed);
  auto fill = [&](Net& n) {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(n.w1.cols()));
    for (Eigen::Index i = 0; i < n.w1.rows(); ++i)
      for (Eigen::Index j = 0; j < n.w1.cols(); ++j)
        n.w1(i, j) = s1 * rng.normal();
    const double s2 = 1.0 / std::sqrt(static_cast<double>(n.w2.size()));
    for (Eigen::Index i = 0; i < n.w2.size(); ++i) n.w2[i] = s2 * rng.normal();
  };
  fill(s.scene);
  fill(s.view);
  fill(s.instance);
  fill(s.stop);
  return s;
}

namespace {

nlohmann::json net_to_json(const Scorer::Net& n) {
  nlohmann::json j;
  j["w1"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < n.w1.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index k = 0; k < n.w1.cols(); ++k) row.push_back(n.w1(i, k));
    j["w1"].push_back(std::move(row));
  }
  j["b1"] = std::vector<double>(n.b1.data(), n.b1.data() + n.b1.size());
  j["w2"] = std::vector<double>(n.w2.data(), n.w2.data() + n.w2.size());
  j["b2"] = n.b2;
  return j;
}

Scorer::Net net_from_json(const nlohmann::json& j) {
  Scorer::Net n;
  const auto& w1 = j.at("w1");
  const int rows = static_cast<int>(w1.size());
  const int cols = rows > 0 ? static_cast<int>(w1[0].size()) : 0;
  n.w1 = Eigen::MatrixXd::Zero(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int k = 0; k < cols; ++k) n.w1(i, k) = w1[i][k].get<double>();
  const auto b1 = j.at("b1").get<std::vector<double>>();
  n.b1 = Eigen::Map<const Eigen::VectorXd>(b1.data(), b1.size());
  const auto w2 = j.at("w2").get<std::vector<double>>();
  n.w2 = Eigen::Map<const Eigen::VectorXd>(w2.data(), w2.size());
  n.b2 = j.at("b2").get<double>();
  return n;
}

}  // namespace

void save_scorer(const Scorer& s, const std::filesystem::path& path) {
  nlohmann::json j;
  j["instr_dim"] = s.instr_dim;
  j["hidden"] = s.hidden;
  j["scene"] = net_to_json(s.scene);
  j["view"] = net_to_json(s.view);
  j["instance"] = net_to_json(s.instance);
  j["stop"] = net_to_json(s.stop);
  std::ofstream os(path);
  if (!os) throw input_error("save_scorer: cannot open " + path.string());
  os << j.dump(2) << "\n";
}

Scorer load_scorer(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw input_error("load_scorer: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
    Scorer s;
    s.instr_dim = j.at("instr_dim").get<int>();
    s.hidden = j.at("hidden").get<int>();
    s.scene = net_from_json(j.at("scene"));
    s.view = net_from_json(j.at("view"));
    s.instance = net_from_json(j.at("instance"));
    s.stop = net_from_json(j.at("stop"));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Level features and scores
// ---------------------------------------------------------------------------

namespace {

double wrap_angle(double a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a < -M_PI) a += 2.0 * M_PI;
  return a;
}

Eigen::VectorXd pooled_instruction(const Eigen::MatrixXd& instruction, int dim) {
  if (instruction.rows() == 0) return Eigen::VectorXd::Zero(dim);
  return instruction.colwise().mean().transpose();
}

/// Net input with position components prescaled.
Eigen::VectorXd level_input(const GaussianFeature& feat, const Vec4d& posenc,
                            const Eigen::VectorXd& instr) {
  Eigen::VectorXd x(7 + 4 + instr.size());
  x.segment<7>(0) = feat;
  x[0] *= kPosScale;
  x[1] *= kPosScale;
  x[2] *= kPosScale;
  x.segment<4>(7) = posenc;
  x.tail(instr.size()) = instr;
  return x;
}

Eigen::VectorXd stop_input(const GaussianFeature& scene_feat,
                           const Eigen::VectorXd& instr) {
  Eigen::VectorXd x(7 + instr.size());
  x.segment<7>(0) = scene_feat;
  x[0] *= kPosScale;
  x[1] *= kPosScale;
  x[2] *= kPosScale;
  x.tail(instr.size()) = instr;
  return x;
}

Vec4d make_posenc(const Vec3d& rel, const Vec3d& from_start) {
  return Vec4d(rel.x() * kPosScale, rel.y() * kPosScale,
               from_start.x() * kPosScale, from_start.y() * kPosScale);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double mx = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - mx).exp();
  return e / e.sum();
}

}  // namespace

/// Per-candidate pooled features shared by scoring and training.
struct CandidateFeatures {
  GaussianFeature scene_feat = GaussianFeature::Zero();
  bool scene_empty = true;
  std::vector<GaussianFeature> view_feats;
  std::vector<bool> view_empty;
  std::vector<GaussianFeature> instance_feats;  // max-pooled over instances
  std::vector<bool> instance_empty;
};

CandidateFeatures compute_candidate_features(const GaussianMap& map,
                                             std::span<const Vec3d> cand_rel,
                                             std::span<const double> codebook,
                                             double cone_half_angle,
                                             double group_tol) {
  const std::size_t n_cand = cand_rel.size();
  CandidateFeatures cf;
  cf.view_feats.assign(n_cand, GaussianFeature::Zero());
  cf.view_empty.assign(n_cand, true);
  cf.instance_feats.assign(n_cand, GaussianFeature::Zero());
  cf.instance_empty.assign(n_cand, true);
  if (map.empty()) return cf;

  std::vector<std::size_t> all(map.size());
  std::iota(all.begin(), all.end(), 0u);
  cf.scene_feat = pooled_feature(map, all);
  cf.scene_empty = false;

  std::vector<double> gauss_az(map.size());
  for (std::size_t i = 0; i < map.size(); ++i)
    gauss_az[i] = std::atan2(map.gaussians[i].mu.y(), map.gaussians[i].mu.x());

  const double tol =
      group_tol > 0.0 ? group_tol : default_grouping_tol(static_cast<int>(codebook.size()));
  Grouping grouping;
  if (!codebook.empty()) grouping = group_by_code(map, codebook, tol);

  std::vector<std::size_t> cone;
  for (std::size_t c = 0; c < n_cand; ++c) {
    const double cand_az = std::atan2(cand_rel[c].y(), cand_rel[c].x());
    cone.clear();
    for (std::size_t i = 0; i < map.size(); ++i)
      if (std::abs(wrap_angle(gauss_az[i] - cand_az)) <= cone_half_angle)
        cone.push_back(i);
    if (!cone.empty()) {
      cf.view_feats[c] = pooled_feature(map, cone);
      cf.view_empty[c] = false;
    }

    // Instance level: component-wise max over the pooled features of the
    // semantic groups present in this cone.
    bool any = false;
    GaussianFeature acc = GaussianFeature::Zero();
    std::vector<std::size_t> members;
    for (const auto& group : grouping.groups) {
      members.clear();
      for (std::size_t gi : group) {
        const double az = gauss_az[gi];
        if (std::abs(wrap_angle(az - cand_az)) <= cone_half_angle)
          members.push_back(gi);
      }
      if (members.empty()) continue;
      const GaussianFeature f = pooled_feature(map, members);
      acc = any ? acc.cwiseMax(f) : f;
      any = true;
    }
    if (any) {
      cf.instance_feats[c] = acc;
      cf.instance_empty[c] = false;
    }
  }
  return cf;
}

LevelScores level_scores(const GaussianMap& local_map,
                         const Eigen::MatrixXd& instruction,
                         std::span<const Vec3d> cand_rel,
                         std::span<const Vec3d> cand_from_start,
                         std::span<const double> codebook, const Scorer& scorer,
                         const PolicyConfig& cfg) {
  if (cand_rel.empty()) throw input_error("level_scores: no candidates");
  if (cand_rel.size() != cand_from_start.size())
    throw input_error("level_scores: candidate spans disagree");
  const std::size_t n = cand_rel.size();

  const CandidateFeatures cf = compute_candidate_features(
      local_map, cand_rel, codebook, cfg.cone_half_angle, cfg.group_tol);
  const Eigen::VectorXd instr = pooled_instruction(instruction, scorer.instr_dim);

  Eigen::VectorXd scene_logits(n), view_logits(n), instance_logits(n);
  for (std::size_t c = 0; c < n; ++c) {
    const Vec4d posenc = make_posenc(cand_rel[c], cand_from_start[c]);
    scene_logits[c] = scorer.scene.forward(level_input(cf.scene_feat, posenc, instr));
    view_logits[c] = scorer.view.forward(level_input(cf.view_feats[c], posenc, instr));
    instance_logits[c] =
        scorer.instance.forward(level_input(cf.instance_feats[c], posenc, instr));
  }

  LevelScores out;
  out.scene = softmax(scene_logits);
  out.view = softmax(view_logits);
  out.instance = softmax(instance_logits);
  out.view_empty = cf.view_empty;
  out.instance_empty = cf.instance_empty;
  return out;
}

std::vector<double> map_level_scores(const LevelScores& levels,
                                     std::span<const Vec3d> level_pos,
                                     std::span<const Vec3d> action_pos,
                                     std::span<const int> action_nodes) {
  if (action_pos.empty()) throw input_error("map_level_scores: no action nodes");
  std::vector<double> combined(action_pos.size(), 0.0);
  const Eigen::VectorXd* dists[3] = {&levels.scene, &levels.view, &levels.instance};
  for (const Eigen::VectorXd* dist : dists) {
    for (Eigen::Index i = 0; i < dist->size(); ++i) {
      std::size_t best = 0;
      double best_d = (level_pos[i] - action_pos[0]).norm();
      int best_id = action_nodes[0];
      for (std::size_t j = 1; j < action_pos.size(); ++j) {
        const double d = (level_pos[i] - action_pos[j]).norm();
        if (d < best_d - 1e-12 ||
            (std::abs(d - best_d) <= 1e-12 && action_nodes[j] < best_id)) {
          best_d = d;
          best = j;
          best_id = action_nodes[j];
        }
      }
      combined[best] += (*dist)[i];
    }
  }
  return combined;
}

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
                              const Scorer& scorer) {
  ActionDecision out;
  out.p_combined = map_level_scores(levels, level_pos, action_pos, action_nodes);

  const Eigen::VectorXd instr = pooled_instruction(instruction, scorer.instr_dim);
  out.backtrack_scores.resize(backtrack_nodes.size());
  for (std::size_t i = 0; i < backtrack_nodes.size(); ++i) {
    const Vec4d posenc = make_posenc(backtrack_rel[i], backtrack_from_start[i]);
    const double logit =
        scorer.scene.forward(level_input(backtrack_feats[i], posenc, instr));
    out.backtrack_scores[i] = 3.0 * sigmoid(logit);
  }
  out.stop_score = 3.0 * sigmoid(scorer.stop.forward(stop_input(scene_feat, instr)));

  // Argmax; candidates in ascending node id first, backtracks next, STOP
  // last, strict comparisons so earlier entries win ties.
  double best = -1.0;
  out.type = ActionDecision::Type::kStop;
  out.target_node = -1;
  for (std::size_t j = 0; j < action_nodes.size(); ++j)
    if (out.p_combined[j] > best) {
      best = out.p_combined[j];
      out.type = ActionDecision::Type::kMove;
      out.target_node = action_nodes[j];
    }
  for (std::size_t i = 0; i < backtrack_nodes.size(); ++i)
    if (out.backtrack_scores[i] > best) {
      best = out.backtrack_scores[i];
      out.type = ActionDecision::Type::kBacktrack;
      out.target_node = backtrack_nodes[i];
    }
  if (out.stop_score > best) {
    out.type = ActionDecision::Type::kStop;
    out.target_node = -1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Memory
// ---------------------------------------------------------------------------

void TopologicalMemory::visit(int node, const GaussianFeature& feature, int step) {
  frontier_.erase(node);
  visited_[node] = {feature, step};
  current_ = node;
}

void TopologicalMemory::add_frontier(int node, const GaussianFeature& feature) {
  if (visited_.count(node)) return;
  frontier_[node] = feature;
}

std::vector<int> TopologicalMemory::backtrack_candidates(
    std::span<const int> exclude) const {
  std::set<int> ex(exclude.begin(), exclude.end());
  ex.insert(current_);
  std::vector<int> out;
  for (const auto& [node, entry] : visited_)
    if (!ex.count(node)) out.push_back(node);
  for (const auto& [node, feat] : frontier_)
    if (!ex.count(node)) out.push_back(node);
  std::sort(out.begin(), out.end());
  return out;
}

GaussianFeature TopologicalMemory::feature_of(int node) const {
  if (const auto it = visited_.find(node); it != visited_.end())
    return it->second.first;
  if (const auto it = frontier_.find(node); it != frontier_.end()) return it->second;
  return GaussianFeature::Zero();
}

// ---------------------------------------------------------------------------
// Episode rollout
// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<const LocalMapResult> node_local_map(
    const SyntheticScene& scene, int node, const SemanticProvider& provider,
    const EpisodeConfig& cfg, LocalMapCache* cache) {
  if (cache) {
    const auto it = cache->find(node);
    if (it != cache->end()) return it->second;
  }
  std::shared_ptr<const LocalMapResult> result;
  try {
    const auto observations = observe(scene, node, cfg.obs);
    result = std::make_shared<LocalMapResult>(build_local_map(
        observations, scene.graph.nodes[node], node, provider, cfg.local_map));
  } catch (const input_error&) {
    result = nullptr;  // degenerate node: no local map, uniform fallback
  }
  if (cache) (*cache)[node] = result;
  return result;
}

int ground_instance(const LocalMapResult* local,
                    std::span<const double> codebook, const Vec3d& from_start,
                    const Eigen::MatrixXd& instruction, const Scorer& scorer,
                    const PolicyConfig& cfg) {
  if (!local || local->map.empty() || codebook.empty()) return 0;
  const double tol = cfg.group_tol > 0.0
                         ? cfg.group_tol
                         : default_grouping_tol(static_cast<int>(codebook.size()));
  Grouping grouping;
  try {
    grouping = group_by_code(local->map, codebook, tol);
  } catch (const input_error&) {
    return 0;
  }
  const Eigen::VectorXd instr = pooled_instruction(instruction, scorer.instr_dim);
  int best_id = 0;
  double best_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < grouping.groups.size(); ++g) {
    if (grouping.groups[g].empty()) continue;
    const GaussianFeature f = pooled_feature(local->map, grouping.groups[g]);
    const Vec3d rel(f[0], f[1], f[2]);  // egocentric instance centroid
    const Vec4d posenc = make_posenc(rel, rel + from_start);
    const double logit = scorer.instance.forward(level_input(f, posenc, instr));
    if (logit > best_logit) {
      best_logit = logit;
      best_id = static_cast<int>(g) + 1;
    }
  }
  return best_id;
}

}  // namespace

TrajectoryRecord run_episode(const SyntheticScene& scene, const Episode& episode,
                             const Scorer& scorer, const EpisodeConfig& cfg,
                             LocalMapCache* cache) {
  episode.validate(scene.graph);
  if (cfg.policy.step_cap < 1)
    throw input_error("run_episode: step_cap must be >= 1");

  const SyntheticProvider provider(std::max(1, scene.num_instances()));
  const std::vector<double> codebook = scene.codebook();
  const Vec3d start_pos = scene.graph.nodes[episode.start];

  Rng rng(cfg.seed ^ (static_cast<uint64_t>(episode.start) << 32) ^
          static_cast<uint64_t>(episode.goal));

  TrajectoryRecord rec;
  rec.nodes.push_back(episode.start);
  TopologicalMemory memory;
  LocalMapCache local_cache;
  if (!cache) cache = &local_cache;

  int current = episode.start;
  std::shared_ptr<const LocalMapResult> local;

  for (int step = 0; step < cfg.policy.step_cap; ++step) {
    local = node_local_map(scene, current, provider, cfg, cache);
    const Vec3d node_pos = scene.graph.nodes[current];

    const std::vector<int>& neighbors = scene.graph.adjacency[current];
    std::vector<Vec3d> cand_rel(neighbors.size()), cand_start(neighbors.size());
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
      cand_rel[i] = scene.graph.nodes[neighbors[i]] - node_pos;
      cand_start[i] = scene.graph.nodes[neighbors[i]] - start_pos;
    }

    LevelScores levels;
    GaussianFeature scene_feat = GaussianFeature::Zero();
    if (local && !local->map.empty()) {
      levels = level_scores(local->map, episode.instruction, cand_rel, cand_start,
                            codebook, scorer, cfg.policy);
      std::vector<std::size_t> all(local->map.size());
      std::iota(all.begin(), all.end(), 0u);
      scene_feat = pooled_feature(local->map, all);
    } else {
      // No local map: uniform level scores.
      const double u = 1.0 / static_cast<double>(neighbors.size());
      levels.scene = Eigen::VectorXd::Constant(neighbors.size(), u);
      levels.view = levels.scene;
      levels.instance = levels.scene;
      levels.view_empty.assign(neighbors.size(), true);
      levels.instance_empty.assign(neighbors.size(), true);
    }

    // Memory upkeep: visit current, push neighbors to the frontier with
    // their cone-pooled view features.
    memory.visit(current, scene_feat, step);
    if (local && !local->map.empty()) {
      const CandidateFeatures cf = compute_candidate_features(
          local->map, cand_rel, codebook, cfg.policy.cone_half_angle,
          cfg.policy.group_tol);
      for (std::size_t i = 0; i < neighbors.size(); ++i)
        memory.add_frontier(neighbors[i], cf.view_feats[i]);
    } else {
      for (int nb : neighbors) memory.add_frontier(nb, GaussianFeature::Zero());
    }

    const std::vector<int> backtracks = memory.backtrack_candidates(neighbors);
    std::vector<GaussianFeature> bt_feats(backtracks.size());
    std::vector<Vec3d> bt_rel(backtracks.size()), bt_start(backtracks.size());
    for (std::size_t i = 0; i < backtracks.size(); ++i) {
      bt_feats[i] = memory.feature_of(backtracks[i]);
      bt_rel[i] = scene.graph.nodes[backtracks[i]] - node_pos;
      bt_start[i] = scene.graph.nodes[backtracks[i]] - start_pos;
    }

    ActionDecision decision;
    if (cfg.random_policy) {
      const std::size_t n_actions = neighbors.size() + backtracks.size() + 1;
      const std::size_t pick = rng.uniform_index(n_actions);
      decision.p_combined.assign(neighbors.size(), 3.0 / n_actions);
      decision.backtrack_scores.assign(backtracks.size(), 3.0 / n_actions);
      decision.stop_score = 3.0 / n_actions;
      if (pick < neighbors.size()) {
        decision.type = ActionDecision::Type::kMove;
        decision.target_node = neighbors[pick];
      } else if (pick < neighbors.size() + backtracks.size()) {
        decision.type = ActionDecision::Type::kBacktrack;
        decision.target_node = backtracks[pick - neighbors.size()];
      } else {
        decision.type = ActionDecision::Type::kStop;
      }
    } else {
      decision = combine_scores(levels, cand_rel, neighbors, cand_rel, backtracks,
                                bt_feats, bt_rel, bt_start, scene_feat,
                                episode.instruction, scorer);
    }

    StepRecord sr;
    sr.node = current;
    sr.candidates = neighbors;
    sr.p_scene.assign(levels.scene.data(), levels.scene.data() + levels.scene.size());
    sr.p_view.assign(levels.view.data(), levels.view.data() + levels.view.size());
    sr.p_instance.assign(levels.instance.data(),
                         levels.instance.data() + levels.instance.size());
    sr.p_combined = decision.p_combined;
    sr.backtrack_nodes = backtracks;
    sr.backtrack_scores = decision.backtrack_scores;
    sr.stop_score = decision.stop_score;

    if (decision.type == ActionDecision::Type::kStop) {
      sr.action = "stop";
      rec.steps.push_back(std::move(sr));
      rec.stop_step = step;
      break;
    }
    if (decision.type == ActionDecision::Type::kMove) {
      sr.action = "move:" + std::to_string(decision.target_node);
      rec.nodes.push_back(decision.target_node);
    } else {
      sr.action = "backtrack:" + std::to_string(decision.target_node);
      // Walk the graph to the backtrack target so the trajectory stays a
      // valid walk.
      const auto path = scene.graph.shortest_path(current, decision.target_node);
      rec.nodes.insert(rec.nodes.end(), path.begin() + 1, path.end());
    }
    current = decision.target_node;
    rec.steps.push_back(std::move(sr));
  }

  rec.terminated_by_cap = rec.stop_step < 0;
  // Grounding at the final node (the stop node, or the node where the cap
  // fired).
  local = node_local_map(scene, rec.nodes.back(), provider, cfg, cache);
  rec.grounded_instance =
      ground_instance(local.get(), codebook,
                      scene.graph.nodes[rec.nodes.back()] - start_pos,
                      episode.instruction, scorer, cfg.policy);
  return rec;
}

// ---------------------------------------------------------------------------
// Trajectory serialization
// ---------------------------------------------------------------------------

void save_trajectory(const TrajectoryRecord& rec, const std::filesystem::path& path) {
  nlohmann::json j;
  j["episode_ref"] = rec.episode_ref;
  j["nodes"] = rec.nodes;
  j["stop_step"] = rec.stop_step;
  j["terminated_by_cap"] = rec.terminated_by_cap;
  j["grounded_instance"] = rec.grounded_instance;
  j["steps"] = nlohmann::json::array();
  for (const StepRecord& s : rec.steps)
    j["steps"].push_back({{"node", s.node},
                          {"candidates", s.candidates},
                          {"p_scene", s.p_scene},
                          {"p_view", s.p_view},
                          {"p_instance", s.p_instance},
                          {"p_combined", s.p_combined},
                          {"backtrack_nodes", s.backtrack_nodes},
                          {"backtrack_scores", s.backtrack_scores},
                          {"stop_score", s.stop_score},
                          {"action", s.action}});
  std::ofstream os(path);
  if (!os) throw input_error("save_trajectory: cannot open " + path.string());
  os << j.dump(2) << "\n";
}

TrajectoryRecord load_trajectory(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw input_error("load_trajectory: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
    TrajectoryRecord rec;
    rec.episode_ref = j.at("episode_ref").get<std::string>();
    rec.nodes = j.at("nodes").get<std::vector<int>>();
    rec.stop_step = j.at("stop_step").get<int>();
    rec.terminated_by_cap = j.at("terminated_by_cap").get<bool>();
    rec.grounded_instance = j.at("grounded_instance").get<int>();
    for (const auto& js : j.at("steps")) {
      StepRecord s;
      s.node = js.at("node").get<int>();
      s.candidates = js.at("candidates").get<std::vector<int>>();
      s.p_scene = js.at("p_scene").get<std::vector<double>>();
      s.p_view = js.at("p_view").get<std::vector<double>>();
      s.p_instance = js.at("p_instance").get<std::vector<double>>();
      s.p_combined = js.at("p_combined").get<std::vector<double>>();
      s.backtrack_nodes = js.at("backtrack_nodes").get<std::vector<int>>();
      s.backtrack_scores = js.at("backtrack_scores").get<std::vector<double>>();
      s.stop_score = js.at("stop_score").get<double>();
      s.action = js.at("action").get<std::string>();
      rec.steps.push_back(std::move(s));
    }
    return rec;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Imitation training
// ---------------------------------------------------------------------------

namespace {

struct TrainSample {
  GaussianFeature scene_feat;
  std::vector<GaussianFeature> view_feats, instance_feats;
  std::vector<Vec4d> posencs;
  Eigen::VectorXd instr;
  int oracle = -1;  // candidate index of the next hop; -1 at the goal
  double stop_label = 0;
};

struct NetGrads {
  Eigen::MatrixXd w1;
  Eigen::VectorXd b1;
  Eigen::VectorXd w2;
  double b2 = 0;

  explicit NetGrads(const Scorer::Net& like)
      : w1(Eigen::MatrixXd::Zero(like.w1.rows(), like.w1.cols())),
        b1(Eigen::VectorXd::Zero(like.b1.size())),
        w2(Eigen::VectorXd::Zero(like.w2.size())) {}
};

double net_forward_cache(const Scorer::Net& net, const Eigen::VectorXd& x,
                         Eigen::VectorXd& h_out) {
  h_out = (net.w1 * x + net.b1).array().tanh();
  return net.w2.dot(h_out) + net.b2;
}

void net_backward(const Scorer::Net& net, const Eigen::VectorXd& x,
                  const Eigen::VectorXd& h, double dlogit, NetGrads& g) {
  g.w2 += dlogit * h;
  g.b2 += dlogit;
  const Eigen::VectorXd da =
      (dlogit * net.w2.array() * (1.0 - h.array().square())).matrix();
  g.w1 += da * x.transpose();
  g.b1 += da;
}

struct AdamState {
  Eigen::ArrayXXd m_w1, v_w1;
  Eigen::ArrayXd m_b1, v_b1, m_w2, v_w2;
  double m_b2 = 0, v_b2 = 0;

  explicit AdamState(const Scorer::Net& like)
      : m_w1(Eigen::ArrayXXd::Zero(like.w1.rows(), like.w1.cols())),
        v_w1(Eigen::ArrayXXd::Zero(like.w1.rows(), like.w1.cols())),
        m_b1(Eigen::ArrayXd::Zero(like.b1.size())),
        v_b1(Eigen::ArrayXd::Zero(like.b1.size())),
        m_w2(Eigen::ArrayXd::Zero(like.w2.size())),
        v_w2(Eigen::ArrayXd::Zero(like.w2.size())) {}
};

void adam_update_array(Eigen::Ref<Eigen::ArrayXXd> value,
                       const Eigen::ArrayXXd& grad, Eigen::ArrayXXd& m,
                       Eigen::ArrayXXd& v, double lr, double b1, double b2,
                       double eps, double bc1, double bc2) {
  m = b1 * m + (1 - b1) * grad;
  v = b2 * v + (1 - b2) * grad.square();
  value -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
}

void adam_step_net(Scorer::Net& net, const NetGrads& g, AdamState& st,
                   const TrainConfig& cfg, double bc1, double bc2) {
  Eigen::ArrayXXd w1a = net.w1.array();
  adam_update_array(w1a, g.w1.array(), st.m_w1, st.v_w1, cfg.lr, cfg.beta1,
                    cfg.beta2, cfg.adam_eps, bc1, bc2);
  net.w1 = w1a.matrix();

  auto scalar_update = [&](double& value, double grad, double& m, double& v) {
    m = cfg.beta1 * m + (1 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad;
    value -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
  };
  for (Eigen::Index i = 0; i < net.b1.size(); ++i)
    scalar_update(net.b1[i], g.b1[i], st.m_b1[i], st.v_b1[i]);
  for (Eigen::Index i = 0; i < net.w2.size(); ++i)
    scalar_update(net.w2[i], g.w2[i], st.m_w2[i], st.v_w2[i]);
  scalar_update(net.b2, g.b2, st.m_b2, st.v_b2);
}

}  // namespace

TrainResult train_scorer(std::span<const SyntheticScene> scenes,
                         std::span<const std::vector<Episode>> episodes_per_scene,
                         const TrainConfig& cfg,
                         std::vector<LocalMapCache>* caches) {
  if (scenes.empty() || episodes_per_scene.size() != scenes.size())
    throw input_error("train_scorer: no training data");
  std::size_t n_episodes = 0;
  for (const auto& eps : episodes_per_scene) n_episodes += eps.size();
  if (n_episodes == 0) throw input_error("train_scorer: no training data");
  if (cfg.steps < 0) throw input_error("train_scorer: negative step count");

  std::vector<LocalMapCache> local_caches;
  if (!caches) {
    local_caches.resize(scenes.size());
    caches = &local_caches;
  } else if (caches->size() != scenes.size()) {
    caches->resize(scenes.size());
  }

  // Build the imitation dataset: one sample per ground-truth path node.
  std::vector<TrainSample> samples;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const SyntheticScene& scene = scenes[s];
    const SyntheticProvider provider(std::max(1, scene.num_instances()));
    const std::vector<double> codebook = scene.codebook();
    for (const Episode& ep : episodes_per_scene[s]) {
      ep.validate(scene.graph);
      const Vec3d start_pos = scene.graph.nodes[ep.start];
      for (std::size_t t = 0; t < ep.gt_path.size(); ++t) {
        const int node = ep.gt_path[t];
        const auto local =
            node_local_map(scene, node, provider, cfg.episode, &(*caches)[s]);
        const std::vector<int>& neighbors = scene.graph.adjacency[node];
        if (neighbors.empty()) continue;

        TrainSample sample;
        std::vector<Vec3d> rel(neighbors.size());
        for (std::size_t i = 0; i < neighbors.size(); ++i)
          rel[i] = scene.graph.nodes[neighbors[i]] - scene.graph.nodes[node];
        if (local && !local->map.empty()) {
          const CandidateFeatures cf = compute_candidate_features(
              local->map, rel, codebook, cfg.episode.policy.cone_half_angle,
              cfg.episode.policy.group_tol);
          sample.scene_feat = cf.scene_feat;
          sample.view_feats = cf.view_feats;
          sample.instance_feats = cf.instance_feats;
        } else {
          sample.scene_feat = GaussianFeature::Zero();
          sample.view_feats.assign(neighbors.size(), GaussianFeature::Zero());
          sample.instance_feats.assign(neighbors.size(), GaussianFeature::Zero());
        }
        sample.posencs.resize(neighbors.size());
        for (std::size_t i = 0; i < neighbors.size(); ++i)
          sample.posencs[i] = make_posenc(
              rel[i], scene.graph.nodes[neighbors[i]] - start_pos);
        sample.instr = pooled_instruction(ep.instruction, kInstructionDim);
        if (t + 1 < ep.gt_path.size()) {
          const auto it =
              std::find(neighbors.begin(), neighbors.end(), ep.gt_path[t + 1]);
          sample.oracle = static_cast<int>(it - neighbors.begin());
          sample.stop_label = 0.0;
        } else {
          sample.oracle = -1;
          sample.stop_label = 1.0;
        }
        samples.push_back(std::move(sample));
      }
    }
  }

  TrainResult result;
  result.scorer =
      cfg.zero_init ? Scorer::zero_init() : Scorer::random_init(cfg.seed);
  Scorer& scorer = result.scorer;

  AdamState st_scene(scorer.scene), st_view(scorer.view),
      st_instance(scorer.instance), st_stop(scorer.stop);

  for (int step = 0; step < cfg.steps; ++step) {
    NetGrads g_scene(scorer.scene), g_view(scorer.view),
        g_instance(scorer.instance), g_stop(scorer.stop);
    double ce_sum = 0.0, stop_sum = 0.0;
    std::size_t ce_count = 0;

    for (const TrainSample& sample : samples) {
      const std::size_t n = sample.view_feats.size();

      if (sample.oracle >= 0) {
        Eigen::VectorXd logits[3] = {Eigen::VectorXd(n), Eigen::VectorXd(n),
                                     Eigen::VectorXd(n)};
        std::vector<Eigen::VectorXd> inputs[3];
        std::vector<Eigen::VectorXd> hidden[3];
        const Scorer::Net* nets[3] = {&scorer.scene, &scorer.view, &scorer.instance};
        NetGrads* grads[3] = {&g_scene, &g_view, &g_instance};
        for (int l = 0; l < 3; ++l) {
          inputs[l].resize(n);
          hidden[l].resize(n);
        }
        for (std::size_t k = 0; k < n; ++k) {
          inputs[0][k] = level_input(sample.scene_feat, sample.posencs[k], sample.instr);
          inputs[1][k] = level_input(sample.view_feats[k], sample.posencs[k], sample.instr);
          inputs[2][k] =
              level_input(sample.instance_feats[k], sample.posencs[k], sample.instr);
          for (int l = 0; l < 3; ++l)
            logits[l][k] = net_forward_cache(*nets[l], inputs[l][k], hidden[l][k]);
        }
        Eigen::VectorXd sm[3];
        Eigen::VectorXd p_c = Eigen::VectorXd::Zero(n);
        for (int l = 0; l < 3; ++l) {
          sm[l] = softmax(logits[l]);
          p_c += sm[l];
        }
        const int o = sample.oracle;
        ce_sum += std::log(3.0) - std::log(p_c[o]);
        ++ce_count;
        for (int l = 0; l < 3; ++l)
          for (std::size_t k = 0; k < n; ++k) {
            const double kron = (static_cast<int>(k) == o) ? 1.0 : 0.0;
            const double dlogit = -sm[l][o] * (kron - sm[l][k]) / p_c[o];
            net_backward(*nets[l], inputs[l][k], hidden[l][k], dlogit, *grads[l]);
          }
      }

      // STOP head: binary cross-entropy against the goal label.
      {
        const Eigen::VectorXd x = stop_input(sample.scene_feat, sample.instr);
        Eigen::VectorXd h;
        const double logit = net_forward_cache(scorer.stop, x, h);
        const double p = sigmoid(logit);
        const double eps = 1e-12;
        stop_sum += -(sample.stop_label * std::log(p + eps) +
                      (1.0 - sample.stop_label) * std::log(1.0 - p + eps));
        const double dlogit = cfg.stop_loss_weight * (p - sample.stop_label);
        net_backward(scorer.stop, x, h, dlogit, g_stop);
      }
    }

    const double inv_n = 1.0 / static_cast<double>(samples.size());
    for (NetGrads* g : {&g_scene, &g_view, &g_instance, &g_stop}) {
      g->w1 *= inv_n;
      g->b1 *= inv_n;
      g->w2 *= inv_n;
      g->b2 *= inv_n;
    }
    result.action_ce_curve.push_back(
        ce_count ? ce_sum / static_cast<double>(ce_count) : 0.0);
    // Matches the gradient objective: (ce + w*stop_bce) averaged per sample.
    result.loss_curve.push_back((ce_sum + cfg.stop_loss_weight * stop_sum) * inv_n);

    const double bc1 = 1.0 - std::pow(cfg.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step + 1);
    adam_step_net(scorer.scene, g_scene, st_scene, cfg, bc1, bc2);
    adam_step_net(scorer.view, g_view, st_view, cfg, bc1, bc2);
    adam_step_net(scorer.instance, g_instance, st_instance, cfg, bc1, bc2);
    adam_step_net(scorer.stop, g_stop, st_stop, cfg, bc1, bc2);
  }
  return result;
}

}  // namespace gsmap
