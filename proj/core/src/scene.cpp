#include "gsmap/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <queue>
#include <set>

#include <nlohmann/json.hpp>

namespace gsmap {

void NavGraph::build_adjacency() {
  adjacency.assign(nodes.size(), {});
  for (const auto& [a, b] : edges) {
    adjacency[a].push_back(b);
    adjacency[b].push_back(a);
  }
  for (auto& nbrs : adjacency) std::sort(nbrs.begin(), nbrs.end());
}

double NavGraph::edge_length(int a, int b) const {
  return (nodes[a] - nodes[b]).norm();
}

bool NavGraph::has_edge(int a, int b) const {
  if (a < 0 || b < 0 || a >= size() || b >= size()) return false;
  const auto& nbrs = adjacency[a];
  return std::binary_search(nbrs.begin(), nbrs.end(), b);
}

bool NavGraph::connected() const {
  if (nodes.empty()) return false;
  std::vector<bool> seen(nodes.size(), false);
  std::vector<int> stack{0};
  seen[0] = true;
  std::size_t visited = 1;
  while (!stack.empty()) {
    const int n = stack.back();
    stack.pop_back();
    for (int m : adjacency[n])
      if (!seen[m]) {
        seen[m] = true;
        ++visited;
        stack.push_back(m);
      }
  }
  return visited == nodes.size();
}

std::vector<double> NavGraph::geodesic_from(int node) const {
  std::vector<double> dist(nodes.size(), std::numeric_limits<double>::infinity());
  dist[node] = 0.0;
  using Entry = std::pair<double, int>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue;
  queue.push({0.0, node});
  while (!queue.empty()) {
    const auto [d, n] = queue.top();
    queue.pop();
    if (d > dist[n]) continue;
    for (int m : adjacency[n]) {
      const double nd = d + edge_length(n, m);
      if (nd < dist[m]) {
        dist[m] = nd;
        queue.push({nd, m});
      }
    }
  }
  return dist;
}

std::vector<int> NavGraph::shortest_path(int from, int to) const {
  std::vector<double> dist(nodes.size(), std::numeric_limits<double>::infinity());
  std::vector<int> pred(nodes.size(), -1);
  dist[from] = 0.0;
  using Entry = std::pair<double, int>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue;
  queue.push({0.0, from});
  while (!queue.empty()) {
    const auto [d, n] = queue.top();
    queue.pop();
    if (d > dist[n]) continue;
    for (int m : adjacency[n]) {
      const double nd = d + edge_length(n, m);
      // Strictly-better relaxations with ascending neighbor order give a
      // deterministic tie rule (lowest-id predecessors win).
      if (nd < dist[m] - 1e-12) {
        dist[m] = nd;
        pred[m] = n;
        queue.push({nd, m});
      }
    }
  }
  if (!std::isfinite(dist[to]))
    throw input_error("shortest_path: nodes are not connected");
  std::vector<int> path;
  for (int n = to; n != -1; n = pred[n]) path.push_back(n);
  std::reverse(path.begin(), path.end());
  if (path.front() != from) throw input_error("shortest_path: no path found");
  return path;
}

void NavGraph::validate() const {
  if (nodes.empty()) throw input_error("NavGraph: no nodes");
  if (adjacency.size() != nodes.size())
    throw input_error("NavGraph: adjacency not built");
  for (const auto& [a, b] : edges) {
    if (a < 0 || b < 0 || a >= size() || b >= size())
      throw input_error("NavGraph: edge endpoint out of range");
    if (a == b) throw input_error("NavGraph: self loop");
    if (!(edge_length(a, b) > 0.0))
      throw input_error("NavGraph: zero-length edge");
  }
  if (!connected()) throw input_error("NavGraph: not connected");
}

std::vector<double> SyntheticScene::codebook() const {
  return uniform_codebook(std::max(1, num_instances()));
}

void SceneConfig::validate() const {
  if (rooms_x < 1 || rooms_y < 1)
    throw input_error("SceneConfig: need at least one room");
  if (!(room_size > 1.0)) throw input_error("SceneConfig: room_size too small");
  if (instances_per_room < 0 || gaussians_per_instance < 1)
    throw input_error("SceneConfig: bad instance settings");
  if (!(doorway_width > 0.0 && doorway_width < room_size))
    throw input_error("SceneConfig: doorway_width outside (0, room_size)");
  if (!(structure_spacing > 0.01))
    throw input_error("SceneConfig: structure_spacing too small");
}

namespace {

Gaussian make_structure_gaussian(const Vec3d& pos, const Vec3d& scale,
                                 const Vec3d& color, double opacity,
                                 double semantic = 0.0) {
  Gaussian g;
  g.mu = pos.cast<float>();
  g.scale = scale.cast<float>();
  g.quat = Vec4f(1.f, 0.f, 0.f, 0.f);
  g.color = color.cast<float>();
  g.opacity = static_cast<float>(opacity);
  g.semantic = static_cast<float>(semantic);
  return g;
}

/// Distinct saturated color per instance index.
Vec3d instance_color(int index, Rng& rng) {
  const double hue = std::fmod(index * 0.618033988749895 + rng.uniform() * 0.02, 1.0);
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double v = 0.95, s = 0.85;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct WallSegment {
  Vec3d from, to;
};

}  // namespace

SyntheticScene generate_scene(uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  SyntheticScene scene;
  const double s = cfg.room_size;
  const int rx_count = cfg.rooms_x, ry_count = cfg.rooms_y;
  const int n_rooms = rx_count * ry_count;

  // Wall segments: exterior solid, interior split around a doorway gap.
  std::vector<WallSegment> walls;
  auto add_wall = [&](Vec3d a, Vec3d b, bool doorway) {
    if (!doorway) {
      walls.push_back({a, b});
      return;
    }
    const Vec3d mid = 0.5 * (a + b);
    const Vec3d dir = (b - a).normalized();
    walls.push_back({a, mid - 0.5 * cfg.doorway_width * dir});
    walls.push_back({mid + 0.5 * cfg.doorway_width * dir, b});
  };
  for (int gx = 0; gx <= rx_count; ++gx)
    for (int ry = 0; ry < ry_count; ++ry) {
      const bool interior = gx > 0 && gx < rx_count;
      add_wall(Vec3d(gx * s, ry * s, 0), Vec3d(gx * s, (ry + 1) * s, 0), interior);
    }
  for (int gy = 0; gy <= ry_count; ++gy)
    for (int rx = 0; rx < rx_count; ++rx) {
      const bool interior = gy > 0 && gy < ry_count;
      add_wall(Vec3d(rx * s, gy * s, 0), Vec3d((rx + 1) * s, gy * s, 0), interior);
    }

  const Vec3d wall_base_color(0.55, 0.52, 0.48);
  const double sp = cfg.structure_spacing;
  const Vec3d wall_scale = Vec3d::Constant(0.6 * sp);
  for (const WallSegment& wall : walls) {
    const double len = (wall.to - wall.from).norm();
    const int n_along = std::max(1, static_cast<int>(std::round(len / sp)));
    const int n_up = std::max(1, static_cast<int>(std::round(cfg.wall_height / sp)));
    for (int i = 0; i < n_along; ++i)
      for (int k = 0; k < n_up; ++k) {
        const double t = (i + 0.5) / n_along;
        Vec3d pos = wall.from + t * (wall.to - wall.from);
        pos.z() = (k + 0.5) * cfg.wall_height / n_up;
        const Vec3d col = wall_base_color + Vec3d::Constant(0.06 * (rng.uniform() - 0.5));
        scene.map.gaussians.push_back(
            make_structure_gaussian(pos, wall_scale, col.cwiseMax(0.0).cwiseMin(1.0), 0.92));
      }
  }

  // Floor: per-room tint so view-level features can tell rooms apart.
  const double floor_sp = 2.0 * sp;
  for (int ry = 0; ry < ry_count; ++ry)
    for (int rx = 0; rx < rx_count; ++rx) {
      const Vec3d tint(0.25 + 0.12 * ((rx + ry) % 3), 0.3, 0.25 + 0.1 * (rx % 2));
      const int n = std::max(1, static_cast<int>(std::round(s / floor_sp)));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const Vec3d pos(rx * s + (i + 0.5) * s / n, ry * s + (j + 0.5) * s / n, 0.02);
          const Vec3d col = tint + Vec3d::Constant(0.05 * (rng.uniform() - 0.5));
          scene.map.gaussians.push_back(make_structure_gaussian(
              pos, Vec3d(0.7 * floor_sp, 0.7 * floor_sp, 0.03),
              col.cwiseMax(0.0).cwiseMin(1.0), 0.9));
        }
    }

  scene.gaussian_instance.assign(scene.map.size(), 0);

  // Instances: compact colored blobs with codebook semantics.
  const int n_instances = n_rooms * cfg.instances_per_room;
  const std::vector<double> codebook =
      n_instances > 0 ? uniform_codebook(n_instances) : std::vector<double>{};
  int instance_id = 0;
  for (int room = 0; room < n_rooms; ++room) {
    const int rx = room % rx_count, ry = room / rx_count;
    for (int k = 0; k < cfg.instances_per_room; ++k) {
      ++instance_id;
      const double margin = 1.0;
      const Vec3d center(rx * s + margin + rng.uniform() * (s - 2 * margin),
                         ry * s + margin + rng.uniform() * (s - 2 * margin),
                         0.4 + 0.3 * rng.uniform());
      const Vec3d color = instance_color(instance_id - 1, rng);
      Instance inst;
      inst.id = instance_id;
      inst.label = "instance_" + std::to_string(instance_id);
      inst.code = codebook[instance_id - 1];
      Vec3d centroid_sum = Vec3d::Zero();
      for (int gi = 0; gi < cfg.gaussians_per_instance; ++gi) {
        Vec3d pos = center + Vec3d(0.18 * rng.normal(), 0.18 * rng.normal(),
                                   0.12 * rng.normal());
        pos.z() = std::max(pos.z(), 0.08);
        Gaussian g = make_structure_gaussian(pos, Vec3d::Constant(0.07),
                                             color, 0.9, inst.code);
        inst.gaussian_indices.push_back(scene.map.size());
        scene.gaussian_instance.push_back(inst.id);
        scene.map.gaussians.push_back(g);
        centroid_sum += pos;
      }
      inst.centroid = centroid_sum / cfg.gaussians_per_instance;
      scene.instances.push_back(std::move(inst));
    }
  }

  // Nav graph: node id of room r's center is r; doorway nodes follow.
  for (int room = 0; room < n_rooms; ++room) {
    const int rx = room % rx_count, ry = room / rx_count;
    scene.graph.nodes.emplace_back((rx + 0.5) * s, (ry + 0.5) * s, 0.0);
    scene.node_room.push_back(room);
  }
  auto add_doorway = [&](int room_a, int room_b, const Vec3d& pos) {
    const int node = scene.graph.size();
    scene.graph.nodes.push_back(pos);
    scene.node_room.push_back(std::min(room_a, room_b));
    scene.graph.edges.emplace_back(std::min(room_a, node), std::max(room_a, node));
    scene.graph.edges.emplace_back(std::min(room_b, node), std::max(room_b, node));
  };
  for (int ry = 0; ry < ry_count; ++ry)
    for (int gx = 1; gx < rx_count; ++gx)
      add_doorway(ry * rx_count + gx - 1, ry * rx_count + gx,
                  Vec3d(gx * s, (ry + 0.5) * s, 0.0));
  for (int gy = 1; gy < ry_count; ++gy)
    for (int rx = 0; rx < rx_count; ++rx)
      add_doorway((gy - 1) * rx_count + rx, gy * rx_count + rx,
                  Vec3d((rx + 0.5) * s, gy * s, 0.0));

  scene.graph.build_adjacency();
  if (scene.graph.size() > 1) scene.graph.validate();
  return scene;
}

void Episode::validate(const NavGraph& graph) const {
  if (start == goal) throw input_error("Episode: start equals goal");
  if (start < 0 || goal < 0 || start >= graph.size() || goal >= graph.size())
    throw input_error("Episode: node out of range");
  if (gt_path.size() < 2 || gt_path.front() != start || gt_path.back() != goal)
    throw input_error("Episode: gt_path does not connect start and goal");
  double length = 0.0;
  for (std::size_t i = 1; i < gt_path.size(); ++i) {
    if (!graph.has_edge(gt_path[i - 1], gt_path[i]))
      throw input_error("Episode: gt_path is not a walk");
    length += graph.edge_length(gt_path[i - 1], gt_path[i]);
  }
  const double geo = graph.geodesic_from(start)[goal];
  if (length > geo + 1e-9)
    throw input_error("Episode: gt_path is not a shortest path");
  if (instruction.size() > 0 && instruction.cols() != kInstructionDim)
    throw input_error("Episode: instruction width mismatch");
}

Episode make_episode(const SyntheticScene& scene, int start, int goal,
                     int target_instance, const std::string& scene_path) {
  Episode ep;
  ep.scene_path = scene_path;
  ep.start = start;
  ep.goal = goal;
  ep.target_instance = target_instance;
  ep.gt_path = scene.graph.shortest_path(start, goal);

  // Distinct room sequence along the path.
  std::vector<int> rooms;
  for (int node : ep.gt_path) {
    const int room = scene.node_room[node];
    if (rooms.empty() || rooms.back() != room) rooms.push_back(room);
  }

  const Vec3d start_pos = scene.graph.nodes[start];
  const int n_rooms =
      *std::max_element(scene.node_room.begin(), scene.node_room.end()) + 1;
  const int per_room = n_rooms > 0 ? scene.num_instances() / n_rooms : 0;

  auto first_instance_code_of_room = [&](int room) -> double {
    if (per_room > 0) return scene.instances[room * per_room].code;
    return 0.0;
  };

  const std::size_t n_rows = rooms.size() + 1;
  ep.instruction = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_rows),
                                         kInstructionDim);
  for (std::size_t i = 0; i < rooms.size(); ++i) {
    const Vec3d room_center = scene.graph.nodes[rooms[i]];  // node id == room id
    ep.instruction(i, 0) = first_instance_code_of_room(rooms[i]);
    ep.instruction(i, 1) = (room_center.x() - start_pos.x()) * kPosScale;
    ep.instruction(i, 2) = (room_center.y() - start_pos.y()) * kPosScale;
    ep.instruction(i, 3) = 0.0;  // goal flag
  }
  // Goal row.
  const Vec3d goal_pos = scene.graph.nodes[goal];
  double goal_code = first_instance_code_of_room(scene.node_room[goal]);
  if (target_instance > 0 && target_instance <= scene.num_instances())
    goal_code = scene.instances[target_instance - 1].code;
  const std::size_t gi = n_rows - 1;
  ep.instruction(gi, 0) = goal_code;
  ep.instruction(gi, 1) = (goal_pos.x() - start_pos.x()) * kPosScale;
  ep.instruction(gi, 2) = (goal_pos.y() - start_pos.y()) * kPosScale;
  ep.instruction(gi, 3) = 1.0;

  ep.validate(scene.graph);
  return ep;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

void save_scene(const SyntheticScene& scene, const std::filesystem::path& json_path,
                const std::string& map_filename) {
  save_map(scene.map, json_path.parent_path() / map_filename);
  nlohmann::json j;
  j["gaussian_map_path"] = map_filename;
  j["instances"] = nlohmann::json::array();
  for (const Instance& inst : scene.instances)
    j["instances"].push_back({{"id", inst.id},
                              {"label", inst.label},
                              {"gaussian_indices", inst.gaussian_indices},
                              {"centroid", {inst.centroid.x(), inst.centroid.y(), inst.centroid.z()}},
                              {"code", inst.code}});
  j["graph"]["nodes"] = nlohmann::json::array();
  for (const Vec3d& n : scene.graph.nodes)
    j["graph"]["nodes"].push_back({n.x(), n.y(), n.z()});
  j["graph"]["edges"] = nlohmann::json::array();
  for (const auto& [a, b] : scene.graph.edges)
    j["graph"]["edges"].push_back({a, b});
  j["rooms"] = scene.node_room;
  std::ofstream os(json_path);
  if (!os) throw input_error("save_scene: cannot open " + json_path.string());
  os << j.dump(2) << "\n";
}

SyntheticScene load_scene(const std::filesystem::path& json_path) {
  std::ifstream is(json_path);
  if (!is) throw input_error("load_scene: cannot open " + json_path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(json_path.string() + ": " + e.what());
  }
  SyntheticScene scene;
  try {
    scene.map = load_map(json_path.parent_path() /
                         j.at("gaussian_map_path").get<std::string>());
    for (const auto& ji : j.at("instances")) {
      Instance inst;
      inst.id = ji.at("id").get<int>();
      inst.label = ji.at("label").get<std::string>();
      inst.gaussian_indices = ji.at("gaussian_indices").get<std::vector<std::size_t>>();
      const auto c = ji.at("centroid");
      inst.centroid = Vec3d(c.at(0).get<double>(), c.at(1).get<double>(),
                            c.at(2).get<double>());
      inst.code = ji.at("code").get<double>();
      scene.instances.push_back(std::move(inst));
    }
    for (const auto& jn : j.at("graph").at("nodes"))
      scene.graph.nodes.emplace_back(jn.at(0).get<double>(), jn.at(1).get<double>(),
                                     jn.at(2).get<double>());
    for (const auto& je : j.at("graph").at("edges"))
      scene.graph.edges.emplace_back(je.at(0).get<int>(), je.at(1).get<int>());
    scene.node_room = j.at("rooms").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error(json_path.string() + ": " + e.what());
  }
  scene.graph.build_adjacency();
  scene.graph.validate();

  scene.gaussian_instance.assign(scene.map.size(), 0);
  for (const Instance& inst : scene.instances)
    for (std::size_t gi : inst.gaussian_indices) {
      if (gi >= scene.map.size())
        throw format_error(json_path.string() + ": instance Gaussian out of range");
      scene.gaussian_instance[gi] = inst.id;
    }
  return scene;
}

void save_episode(const Episode& ep, const std::filesystem::path& path) {
  nlohmann::json j;
  j["scene_path"] = ep.scene_path;
  j["start"] = ep.start;
  j["goal"] = ep.goal;
  j["target_instance"] = ep.target_instance;
  j["gt_path"] = ep.gt_path;
  j["instruction"] = nlohmann::json::array();
  for (Eigen::Index r = 0; r < ep.instruction.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < ep.instruction.cols(); ++c)
      row.push_back(ep.instruction(r, c));
    j["instruction"].push_back(std::move(row));
  }
  std::ofstream os(path);
  if (!os) throw input_error("save_episode: cannot open " + path.string());
  os << j.dump(2) << "\n";
}

Episode load_episode(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw input_error("load_episode: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(path.string() + ": " + e.what());
  }
  Episode ep;
  try {
    ep.scene_path = j.at("scene_path").get<std::string>();
    ep.start = j.at("start").get<int>();
    ep.goal = j.at("goal").get<int>();
    ep.target_instance = j.at("target_instance").get<int>();
    ep.gt_path = j.at("gt_path").get<std::vector<int>>();
    const auto& rows = j.at("instruction");
    ep.instruction = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()),
                                           kInstructionDim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != kInstructionDim)
        throw format_error(path.string() + ": instruction row width mismatch");
      for (int c = 0; c < kInstructionDim; ++c)
        ep.instruction(static_cast<Eigen::Index>(r), c) = rows[r][c].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw format_error(path.string() + ": " + e.what());
  }
  return ep;
}

}  // namespace gsmap
