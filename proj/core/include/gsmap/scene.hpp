#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gsmap/gaussian_map.hpp"
#include "gsmap/semantics.hpp"

namespace gsmap {

/// Discrete navigable graph. Node ids are dense indices; edge lengths are
/// Euclidean distances between node positions.
struct NavGraph {
  std::vector<Vec3d> nodes;                 // id -> position
  std::vector<std::pair<int, int>> edges;   // undirected, a < b
  std::vector<std::vector<int>> adjacency;  // sorted neighbor lists

  int size() const { return static_cast<int>(nodes.size()); }
  void build_adjacency();
  double edge_length(int a, int b) const;
  bool has_edge(int a, int b) const;
  bool connected() const;
  /// Dijkstra distances from a node (graph must be validated).
  std::vector<double> geodesic_from(int node) const;
  /// Shortest node path between two nodes (ties resolved toward lower ids).
  std::vector<int> shortest_path(int from, int to) const;
  void validate() const;  // connected, no self loops, positive lengths
};

struct Instance {
  int id = 0;  // 1-based; 0 means "no instance"
  std::string label;
  std::vector<std::size_t> gaussian_indices;
  Vec3d centroid = Vec3d::Zero();
  double code = 0;
};

struct SyntheticScene {
  GaussianMap map;  // ground truth, world frame
  std::vector<Instance> instances;
  std::vector<int> gaussian_instance;  // per Gaussian: instance id, 0 = structure
  NavGraph graph;
  std::vector<int> node_room;  // node -> room id

  int num_instances() const { return static_cast<int>(instances.size()); }
  std::vector<double> codebook() const;
};

struct SceneConfig {
  int rooms_x = 2, rooms_y = 2;
  double room_size = 4.0;       // meters
  int instances_per_room = 1;
  int gaussians_per_instance = 40;
  double wall_height = 2.2;     // meters
  double doorway_width = 1.2;   // meters
  double structure_spacing = 0.22;  // wall/floor splat spacing, meters

  void validate() const;
};

/// Deterministic room-grid world: wall and floor slabs, colored instance
/// blobs with codebook semantics, nav nodes at room centers and doorways.
SyntheticScene generate_scene(uint64_t seed, const SceneConfig& cfg);

/// Width of the instruction embedding rows.
inline constexpr int kInstructionDim = 16;
/// Positions and offsets are multiplied by this before entering scorers
/// and instruction rows.
inline constexpr double kPosScale = 0.1;

struct Episode {
  std::string scene_path;  // reference for serialized episodes
  int start = 0, goal = 0;
  int target_instance = 0;  // 0 = no grounding target
  Eigen::MatrixXd instruction;  // L x kInstructionDim
  std::vector<int> gt_path;     // shortest path, start..goal

  void validate(const NavGraph& graph) const;
};

/// Builds an episode whose instruction rows encode the path landmarks:
/// [landmark code, room centroid offset from start (xy, scaled), goal
/// flag, zero padding].
Episode make_episode(const SyntheticScene& scene, int start, int goal,
                     int target_instance, const std::string& scene_path = "");

/// Scene file: JSON {gaussian_map_path, instances, graph{nodes,edges}, rooms}.
/// The map is stored next to the JSON at `map_filename`.
void save_scene(const SyntheticScene& scene, const std::filesystem::path& json_path,
                const std::string& map_filename);
SyntheticScene load_scene(const std::filesystem::path& json_path);

void save_episode(const Episode& ep, const std::filesystem::path& path);
Episode load_episode(const std::filesystem::path& path);

}  // namespace gsmap
