#pragma once

#include <span>
#include <string>
#include <vector>

#include "gsmap/navigation.hpp"
#include "gsmap/scene.hpp"

namespace gsmap {

struct MetricsConfig {
  double success_radius = 3.0;  // d_th, meters
  bool geodesic_ne = true;      // graph distance for NE/OSR, else straight-line

  void validate() const;
};

struct EpisodeMetrics {
  double tl = 0, ne = 0;
  double sr = 0, osr = 0, spl = 0;
  double ndtw = 0, sdtw = 0, cls = 0;
  double rgs = 0, rgspl = 0;
  bool has_grounding = false;  // episode carried a target instance
};

struct MetricsReport {
  std::vector<EpisodeMetrics> per_episode;
  EpisodeMetrics mean;        // grounding means over grounding episodes only
  std::size_t episode_count = 0;
  std::size_t grounding_count = 0;

  std::string to_json() const;
  std::string to_table() const;  // aligned plain text
};

/// DTW over Euclidean point distances, moves {(1,0),(0,1),(1,1)}.
double dtw_distance(std::span<const Vec3d> path, std::span<const Vec3d> reference);

/// exp(-DTW(P,R) / (|R| * d_th)).
double ndtw(std::span<const Vec3d> path, std::span<const Vec3d> reference,
            double d_th);

struct BasicMetrics {
  double tl = 0, ne = 0, sr = 0, osr = 0, spl = 0;
};

/// TL, NE, SR, OSR, SPL for a node walk. Throws input_error if the
/// trajectory is not a walk on the graph.
BasicMetrics basic_metrics(std::span<const int> walk, const Episode& episode,
                           const NavGraph& graph, const MetricsConfig& cfg);

double sdtw(std::span<const int> walk, const Episode& episode,
            const NavGraph& graph, const MetricsConfig& cfg);
double cls(std::span<const int> walk, const Episode& episode,
           const NavGraph& graph, const MetricsConfig& cfg);

struct GroundingMetrics {
  double rgs = 0, rgspl = 0;
  bool applicable = false;
};

GroundingMetrics grounding_metrics(const TrajectoryRecord& traj,
                                   const Episode& episode, const NavGraph& graph,
                                   const MetricsConfig& cfg);

EpisodeMetrics evaluate_episode(const TrajectoryRecord& traj, const Episode& episode,
                                const NavGraph& graph, const MetricsConfig& cfg);

MetricsReport evaluate(std::span<const TrajectoryRecord> trajectories,
                       std::span<const Episode> episodes,
                       std::span<const NavGraph> graphs, const MetricsConfig& cfg);

}  // namespace gsmap
