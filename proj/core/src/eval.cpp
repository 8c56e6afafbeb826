#include "gsmap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

namespace gsmap {

void MetricsConfig::validate() const {
  if (!(success_radius > 0.0))
    throw input_error("MetricsConfig: success_radius must be > 0");
}

double dtw_distance(std::span<const Vec3d> path, std::span<const Vec3d> reference) {
  if (path.empty() || reference.empty())
    throw input_error("dtw_distance: empty sequence");
  const std::size_t n = path.size(), m = reference.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), curr(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    curr.assign(m + 1, inf);
    for (std::size_t j = 1; j <= m; ++j) {
      const double cost = (path[i - 1] - reference[j - 1]).norm();
      curr[j] = cost + std::min({prev[j], curr[j - 1], prev[j - 1]});
    }
    std::swap(prev, curr);
    prev[0] = inf;  // only (0,0) may start an alignment
  }
  return prev[m];
}

double ndtw(std::span<const Vec3d> path, std::span<const Vec3d> reference,
            double d_th) {
  if (!(d_th > 0.0)) throw input_error("ndtw: d_th must be > 0");
  const double d = dtw_distance(path, reference);
  return std::exp(-d / (static_cast<double>(reference.size()) * d_th));
}

namespace {

void check_walk(std::span<const int> walk, const NavGraph& graph) {
  if (walk.empty()) throw input_error("metrics: empty trajectory");
  for (int n : walk)
    if (n < 0 || n >= graph.size())
      throw input_error("metrics: trajectory node out of range");
  for (std::size_t i = 1; i < walk.size(); ++i)
    if (!graph.has_edge(walk[i - 1], walk[i]))
      throw input_error("metrics: trajectory is not a walk on the graph");
}

double walk_length(std::span<const int> walk, const NavGraph& graph) {
  double len = 0.0;
  for (std::size_t i = 1; i < walk.size(); ++i)
    len += graph.edge_length(walk[i - 1], walk[i]);
  return len;
}

std::vector<Vec3d> node_positions(std::span<const int> walk, const NavGraph& graph) {
  std::vector<Vec3d> out(walk.size());
  for (std::size_t i = 0; i < walk.size(); ++i) out[i] = graph.nodes[walk[i]];
  return out;
}

}  // namespace

BasicMetrics basic_metrics(std::span<const int> walk, const Episode& episode,
                           const NavGraph& graph, const MetricsConfig& cfg) {
  cfg.validate();
  check_walk(walk, graph);
  if (walk.front() != episode.start)
    throw input_error("metrics: trajectory does not begin at the episode start");

  BasicMetrics out;
  out.tl = walk_length(walk, graph);

  const std::vector<double> goal_dist = graph.geodesic_from(episode.goal);
  auto dist_to_goal = [&](int node) {
    return cfg.geodesic_ne ? goal_dist[node]
                           : (graph.nodes[node] - graph.nodes[episode.goal]).norm();
  };

  out.ne = dist_to_goal(walk.back());
  out.sr = out.ne <= cfg.success_radius ? 1.0 : 0.0;
  out.osr = 0.0;
  for (int node : walk)
    if (dist_to_goal(node) <= cfg.success_radius) {
      out.osr = 1.0;
      break;
    }

  const double shortest = graph.geodesic_from(episode.start)[episode.goal];
  out.spl = out.sr * shortest / std::max(out.tl, shortest);
  return out;
}

double sdtw(std::span<const int> walk, const Episode& episode,
            const NavGraph& graph, const MetricsConfig& cfg) {
  const BasicMetrics bm = basic_metrics(walk, episode, graph, cfg);
  const auto p = node_positions(walk, graph);
  const auto r = node_positions(episode.gt_path, graph);
  return bm.sr * ndtw(p, r, cfg.success_radius);
}

double cls(std::span<const int> walk, const Episode& episode,
           const NavGraph& graph, const MetricsConfig& cfg) {
  cfg.validate();
  check_walk(walk, graph);
  const auto p = node_positions(walk, graph);
  const auto r = node_positions(episode.gt_path, graph);

  double pc = 0.0;
  for (const Vec3d& rp : r) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3d& pp : p) best = std::min(best, (rp - pp).norm());
    pc += std::exp(-best / cfg.success_radius);
  }
  pc /= static_cast<double>(r.size());

  double ref_len = 0.0;
  for (std::size_t i = 1; i < r.size(); ++i) ref_len += (r[i] - r[i - 1]).norm();
  const double epl = pc * ref_len;
  const double tl = walk_length(walk, graph);
  const double denom = epl + std::abs(epl - tl);
  const double ls = denom > 0.0 ? epl / denom : 0.0;
  return pc * ls;
}

GroundingMetrics grounding_metrics(const TrajectoryRecord& traj,
                                   const Episode& episode, const NavGraph& graph,
                                   const MetricsConfig& cfg) {
  GroundingMetrics out;
  if (episode.target_instance <= 0) return out;  // not applicable
  out.applicable = true;
  const BasicMetrics bm = basic_metrics(traj.nodes, episode, graph, cfg);
  out.rgs = (bm.sr == 1.0 && traj.grounded_instance == episode.target_instance)
                ? 1.0
                : 0.0;
  const double shortest = graph.geodesic_from(episode.start)[episode.goal];
  out.rgspl = out.rgs * shortest / std::max(bm.tl, shortest);
  return out;
}

EpisodeMetrics evaluate_episode(const TrajectoryRecord& traj, const Episode& episode,
                                const NavGraph& graph, const MetricsConfig& cfg) {
  EpisodeMetrics m;
  const BasicMetrics bm = basic_metrics(traj.nodes, episode, graph, cfg);
  m.tl = bm.tl;
  m.ne = bm.ne;
  m.sr = bm.sr;
  m.osr = bm.osr;
  m.spl = bm.spl;
  const auto p = node_positions(traj.nodes, graph);
  const auto r = node_positions(episode.gt_path, graph);
  m.ndtw = ndtw(p, r, cfg.success_radius);
  m.sdtw = bm.sr * m.ndtw;
  m.cls = cls(traj.nodes, episode, graph, cfg);
  const GroundingMetrics g = grounding_metrics(traj, episode, graph, cfg);
  m.has_grounding = g.applicable;
  m.rgs = g.rgs;
  m.rgspl = g.rgspl;
  return m;
}

MetricsReport evaluate(std::span<const TrajectoryRecord> trajectories,
                       std::span<const Episode> episodes,
                       std::span<const NavGraph> graphs, const MetricsConfig& cfg) {
  if (trajectories.size() != episodes.size() || trajectories.size() != graphs.size())
    throw input_error("evaluate: trajectory/episode/graph counts disagree");
  if (trajectories.empty()) throw input_error("evaluate: nothing to evaluate");

  MetricsReport report;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const EpisodeMetrics m =
        evaluate_episode(trajectories[i], episodes[i], graphs[i], cfg);
    report.per_episode.push_back(m);
    report.mean.tl += m.tl;
    report.mean.ne += m.ne;
    report.mean.sr += m.sr;
    report.mean.osr += m.osr;
    report.mean.spl += m.spl;
    report.mean.ndtw += m.ndtw;
    report.mean.sdtw += m.sdtw;
    report.mean.cls += m.cls;
    if (m.has_grounding) {
      report.mean.rgs += m.rgs;
      report.mean.rgspl += m.rgspl;
      ++report.grounding_count;
    }
  }
  report.episode_count = trajectories.size();
  const double n = static_cast<double>(report.episode_count);
  report.mean.tl /= n;
  report.mean.ne /= n;
  report.mean.sr /= n;
  report.mean.osr /= n;
  report.mean.spl /= n;
  report.mean.ndtw /= n;
  report.mean.sdtw /= n;
  report.mean.cls /= n;
  if (report.grounding_count > 0) {
    report.mean.rgs /= static_cast<double>(report.grounding_count);
    report.mean.rgspl /= static_cast<double>(report.grounding_count);
    report.mean.has_grounding = true;
  }
  return report;
}

namespace {

nlohmann::json metrics_to_json(const EpisodeMetrics& m) {
  nlohmann::json j{{"TL", m.tl},     {"NE", m.ne},     {"SR", m.sr},
                   {"OSR", m.osr},   {"SPL", m.spl},   {"nDTW", m.ndtw},
                   {"SDTW", m.sdtw}, {"CLS", m.cls}};
  if (m.has_grounding) {
    j["RGS"] = m.rgs;
    j["RGSPL"] = m.rgspl;
  }
  return j;
}

}  // namespace

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["aggregate"] = metrics_to_json(mean);
  j["episode_count"] = episode_count;
  j["grounding_count"] = grounding_count;
  j["episodes"] = nlohmann::json::array();
  for (const EpisodeMetrics& m : per_episode) j["episodes"].push_back(metrics_to_json(m));
  return j.dump(2) + "\n";
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  const char* headers[] = {"TL", "NE", "SR", "OSR", "SPL", "nDTW", "SDTW", "CLS",
                           "RGS", "RGSPL"};
  os << std::setw(8) << "episode";
  for (const char* head : headers) os << std::setw(9) << head;
  os << "\n";
  auto row = [&](const std::string& name, const EpisodeMetrics& m) {
    os << std::setw(8) << name;
    for (double v : {m.tl, m.ne, m.sr, m.osr, m.spl, m.ndtw, m.sdtw, m.cls})
      os << std::setw(9) << v;
    if (m.has_grounding)
      os << std::setw(9) << m.rgs << std::setw(9) << m.rgspl;
    else
      os << std::setw(9) << "-" << std::setw(9) << "-";
    os << "\n";
  };
  for (std::size_t i = 0; i < per_episode.size(); ++i)
    row(std::to_string(i), per_episode[i]);
  row("mean", mean);
  return os.str();
}

}  // namespace gsmap
