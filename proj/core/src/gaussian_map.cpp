#include "gsmap/gaussian_map.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace gsmap {

void Gaussian::validate() const {
  if (!mu.allFinite() || !scale.allFinite() || !quat.allFinite() ||
      !color.allFinite() || !std::isfinite(opacity) || !std::isfinite(semantic))
    throw input_error("Gaussian: non-finite field");
  if (!(scale.minCoeff() > 0.f)) throw input_error("Gaussian: scale must be > 0");
  if (std::abs(quat.norm() - 1.f) > 1e-6f)
    throw input_error("Gaussian: quaternion is not unit length");
  if (opacity < 0.f || opacity > 1.f)
    throw input_error("Gaussian: opacity outside [0,1]");
  if (color.minCoeff() < 0.f || color.maxCoeff() > 1.f)
    throw input_error("Gaussian: color outside [0,1]");
}

Mat3d quat_to_rotation(const Vec4d& q) {
  const Vec4d u = q / q.norm();
  const double w = u[0], x = u[1], y = u[2], z = u[3];
  Mat3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Mat3d covariance_from(const Vec3d& scale, const Vec4d& quat) {
  const Mat3d r = quat_to_rotation(quat);
  const Mat3d m = r * scale.asDiagonal();
  return m * m.transpose();
}

namespace {

struct VoxelKey {
  int64_t x, y, z;
  bool operator==(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const {
    uint64_t h = 1469598103934665603ull;
    for (int64_t v : {k.x, k.y, k.z}) {
      h ^= static_cast<uint64_t>(v);
      h *= 1099511628211ull;
    }
    return static_cast<std::size_t>(h);
  }
};

/// First point per voxel cell wins, in input order.
std::vector<std::size_t> voxel_downsample(const PointCloud& pc, double cell) {
  std::vector<std::size_t> keep;
  std::unordered_map<VoxelKey, bool, VoxelKeyHash> seen;
  seen.reserve(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Vec3d& p = pc.positions[i];
    const VoxelKey key{static_cast<int64_t>(std::floor(p.x() / cell)),
                       static_cast<int64_t>(std::floor(p.y() / cell)),
                       static_cast<int64_t>(std::floor(p.z() / cell))};
    if (seen.emplace(key, true).second) keep.push_back(i);
  }
  return keep;
}

/// Mean distance to the (up to) 3 nearest neighbors of every point.
/// Uniform-grid lookup with expanding search radius; brute force under a
/// small count.
std::vector<double> mean_nn3_distance(const std::vector<Vec3d>& pts) {
  const std::size_t n = pts.size();
  std::vector<double> out(n, 0.0);
  if (n < 2) return out;

  const int k_want = static_cast<int>(std::min<std::size_t>(3, n - 1));

  auto mean_of_best = [&](std::size_t i, const std::vector<std::size_t>& cand) {
    double best[3] = {INFINITY, INFINITY, INFINITY};
    for (std::size_t j : cand) {
      if (j == i) continue;
      const double d = (pts[i] - pts[j]).norm();
      if (d < best[2]) {
        best[2] = d;
        if (best[2] < best[1]) std::swap(best[1], best[2]);
        if (best[1] < best[0]) std::swap(best[0], best[1]);
      }
    }
    double sum = 0.0;
    for (int k = 0; k < k_want; ++k) sum += best[k];
    return sum / k_want;
  };

  if (n <= 256) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    for (std::size_t i = 0; i < n; ++i) out[i] = mean_of_best(i, all);
    return out;
  }

  Vec3d lo = pts[0], hi = pts[0];
  for (const Vec3d& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double extent = std::max((hi - lo).maxCoeff(), 1e-9);
  const double cell = extent / std::max(1.0, std::cbrt(static_cast<double>(n)));

  auto cell_of = [&](const Vec3d& p) {
    return VoxelKey{static_cast<int64_t>(std::floor(p.x() / cell)),
                    static_cast<int64_t>(std::floor(p.y() / cell)),
                    static_cast<int64_t>(std::floor(p.z() / cell))};
  };
  std::unordered_map<VoxelKey, std::vector<std::size_t>, VoxelKeyHash> grid;
  grid.reserve(n);
  for (std::size_t i = 0; i < n; ++i) grid[cell_of(pts[i])].push_back(i);

  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < n; ++i) {
    const VoxelKey c = cell_of(pts[i]);
    for (int ring = 1;; ++ring) {
      cand.clear();
      for (int64_t dx = -ring; dx <= ring; ++dx)
        for (int64_t dy = -ring; dy <= ring; ++dy)
          for (int64_t dz = -ring; dz <= ring; ++dz) {
            auto it = grid.find(VoxelKey{c.x + dx, c.y + dy, c.z + dz});
            if (it != grid.end())
              cand.insert(cand.end(), it->second.begin(), it->second.end());
          }
      // Neighbors within (ring-1)*cell of the cell border are guaranteed
      // covered; accept once enough candidates are strictly inside.
      if (static_cast<int>(cand.size()) > k_want || ring > 64) {
        const double safe = (ring - 1) * cell;
        const double m = mean_of_best(i, cand);
        if (m <= safe || ring > 64 || cand.size() == n) {
          out[i] = m;
          break;
        }
      }
    }
  }
  return out;
}

}  // namespace

InitResult init_from_pointcloud(const PointCloud& pc, const InitConfig& cfg) {
  if (pc.empty()) throw input_error("init_from_pointcloud: empty cloud");

  std::vector<std::size_t> keep;
  if (cfg.voxel_cell > 0.0) {
    keep = voxel_downsample(pc, cfg.voxel_cell);
  } else {
    keep.resize(pc.size());
    for (std::size_t i = 0; i < pc.size(); ++i) keep[i] = i;
  }

  std::vector<Vec3d> pts(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) pts[i] = pc.positions[keep[i]];
  const std::vector<double> nn = mean_nn3_distance(pts);

  Rng rng(cfg.seed);
  InitResult res;
  res.map.gaussians.resize(keep.size());
  res.source_indices = keep;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    Gaussian& g = res.map.gaussians[i];
    g.mu = pts[i].cast<float>();
    g.color = pc.colors[keep[i]].cast<float>();
    g.quat = Vec4f(1.f, 0.f, 0.f, 0.f);
    const double s = pts.size() < 2
                         ? cfg.fallback_scale
                         : std::clamp(cfg.nn_scale_factor * nn[i], cfg.scale_min,
                                      cfg.scale_max);
    g.scale = Vec3f::Constant(static_cast<float>(s));
    g.opacity = static_cast<float>(cfg.initial_opacity);
    g.semantic = static_cast<float>(
        rng.uniform(-cfg.sem_init_range, cfg.sem_init_range));
  }
  return res;
}

GaussianFeature pooled_feature(const GaussianMap& map,
                               std::span<const std::size_t> selection) {
  if (selection.empty()) throw input_error("pooled_feature: empty selection");
  GaussianFeature sum = GaussianFeature::Zero();
  for (std::size_t idx : selection) {
    if (idx >= map.size()) throw input_error("pooled_feature: index out of range");
    const Gaussian& g = map.gaussians[idx];
    sum[0] += g.mu.x();
    sum[1] += g.mu.y();
    sum[2] += g.mu.z();
    sum[3] += g.color.x();
    sum[4] += g.color.y();
    sum[5] += g.color.z();
    sum[6] += g.semantic;
  }
  return sum / static_cast<double>(selection.size());
}

namespace {

constexpr char kMapMagic[4] = {'G', '3', 'D', 'M'};
constexpr uint32_t kMapVersion = 1;

void write_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32_le(std::istream& is, const std::filesystem::path& path,
                     std::streamoff offset) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw format_error(path.string() + ": truncated at byte offset " +
                       std::to_string(offset));
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_map(const GaussianMap& map, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw input_error("save_map: cannot open " + path.string());
  os.write(kMapMagic, 4);
  write_u32_le(os, kMapVersion);
  write_u32_le(os, static_cast<uint32_t>(map.size()));
  std::vector<float> rec(15);
  for (const Gaussian& g : map.gaussians) {
    rec[0] = g.mu.x(); rec[1] = g.mu.y(); rec[2] = g.mu.z();
    rec[3] = g.scale.x(); rec[4] = g.scale.y(); rec[5] = g.scale.z();
    rec[6] = g.quat[0]; rec[7] = g.quat[1]; rec[8] = g.quat[2]; rec[9] = g.quat[3];
    rec[10] = g.opacity;
    rec[11] = g.color.x(); rec[12] = g.color.y(); rec[13] = g.color.z();
    rec[14] = g.semantic;
    os.write(reinterpret_cast<const char*>(rec.data()),
             static_cast<std::streamsize>(rec.size() * sizeof(float)));
  }
  if (!os) throw input_error("save_map: write failed for " + path.string());
}

GaussianMap load_map(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("load_map: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMapMagic, 4) != 0)
    throw format_error(path.string() + ": bad magic at byte offset 0");
  const uint32_t version = read_u32_le(is, path, 4);
  if (version != kMapVersion)
    throw format_error(path.string() + ": unsupported version at byte offset 4");
  const uint32_t count = read_u32_le(is, path, 8);
  GaussianMap map;
  map.gaussians.resize(count);
  std::vector<float> rec(15);
  for (uint32_t i = 0; i < count; ++i) {
    if (!is.read(reinterpret_cast<char*>(rec.data()),
                 static_cast<std::streamsize>(rec.size() * sizeof(float))))
      throw format_error(path.string() + ": truncated at byte offset " +
                         std::to_string(12 + static_cast<long long>(i) * 60 +
                                        is.gcount()));
    Gaussian& g = map.gaussians[i];
    g.mu = Vec3f(rec[0], rec[1], rec[2]);
    g.scale = Vec3f(rec[3], rec[4], rec[5]);
    g.quat = Vec4f(rec[6], rec[7], rec[8], rec[9]);
    g.opacity = rec[10];
    g.color = Vec3f(rec[11], rec[12], rec[13]);
    g.semantic = rec[14];
  }
  return map;
}

}  // namespace gsmap
