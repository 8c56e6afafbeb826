#include "gsmap/gaussian_map.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

using namespace gsmap;

namespace {

Vec4d axis_angle_quat(const Vec3d& axis, double angle) {
  const Vec3d a = axis.normalized();
  const double h = 0.5 * angle;
  return Vec4d(std::cos(h), a.x() * std::sin(h), a.y() * std::sin(h),
               a.z() * std::sin(h));
}

GaussianMap random_map(std::size_t n, uint64_t seed) {
  Rng rng(seed);
  GaussianMap map;
  map.gaussians.resize(n);
  for (Gaussian& g : map.gaussians) {
    g.mu = Vec3f(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    g.scale = Vec3f(rng.uniform(0.01, 0.5), rng.uniform(0.01, 0.5),
                    rng.uniform(0.01, 0.5));
    Vec4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    g.quat = q.cast<float>();
    g.quat.normalize();
    g.opacity = static_cast<float>(rng.uniform(0.0, 1.0));
    g.color = Vec3f(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1));
    g.semantic = static_cast<float>(rng.uniform(-1, 1));
  }
  return map;
}

}  // namespace

TEST_CASE("covariance_from isotropic identity") {
  const Mat3d cov = covariance_from(Vec3d::Ones(), Vec4d(1, 0, 0, 0));
  CHECK((cov - Mat3d::Identity()).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("covariance_from diagonal with identity rotation") {
  const Mat3d cov = covariance_from(Vec3d(1, 2, 3), Vec4d(1, 0, 0, 0));
  Mat3d expected = Mat3d::Zero();
  expected.diagonal() << 1.0, 4.0, 9.0;
  CHECK((cov - expected).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("covariance_from axis swap under 90 degree z rotation") {
  const Vec4d q = axis_angle_quat(Vec3d::UnitZ(), M_PI / 2);
  const Mat3d cov = covariance_from(Vec3d(2, 1, 1), q);
  Mat3d expected = Mat3d::Zero();
  expected.diagonal() << 1.0, 4.0, 1.0;
  CHECK((cov - expected).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("covariance_from is symmetric PSD with scale^2 eigenvalues") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec3d scale(rng.uniform(0.01, 3.0), rng.uniform(0.01, 3.0),
                      rng.uniform(0.01, 3.0));
    Vec4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    const Mat3d cov = covariance_from(scale, q);
    CHECK((cov - cov.transpose()).cwiseAbs().maxCoeff() <= 1e-12);

    Eigen::SelfAdjointEigenSolver<Mat3d> eig(cov);
    Vec3d expected = scale.cwiseProduct(scale);
    std::sort(expected.data(), expected.data() + 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(eig.eigenvalues()[i] > 0.0);
      CHECK(eig.eigenvalues()[i] ==
            doctest::Approx(expected[i]).epsilon(1e-9));
    }

    // q and -q give the same covariance.
    const Mat3d cov_neg = covariance_from(scale, -q);
    CHECK((cov - cov_neg).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("init_from_pointcloud copies a single point") {
  PointCloud pc;
  pc.positions.push_back(Vec3d(0.5, -0.25, 2.0));
  pc.colors.push_back(Vec3d(0.1, 0.9, 0.3));
  InitConfig cfg;
  cfg.voxel_cell = 0.0;
  const InitResult res = init_from_pointcloud(pc, cfg);
  REQUIRE(res.map.size() == 1);
  const Gaussian& g = res.map.gaussians[0];
  CHECK(g.mu.x() == doctest::Approx(0.5));
  CHECK(g.color.y() == doctest::Approx(0.9));
  CHECK(g.scale.x() == doctest::Approx(cfg.fallback_scale));
  CHECK(g.opacity == doctest::Approx(cfg.initial_opacity));
  CHECK(std::abs(g.semantic) <= cfg.sem_init_range);
  g.validate();
}

TEST_CASE("init_from_pointcloud keeps cardinality without downsampling") {
  Rng rng(5);
  PointCloud pc;
  for (int i = 0; i < 257; ++i) {
    pc.positions.push_back(Vec3d(rng.uniform(-1, 1), rng.uniform(-1, 1),
                                 rng.uniform(-1, 1)));
    pc.colors.push_back(Vec3d(0.5, 0.5, 0.5));
  }
  InitConfig cfg;
  cfg.voxel_cell = 0.0;
  const InitResult res = init_from_pointcloud(pc, cfg);
  CHECK(res.map.size() == pc.size());
  for (std::size_t i = 0; i < res.source_indices.size(); ++i)
    CHECK(res.source_indices[i] == i);
}

TEST_CASE("init_from_pointcloud nearest-neighbor scale rule") {
  // Two points 0.2 m apart with factor 0.5: each scale is 0.1 m isotropic.
  PointCloud pc;
  pc.positions.push_back(Vec3d(0, 0, 1));
  pc.positions.push_back(Vec3d(0.2, 0, 1));
  pc.colors.assign(2, Vec3d(0.5, 0.5, 0.5));
  InitConfig cfg;
  cfg.voxel_cell = 0.0;
  const InitResult res = init_from_pointcloud(pc, cfg);
  REQUIRE(res.map.size() == 2);
  for (const Gaussian& g : res.map.gaussians) {
    CHECK(g.scale.x() == doctest::Approx(0.1));
    CHECK(g.scale.y() == doctest::Approx(0.1));
    CHECK(g.scale.z() == doctest::Approx(0.1));
  }
}

TEST_CASE("init_from_pointcloud grid scale matches brute force") {
  // Enough points to engage the grid-accelerated neighbor search; compare
  // against direct enumeration.
  Rng rng(17);
  PointCloud pc;
  for (int i = 0; i < 500; ++i) {
    pc.positions.push_back(
        Vec3d(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)));
    pc.colors.push_back(Vec3d(0.5, 0.5, 0.5));
  }
  InitConfig cfg;
  cfg.voxel_cell = 0.0;
  cfg.scale_min = 1e-6;
  cfg.scale_max = 100.0;
  const InitResult res = init_from_pointcloud(pc, cfg);
  REQUIRE(res.map.size() == 500);
  Rng pick(3);
  for (int t = 0; t < 30; ++t) {
    const std::size_t i = pick.uniform_index(500);
    std::vector<double> dists;
    for (std::size_t j = 0; j < pc.size(); ++j)
      if (j != i) dists.push_back((pc.positions[i] - pc.positions[j]).norm());
    std::sort(dists.begin(), dists.end());
    const double expected = 0.5 * (dists[0] + dists[1] + dists[2]) / 3.0;
    CHECK(res.map.gaussians[i].scale.x() ==
          doctest::Approx(expected).epsilon(1e-5));
  }
}

TEST_CASE("init_from_pointcloud rejects an empty cloud") {
  CHECK_THROWS_AS(init_from_pointcloud(PointCloud{}, InitConfig{}), input_error);
}

TEST_CASE("voxel downsampling keeps one point per cell") {
  PointCloud pc;
  for (int i = 0; i < 10; ++i) {
    pc.positions.push_back(Vec3d(0.001 * i, 0, 0));  // all in one 5cm cell
    pc.colors.push_back(Vec3d(0.5, 0.5, 0.5));
  }
  pc.positions.push_back(Vec3d(1.0, 0, 0));
  pc.colors.push_back(Vec3d(0.5, 0.5, 0.5));
  InitConfig cfg;  // default cell 0.05
  const InitResult res = init_from_pointcloud(pc, cfg);
  CHECK(res.map.size() == 2);
  CHECK(res.source_indices[0] == 0);   // first in cell wins
  CHECK(res.source_indices[1] == 10);
}

TEST_CASE("pooled_feature of a single element") {
  const GaussianMap map = random_map(5, 31);
  const std::size_t sel[] = {2};
  const GaussianFeature f = pooled_feature(map, sel);
  const Gaussian& g = map.gaussians[2];
  CHECK(f[0] == doctest::Approx(g.mu.x()));
  CHECK(f[3] == doctest::Approx(g.color.x()));
  CHECK(f[6] == doctest::Approx(g.semantic));
}

TEST_CASE("pooled_feature averages semantics") {
  GaussianMap map = random_map(2, 32);
  map.gaussians[0].semantic = 0.0f;
  map.gaussians[1].semantic = 1.0f;
  const std::size_t sel[] = {0, 1};
  CHECK(pooled_feature(map, sel)[6] == doctest::Approx(0.5));
}

TEST_CASE("pooled_feature component-wise mean of three hand-set Gaussians") {
  GaussianMap map;
  map.gaussians.resize(3);
  map.gaussians[0].mu = Vec3f(1, 0, 0);
  map.gaussians[1].mu = Vec3f(0, 2, 0);
  map.gaussians[2].mu = Vec3f(0, 0, 3);
  map.gaussians[0].color = Vec3f(0.3f, 0, 0);
  map.gaussians[1].color = Vec3f(0, 0.6f, 0);
  map.gaussians[2].color = Vec3f(0, 0, 0.9f);
  map.gaussians[0].semantic = 0.1f;
  map.gaussians[1].semantic = 0.2f;
  map.gaussians[2].semantic = 0.6f;
  const std::size_t sel[] = {0, 1, 2};
  const GaussianFeature f = pooled_feature(map, sel);
  CHECK(f[0] == doctest::Approx(1.0 / 3));
  CHECK(f[1] == doctest::Approx(2.0 / 3));
  CHECK(f[2] == doctest::Approx(1.0));
  CHECK(f[3] == doctest::Approx(0.1));
  CHECK(f[4] == doctest::Approx(0.2));
  CHECK(f[5] == doctest::Approx(0.3));
  CHECK(f[6] == doctest::Approx(0.3));
}

TEST_CASE("pooled_feature is permutation invariant") {
  const GaussianMap map = random_map(8, 33);
  std::vector<std::size_t> sel(8);
  std::iota(sel.begin(), sel.end(), 0u);
  const GaussianFeature a = pooled_feature(map, sel);
  std::reverse(sel.begin(), sel.end());
  std::swap(sel[1], sel[5]);
  const GaussianFeature b = pooled_feature(map, sel);
  CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("pooled_feature rejects empty or out-of-range selections") {
  const GaussianMap map = random_map(3, 34);
  CHECK_THROWS_AS(pooled_feature(map, std::span<const std::size_t>{}), input_error);
  const std::size_t bad[] = {7};
  CHECK_THROWS_AS(pooled_feature(map, bad), input_error);
}

TEST_CASE("map serialization round trip is bit exact") {
  const GaussianMap map = random_map(100, 35);
  const auto path = std::filesystem::temp_directory_path() / "gsmap_round.g3dm";
  save_map(map, path);
  const GaussianMap loaded = load_map(path);
  REQUIRE(loaded.size() == map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const Gaussian& a = map.gaussians[i];
    const Gaussian& b = loaded.gaussians[i];
    CHECK(std::memcmp(a.mu.data(), b.mu.data(), 12) == 0);
    CHECK(std::memcmp(a.scale.data(), b.scale.data(), 12) == 0);
    CHECK(std::memcmp(a.quat.data(), b.quat.data(), 16) == 0);
    CHECK(a.opacity == b.opacity);
    CHECK(std::memcmp(a.color.data(), b.color.data(), 12) == 0);
    CHECK(a.semantic == b.semantic);
  }
  std::filesystem::remove(path);
}

TEST_CASE("map load rejects corruption") {
  const auto path = std::filesystem::temp_directory_path() / "gsmap_bad.g3dm";
  {
    std::ofstream os(path, std::ios::binary);
    os << "G3DMxxxx";  // bad version bytes follow magic
  }
  CHECK_THROWS_AS(load_map(path), format_error);

  const GaussianMap map = random_map(4, 36);
  save_map(map, path);
  // Truncate the last record.
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  CHECK_THROWS_AS(load_map(path), format_error);
  std::filesystem::remove(path);
}

TEST_CASE("empty map saves and loads") {
  GaussianMap map;
  const auto path = std::filesystem::temp_directory_path() / "gsmap_empty.g3dm";
  save_map(map, path);
  CHECK(load_map(path).empty());
  std::filesystem::remove(path);
}

TEST_CASE("gaussian validation catches bad fields") {
  Gaussian g;
  g.validate();
  g.opacity = 1.5f;
  CHECK_THROWS_AS(g.validate(), input_error);
  g.opacity = 0.5f;
  g.scale = Vec3f(0.f, 1.f, 1.f);
  CHECK_THROWS_AS(g.validate(), input_error);
  g.scale = Vec3f::Ones();
  g.quat = Vec4f(2.f, 0.f, 0.f, 0.f);
  CHECK_THROWS_AS(g.validate(), input_error);
}
