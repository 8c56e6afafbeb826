#include "gsmap/rasterizer.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace gsmap;

namespace {

CameraIntrinsics small_cam(int w = 64, int h = 64) {
  return CameraIntrinsics(0.5 * w, 0.5 * h, 0.5 * (w - 1), 0.5 * (h - 1), w, h);
}

GaussianMap random_scene(std::size_t n, uint64_t seed, double opacity_max = 0.9) {
  Rng rng(seed);
  GaussianMap map;
  map.gaussians.resize(n);
  for (Gaussian& g : map.gaussians) {
    g.mu = Vec3f(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                 rng.uniform(1.0, 6.0));
    g.scale = Vec3f(rng.uniform(0.02, 0.35), rng.uniform(0.02, 0.35),
                    rng.uniform(0.02, 0.35));
    Vec4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    g.quat = q.cast<float>();
    g.quat.normalize();
    g.opacity = static_cast<float>(rng.uniform(0.05, opacity_max));
    g.color = Vec3f(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1));
    g.semantic = static_cast<float>(rng.uniform(0, 1));
  }
  return map;
}

double max_channel_diff(const RenderedFrame& a, const RenderedFrame& b) {
  double m = 0.0;
  auto cmp = [&m](const Image& x, const Image& y) {
    for (std::size_t i = 0; i < x.size(); ++i)
      m = std::max(m, std::abs(x.data()[i] - y.data()[i]));
  };
  cmp(a.rgb, b.rgb);
  cmp(a.depth, b.depth);
  cmp(a.semantic, b.semantic);
  cmp(a.alpha_acc, b.alpha_acc);
  return m;
}

GaussianValues single_gaussian(const Vec3d& mu, double scale, double opacity,
                               const Vec3d& color, double semantic = 0.0) {
  GaussianValues v;
  v.mu = mu;
  v.scale = Vec3d::Constant(scale);
  v.opacity = opacity;
  v.color = color;
  v.semantic = semantic;
  return v;
}

}  // namespace

TEST_CASE("splat on-axis isotropic closed form") {
  const auto intr = small_cam(64, 64);
  const double z = 2.0, s = 0.2;
  // Place the Gaussian on the optical axis (principal point is centered).
  const Vec3d mu = *backproject_pixel(intr, intr.cu, intr.cv, z);
  GaussianValues g = single_gaussian(mu, s, 0.8, Vec3d(1, 0, 0));
  RenderConfig cfg;
  const auto sp = splat(g, 0, intr, Pose{}, cfg);
  REQUIRE(sp.has_value());
  const double expected_var_x = intr.fx * s / z * (intr.fx * s / z);
  const double expected_var_y = intr.fy * s / z * (intr.fy * s / z);
  CHECK(sp->cov2d(0, 0) == doctest::Approx(expected_var_x + kBlurFloor).epsilon(1e-9));
  CHECK(sp->cov2d(1, 1) == doctest::Approx(expected_var_y + kBlurFloor).epsilon(1e-9));
  CHECK(std::abs(sp->cov2d(0, 1)) <= 1e-9);
  CHECK(sp->z == doctest::Approx(z));

  // Doubling the depth scales the (pre-floor) footprint by 1/4.
  g.mu = *backproject_pixel(intr, intr.cu, intr.cv, 2.0 * z);
  const auto sp2 = splat(g, 0, intr, Pose{}, cfg);
  REQUIRE(sp2.has_value());
  CHECK(sp2->cov2d(0, 0) - kBlurFloor ==
        doctest::Approx(0.25 * expected_var_x).epsilon(1e-9));
}

TEST_CASE("splat culls behind the near plane") {
  const auto intr = small_cam();
  RenderConfig cfg;
  const GaussianValues g = single_gaussian(Vec3d(0, 0, -1), 0.1, 1.0, Vec3d::Ones());
  CHECK_FALSE(splat(g, 0, intr, Pose{}, cfg).has_value());
}

TEST_CASE("splat culls footprints that miss the image") {
  const auto intr = small_cam();
  RenderConfig cfg;
  const GaussianValues g =
      single_gaussian(Vec3d(100.0, 0, 2.0), 0.01, 1.0, Vec3d::Ones());
  CHECK_FALSE(splat(g, 0, intr, Pose{}, cfg).has_value());
}

TEST_CASE("alpha_at equals opacity at the center") {
  const auto intr = small_cam();
  RenderConfig cfg;
  const GaussianValues g = single_gaussian(Vec3d(0, 0, 2), 0.2, 0.73, Vec3d::Ones());
  const auto sp = splat(g, 0, intr, Pose{}, cfg);
  REQUIRE(sp.has_value());
  CHECK(alpha_at(*sp, sp->mu2d) == doctest::Approx(0.73));
}

TEST_CASE("alpha_at half maximum at sqrt(2 ln 2) for unit conic") {
  SplattedGaussian s;
  s.mu2d = Vec2d(10, 10);
  s.cov2d = Mat2d::Identity();
  s.conic = Mat2d::Identity();
  s.opacity = 1.0;
  const double r = std::sqrt(2.0 * std::log(2.0));
  CHECK(alpha_at(s, Vec2d(10 + r, 10)) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("alpha_at clamps at 0.999") {
  SplattedGaussian s;
  s.mu2d = Vec2d::Zero();
  s.cov2d = Mat2d::Identity();
  s.conic = Mat2d::Identity();
  s.opacity = 1.0;
  CHECK(alpha_at(s, Vec2d::Zero()) == doctest::Approx(0.999));
}

TEST_CASE("render of an empty map yields the background") {
  const auto intr = small_cam(32, 32);
  RenderConfig cfg;
  cfg.background = Vec3d(0.2, 0.4, 0.6);
  const RenderedFrame f = render(GaussianMap{}, intr, Pose{}, cfg);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      CHECK(f.rgb.at(y, x, 0) == doctest::Approx(0.2));
      CHECK(f.rgb.at(y, x, 2) == doctest::Approx(0.6));
      CHECK(f.depth.at(y, x) == 0.0);
      CHECK(f.semantic.at(y, x) == 0.0);
      CHECK(f.alpha_acc.at(y, x) == 0.0);
    }
}

TEST_CASE("single opaque splat renders its color and depth at the center") {
  // Principal point exactly on pixel (15,15) so the splat center hits a
  // pixel center and alpha there is the clamped 0.999.
  const CameraIntrinsics intr(16, 16, 15, 15, 32, 32);
  GaussianMap map;
  Gaussian g;
  g.mu = Vec3f(0, 0, 3);
  g.scale = Vec3f::Constant(1.0f);
  g.opacity = 1.0f;
  g.color = Vec3f(0.9f, 0.1f, 0.4f);
  g.semantic = 0.7f;
  map.gaussians.push_back(g);
  RenderConfig cfg;
  const RenderedFrame f = render(map, intr, Pose{}, cfg);
  const int cy = 15, cx = 15;
  CHECK(f.rgb.at(cy, cx, 0) ==
        doctest::Approx(0.999 * static_cast<double>(g.color.x())).epsilon(1e-9));
  CHECK(f.depth.at(cy, cx) == doctest::Approx(0.999 * 3.0).epsilon(1e-9));
  CHECK(f.semantic.at(cy, cx) ==
        doctest::Approx(0.999 * static_cast<double>(g.semantic)).epsilon(1e-9));
  CHECK(f.alpha_acc.at(cy, cx) == doctest::Approx(0.999).epsilon(1e-9));
}

TEST_CASE("front-to-back compositing hand oracle") {
  // Front splat color (1,0,0) alpha 0.5 depth 1; back splat color (0,0,1)
  // alpha ~1 depth 2. Expect rgb ~ (0.5, 0, 0.5), depth ~ 1.5 at center.
  const auto intr = small_cam(32, 32);
  GaussianMap map;
  Gaussian front;
  front.mu = Vec3f(0, 0, 1);
  front.scale = Vec3f::Constant(2.0f);
  front.opacity = 0.5f;
  front.color = Vec3f(1, 0, 0);
  Gaussian back = front;
  back.mu = Vec3f(0, 0, 2);
  back.opacity = 1.0f;
  back.color = Vec3f(0, 0, 1);
  map.gaussians.push_back(front);
  map.gaussians.push_back(back);

  RenderConfig cfg;
  const RenderedFrame f = render(map, intr, Pose{}, cfg);
  const int cy = 15, cx = 15;
  // With the 0.999 clamp on the back splat: w1 = 0.5, w2 = 0.5*0.999.
  CHECK(f.rgb.at(cy, cx, 0) == doctest::Approx(0.5).epsilon(1e-3));
  CHECK(f.rgb.at(cy, cx, 1) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(f.rgb.at(cy, cx, 2) == doctest::Approx(0.4995).epsilon(1e-3));
  CHECK(f.depth.at(cy, cx) ==
        doctest::Approx(0.5 * 1.0 + 0.4995 * 2.0).epsilon(1e-3));
}

TEST_CASE("tile renderer equals the brute-force reference") {
  RenderConfig cfg;
  const auto intr = small_cam(64, 64);
  double worst = 0.0;
  for (uint64_t seed = 100; seed < 120; ++seed) {
    Rng meta(seed);
    const std::size_t n = 20 + meta.uniform_index(180);
    const GaussianMap map = random_scene(n, seed);
    const RenderedFrame tiled = render(map, intr, Pose{}, cfg);
    const RenderedFrame ref = render_reference(map, intr, Pose{}, cfg);
    worst = std::max(worst, max_channel_diff(tiled, ref));
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("single splat renders bit-identically with early stop disabled") {
  const auto intr = small_cam(48, 48);
  const GaussianMap map = random_scene(1, 7);
  RenderConfig cfg;
  cfg.early_stop = 0.0;
  const RenderedFrame a = render(map, intr, Pose{}, cfg);
  const RenderedFrame b = render_reference(map, intr, Pose{}, cfg);
  for (std::size_t i = 0; i < a.rgb.size(); ++i)
    CHECK(a.rgb.data()[i] == b.rgb.data()[i]);
  for (std::size_t i = 0; i < a.depth.size(); ++i) {
    CHECK(a.depth.data()[i] == b.depth.data()[i]);
    CHECK(a.alpha_acc.data()[i] == b.alpha_acc.data()[i]);
  }
}

TEST_CASE("compositing weights never exceed one") {
  const auto intr = small_cam(48, 48);
  const GaussianMap map = random_scene(150, 42, 0.95);
  RenderConfig cfg;
  const RenderedFrame f = render(map, intr, Pose{}, cfg);
  for (std::size_t i = 0; i < f.alpha_acc.size(); ++i) {
    CHECK(f.alpha_acc.data()[i] >= 0.0);
    CHECK(f.alpha_acc.data()[i] <= 1.0);
  }
}

TEST_CASE("fully transparent Gaussian leaves the frame unchanged") {
  const auto intr = small_cam(48, 48);
  GaussianMap map = random_scene(30, 43);
  RenderConfig cfg;
  const RenderedFrame before = render(map, intr, Pose{}, cfg);
  Gaussian ghost;
  ghost.mu = Vec3f(0, 0, 2);
  ghost.scale = Vec3f::Constant(0.5f);
  ghost.opacity = 0.0f;
  ghost.color = Vec3f(1, 1, 1);
  map.gaussians.insert(map.gaussians.begin() + 10, ghost);
  const RenderedFrame after = render(map, intr, Pose{}, cfg);
  CHECK(max_channel_diff(before, after) == 0.0);
}

TEST_CASE("permuting input order does not change the output") {
  const auto intr = small_cam(48, 48);
  GaussianMap map = random_scene(60, 44);
  RenderConfig cfg;
  const RenderedFrame a = render(map, intr, Pose{}, cfg);
  GaussianMap permuted;
  permuted.gaussians = map.gaussians;
  std::reverse(permuted.gaussians.begin(), permuted.gaussians.end());
  const RenderedFrame b = render(permuted, intr, Pose{}, cfg);
  CHECK(max_channel_diff(a, b) <= 1e-14);
}

TEST_CASE("alpha_acc is monotone in added Gaussians") {
  const auto intr = small_cam(32, 32);
  RenderConfig cfg;
  GaussianMap map = random_scene(20, 45);
  const RenderedFrame before = render(map, intr, Pose{}, cfg);
  GaussianMap more = map;
  const GaussianMap extra = random_scene(5, 46);
  more.gaussians.insert(more.gaussians.end(), extra.gaussians.begin(),
                        extra.gaussians.end());
  const RenderedFrame after = render(more, intr, Pose{}, cfg);
  for (std::size_t i = 0; i < before.alpha_acc.size(); ++i)
    CHECK(after.alpha_acc.data()[i] >= before.alpha_acc.data()[i] - 1e-12);
}

TEST_CASE("render is deterministic across thread counts") {
  const auto intr = small_cam(64, 64);
  const GaussianMap map = random_scene(120, 47);
  RenderConfig cfg1;
  cfg1.threads = 1;
  RenderConfig cfg4;
  cfg4.threads = 4;
  const RenderedFrame a = render(map, intr, Pose{}, cfg1);
  const RenderedFrame b = render(map, intr, Pose{}, cfg4);
  CHECK(max_channel_diff(a, b) == 0.0);
}

TEST_CASE("dominant index picks the largest-weight splat") {
  const auto intr = small_cam(32, 32);
  GaussianMap map;
  Gaussian front;
  front.mu = Vec3f(0, 0, 1);
  front.scale = Vec3f::Constant(1.0f);
  front.opacity = 0.3f;
  front.color = Vec3f(1, 0, 0);
  Gaussian back = front;
  back.mu = Vec3f(0, 0, 2);
  back.opacity = 0.95f;
  map.gaussians.push_back(front);
  map.gaussians.push_back(back);
  RenderConfig cfg;
  const auto values = lift(map);
  const auto idx = render_dominant_index(values, intr, Pose{}, cfg);
  // Center pixel: w_front = 0.3, w_back = 0.7*0.95 = 0.665 -> back wins.
  CHECK(idx[15 * 32 + 15] == 1);
}

TEST_CASE("render config validation") {
  RenderConfig cfg;
  cfg.tile_size = 0;
  CHECK_THROWS_AS(cfg.validate(), input_error);
  cfg = RenderConfig{};
  cfg.alpha_cull = 1.5;
  CHECK_THROWS_AS(cfg.validate(), input_error);
  cfg = RenderConfig{};
  cfg.footprint_sigma = -1.0;
  CHECK_THROWS_AS(cfg.validate(), input_error);
}
