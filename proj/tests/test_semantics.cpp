#include "gsmap/semantics.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

using namespace gsmap;

namespace {

SegmentMask rect_mask(int region_id, int w, int h, int x0, int y0, int x1, int y1) {
  SegmentMask m;
  m.region_id = region_id;
  m.width = w;
  m.height = h;
  m.bitmap.assign(static_cast<std::size_t>(w) * h, 0);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.bitmap[static_cast<std::size_t>(y) * w + x] = 1;
  return m;
}

}  // namespace

TEST_CASE("compact_embedding of a constant vector") {
  SemanticEmbedding e = SemanticEmbedding::Constant(kEmbeddingDim, 0.37);
  CHECK(compact_embedding(e) == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("compact_embedding of a half-half vector") {
  SemanticEmbedding e = SemanticEmbedding::Zero(kEmbeddingDim);
  for (int i = 256; i < 512; ++i) e[i] = 1.0;
  CHECK(compact_embedding(e) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("compact_embedding is permutation invariant and linear") {
  Rng rng(5);
  SemanticEmbedding e1(kEmbeddingDim), e2(kEmbeddingDim);
  for (int i = 0; i < kEmbeddingDim; ++i) {
    e1[i] = rng.uniform(-1, 1);
    e2[i] = rng.uniform(-1, 1);
  }
  SemanticEmbedding shuffled = e1;
  std::reverse(shuffled.data(), shuffled.data() + kEmbeddingDim);
  CHECK(compact_embedding(shuffled) ==
        doctest::Approx(compact_embedding(e1)).epsilon(1e-12));
  const double a = 1.7, b = -0.4;
  CHECK(compact_embedding(a * e1 + b * e2) ==
        doctest::Approx(a * compact_embedding(e1) + b * compact_embedding(e2))
            .epsilon(1e-10));
}

TEST_CASE("compact_embedding rejects wrong sizes") {
  CHECK_THROWS_AS(compact_embedding(SemanticEmbedding::Zero(100)), input_error);
}

TEST_CASE("embedding file round trip") {
  Rng rng(6);
  SemanticEmbedding e(kEmbeddingDim);
  for (int i = 0; i < kEmbeddingDim; ++i)
    e[i] = static_cast<float>(rng.uniform(-2, 2));
  const auto path = std::filesystem::temp_directory_path() / "gsmap_test.emb";
  save_embedding(e, path);
  const SemanticEmbedding loaded = load_embedding(path);
  CHECK((e - loaded).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("build_target_raster single full-frame region") {
  std::vector<MaskedRegion> regions;
  regions.push_back({rect_mask(1, 8, 6, 0, 0, 8, 6), 0.7});
  const auto [target, ids] = build_target_raster(regions, 6, 8);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x) {
      CHECK(target.at(y, x) == 0.7);
      CHECK(ids.at(y, x) == 1.0);
    }
}

TEST_CASE("build_target_raster disjoint regions") {
  std::vector<MaskedRegion> regions;
  regions.push_back({rect_mask(1, 8, 8, 0, 0, 4, 8), 0.25});
  regions.push_back({rect_mask(2, 8, 8, 4, 0, 8, 8), 0.75});
  const auto [target, ids] = build_target_raster(regions, 8, 8);
  CHECK(target.at(3, 1) == 0.25);
  CHECK(target.at(3, 6) == 0.75);
  CHECK(ids.at(3, 1) == 1.0);
  CHECK(ids.at(3, 6) == 2.0);
}

TEST_CASE("build_target_raster nested masks, smallest wins") {
  std::vector<MaskedRegion> regions;
  regions.push_back({rect_mask(1, 10, 10, 0, 0, 10, 10), 0.2});  // outer
  regions.push_back({rect_mask(2, 10, 10, 3, 3, 6, 6), 0.9});    // inner
  const auto [target, ids] = build_target_raster(regions, 10, 10);
  CHECK(target.at(4, 4) == 0.9);
  CHECK(ids.at(4, 4) == 2.0);
  CHECK(target.at(0, 0) == 0.2);
  // Deterministic: same input, same output.
  const auto [target2, ids2] = build_target_raster(regions, 10, 10);
  for (std::size_t i = 0; i < target.size(); ++i) {
    CHECK(target.data()[i] == target2.data()[i]);
    CHECK(ids.data()[i] == ids2.data()[i]);
  }
}

TEST_CASE("build_target_raster rejects mismatched masks") {
  std::vector<MaskedRegion> regions;
  regions.push_back({rect_mask(1, 4, 4, 0, 0, 4, 4), 0.5});
  CHECK_THROWS_AS(build_target_raster(regions, 8, 8), input_error);
}

TEST_CASE("rle round trip") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<uint8_t> bitmap(200);
    for (auto& b : bitmap) b = rng.uniform() < 0.3 ? 1 : 0;
    const auto counts = rle_encode(bitmap);
    const auto decoded = rle_decode(counts, bitmap.size());
    CHECK(decoded == bitmap);
  }
  // Leading-one bitmaps start with a zero-length background run.
  const std::vector<uint8_t> ones{1, 1, 0};
  const auto counts = rle_encode(ones);
  REQUIRE(counts.size() == 3);
  CHECK(counts[0] == 0);
  CHECK(counts[1] == 2);
  CHECK(rle_decode(counts, 3) == ones);
}

TEST_CASE("uniform codebook and default tolerance") {
  const auto codes = uniform_codebook(4);
  CHECK(codes[0] == doctest::Approx(0.125));
  CHECK(codes[3] == doctest::Approx(0.875));
  CHECK(default_grouping_tol(4) == doctest::Approx(0.0625));
  // Spacing 1/N is at least 4x the default tolerance.
  CHECK(codes[1] - codes[0] >= 4.0 * default_grouping_tol(4) - 1e-12);
}

TEST_CASE("group_by_code groups and rejects") {
  GaussianMap map;
  map.gaussians.resize(5);
  map.gaussians[0].semantic = 0.1f;
  map.gaussians[1].semantic = 0.1f;
  map.gaussians[2].semantic = 0.9f;
  map.gaussians[3].semantic = 0.5f;   // unassigned: 0.4 > tol
  map.gaussians[4].semantic = 0.95f;  // within tol of 0.9

  const std::vector<double> codebook{0.1, 0.9};
  const Grouping g = group_by_code(map, codebook, 0.2);
  REQUIRE(g.groups.size() == 2);
  CHECK(g.groups[0] == std::vector<std::size_t>{0, 1});
  CHECK(g.groups[1] == std::vector<std::size_t>{2, 4});
  CHECK(g.unassigned == std::vector<std::size_t>{3});

  SUBCASE("everything equal to one code lands in one group") {
    for (auto& gg : map.gaussians) gg.semantic = 0.9f;
    const Grouping all = group_by_code(map, codebook, 0.2);
    CHECK(all.groups[1].size() == 5);
    CHECK(all.unassigned.empty());
  }

  SUBCASE("codebook separation must exceed 2*tol") {
    const std::vector<double> tight{0.1, 0.3};
    CHECK_THROWS_AS(group_by_code(map, tight, 0.2), input_error);
    CHECK_THROWS_AS(group_by_code(map, std::vector<double>{}, 0.1), input_error);
  }
}

TEST_CASE("synthetic provider assigns codebook codes to instance masks") {
  const SyntheticProvider provider(4);
  CHECK(provider.code_for(1) == doctest::Approx(0.125));
  CHECK(provider.code_for(4) == doctest::Approx(0.875));
  CHECK_THROWS_AS(provider.code_for(0), input_error);

  const int w = 6, h = 4;
  Image rgb(w, h, 3, 0.5);
  std::vector<int> instances(static_cast<std::size_t>(w) * h, 0);
  instances[1 * w + 2] = 1;
  instances[2 * w + 3] = 3;
  instances[2 * w + 4] = 3;
  const SemanticFrameAnnotation ann = provider.annotate(0, rgb, &instances);
  REQUIRE(ann.regions.size() == 2);
  CHECK(ann.target.at(1, 2) == doctest::Approx(0.125));
  CHECK(ann.target.at(2, 3) == doctest::Approx(0.625));
  CHECK(ann.region_ids.at(2, 4) == 3.0);
  CHECK(ann.region_ids.at(0, 0) == 0.0);
  CHECK(ann.target.at(0, 0) == 0.0);

  CHECK_THROWS_AS(provider.annotate(0, rgb, nullptr), input_error);
}

TEST_CASE("file provider round trips codes and embeddings") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "gsmap_ann_test";
  fs::create_directories(dir);

  std::map<int, std::vector<MaskedRegion>> views;
  views[0].push_back({rect_mask(1, 6, 4, 0, 0, 3, 4), 0.31});
  views[2].push_back({rect_mask(5, 6, 4, 3, 0, 6, 4), 0.77});
  save_annotation_file(dir / "ann.json", views);

  const FileProvider provider(dir / "ann.json");
  Image rgb(6, 4, 3, 0.0);
  const auto a0 = provider.annotate(0, rgb, nullptr);
  CHECK(a0.target.at(1, 1) == doctest::Approx(0.31));
  CHECK(a0.region_ids.at(1, 1) == 1.0);
  const auto a2 = provider.annotate(2, rgb, nullptr);
  CHECK(a2.target.at(1, 4) == doctest::Approx(0.77));
  // Unknown views come back unlabeled.
  const auto a1 = provider.annotate(1, rgb, nullptr);
  CHECK(a1.regions.empty());
  CHECK(a1.region_ids.at(0, 0) == 0.0);

  // Embedding-backed region: code is the pooled mean.
  SemanticEmbedding e = SemanticEmbedding::Constant(kEmbeddingDim, 0.0);
  for (int i = 0; i < 128; ++i) e[i] = 1.0;  // mean 0.25
  save_embedding(e, dir / "region.emb");
  {
    std::ofstream os(dir / "ann2.json");
    os << R"({"views":[{"view_k":0,"regions":[{"region_id":1,)"
       << R"("rle_mask":{"h":2,"w":2,"counts":[0,4]},)"
       << R"("embedding_path":"region.emb"}]}]})";
  }
  const FileProvider provider2(dir / "ann2.json");
  Image rgb2(2, 2, 3, 0.0);
  const auto a = provider2.annotate(0, rgb2, nullptr);
  CHECK(a.target.at(0, 0) == doctest::Approx(0.25).epsilon(1e-6));

  CHECK_THROWS_AS(FileProvider(dir / "missing.json"), input_error);
  fs::remove_all(dir);
}

TEST_CASE("segment mask validation") {
  SegmentMask m = rect_mask(1, 4, 4, 0, 0, 2, 2);
  CHECK_NOTHROW(m.validate());
  m.region_id = 0;
  CHECK_THROWS_AS(m.validate(), input_error);
  m = rect_mask(1, 4, 4, 0, 0, 0, 0);  // empty
  CHECK_THROWS_AS(m.validate(), input_error);
}
