#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gsmap/gaussian_map.hpp"
#include "gsmap/image.hpp"

namespace gsmap {

/// Binary region mask for one view of the panorama.
struct SegmentMask {
  int region_id = 0;  // > 0; 0 is reserved for "unlabeled"
  int view = 0;
  int width = 0, height = 0;
  std::vector<uint8_t> bitmap;  // row-major, 0/1

  std::size_t pixel_count() const;
  void validate() const;  // nonempty bitmap, id > 0
};

using SemanticEmbedding = Eigen::VectorXd;  // 512 components
inline constexpr int kEmbeddingDim = 512;

/// Global average pooling of a 512-d region embedding to one scalar.
double compact_embedding(const SemanticEmbedding& e);

/// Raw f32 LE 512-vector on disk.
void save_embedding(const SemanticEmbedding& e, const std::filesystem::path& path);
SemanticEmbedding load_embedding(const std::filesystem::path& path);

enum class OverlapPolicy { kSmallestWins };

struct MaskedRegion {
  SegmentMask mask;
  double code = 0;
};

/// target raster (compact codes) + region-id raster (0 = unlabeled).
/// Overlaps resolved by policy; for kSmallestWins the smallest-area mask
/// owns the pixel (area ties: later input wins).
std::pair<Image, Image> build_target_raster(std::span<const MaskedRegion> regions,
                                            int height, int width,
                                            OverlapPolicy policy = OverlapPolicy::kSmallestWins);

struct SemanticFrameAnnotation {
  std::vector<MaskedRegion> regions;
  Image target;      // H x W codes
  Image region_ids;  // H x W, 0 = unlabeled
};

/// Produces per-view semantic annotations. Stateless after construction.
class SemanticProvider {
 public:
  virtual ~SemanticProvider() = default;
  /// instance_ids: optional per-pixel ground-truth instance raster
  /// (row-major width*height, 0 = no instance).
  virtual SemanticFrameAnnotation annotate(int view_k, const Image& rgb,
                                           const std::vector<int>* instance_ids) const = 0;
};

/// Codebook code of 0-based instance index i out of n: (i + 0.5) / n.
std::vector<double> uniform_codebook(int n);
/// Default grouping tolerance for an n-entry codebook: 0.25 / n.
double default_grouping_tol(int n);

/// Reads instance ids from the simulator's ground-truth raster and labels
/// each instance with its fixed codebook code.
class SyntheticProvider : public SemanticProvider {
 public:
  explicit SyntheticProvider(int num_instances);
  SemanticFrameAnnotation annotate(int view_k, const Image& rgb,
                                   const std::vector<int>* instance_ids) const override;
  double code_for(int instance_id) const;  // 1-based instance id
  int num_instances() const { return num_instances_; }

 private:
  int num_instances_;
  std::vector<double> codebook_;
};

/// Loads precomputed masks plus codes or 512-d embeddings produced
/// offline. Annotation file: JSON {"views":[{"view_k":k,"regions":[
/// {"region_id":id,"rle_mask":{"h":..,"w":..,"counts":[..]},
///  "code":c | "embedding_path":p}]}]}.
class FileProvider : public SemanticProvider {
 public:
  explicit FileProvider(const std::filesystem::path& annotation_file);
  SemanticFrameAnnotation annotate(int view_k, const Image& rgb,
                                   const std::vector<int>* instance_ids) const override;

 private:
  std::map<int, std::vector<MaskedRegion>> views_;
};

/// Writes the FileProvider input format. Regions carry explicit codes.
void save_annotation_file(const std::filesystem::path& path,
                          const std::map<int, std::vector<MaskedRegion>>& views);

/// Row-major run-length encoding, alternating zero/one run lengths
/// starting with the zero run.
std::vector<int64_t> rle_encode(std::span<const uint8_t> bitmap);
std::vector<uint8_t> rle_decode(std::span<const int64_t> counts, std::size_t size);

struct Grouping {
  std::vector<std::vector<std::size_t>> groups;  // aligned with the codebook
  std::vector<std::size_t> unassigned;
};

/// Partitions Gaussians by nearest codebook code within tol. Codebook
/// entries must be pairwise separated by more than 2*tol.
Grouping group_by_code(const GaussianMap& map, std::span<const double> codebook,
                       double tol);

}  // namespace gsmap
