#include "gsmap/semantics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace gsmap {

std::size_t SegmentMask::pixel_count() const {
  return static_cast<std::size_t>(std::count(bitmap.begin(), bitmap.end(), uint8_t{1}));
}

void SegmentMask::validate() const {
  if (region_id <= 0) throw input_error("SegmentMask: region_id must be > 0");
  if (width <= 0 || height <= 0 ||
      bitmap.size() != static_cast<std::size_t>(width) * height)
    throw input_error("SegmentMask: bitmap size mismatch");
  if (pixel_count() == 0) throw input_error("SegmentMask: empty bitmap");
}

double compact_embedding(const SemanticEmbedding& e) {
  if (e.size() != kEmbeddingDim)
    throw input_error("compact_embedding: expected a 512-vector");
  if (!e.allFinite()) throw input_error("compact_embedding: non-finite embedding");
  return e.mean();
}

void save_embedding(const SemanticEmbedding& e, const std::filesystem::path& path) {
  if (e.size() != kEmbeddingDim)
    throw input_error("save_embedding: expected a 512-vector");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw input_error("save_embedding: cannot open " + path.string());
  std::vector<float> buf(kEmbeddingDim);
  for (int i = 0; i < kEmbeddingDim; ++i) buf[i] = static_cast<float>(e[i]);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

SemanticEmbedding load_embedding(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("load_embedding: cannot open " + path.string());
  std::vector<float> buf(kEmbeddingDim);
  if (!is.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float))))
    throw format_error(path.string() + ": truncated at byte offset " +
                       std::to_string(static_cast<long long>(is.gcount())));
  SemanticEmbedding e(kEmbeddingDim);
  for (int i = 0; i < kEmbeddingDim; ++i) e[i] = buf[i];
  return e;
}

std::pair<Image, Image> build_target_raster(std::span<const MaskedRegion> regions,
                                            int height, int width,
                                            OverlapPolicy policy) {
  (void)policy;  // kSmallestWins is the only policy
  Image target(width, height, 1, 0.0);
  Image ids(width, height, 1, 0.0);

  std::vector<std::size_t> order(regions.size());
  std::iota(order.begin(), order.end(), 0u);
  std::vector<std::size_t> areas(regions.size());
  for (std::size_t i = 0; i < regions.size(); ++i) {
    regions[i].mask.validate();
    if (regions[i].mask.width != width || regions[i].mask.height != height)
      throw input_error("build_target_raster: mask dimension mismatch");
    areas[i] = regions[i].mask.pixel_count();
  }
  // Descending area; the last write wins, so smaller masks overwrite larger.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return areas[a] > areas[b]; });

  for (std::size_t oi : order) {
    const MaskedRegion& r = regions[oi];
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (r.mask.bitmap[static_cast<std::size_t>(y) * width + x]) {
          target.at(y, x) = r.code;
          ids.at(y, x) = r.mask.region_id;
        }
  }
  return {std::move(target), std::move(ids)};
}

std::vector<double> uniform_codebook(int n) {
  if (n <= 0) throw input_error("uniform_codebook: need n > 0");
  std::vector<double> codes(n);
  for (int i = 0; i < n; ++i) codes[i] = (i + 0.5) / n;
  return codes;
}

double default_grouping_tol(int n) {
  if (n <= 0) throw input_error("default_grouping_tol: need n > 0");
  return 0.25 / n;
}

SyntheticProvider::SyntheticProvider(int num_instances)
    : num_instances_(num_instances), codebook_(uniform_codebook(num_instances)) {}

double SyntheticProvider::code_for(int instance_id) const {
  if (instance_id < 1 || instance_id > num_instances_)
    throw input_error("SyntheticProvider: instance id out of range");
  return codebook_[instance_id - 1];
}

SemanticFrameAnnotation SyntheticProvider::annotate(
    int view_k, const Image& rgb, const std::vector<int>* instance_ids) const {
  if (instance_ids == nullptr)
    throw input_error("SyntheticProvider: needs a ground-truth instance raster");
  const int w = rgb.width(), h = rgb.height();
  if (instance_ids->size() != static_cast<std::size_t>(w) * h)
    throw input_error("SyntheticProvider: instance raster size mismatch");

  SemanticFrameAnnotation ann;
  for (int id = 1; id <= num_instances_; ++id) {
    SegmentMask mask;
    mask.region_id = id;
    mask.view = view_k;
    mask.width = w;
    mask.height = h;
    mask.bitmap.assign(static_cast<std::size_t>(w) * h, 0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.bitmap.size(); ++i)
      if ((*instance_ids)[i] == id) {
        mask.bitmap[i] = 1;
        ++count;
      }
    if (count == 0) continue;
    ann.regions.push_back({std::move(mask), codebook_[id - 1]});
  }
  auto [target, ids] = build_target_raster(ann.regions, h, w);
  ann.target = std::move(target);
  ann.region_ids = std::move(ids);
  return ann;
}

std::vector<int64_t> rle_encode(std::span<const uint8_t> bitmap) {
  std::vector<int64_t> counts;
  uint8_t current = 0;
  int64_t run = 0;
  for (uint8_t v : bitmap) {
    const uint8_t bit = v ? 1 : 0;
    if (bit == current) {
      ++run;
    } else {
      counts.push_back(run);
      current = bit;
      run = 1;
    }
  }
  counts.push_back(run);
  return counts;
}

std::vector<uint8_t> rle_decode(std::span<const int64_t> counts, std::size_t size) {
  std::vector<uint8_t> out;
  out.reserve(size);
  uint8_t current = 0;
  for (int64_t run : counts) {
    if (run < 0) throw format_error("rle_decode: negative run length");
    out.insert(out.end(), static_cast<std::size_t>(run), current);
    current = current ? 0 : 1;
  }
  if (out.size() != size)
    throw format_error("rle_decode: counts cover " + std::to_string(out.size()) +
                       " pixels, expected " + std::to_string(size));
  return out;
}

FileProvider::FileProvider(const std::filesystem::path& annotation_file) {
  std::ifstream is(annotation_file);
  if (!is)
    throw input_error("FileProvider: cannot open " + annotation_file.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(annotation_file.string() + ": " + e.what());
  }
  const auto base = annotation_file.parent_path();
  try {
    for (const auto& view : j.at("views")) {
      const int view_k = view.at("view_k").get<int>();
      std::vector<MaskedRegion> regions;
      for (const auto& region : view.at("regions")) {
        MaskedRegion mr;
        mr.mask.region_id = region.at("region_id").get<int>();
        mr.mask.view = view_k;
        const auto& rle = region.at("rle_mask");
        mr.mask.height = rle.at("h").get<int>();
        mr.mask.width = rle.at("w").get<int>();
        const auto counts = rle.at("counts").get<std::vector<int64_t>>();
        mr.mask.bitmap = rle_decode(counts,
                                    static_cast<std::size_t>(mr.mask.width) * mr.mask.height);
        mr.mask.validate();
        if (region.contains("code")) {
          mr.code = region.at("code").get<double>();
        } else if (region.contains("embedding_path")) {
          const auto p = base / region.at("embedding_path").get<std::string>();
          mr.code = compact_embedding(load_embedding(p));
        } else {
          throw format_error(annotation_file.string() +
                             ": region needs a code or an embedding_path");
        }
        regions.push_back(std::move(mr));
      }
      views_[view_k] = std::move(regions);
    }
  } catch (const nlohmann::json::exception& e) {
    throw format_error(annotation_file.string() + ": " + e.what());
  }
}

SemanticFrameAnnotation FileProvider::annotate(int view_k, const Image& rgb,
                                               const std::vector<int>*) const {
  SemanticFrameAnnotation ann;
  const auto it = views_.find(view_k);
  if (it == views_.end()) {
    ann.target = Image(rgb.width(), rgb.height(), 1, 0.0);
    ann.region_ids = Image(rgb.width(), rgb.height(), 1, 0.0);
    return ann;
  }
  for (const MaskedRegion& mr : it->second) {
    if (mr.mask.width != rgb.width() || mr.mask.height != rgb.height())
      throw input_error("FileProvider: mask does not match the frame size");
  }
  ann.regions = it->second;
  auto [target, ids] = build_target_raster(ann.regions, rgb.height(), rgb.width());
  ann.target = std::move(target);
  ann.region_ids = std::move(ids);
  return ann;
}

void save_annotation_file(const std::filesystem::path& path,
                          const std::map<int, std::vector<MaskedRegion>>& views) {
  nlohmann::json j;
  j["views"] = nlohmann::json::array();
  for (const auto& [view_k, regions] : views) {
    nlohmann::json jv;
    jv["view_k"] = view_k;
    jv["regions"] = nlohmann::json::array();
    for (const MaskedRegion& mr : regions) {
      mr.mask.validate();
      nlohmann::json jr;
      jr["region_id"] = mr.mask.region_id;
      jr["rle_mask"] = {{"h", mr.mask.height},
                        {"w", mr.mask.width},
                        {"counts", rle_encode(mr.mask.bitmap)}};
      jr["code"] = mr.code;
      jv["regions"].push_back(std::move(jr));
    }
    j["views"].push_back(std::move(jv));
  }
  std::ofstream os(path);
  if (!os) throw input_error("save_annotation_file: cannot open " + path.string());
  os << j.dump(2) << "\n";
}

Grouping group_by_code(const GaussianMap& map, std::span<const double> codebook,
                       double tol) {
  if (codebook.empty()) throw input_error("group_by_code: empty codebook");
  if (!(tol >= 0.0)) throw input_error("group_by_code: negative tolerance");
  for (std::size_t i = 0; i < codebook.size(); ++i)
    for (std::size_t j = i + 1; j < codebook.size(); ++j)
      if (std::abs(codebook[i] - codebook[j]) <= 2.0 * tol)
        throw input_error("group_by_code: codebook entries closer than 2*tol");

  Grouping g;
  g.groups.resize(codebook.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double sem = map.gaussians[i].semantic;
    std::size_t best = 0;
    double best_dist = std::abs(sem - codebook[0]);
    for (std::size_t c = 1; c < codebook.size(); ++c) {
      const double d = std::abs(sem - codebook[c]);
      if (d < best_dist) {
        best_dist = d;
        best = c;
      }
    }
    if (best_dist <= tol)
      g.groups[best].push_back(i);
    else
      g.unassigned.push_back(i);
  }
  return g;
}

}  // namespace gsmap
