/* Copyright 2026 The fmseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Training-free pseudo-label generation.
//
// Point-prompt labelling: crops vote for classes through their cls tokens;
// each detected class prompts the mask oracle at its hottest patches and
// keeps the most confident answer. Auto-mask labelling: each automatic mask
// that passes the quality filters is labelled by the detected prototype
// nearest to its mean patch feature. The two sets are then fused with the
// auto-mask share subsampled.

#ifndef FMSEG_STAGE1_HPP_
#define FMSEG_STAGE1_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fmseg/error.hpp"
#include "fmseg/exchange.hpp"
#include "fmseg/log.hpp"
#include "fmseg/numerics.hpp"
#include "fmseg/types.hpp"

namespace fmseg::stage1 {

struct DetectionConfig {
  int vote_threshold = 1;       // T
  bool strict_votes = true;     // detected iff votes > T (else votes >= T)
  bool semi_supervised = false; // use image-level labels instead of votes
  std::size_t query_points = 5;
  std::size_t mask_space = 0;   // point-prompt space; 0 = the record's pixel size
  double auto_mask_confidence = 0.97;
  double auto_mask_min_area = 0.001;  // fraction of the image area
  double balance_ratio = 0.75;
  std::uint64_t seed = 0;

  void validate() const {
    if (vote_threshold < 0) throw ConfigError("detection: vote_threshold must be >= 0");
    if (query_points == 0) throw ConfigError("detection: query_points must be >= 1");
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(auto_mask_confidence) || !unit(auto_mask_min_area) || !unit(balance_ratio)) {
      throw ConfigError("detection: thresholds and ratios must lie in [0,1]");
    }
  }
};

struct CropTile {
  std::size_t row = 0;
  std::size_t col = 0;
  Tensor3D features;
};

/// Stitches per-crop patch grids into one image grid: crop (r, c) patch
/// (i, j) lands at (r*h + i, c*w + j).
inline FeatureGrid mosaic_crop_features(std::string image_id, std::span<const CropTile> crops,
                                        std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw ShapeError("mosaic: empty crop grid");
  std::vector<const Tensor3D*> slot(rows * cols, nullptr);
  for (const auto& t : crops) {
    if (t.row >= rows || t.col >= cols) throw ShapeError("mosaic: crop outside grid");
    auto& s = slot[t.row * cols + t.col];
    if (s != nullptr) throw ShapeError("mosaic: duplicate crop");
    s = &t.features;
  }
  for (std::size_t i = 0; i < slot.size(); ++i) {
    if (slot[i] == nullptr) {
      throw ShapeError("mosaic: missing crop (" + std::to_string(i / cols) + "," +
                       std::to_string(i % cols) + ")");
    }
  }
  const std::size_t h = slot[0]->height(), w = slot[0]->width(), d = slot[0]->channels();
  for (const auto* s : slot) {
    if (s->height() != h || s->width() != w || s->channels() != d) {
      throw ShapeError("mosaic: inconsistent crop shapes");
    }
  }
  FeatureGrid g{std::move(image_id), Tensor3D(rows * h, cols * w, d)};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const Tensor3D& crop = *slot[r * cols + c];
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const auto src = crop.cell(i, j);
          std::copy(src.begin(), src.end(), g.features.cell(r * h + i, c * w + j).begin());
        }
      }
    }
  }
  return g;
}

/// Crops given in row-major order.
inline FeatureGrid mosaic_crop_features(std::string image_id,
                                        std::span<const Tensor3D> crops_row_major,
                                        std::size_t rows, std::size_t cols) {
  if (crops_row_major.size() != rows * cols) {
    throw ShapeError("mosaic: " + std::to_string(crops_row_major.size()) +
                     " crops for a " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " grid");
  }
  std::vector<CropTile> tiles;
  for (std::size_t i = 0; i < crops_row_major.size(); ++i) {
    tiles.push_back({i / cols, i % cols, crops_row_major[i]});
  }
  return mosaic_crop_features(std::move(image_id), std::span<const CropTile>(tiles), rows,
                              cols);
}

/// Inverse of mosaic_crop_features.
inline std::vector<Tensor3D> demosaic(const FeatureGrid& g, std::size_t rows,
                                      std::size_t cols) {
  if (rows == 0 || cols == 0 || g.height() % rows || g.width() % cols) {
    throw ShapeError("demosaic: grid does not divide into crops");
  }
  const std::size_t h = g.height() / rows, w = g.width() / cols, d = g.dim();
  std::vector<Tensor3D> out;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      Tensor3D crop(h, w, d);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const auto src = g.features.cell(r * h + i, c * w + j);
          std::copy(src.begin(), src.end(), crop.cell(i, j).begin());
        }
      out.push_back(std::move(crop));
    }
  }
  return out;
}

/// Nearest prototype per cls token by dot product; ties to the lowest id.
inline std::vector<int> classify_crops(const Tensor2D& cls_tokens, const Tensor2D& prototypes) {
  const Tensor2D sim = similarity_matrix(cls_tokens, prototypes);
  std::vector<int> out(sim.rows());
  for (std::size_t c = 0; c < sim.rows(); ++c) out[c] = static_cast<int>(argmax(sim.row(c)));
  return out;
}

/// Classes voted for by enough crops, ascending. In semi-supervised mode the
/// image-level labels are returned as given (deduplicated, ascending).
inline std::vector<int> detect_classes(std::span<const int> crop_classes,
                                       const DetectionConfig& config,
                                       const std::optional<std::vector<int>>& image_labels = {}) {
  if (config.semi_supervised) {
    if (!image_labels) {
      throw ValidationError("semi-supervised detection needs image-level labels");
    }
    std::vector<int> out = *image_labels;
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
  std::map<int, int> votes;
  for (const int c : crop_classes) ++votes[c];
  std::vector<int> out;
  for (const auto& [cls, n] : votes) {
    const bool hit = config.strict_votes ? n > config.vote_threshold
                                         : n >= config.vote_threshold;
    if (hit) out.push_back(cls);
  }
  return out;
}

/// Patch-prototype dot products as an H_p x W_p map.
inline Tensor2D class_heatmap(const FeatureGrid& grid, std::span<const double> prototype) {
  if (prototype.size() != grid.dim()) throw ShapeError("class_heatmap: dimension mismatch");
  Tensor2D heat(grid.height(), grid.width());
  for (std::size_t y = 0; y < grid.height(); ++y)
    for (std::size_t x = 0; x < grid.width(); ++x)
      heat(y, x) = dot(grid.features.cell(y, x), prototype);
  return heat;
}

/// Maps patch centres in the oversampled source space to a target pixel space.
struct PointMapping {
  double patch_px = 14.0;
  double source_h = 1344.0, source_w = 1344.0;
  double target_h = 518.0, target_w = 518.0;
};

/// The k hottest patches (ties in row-major order) as (x, y) pixel
/// coordinates: centre ((c+0.5)*patch_px, (r+0.5)*patch_px) scaled by
/// target/source, rounded half-up, clamped to the target extent.
inline std::vector<std::array<int, 2>> select_query_points(const Tensor2D& heatmap,
                                                           std::size_t k,
                                                           const PointMapping& map) {
  const std::size_t n = heatmap.size();
  if (k > n) throw DomainError("select_query_points: k exceeds patch count");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const auto& v = heatmap.data();
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return v[a] > v[b] || (v[a] == v[b] && a < b);
                    });
  auto to_pixel = [](double centre, double scale, double extent) {
    const double p = std::floor(centre * scale + 0.5);
    return static_cast<int>(std::clamp(p, 0.0, extent - 1.0));
  };
  std::vector<std::array<int, 2>> out;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t r = idx[i] / heatmap.cols(), c = idx[i] % heatmap.cols();
    const double cx = (static_cast<double>(c) + 0.5) * map.patch_px;
    const double cy = (static_cast<double>(r) + 0.5) * map.patch_px;
    out.push_back({to_pixel(cx, map.target_w / map.source_w, map.target_w),
                   to_pixel(cy, map.target_h / map.source_h, map.target_h)});
  }
  return out;
}

/// Square-space convenience form.
inline std::vector<std::array<int, 2>> select_query_points(const Tensor2D& heatmap,
                                                           std::size_t k, double patch_px,
                                                           double source_px,
                                                           double target_px) {
  return select_query_points(heatmap, k,
                             {patch_px, source_px, source_px, target_px, target_px});
}

/// The image-text grid of a bundle: the precomputed grid when present,
/// otherwise the mosaic of its crops.
inline FeatureGrid image_grid(const ImageBundle& b) {
  if (b.clip_grid) return *b.clip_grid;
  return mosaic_crop_features(b.record.image_id, std::span<const Tensor3D>(b.crop_features),
                              b.record.crop_rows, b.record.crop_cols);
}

inline std::vector<int> detected_classes(const ImageBundle& b,
                                         const TextPrototypeSet& vocab,
                                         const DetectionConfig& config) {
  return detect_classes(classify_crops(b.cls_tokens, vocab.prototypes), config,
                        b.record.image_level_labels);
}

/// Index of the most confident proposal; ties to the lowest index.
inline std::size_t most_confident(std::span<const MaskProposal> masks) {
  if (masks.empty()) throw DomainError("most_confident: no masks");
  std::size_t best = 0;
  for (std::size_t i = 1; i < masks.size(); ++i)
    if (masks[i].confidence > masks[best].confidence) best = i;
  return best;
}

inline PointMapping point_mapping(const ImageRecord& r, const FeatureGrid& grid,
                                  const DetectionConfig& config) {
  const double th = config.mask_space ? static_cast<double>(config.mask_space)
                                      : static_cast<double>(r.height);
  const double tw = config.mask_space ? static_cast<double>(config.mask_space)
                                      : static_cast<double>(r.width);
  return {r.patch_px, static_cast<double>(grid.height()) * r.patch_px,
          static_cast<double>(grid.width()) * r.patch_px, th, tw};
}

/// Point-prompt annotations for every detected class.
inline AnnotationSet stage11_generate(const ImageBundle& bundle, const FeatureGrid& grid,
                                      const TextPrototypeSet& vocab, const MaskOracle& oracle,
                                      const DetectionConfig& config,
                                      const std::vector<int>& detected) {
  AnnotationSet out;
  const PointMapping map = point_mapping(bundle.record, grid, config);
  for (const int k : detected) {
    const Tensor2D heat = class_heatmap(grid, vocab.prototypes.row(static_cast<std::size_t>(k)));
    const auto points = select_query_points(heat, config.query_points, map);
    std::vector<MaskProposal> masks;
    try {
      masks = oracle.point_masks(k, points);
      if (masks.empty()) throw Error("oracle returned no masks");
    } catch (const Error& e) {
      log::warn("stage11_skip", {{"image_id", bundle.record.image_id}, {"class_id", k},
                                 {"reason", e.what()}});
      continue;
    }
    const std::size_t best = most_confident(masks);
    out.push_back({bundle.record.image_id, k, std::move(masks[best].mask),
                   masks[best].confidence, AnnotationStage::kPointPrompt});
  }
  return out;
}

inline AnnotationSet stage11_generate(const ImageBundle& bundle, const FeatureGrid& grid,
                                      const TextPrototypeSet& vocab, const MaskOracle& oracle,
                                      const DetectionConfig& config) {
  return stage11_generate(bundle, grid, vocab, oracle, config,
                          detected_classes(bundle, vocab, config));
}

/// Labels automatic masks by the detected prototype nearest to the mean
/// feature of the patches each mask covers (> 50% of a patch's pixels).
inline AnnotationSet stage12_label(const std::string& image_id, const FeatureGrid& grid,
                                   const TextPrototypeSet& vocab,
                                   const std::vector<int>& detected,
                                   std::span<const MaskProposal> auto_masks,
                                   const DetectionConfig& config) {
  AnnotationSet out;
  if (detected.empty()) return out;
  const Tensor2D protos = vocab.subset(detected);
  for (std::size_t m = 0; m < auto_masks.size(); ++m) {
    const auto& prop = auto_masks[m];
    if (prop.confidence < config.auto_mask_confidence) continue;
    const double pixels = static_cast<double>(prop.mask.height * prop.mask.width);
    if (static_cast<double>(prop.mask.area()) < config.auto_mask_min_area * pixels) continue;
    const PatchCoverage cov = patch_coverage(prop.mask, grid.height(), grid.width());
    std::vector<double> mean(grid.dim(), 0.0);
    std::size_t n = 0;
    for (std::size_t p = 0; p < cov.inside.size(); ++p) {
      if (!cov.covered(p)) continue;
      const auto f = grid.features.cell(p / grid.width(), p % grid.width());
      for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += f[c];
      ++n;
    }
    if (n == 0) {
      log::warn("stage12_drop", {{"image_id", image_id}, {"mask", m},
                                 {"reason", "mask covers no patch"}});
      continue;
    }
    try {
      l2_normalize_inplace(mean);
    } catch (const DomainError&) {
      log::warn("stage12_drop", {{"image_id", image_id}, {"mask", m},
                                 {"reason", "mean feature is zero"}});
      continue;
    }
    std::vector<double> sims(protos.rows());
    for (std::size_t k = 0; k < protos.rows(); ++k) sims[k] = dot(mean, protos.row(k));
    out.push_back({image_id, detected[argmax(sims)], prop.mask, prop.confidence,
                   AnnotationStage::kAutoMask});
  }
  return out;
}

/// All of `set11` plus a seeded uniform sample of floor(ratio * |set12|)
/// annotations from `set12` (kept in their original order).
inline AnnotationSet fuse_and_balance(const AnnotationSet& set11, const AnnotationSet& set12,
                                      double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw DomainError("fuse_and_balance: ratio not in [0,1]");
  const auto keep = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(set12.size())));
  SeededRng rng(derive_seed(seed, "balance"));
  AnnotationSet out = set11;
  for (const std::size_t i : rng.sample_without_replacement(set12.size(), keep)) {
    out.push_back(set12[i]);
  }
  return out;
}

/// Point-prompt answers precomputed by an external exporter, keyed by class.
class FileMaskOracle final : public MaskOracle {
 public:
  explicit FileMaskOracle(std::vector<PointMaskSet> sets) : sets_(std::move(sets)) {}

  std::vector<MaskProposal> point_masks(
      int class_id, std::span<const std::array<int, 2>> /*points*/) const override {
    for (const auto& s : sets_)
      if (s.class_id == class_id) return s.masks;
    throw IoError("no precomputed point-prompt masks for class " + std::to_string(class_id));
  }

 private:
  std::vector<PointMaskSet> sets_;
};

}  // namespace fmseg::stage1

#endif  // FMSEG_STAGE1_HPP_
