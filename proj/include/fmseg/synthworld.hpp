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

// Deterministic stand-in for the three foundation models.
//
// The "image-text" encoder emits, for a patch of class k, the prototype t_k
// plus isotropic noise. The "self-supervised" encoder emits R t_k plus noise,
// where R has orthonormal columns, so the ideal linear alignment head is the
// known map x -> x R. The mask oracle answers from the scene's ground truth.

#ifndef FMSEG_SYNTHWORLD_HPP_
#define FMSEG_SYNTHWORLD_HPP_

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fmseg/error.hpp"
#include "fmseg/exchange.hpp"
#include "fmseg/numerics.hpp"
#include "fmseg/types.hpp"

namespace fmseg::synth {

struct SyntheticWorld {
  std::size_t num_classes = 0;
  std::size_t text_dim = 0;
  std::size_t vision_dim = 0;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  Tensor2D text_prototypes;  // K x D_text, orthonormal rows
  Tensor2D vision_basis;     // D_vision x D_text, orthonormal columns

  TextPrototypeSet vocabulary() const {
    TextPrototypeSet v;
    for (std::size_t k = 0; k < num_classes; ++k) v.names.push_back("class_" + std::to_string(k));
    v.prototypes = text_prototypes;
    return v;
  }

  /// The vision-space embedding of class k before noise: R t_k.
  std::vector<double> vision_embedding(std::size_t k) const {
    std::vector<double> out(vision_dim, 0.0);
    const auto t = text_prototypes.row(k);
    for (std::size_t i = 0; i < vision_dim; ++i)
      for (std::size_t j = 0; j < text_dim; ++j) out[i] += vision_basis(i, j) * t[j];
    return out;
  }
};

namespace detail {

/// Orthonormalizes the rows of `m` in place (modified Gram-Schmidt, two passes).
inline void orthonormalize_rows(Tensor2D& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto ri = m.row(i);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) {
        const auto rj = m.row(j);
        const double d = dot(ri, rj);
        for (std::size_t c = 0; c < ri.size(); ++c) ri[c] -= d * rj[c];
      }
    }
    l2_normalize_inplace(ri);
  }
}

inline Tensor2D gaussian_matrix(std::size_t rows, std::size_t cols, SeededRng& rng) {
  Tensor2D m(rows, cols);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

}  // namespace detail

inline SyntheticWorld generate_world(std::size_t num_classes, std::size_t text_dim,
                                     std::size_t vision_dim, double sigma,
                                     std::uint64_t seed) {
  if (num_classes < 2) throw DomainError("generate_world: need at least 2 classes");
  if (text_dim < num_classes) {
    throw DomainError("generate_world: text_dim " + std::to_string(text_dim) +
                      " < number of classes " + std::to_string(num_classes));
  }
  if (vision_dim < text_dim) {
    throw DomainError("generate_world: vision_dim must be >= text_dim");
  }
  if (!(sigma >= 0.0)) throw DomainError("generate_world: sigma must be >= 0");
  SeededRng rng(derive_seed(seed, "world"));
  SyntheticWorld w{num_classes, text_dim, vision_dim, sigma, seed, {}, {}};
  w.text_prototypes = detail::gaussian_matrix(num_classes, text_dim, rng);
  detail::orthonormalize_rows(w.text_prototypes);
  Tensor2D basis_t = detail::gaussian_matrix(text_dim, vision_dim, rng);
  detail::orthonormalize_rows(basis_t);
  w.vision_basis = transpose(basis_t);
  return w;
}

// ---------------------------------------------------------------------------
// Scenes.

/// Axis-aligned rectangle [y0, y1) x [x0, x1) painted with one class.
struct Region {
  int class_id = 0;
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;

  bool operator==(const Region&) const = default;
};

/// Canvas with a background class and rectangles; later rectangles occlude
/// earlier ones.
struct SyntheticScene {
  std::size_t height = 0;
  std::size_t width = 0;
  int background = 0;
  std::vector<Region> regions;

  void validate() const {
    if (height == 0 || width == 0) throw ValidationError("scene: empty canvas");
    for (const auto& r : regions) {
      if (r.y0 >= r.y1 || r.x0 >= r.x1 || r.y1 > height || r.x1 > width) {
        throw ValidationError("scene: region outside canvas or empty");
      }
    }
  }

  /// Index map: 0 = background, i + 1 = regions[i] (the last painter wins).
  std::vector<std::uint16_t> region_map() const {
    std::vector<std::uint16_t> m(height * width, 0);
    for (std::size_t i = 0; i < regions.size(); ++i) {
      const auto& r = regions[i];
      for (std::size_t y = r.y0; y < r.y1; ++y)
        for (std::size_t x = r.x0; x < r.x1; ++x)
          m[y * width + x] = static_cast<std::uint16_t>(i + 1);
    }
    return m;
  }

  int region_class(std::size_t region_index) const {
    return region_index == 0 ? background : regions[region_index - 1].class_id;
  }

  SegmentationMap ground_truth() const {
    const auto rm = region_map();
    SegmentationMap gt(height, width);
    for (std::size_t i = 0; i < rm.size(); ++i) gt.labels[i] = region_class(rm[i]);
    return gt;
  }

  bool operator==(const SyntheticScene&) const = default;
};

inline Json scene_to_json(const SyntheticScene& s) {
  Json regions = Json::array();
  for (const auto& r : s.regions) {
    regions.push_back({{"class_id", r.class_id}, {"y0", r.y0}, {"x0", r.x0},
                       {"y1", r.y1}, {"x1", r.x1}});
  }
  return {{"height", s.height}, {"width", s.width}, {"background", s.background},
          {"regions", regions}};
}

inline SyntheticScene scene_from_json(const Json& j) {
  SyntheticScene s;
  try {
    s.height = j.at("height").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    s.background = j.at("background").get<int>();
    for (const auto& r : j.at("regions")) {
      s.regions.push_back({r.at("class_id").get<int>(), r.at("y0").get<std::size_t>(),
                           r.at("x0").get<std::size_t>(), r.at("y1").get<std::size_t>(),
                           r.at("x1").get<std::size_t>()});
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("synthetic_scene: ") + e.what());
  }
  s.validate();
  return s;
}

/// Sensor geometry of the synthetic backend. The image-text grid is
/// crop_grid x crop_grid crops of crop_patches x crop_patches patches over a
/// canvas x canvas pixel space; the self-supervised grid is
/// vision_grid x vision_grid over the same canvas.
struct SceneGeometry {
  std::size_t canvas = 192;
  std::size_t crop_grid = 4;
  std::size_t crop_patches = 24;
  std::size_t vision_grid = 24;
  double patch_px = 14.0;
  std::size_t align_px = 8;  // rectangle edges snap to this pitch

  std::size_t clip_grid() const { return crop_grid * crop_patches; }

  void validate() const {
    if (canvas == 0 || crop_grid == 0 || crop_patches == 0 || vision_grid == 0 ||
        align_px == 0 || !(patch_px > 0.0)) {
      throw DomainError("scene geometry: zero extent");
    }
    if (canvas % align_px != 0) throw DomainError("scene geometry: canvas % align_px != 0");
  }
};

namespace detail {

/// Majority class per cell of a grid_h x grid_w partition of the canvas;
/// ties go to the lowest class id, or to -1 when `strict`.
inline std::vector<int> majority_classes(const SegmentationMap& gt, std::size_t grid_h,
                                         std::size_t grid_w, std::size_t num_classes,
                                         bool strict = false) {
  std::vector<std::uint32_t> counts(grid_h * grid_w * num_classes, 0);
  for (std::size_t y = 0; y < gt.height; ++y) {
    const std::size_t gy = y * grid_h / gt.height;
    for (std::size_t x = 0; x < gt.width; ++x) {
      const std::size_t gx = x * grid_w / gt.width;
      ++counts[(gy * grid_w + gx) * num_classes + static_cast<std::size_t>(gt.at(y, x))];
    }
  }
  std::vector<int> out(grid_h * grid_w, 0);
  for (std::size_t p = 0; p < out.size(); ++p) {
    std::uint32_t best = 0;
    bool tied = false;
    for (std::size_t k = 0; k < num_classes; ++k) {
      const std::uint32_t n = counts[p * num_classes + k];
      if (n > best) {
        best = n;
        out[p] = static_cast<int>(k);
        tied = false;
      } else if (n == best && n > 0) {
        tied = true;
      }
    }
    if (tied && strict) out[p] = -1;
  }
  return out;
}

}  // namespace detail

/// Draws a random scene whose every visible class wins at least
/// `min_crop_votes` crops by strict pixel majority, so a noiseless detector finds
/// all of them. Rejection-samples up to 10000 layouts.
inline SyntheticScene generate_scene(const SyntheticWorld& world, const SceneGeometry& geo,
                                     SeededRng& rng, std::size_t min_crop_votes = 2,
                                     std::size_t max_regions = 3) {
  geo.validate();
  const std::size_t units = geo.canvas / geo.align_px;
  const std::size_t k = world.num_classes;
  const std::size_t lo = std::max<std::size_t>(1, units / 4);
  const std::size_t hi = std::max(lo, units * 3 / 4);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    SyntheticScene s;
    s.height = s.width = geo.canvas;
    s.background = static_cast<int>(rng.uniform_int(k));
    const std::size_t n_rect =
        1 + static_cast<std::size_t>(rng.uniform_int(std::min(max_regions, k - 1)));
    std::vector<int> pool;
    for (std::size_t c = 0; c < k; ++c)
      if (static_cast<int>(c) != s.background) pool.push_back(static_cast<int>(c));
    for (std::size_t i = 0; i < n_rect; ++i) {
      const std::size_t pick = i + static_cast<std::size_t>(rng.uniform_int(pool.size() - i));
      std::swap(pool[i], pool[pick]);
      const std::size_t h = lo + static_cast<std::size_t>(rng.uniform_int(hi - lo + 1));
      const std::size_t w = lo + static_cast<std::size_t>(rng.uniform_int(hi - lo + 1));
      const std::size_t y = static_cast<std::size_t>(rng.uniform_int(units - h + 1));
      const std::size_t x = static_cast<std::size_t>(rng.uniform_int(units - w + 1));
      s.regions.push_back({pool[i], y * geo.align_px, x * geo.align_px,
                           (y + h) * geo.align_px, (x + w) * geo.align_px});
    }
    // Every region must stay visible and every visible class must be detectable.
    const auto rm = s.region_map();
    std::vector<std::size_t> area(n_rect + 1, 0);
    for (const auto r : rm) ++area[r];
    if (std::find(area.begin(), area.end(), 0u) != area.end()) continue;
    const auto gt = s.ground_truth();
    // Tied crops do not count: a tied token's argmax is decided by rounding.
    const auto crop_class =
        detail::majority_classes(gt, geo.crop_grid, geo.crop_grid, k, /*strict=*/true);
    bool ok = true;
    for (std::size_t r = 0; r <= n_rect && ok; ++r) {
      const int cls = s.region_class(r);
      const auto votes = static_cast<std::size_t>(
          std::count(crop_class.begin(), crop_class.end(), cls));
      ok = votes >= min_crop_votes;
    }
    if (ok) return s;
  }
  throw DomainError("generate_scene: no valid layout found");
}

/// Encoder outputs for one rendered scene.
struct RenderedImage {
  std::vector<Tensor3D> crop_features;  // row-major over crops
  Tensor2D cls_tokens;                  // one per crop
  Tensor3D clip_grid;                   // mosaicked image-text grid
  Tensor3D vision_features;             // self-supervised grid
  SegmentationMap ground_truth;
  std::vector<int> clip_patch_classes;    // majority class per image-text patch
  std::vector<int> vision_patch_classes;  // majority class per vision patch
};

inline RenderedImage render_scene(const SyntheticWorld& world, const SyntheticScene& scene,
                                  const SceneGeometry& geo, std::uint64_t seed) {
  scene.validate();
  geo.validate();
  if (scene.height != geo.canvas || scene.width != geo.canvas) {
    throw ShapeError("render_scene: scene canvas does not match geometry");
  }
  RenderedImage out;
  out.ground_truth = scene.ground_truth();
  const std::size_t gc = geo.clip_grid();
  const std::size_t dt = world.text_dim;
  out.clip_patch_classes =
      detail::majority_classes(out.ground_truth, gc, gc, world.num_classes);
  out.vision_patch_classes = detail::majority_classes(out.ground_truth, geo.vision_grid,
                                                      geo.vision_grid, world.num_classes);

  SeededRng rng(derive_seed(seed, "render"));
  out.clip_grid = Tensor3D(gc, gc, dt);
  for (std::size_t y = 0; y < gc; ++y) {
    for (std::size_t x = 0; x < gc; ++x) {
      auto cell = out.clip_grid.cell(y, x);
      const auto t = world.text_prototypes.row(
          static_cast<std::size_t>(out.clip_patch_classes[y * gc + x]));
      for (std::size_t c = 0; c < dt; ++c) cell[c] = t[c] + world.sigma * rng.normal();
      l2_normalize_inplace(cell);
    }
  }

  const std::size_t cp = geo.crop_patches;
  out.cls_tokens = Tensor2D(geo.crop_grid * geo.crop_grid, dt);
  for (std::size_t cr = 0; cr < geo.crop_grid; ++cr) {
    for (std::size_t cc = 0; cc < geo.crop_grid; ++cc) {
      Tensor3D crop(cp, cp, dt);
      auto token = out.cls_tokens.row(cr * geo.crop_grid + cc);
      for (std::size_t i = 0; i < cp; ++i) {
        for (std::size_t j = 0; j < cp; ++j) {
          const auto src = out.clip_grid.cell(cr * cp + i, cc * cp + j);
          std::copy(src.begin(), src.end(), crop.cell(i, j).begin());
          for (std::size_t c = 0; c < dt; ++c) token[c] += src[c];
        }
      }
      for (double& v : token) v /= static_cast<double>(cp * cp);
      l2_normalize_inplace(token);
      out.crop_features.push_back(std::move(crop));
    }
  }

  const std::size_t gv = geo.vision_grid;
  std::vector<std::vector<double>> embeddings;
  for (std::size_t k = 0; k < world.num_classes; ++k) {
    embeddings.push_back(world.vision_embedding(k));
  }
  out.vision_features = Tensor3D(gv, gv, world.vision_dim);
  for (std::size_t y = 0; y < gv; ++y) {
    for (std::size_t x = 0; x < gv; ++x) {
      auto cell = out.vision_features.cell(y, x);
      const auto& e =
          embeddings[static_cast<std::size_t>(out.vision_patch_classes[y * gv + x])];
      for (std::size_t c = 0; c < world.vision_dim; ++c) {
        cell[c] = e[c] + world.sigma * rng.normal();
      }
      l2_normalize_inplace(cell);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mask oracle.

namespace detail {

/// Chebyshev dilation (grow = true) or erosion by `radius` pixels. Pixels
/// outside the canvas are ignored, so erosion does not eat canvas borders.
inline BinaryMask morph(const BinaryMask& m, std::size_t radius, bool grow) {
  BinaryMask out(m.height, m.width);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const auto h = static_cast<std::ptrdiff_t>(m.height);
  const auto w = static_cast<std::ptrdiff_t>(m.width);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      bool any = false, all = true;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const auto yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
          const bool v = m.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
          any = any || v;
          all = all && v;
        }
      }
      out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = grow ? any : all;
    }
  }
  return out;
}

inline BinaryMask region_mask(const std::vector<std::uint16_t>& rm, std::size_t h,
                              std::size_t w, std::size_t region) {
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < rm.size(); ++i) m.data[i] = rm[i] == region;
  return m;
}

}  // namespace detail

/// Three candidate masks for a point prompt: the visible region holding the
/// most points (ties: lowest region index, background first), that region
/// dilated by 2 px, and eroded by 2 px. Each confidence is the candidate's
/// IoU against the first, so the first always scores 1.
inline std::vector<MaskProposal> oracle_point_masks(
    const SyntheticScene& scene, std::span<const std::array<int, 2>> points) {
  if (points.empty()) throw DomainError("oracle_point_masks: no query points");
  const auto rm = scene.region_map();
  std::vector<std::size_t> votes(scene.regions.size() + 1, 0);
  for (const auto& p : points) {
    const int x = p[0], y = p[1];
    if (x < 0 || y < 0 || static_cast<std::size_t>(x) >= scene.width ||
        static_cast<std::size_t>(y) >= scene.height) {
      throw DomainError("oracle_point_masks: point outside canvas");
    }
    ++votes[rm[static_cast<std::size_t>(y) * scene.width + static_cast<std::size_t>(x)]];
  }
  const auto region = static_cast<std::size_t>(
      std::max_element(votes.begin(), votes.end()) - votes.begin());
  BinaryMask base = detail::region_mask(rm, scene.height, scene.width, region);
  BinaryMask grown = detail::morph(base, 2, true);
  BinaryMask shrunk = detail::morph(base, 2, false);
  std::vector<MaskProposal> out;
  const double c_grown = mask_iou(grown, base);
  const double c_shrunk = mask_iou(shrunk, base);
  out.push_back({std::move(base), 1.0, std::nullopt});
  out.push_back({std::move(grown), c_grown, std::nullopt});
  out.push_back({std::move(shrunk), c_shrunk, std::nullopt});
  return out;
}

/// One unlabeled mask per visible region, in region order, with a
/// predicted-IoU drawn uniformly from [0.9, 1.0]. No filtering here.
inline std::vector<MaskProposal> oracle_auto_masks(const SyntheticScene& scene,
                                                   std::uint64_t seed) {
  scene.validate();
  const auto rm = scene.region_map();
  SeededRng rng(derive_seed(seed, "auto_masks"));
  std::vector<MaskProposal> out;
  for (std::size_t r = 0; r <= scene.regions.size(); ++r) {
    BinaryMask m = detail::region_mask(rm, scene.height, scene.width, r);
    const double conf = rng.uniform(0.9, 1.0);
    if (m.area() == 0) continue;
    out.push_back({std::move(m), conf, std::nullopt});
  }
  return out;
}

/// MaskOracle adapter over a scene's ground truth.
class SceneMaskOracle final : public MaskOracle {
 public:
  explicit SceneMaskOracle(SyntheticScene scene) : scene_(std::move(scene)) {}

  std::vector<MaskProposal> point_masks(
      int /*class_id*/, std::span<const std::array<int, 2>> points) const override {
    return oracle_point_masks(scene_, points);
  }

 private:
  SyntheticScene scene_;
};

// ---------------------------------------------------------------------------
// Dataset export.

/// Writes one rendered scene under `root` and returns its manifest record.
inline ImageRecord export_image(const fs::path& root, const std::string& image_id,
                                const std::string& split, const SyntheticScene& scene,
                                const RenderedImage& img, const SceneGeometry& geo,
                                const std::vector<MaskProposal>& auto_masks) {
  ImageRecord r;
  r.image_id = image_id;
  r.split = split;
  r.height = scene.height;
  r.width = scene.width;
  r.crop_rows = r.crop_cols = geo.crop_grid;
  r.grid_h = r.grid_w = geo.clip_grid();
  r.patch_px = geo.patch_px;
  for (std::size_t c = 0; c < img.crop_features.size(); ++c) {
    std::ostringstream name;
    name << "tensors/" << image_id << "_crop" << std::setw(2) << std::setfill('0') << c
         << ".fmt";
    write_tensor3d(root / name.str(), img.crop_features[c]);
    r.crop_features.push_back(name.str());
  }
  r.cls_tokens = "tensors/" + image_id + "_cls.fmt";
  write_tensor2d(root / r.cls_tokens, img.cls_tokens);
  r.vision_features = "tensors/" + image_id + "_vision.fmt";
  write_tensor3d(root / *r.vision_features, img.vision_features);
  if (!auto_masks.empty()) {
    AutoMaskSetRef ref{"masks/" + image_id + "_auto.fmt", {}};
    std::vector<const BinaryMask*> stack;
    for (const auto& m : auto_masks) {
      stack.push_back(&m.mask);
      ref.confidences.push_back(m.confidence);
    }
    write_mask_stack(root / ref.path, stack);
    r.auto_masks = std::move(ref);
  }
  r.ground_truth = "masks/" + image_id + "_gt.fmt";
  write_segmentation(root / *r.ground_truth, img.ground_truth);
  std::set<int> present(img.ground_truth.labels.begin(), img.ground_truth.labels.end());
  r.image_level_labels = std::vector<int>(present.begin(), present.end());
  r.synthetic_scene = scene_to_json(scene);
  return r;
}

}  // namespace fmseg::synth

#endif  // FMSEG_SYNTHWORLD_HPP_
