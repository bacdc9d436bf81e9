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

#ifndef FMSEG_TYPES_HPP_
#define FMSEG_TYPES_HPP_

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmseg/error.hpp"
#include "fmseg/numerics.hpp"

namespace fmseg {

/// Grid of unit-norm patch embeddings for one image.
struct FeatureGrid {
  std::string image_id;
  Tensor3D features;

  std::size_t height() const noexcept { return features.height(); }
  std::size_t width() const noexcept { return features.width(); }
  std::size_t dim() const noexcept { return features.channels(); }

  /// Throws ValidationError when a patch is not unit norm within `tol`.
  void validate(double tol = 1e-6) const {
    for (std::size_t y = 0; y < height(); ++y) {
      for (std::size_t x = 0; x < width(); ++x) {
        const double n = norm(features.cell(y, x));
        if (!(std::abs(n - 1.0) <= tol)) {
          throw ValidationError("feature grid '" + image_id + "': patch (" +
                                std::to_string(y) + "," + std::to_string(x) +
                                ") has norm " + std::to_string(n));
        }
      }
    }
  }
};

/// Class names with their frozen text embeddings (one unit row per class).
struct TextPrototypeSet {
  std::vector<std::string> names;
  Tensor2D prototypes;
  std::string text_template = "a photo of a {}";

  std::size_t size() const noexcept { return prototypes.rows(); }
  std::size_t dim() const noexcept { return prototypes.cols(); }

  void validate(double tol = 1e-6) const {
    if (names.size() != prototypes.rows()) {
      throw ValidationError("vocabulary: " + std::to_string(names.size()) +
                            " names but " + std::to_string(prototypes.rows()) +
                            " prototype rows");
    }
    std::set<std::string> seen;
    for (const auto& n : names) {
      if (!seen.insert(n).second) {
        throw ValidationError("vocabulary: duplicate class name '" + n + "'");
      }
    }
    for (std::size_t k = 0; k < prototypes.rows(); ++k) {
      const double n = norm(prototypes.row(k));
      if (!(std::abs(n - 1.0) <= tol)) {
        throw ValidationError("vocabulary: prototype " + std::to_string(k) +
                              " is not unit norm");
      }
    }
  }

  /// Prototype rows for the listed classes, in the listed order.
  Tensor2D subset(const std::vector<int>& class_ids) const {
    Tensor2D out(class_ids.size(), dim());
    for (std::size_t i = 0; i < class_ids.size(); ++i) {
      const auto src = prototypes.row(static_cast<std::size_t>(class_ids[i]));
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }
};

/// Pixel-resolution binary mask, values in {0, 1}.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), data(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const {
    return data[y * width + x];
  }

  std::size_t area() const {
    std::size_t n = 0;
    for (const auto v : data) n += v;
    return n;
  }

  bool operator==(const BinaryMask&) const = default;
};

inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("mask_iou: mask shapes differ");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += (a.data[i] & b.data[i]);
    uni += (a.data[i] | b.data[i]);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// A mask from the mask oracle with its confidence and optional label.
struct MaskProposal {
  BinaryMask mask;
  double confidence = 0.0;
  std::optional<int> class_id;
};

enum class AnnotationStage { kPointPrompt, kAutoMask };

inline std::string stage_tag(AnnotationStage s) {
  return s == AnnotationStage::kPointPrompt ? "1.1" : "1.2";
}

inline AnnotationStage parse_stage_tag(const std::string& tag) {
  if (tag == "1.1") return AnnotationStage::kPointPrompt;
  if (tag == "1.2") return AnnotationStage::kAutoMask;
  throw ValidationError("unknown annotation stage '" + tag + "'");
}

struct PseudoAnnotation {
  std::string image_id;
  int class_id = 0;
  BinaryMask mask;
  double confidence = 0.0;
  AnnotationStage stage = AnnotationStage::kPointPrompt;

  bool operator==(const PseudoAnnotation&) const = default;
};

using AnnotationSet = std::vector<PseudoAnnotation>;

/// Answers point prompts with scored candidate masks. `class_id` names the
/// class the points were selected for; backends that precompute prompts per
/// class use it as the lookup key. Throws on failure.
class MaskOracle {
 public:
  virtual ~MaskOracle() = default;
  virtual std::vector<MaskProposal> point_masks(
      int class_id, std::span<const std::array<int, 2>> points) const = 0;
};

/// Per-pixel class ids. Ground truth may carry kIgnoreLabel.
struct SegmentationMap {
  static constexpr std::int32_t kIgnoreLabel = 255;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;

  SegmentationMap() = default;
  SegmentationMap(std::size_t h, std::size_t w, std::int32_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::int32_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const {
    return labels[y * width + x];
  }

  bool operator==(const SegmentationMap&) const = default;
};

/// Per-patch labels; kUnlabeled marks patches without a pseudo label.
struct PatchLabelGrid {
  static constexpr std::int32_t kUnlabeled = -1;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;

  PatchLabelGrid() = default;
  PatchLabelGrid(std::size_t h, std::size_t w)
      : height(h), width(w), labels(h * w, kUnlabeled) {}

  std::int32_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const {
    return labels[y * width + x];
  }

  std::size_t labeled_count() const {
    std::size_t n = 0;
    for (const auto l : labels) n += (l != kUnlabeled);
    return n;
  }
};

// ---------------------------------------------------------------------------
// Pixel <-> patch geometry. Pixel row i belongs to patch row
// floor(i * grid_h / pixel_h), and likewise for columns, so the patches
// partition the pixels even when the sizes do not divide.

struct PatchCoverage {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<std::uint32_t> inside;  // mask pixels per patch
  std::vector<std::uint32_t> total;   // pixels per patch

  /// More than half of the patch's pixels lie inside the mask.
  bool covered(std::size_t p) const {
    return total[p] > 0 && 2ULL * inside[p] > total[p];
  }
};

inline PatchCoverage patch_coverage(const BinaryMask& mask, std::size_t grid_h,
                                    std::size_t grid_w) {
  if (grid_h == 0 || grid_w == 0 || mask.height == 0 || mask.width == 0) {
    throw ShapeError("patch_coverage: empty grid or mask");
  }
  PatchCoverage cov{grid_h, grid_w, std::vector<std::uint32_t>(grid_h * grid_w),
                    std::vector<std::uint32_t>(grid_h * grid_w)};
  std::vector<std::size_t> col_patch(mask.width);
  for (std::size_t x = 0; x < mask.width; ++x) col_patch[x] = x * grid_w / mask.width;
  for (std::size_t y = 0; y < mask.height; ++y) {
    const std::size_t pr = y * grid_h / mask.height;
    for (std::size_t x = 0; x < mask.width; ++x) {
      const std::size_t p = pr * grid_w + col_patch[x];
      ++cov.total[p];
      cov.inside[p] += mask.at(y, x);
    }
  }
  return cov;
}

}  // namespace fmseg

#endif  // FMSEG_TYPES_HPP_
