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

#ifndef FMSEG_INFER_HPP_
#define FMSEG_INFER_HPP_

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fmseg/align/heads.hpp"
#include "fmseg/error.hpp"
#include "fmseg/numerics.hpp"
#include "fmseg/types.hpp"
#include <nlohmann/json.hpp>

namespace fmseg::infer {

struct PatchClassification {
  Tensor3D sim;             // H_p x W_p x K
  SegmentationMap argmax;   // H_p x W_p
};

/// Aligns the grid and scores every patch against every prototype.
inline PatchClassification classify_patches(const align::AlignmentHead& head,
                                            const FeatureGrid& grid, const Tensor2D& prototypes) {
  if (prototypes.rows() == 0) throw DomainError("classify_patches: no prototypes");
  const Tensor2D z = head.forward(grid.features.flatten());
  const Tensor2D s = similarity_matrix(z, prototypes);
  PatchClassification out{Tensor3D::unflatten(s, grid.height(), grid.width()),
                          SegmentationMap(grid.height(), grid.width())};
  for (std::size_t i = 0; i < s.rows(); ++i) {
    out.argmax.labels[i] = static_cast<std::int32_t>(argmax(s.row(i)));
  }
  return out;
}

/// Upsamples every similarity channel to out_h x out_w, then takes the argmax.
inline SegmentationMap base_segmentation(const Tensor3D& sim, std::size_t out_h, std::size_t out_w) {
  const Tensor3D up = bilinear_resize(sim, out_h, out_w);
  SegmentationMap out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      out.at(y, x) = static_cast<std::int32_t>(argmax(up.cell(y, x)));
  return out;
}

/// Majority patch label inside `mask`, or nullopt when it covers no patch.
inline std::optional<std::int32_t> mask_vote(const BinaryMask& mask,
                                             const SegmentationMap& patch_argmax) {
  const PatchCoverage cov = patch_coverage(mask, patch_argmax.height, patch_argmax.width);
  std::vector<std::size_t> votes;
  for (std::size_t p = 0; p < patch_argmax.labels.size(); ++p) {
    if (!cov.covered(p)) continue;
    const auto l = static_cast<std::size_t>(patch_argmax.labels[p]);
    if (l >= votes.size()) votes.resize(l + 1, 0);
    ++votes[l];
  }
  if (votes.empty()) return std::nullopt;
  const auto best = std::max_element(votes.begin(), votes.end());  // first max = lowest id
  return static_cast<std::int32_t>(best - votes.begin());
}

/// Overlays voted masks on `base`, largest first so smaller masks win overlaps.
inline SegmentationMap refined_segmentation(const SegmentationMap& base,
                                            std::span<const BinaryMask> masks,
                                            const SegmentationMap& patch_argmax) {
  SegmentationMap out = base;
  std::vector<std::size_t> order(masks.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> areas(masks.size());
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].height != base.height || masks[i].width != base.width) {
      throw ShapeError("refined_segmentation: mask " + std::to_string(i) +
                       " does not match the image size");
    }
    areas[i] = masks[i].area();
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return areas[a] > areas[b]; });
  for (const std::size_t i : order) {
    const auto label = mask_vote(masks[i], patch_argmax);
    if (!label) continue;
    const auto& m = masks[i].data;
    for (std::size_t p = 0; p < m.size(); ++p)
      if (m[p]) out.labels[p] = *label;
  }
  return out;
}

struct EvalProtocol {
  std::size_t num_classes = 0;
  std::optional<std::int32_t> background_id;
  std::set<std::int32_t> background_classes;  // remapped onto background_id
  std::int32_t ignore_label = SegmentationMap::kIgnoreLabel;

  void validate() const {
    if (num_classes == 0) throw ConfigError("eval: num_classes must be positive");
    if (!background_classes.empty() && !background_id) {
      throw ConfigError("eval: background classes listed without a background id");
    }
    if (background_id) {
      if (*background_id < 0 || static_cast<std::size_t>(*background_id) >= num_classes) {
        throw ConfigError("eval: background id out of range");
      }
      if (background_classes.contains(*background_id)) {
        throw ConfigError("eval: background id is also listed as a remapped class");
      }
    }
  }
};

inline SegmentationMap remap_background(const SegmentationMap& pred, const EvalProtocol& protocol) {
  SegmentationMap out = pred;
  if (protocol.background_classes.empty()) return out;
  for (auto& l : out.labels)
    if (protocol.background_classes.contains(l)) l = *protocol.background_id;
  return out;
}

struct MiouResult {
  std::vector<std::optional<double>> per_class_iou;  // nullopt when the union is empty
  double miou = 0.0;
  std::int64_t pixel_count = 0;
};

/// Integer intersection and union counts; merge() is associative and commutative.
class ConfusionCounts {
 public:
  explicit ConfusionCounts(std::size_t num_classes, std::int32_t ignore = SegmentationMap::kIgnoreLabel)
      : ignore_(ignore), inter_(num_classes, 0), pred_(num_classes, 0), gt_(num_classes, 0) {}

  void add(const SegmentationMap& pred, const SegmentationMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
      throw ShapeError("miou: prediction " + std::to_string(pred.height) + "x" +
                       std::to_string(pred.width) + " vs ground truth " +
                       std::to_string(gt.height) + "x" + std::to_string(gt.width));
    }
    const auto k = static_cast<std::int64_t>(inter_.size());
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      const std::int32_t g = gt.labels[i];
      if (g == ignore_) continue;
      const std::int32_t p = pred.labels[i];
      if (p < 0 || p >= k) {
        throw ValidationError("miou: predicted label " + std::to_string(p) + " out of range");
      }
      if (g < 0 || g >= k) {
        throw ValidationError("miou: ground-truth label " + std::to_string(g) + " out of range");
      }
      ++pixels_;
      ++pred_[static_cast<std::size_t>(p)];
      ++gt_[static_cast<std::size_t>(g)];
      if (p == g) ++inter_[static_cast<std::size_t>(p)];
    }
  }

  void merge(const ConfusionCounts& o) {
    if (o.inter_.size() != inter_.size()) throw ShapeError("miou: class counts differ");
    for (std::size_t c = 0; c < inter_.size(); ++c) {
      inter_[c] += o.inter_[c];
      pred_[c] += o.pred_[c];
      gt_[c] += o.gt_[c];
    }
    pixels_ += o.pixels_;
  }

  std::int64_t intersection(std::size_t c) const { return inter_[c]; }
  std::int64_t union_count(std::size_t c) const { return pred_[c] + gt_[c] - inter_[c]; }
  std::int64_t pixel_count() const { return pixels_; }

  MiouResult result() const {
    MiouResult r;
    r.pixel_count = pixels_;
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < inter_.size(); ++c) {
      const std::int64_t u = union_count(c);
      if (u == 0) {
        r.per_class_iou.emplace_back();
        continue;
      }
      const double iou = static_cast<double>(inter_[c]) / static_cast<double>(u);
      r.per_class_iou.emplace_back(iou);
      sum += iou;
      ++defined;
    }
    if (defined == 0) throw DomainError("no evaluable pixels");
    r.miou = sum / static_cast<double>(defined);
    return r;
  }

 private:
  std::int32_t ignore_;
  std::vector<std::int64_t> inter_, pred_, gt_;
  std::int64_t pixels_ = 0;
};

inline MiouResult miou(const SegmentationMap& pred, const SegmentationMap& gt,
                       const EvalProtocol& protocol) {
  ConfusionCounts c(protocol.num_classes, protocol.ignore_label);
  c.add(pred, gt);
  return c.result();
}

inline nlohmann::json report_json(const MiouResult& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) per.push_back(v ? nlohmann::json(*v) : nlohmann::json());
  return {{"per_class_iou", per}, {"miou", r.miou}, {"pixel_count", r.pixel_count}};
}

}  // namespace fmseg::infer

#endif  // FMSEG_INFER_HPP_
