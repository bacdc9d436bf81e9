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

#ifndef FMSEG_ALIGN_LABELS_HPP_
#define FMSEG_ALIGN_LABELS_HPP_

#include <cstddef>
#include <span>
#include <vector>

#include "fmseg/error.hpp"
#include "fmseg/types.hpp"

namespace fmseg::align {

/// Projects one image's pseudo annotations onto its patch grid. A patch takes
/// class k when k's mask covers more than half of its pixels; contested
/// patches go to the more confident annotation, then the lower class id.
inline PatchLabelGrid assign_patch_labels(std::span<const PseudoAnnotation* const> annotations,
                                          std::size_t grid_h, std::size_t grid_w,
                                          std::size_t image_h, std::size_t image_w) {
  PatchLabelGrid out(grid_h, grid_w);
  std::vector<double> best_conf(grid_h * grid_w, -1.0);
  for (const auto* a : annotations) {
    if (a->mask.height != image_h || a->mask.width != image_w) {
      throw ShapeError("assign_patch_labels: mask of '" + a->image_id +
                       "' does not match the image size");
    }
    const PatchCoverage cov = patch_coverage(a->mask, grid_h, grid_w);
    for (std::size_t p = 0; p < out.labels.size(); ++p) {
      if (!cov.covered(p)) continue;
      const bool wins = a->confidence > best_conf[p] ||
                        (a->confidence == best_conf[p] && a->class_id < out.labels[p]);
      if (wins) {
        best_conf[p] = a->confidence;
        out.labels[p] = a->class_id;
      }
    }
  }
  return out;
}

inline PatchLabelGrid assign_patch_labels(const AnnotationSet& annotations, std::size_t grid_h,
                                          std::size_t grid_w, std::size_t image_h,
                                          std::size_t image_w) {
  std::vector<const PseudoAnnotation*> ptrs;
  for (const auto& a : annotations) ptrs.push_back(&a);
  return assign_patch_labels(std::span<const PseudoAnnotation* const>(ptrs), grid_h, grid_w,
                             image_h, image_w);
}

}  // namespace fmseg::align

#endif  // FMSEG_ALIGN_LABELS_HPP_
