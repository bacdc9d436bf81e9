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

#ifndef FMSEG_ALIGN_TRAIN_HPP_
#define FMSEG_ALIGN_TRAIN_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "fmseg/align/heads.hpp"
#include "fmseg/align/losses.hpp"
#include "fmseg/error.hpp"
#include "fmseg/numerics.hpp"
#include "fmseg/types.hpp"

namespace fmseg::align {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 5;  // images per step
  double lr = 0.1;             // initial rate, annealed to 0
  double momentum = 0.0;       // heavy-ball coefficient in [0, 1)
  LossKind loss = LossKind::kTSupCon;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0, 1)");
    if (!(temperature > 0.0)) throw ConfigError("train: temperature must be positive");
  }
};

/// One image's vision patches (row-major over the grid) with patch labels.
struct TrainingImage {
  std::string image_id;
  Tensor2D features;
  std::vector<std::int32_t> labels;  // PatchLabelGrid::kUnlabeled or a class id

  static TrainingImage from_grid(const FeatureGrid& grid, const PatchLabelGrid& labels) {
    if (labels.height != grid.height() || labels.width != grid.width()) {
      throw ShapeError("training image '" + grid.image_id + "': label grid " +
                       std::to_string(labels.height) + "x" + std::to_string(labels.width) +
                       " does not match feature grid " + std::to_string(grid.height()) + "x" +
                       std::to_string(grid.width()));
    }
    return {grid.image_id, grid.features.flatten(), labels.labels};
  }
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::size_t patches = 0;
};

struct TrainResult {
  AlignmentHead head;
  std::vector<StepRecord> log;
  std::size_t steps = 0;
};

inline double cosine_lr(double lr0, std::size_t step, std::size_t total) {
  if (total == 0) return lr0;
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

namespace detail {

struct BatchPass {
  std::vector<HeadCache> caches;
  std::vector<std::vector<std::size_t>> rows;  // labelled rows per image
  LossValue loss;
  std::size_t patches = 0;
};

/// Forward every image of the batch, pool labelled rows, evaluate the loss.
inline BatchPass batch_loss(const AlignmentHead& head, std::span<const TrainingImage* const> images,
                            const Tensor2D& prototypes, LossKind kind, double temperature) {
  BatchPass pass;
  pass.caches.resize(images.size());
  pass.rows.resize(images.size());
  std::vector<double> pooled;
  std::vector<int> labels;
  for (std::size_t b = 0; b < images.size(); ++b) {
    const TrainingImage& im = *images[b];
    if (im.labels.size() != im.features.rows()) {
      throw ShapeError("training image '" + im.image_id + "': label count mismatch");
    }
    head.forward(im.features, &pass.caches[b]);
    const Tensor2D& z = pass.caches[b].out;
    for (std::size_t r = 0; r < im.labels.size(); ++r) {
      if (im.labels[r] == PatchLabelGrid::kUnlabeled) continue;
      pass.rows[b].push_back(r);
      labels.push_back(im.labels[r]);
      pooled.insert(pooled.end(), z.row(r).begin(), z.row(r).end());
    }
  }
  pass.patches = labels.size();
  if (pass.patches == 0) return pass;
  const std::size_t d = head.shape().out_dim;
  LossBatch lb = LossBatch::make(Tensor2D(pass.patches, d, std::move(pooled)), std::move(labels),
                                 prototypes);
  pass.loss = compute_loss(kind, lb, temperature);
  return pass;
}

inline std::vector<Tensor2D> batch_gradients(const AlignmentHead& head, const BatchPass& pass) {
  std::vector<Tensor2D> total = head.zero_gradients();
  std::size_t offset = 0;
  for (std::size_t b = 0; b < pass.caches.size(); ++b) {
    const HeadCache& c = pass.caches[b];
    if (pass.rows[b].empty()) continue;
    Tensor2D dz(c.out.rows(), c.out.cols());
    for (const std::size_t r : pass.rows[b]) {
      const auto src = pass.loss.grad.row(offset++);
      std::copy(src.begin(), src.end(), dz.row(r).begin());
    }
    const auto g = head.backward(c, dz);
    for (std::size_t i = 0; i < g.size(); ++i) detail::add_into(total[i], g[i]);
  }
  return total;
}

}  // namespace detail

/// Loss of `head` on the given images pooled into a single batch.
inline double evaluate_loss(const AlignmentHead& head, std::span<const TrainingImage> images,
                            const Tensor2D& prototypes, LossKind kind, double temperature = 1.0) {
  std::vector<const TrainingImage*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  const auto pass = detail::batch_loss(head, ptrs, prototypes, kind, temperature);
  if (pass.patches == 0) throw DomainError("evaluate_loss: no labelled patches");
  return pass.loss.value;
}

/// Mini-batch SGD (optional heavy-ball momentum) with a cosine schedule over
/// epochs * ceil(images / batch_size) steps. Images are reshuffled every epoch.
/// Batches without labelled patches are skipped but still advance the schedule.
inline TrainResult train(std::span<const TrainingImage> images, const Tensor2D& prototypes,
                         AlignmentHead head, const TrainConfig& config,
                         const std::function<void(const StepRecord&)>& on_step = {}) {
  config.validate();
  if (images.empty()) throw DomainError("train: empty dataset");
  if (prototypes.cols() != head.shape().out_dim) {
    throw ShapeError("train: prototype dim does not match the head output");
  }
  std::size_t labelled = 0;
  for (const auto& im : images)
    for (const auto l : im.labels) labelled += (l != PatchLabelGrid::kUnlabeled);
  if (labelled == 0) throw DomainError("train: every patch is unlabeled");

  const std::size_t per_epoch = (images.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = config.epochs * per_epoch;
  SeededRng rng(derive_seed(config.seed, "train_shuffle"));
  TrainResult result{std::move(head), {}, 0};
  std::vector<Tensor2D> velocity = result.head.zero_gradients();

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.permutation(images.size());
    for (std::size_t start = 0; start < images.size(); start += config.batch_size, ++step) {
      std::vector<const TrainingImage*> batch;
      for (std::size_t i = start; i < std::min(images.size(), start + config.batch_size); ++i) {
        batch.push_back(&images[order[i]]);
      }
      const double lr = cosine_lr(config.lr, step, total);
      const auto pass =
          detail::batch_loss(result.head, batch, prototypes, config.loss, config.temperature);
      if (pass.patches == 0) continue;
      if (!std::isfinite(pass.loss.value)) {
        throw NumericError("train: non-finite loss at step " + std::to_string(step));
      }
      const auto grads = detail::batch_gradients(result.head, pass);
      auto& params = result.head.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].value.data();
        auto& v = velocity[i].data();
        const auto& g = grads[i].data();
        for (std::size_t e = 0; e < w.size(); ++e) {
          v[e] = config.momentum * v[e] + g[e];
          w[e] -= lr * v[e];
        }
        if (!all_finite(w)) {
          throw NumericError("train: parameter '" + params[i].name +
                             "' became non-finite at step " + std::to_string(step));
        }
      }
      const StepRecord rec{step, lr, pass.loss.value, pass.patches};
      result.log.push_back(rec);
      if (on_step) on_step(rec);
    }
  }
  result.steps = step;
  return result;
}

}  // namespace fmseg::align

#endif  // FMSEG_ALIGN_TRAIN_HPP_
