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

// Contrastive alignment losses over a batch of aligned patch features Z
// (n x D, unit rows) with labels y and frozen unit text prototypes T (K x D).
// Similarities are dot products divided by a temperature (default 1).
//
// Text-anchored loss, normalised by c = 1 / (n + K):
//
//   L = c * ( sum_k lt(t_k) + sum_i lim(z_i) )
//
//   lt(t_k)  = 1/N_k sum_{i: y_i = k} [ -s(z_i, t_k)
//                 + log( sum_k' exp s(z_i, t_k') + sum_{j != i} exp s(z_i, z_j) ) ]
//   lim(z_i) = 1/P_i sum_{l != i, y_l = y_i} [ -s(z_i, z_l)
//                 + log sum_{j != i} exp s(z_i, z_j) ]
//
// where N_k counts patches of class k and P_i = N_{y_i} - 1 counts positives
// excluding the anchor; lim(z_i) = 0 when P_i = 0 and lt(t_k) = 0 when N_k = 0.
//
// The prototype-only variant drops the lim sum (same normaliser). The pooled
// variant runs SupCon over Z and T together, each t_k being one more member of
// class k, averaged over all n + K members (anchors without positives add 0).
//
// Every routine returns the exact gradient with respect to Z; T is frozen.
// Pairwise work is done one anchor row at a time in a fixed order, so memory
// is O(n) and results are bit-reproducible.

#ifndef FMSEG_ALIGN_LOSSES_HPP_
#define FMSEG_ALIGN_LOSSES_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fmseg/error.hpp"
#include "fmseg/numerics.hpp"

namespace fmseg::align {

enum class LossKind { kTSupCon, kSupCon, kPrototype };

inline std::string_view loss_name(LossKind k) {
  switch (k) {
    case LossKind::kTSupCon: return "tsupcon";
    case LossKind::kSupCon: return "supcon";
    case LossKind::kPrototype: return "prototype";
  }
  return "?";
}

inline LossKind parse_loss(std::string_view name) {
  if (name == "tsupcon") return LossKind::kTSupCon;
  if (name == "supcon") return LossKind::kSupCon;
  if (name == "prototype") return LossKind::kPrototype;
  throw ConfigError("unknown loss '" + std::string(name) + "'");
}

/// Labelled aligned patches plus the prototypes they are contrasted with.
struct LossBatch {
  Tensor2D features;    // z_i, n x D
  std::vector<int> labels;
  Tensor2D prototypes;  // t_k, K x D
  std::vector<std::size_t> class_counts;  // N_k

  static LossBatch make(Tensor2D features, std::vector<int> labels, Tensor2D prototypes) {
    if (features.rows() == 0) throw DomainError("loss batch: no patches");
    if (prototypes.rows() == 0) throw DomainError("loss batch: no prototypes");
    if (labels.size() != features.rows()) throw ShapeError("loss batch: label count mismatch");
    if (features.cols() != prototypes.cols()) {
      throw ShapeError("loss batch: feature and prototype dims differ");
    }
    LossBatch b{std::move(features), std::move(labels), std::move(prototypes), {}};
    b.class_counts.assign(b.prototypes.rows(), 0);
    for (const int y : b.labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= b.prototypes.rows()) {
        throw DomainError("loss batch: label " + std::to_string(y) + " out of range");
      }
      ++b.class_counts[static_cast<std::size_t>(y)];
    }
    return b;
  }

  std::size_t size() const { return features.rows(); }
  std::size_t num_classes() const { return prototypes.rows(); }
};

struct LossValue {
  double value = 0.0;
  Tensor2D grad;  // dL/dZ
};

namespace detail {

inline double lse_skip(const std::vector<double>& v, std::size_t skip) {
  double m = -INFINITY;
  for (std::size_t j = 0; j < v.size(); ++j)
    if (j != skip) m = std::max(m, v[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j)
    if (j != skip) s += std::exp(v[j] - m);
  return m + std::log(s);
}

inline void axpy(std::span<double> y, double a, std::span<const double> x) {
  for (std::size_t c = 0; c < y.size(); ++c) y[c] += a * x[c];
}

/// Shared body of the text-anchored loss and its prototype-only ablation.
inline LossValue text_anchored(const LossBatch& b, double temperature, bool with_patch_term) {
  if (!(temperature > 0.0)) throw DomainError("loss: temperature must be > 0");
  const std::size_t n = b.size(), kk = b.num_classes(), d = b.features.cols();
  const double inv_t = 1.0 / temperature;
  const double c = 1.0 / static_cast<double>(n + kk);
  const Tensor2D& z = b.features;
  const Tensor2D& t = b.prototypes;

  LossValue out{0.0, Tensor2D(n, d)};
  std::vector<double> s(kk), q(n), joint(kk + n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto zi = z.row(i);
    const auto yi = static_cast<std::size_t>(b.labels[i]);
    for (std::size_t k = 0; k < kk; ++k) s[k] = dot(zi, t.row(k)) * inv_t;
    for (std::size_t j = 0; j < n; ++j) q[j] = j == i ? 0.0 : dot(zi, z.row(j)) * inv_t;

    // Joint normaliser over prototypes and the other patches.
    for (std::size_t k = 0; k < kk; ++k) joint[k] = s[k];
    for (std::size_t j = 0; j < n; ++j) joint[kk + j] = q[j];
    const double lse_a = lse_skip(joint, kk + i);
    const double a_i = c / static_cast<double>(b.class_counts[yi]);
    out.value += a_i * (lse_a - s[yi]);

    const std::size_t positives = b.class_counts[yi] - 1;
    const double b_i = with_patch_term && positives > 0 ? c : 0.0;
    double lse_b = 0.0;
    if (b_i != 0.0) {
      lse_b = lse_skip(q, i);
      double pos_sum = 0.0;
      for (std::size_t l = 0; l < n; ++l)
        if (l != i && b.labels[l] == b.labels[i]) pos_sum += q[l];
      out.value += b_i * (lse_b - pos_sum / static_cast<double>(positives));
    }

    // Coefficients of d/dz_i (anchor side) and d/dz_j (partner side).
    auto gi = out.grad.row(i);
    for (std::size_t k = 0; k < kk; ++k) {
      const double w = a_i * (std::exp(s[k] - lse_a) - (k == yi ? 1.0 : 0.0));
      axpy(gi, w * inv_t, t.row(k));
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double w = a_i * std::exp(q[j] - lse_a);
      if (b_i != 0.0) {
        w += b_i * std::exp(q[j] - lse_b);
        if (b.labels[j] == b.labels[i]) w -= b_i / static_cast<double>(positives);
      }
      if (w == 0.0) continue;
      axpy(gi, w * inv_t, z.row(j));
      axpy(out.grad.row(j), w * inv_t, zi);
    }
  }
  return out;
}

}  // namespace detail

/// Text-anchored supervised contrastive loss (prototype term + patch term).
inline LossValue tsupcon_loss(const LossBatch& batch, double temperature = 1.0) {
  return detail::text_anchored(batch, temperature, true);
}

/// Prototype term alone, with the same 1/(n + K) normaliser.
inline LossValue prototype_loss(const LossBatch& batch, double temperature = 1.0) {
  return detail::text_anchored(batch, temperature, false);
}

/// SupCon over the pooled set {z_i} u {t_k}.
inline LossValue supcon_loss(const LossBatch& b, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw DomainError("loss: temperature must be > 0");
  const std::size_t n = b.size(), kk = b.num_classes(), d = b.features.cols();
  const std::size_t m = n + kk;
  const double inv_t = 1.0 / temperature;
  const double c = 1.0 / static_cast<double>(m);
  auto member = [&](std::size_t a) {
    return a < n ? b.features.row(a) : b.prototypes.row(a - n);
  };
  auto label = [&](std::size_t a) {
    return a < n ? b.labels[a] : static_cast<int>(a - n);
  };

  LossValue out{0.0, Tensor2D(n, d)};
  std::vector<double> r(m);
  for (std::size_t a = 0; a < m; ++a) {
    const int ya = label(a);
    std::size_t positives = 0;
    for (std::size_t p = 0; p < m; ++p) positives += (p != a && label(p) == ya);
    if (positives == 0) continue;
    const auto ua = member(a);
    for (std::size_t j = 0; j < m; ++j) r[j] = j == a ? 0.0 : dot(ua, member(j)) * inv_t;
    const double lse = detail::lse_skip(r, a);
    double pos_sum = 0.0;
    for (std::size_t p = 0; p < m; ++p)
      if (p != a && label(p) == ya) pos_sum += r[p];
    out.value += c * (lse - pos_sum / static_cast<double>(positives));

    for (std::size_t j = 0; j < m; ++j) {
      if (j == a) continue;
      double w = c * std::exp(r[j] - lse);
      if (label(j) == ya) w -= c / static_cast<double>(positives);
      if (a < n) detail::axpy(out.grad.row(a), w * inv_t, member(j));
      if (j < n) detail::axpy(out.grad.row(j), w * inv_t, ua);
    }
  }
  return out;
}

inline LossValue compute_loss(LossKind kind, const LossBatch& batch, double temperature = 1.0) {
  switch (kind) {
    case LossKind::kTSupCon: return tsupcon_loss(batch, temperature);
    case LossKind::kSupCon: return supcon_loss(batch, temperature);
    case LossKind::kPrototype: return prototype_loss(batch, temperature);
  }
  throw DomainError("unknown loss kind");
}

}  // namespace fmseg::align

#endif  // FMSEG_ALIGN_LOSSES_HPP_
