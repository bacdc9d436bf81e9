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

// Brute-force scalar evaluators of the three contrastive losses. Plain
// double loops over std::vector, nothing from the library, so a bug in the
// production kernels cannot leak in here.

#ifndef FMSEG_TESTS_LOSS_ORACLE_HPP_
#define FMSEG_TESTS_LOSS_ORACLE_HPP_

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline double dotp(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) s += a[c] * b[c];
  return s;
}

/// Sum over classes of the prototype-anchored term, before normalisation.
inline double text_terms(const Mat& z, const std::vector<int>& y, const Mat& t) {
  const std::size_t n = z.size(), K = t.size();
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) count += (y[i] == static_cast<int>(k));
    if (count == 0) continue;
    double inner = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i] != static_cast<int>(k)) continue;
      double denom = 0.0;
      for (std::size_t kk = 0; kk < K; ++kk) denom += std::exp(dotp(z[i], t[kk]));
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) denom += std::exp(dotp(z[i], z[j]));
      inner += -dotp(z[i], t[k]) + std::log(denom);
    }
    total += inner / static_cast<double>(count);
  }
  return total;
}

/// Sum over patches of the patch-patch term, before normalisation.
inline double patch_terms(const Mat& z, const std::vector<int>& y) {
  const std::size_t n = z.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t positives = 0;
    for (std::size_t l = 0; l < n; ++l) positives += (l != i && y[l] == y[i]);
    if (positives == 0) continue;
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) denom += std::exp(dotp(z[i], z[j]));
    double inner = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
      if (l == i || y[l] != y[i]) continue;
      inner += -dotp(z[i], z[l]) + std::log(denom);
    }
    total += inner / static_cast<double>(positives);
  }
  return total;
}

inline double tsupcon(const Mat& z, const std::vector<int>& y, const Mat& t) {
  return (text_terms(z, y, t) + patch_terms(z, y)) / static_cast<double>(z.size() + t.size());
}

inline double prototype(const Mat& z, const std::vector<int>& y, const Mat& t) {
  return text_terms(z, y, t) / static_cast<double>(z.size() + t.size());
}

/// SupCon with each prototype appended as one more member of its class.
inline double supcon(const Mat& z, const std::vector<int>& y, const Mat& t) {
  Mat u = z;
  std::vector<int> lab = y;
  for (std::size_t k = 0; k < t.size(); ++k) {
    u.push_back(t[k]);
    lab.push_back(static_cast<int>(k));
  }
  return patch_terms(u, lab) / static_cast<double>(u.size());
}

}  // namespace oracle

#endif  // FMSEG_TESTS_LOSS_ORACLE_HPP_
