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

// Dense f64 kernels shared by every stage of the pipeline. All functions are
// pure; none of them touch global state.

#ifndef FMSEG_NUMERICS_HPP_
#define FMSEG_NUMERICS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fmseg/error.hpp"

namespace fmseg {

/// Row-major matrix of doubles.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Tensor2D: " + std::to_string(data_.size()) +
                       " elements for shape " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  static Tensor2D from_rows(
      std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t n = rows.size();
    const std::size_t m = n == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(n * m);
    for (const auto& r : rows) {
      if (r.size() != m) throw ShapeError("Tensor2D::from_rows: ragged rows");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor2D(n, m, std::move(data));
  }

  static Tensor2D identity(std::size_t n) {
    Tensor2D out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool operator==(const Tensor2D&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Row-major height x width x channels grid of doubles.
class Tensor3D {
 public:
  Tensor3D() = default;
  Tensor3D(std::size_t height, std::size_t width, std::size_t channels,
           double fill = 0.0)
      : height_(height),
        width_(width),
        channels_(channels),
        data_(height * width * channels, fill) {}
  Tensor3D(std::size_t height, std::size_t width, std::size_t channels,
           std::vector<double> data)
      : height_(height),
        width_(width),
        channels_(channels),
        data_(std::move(data)) {
    if (data_.size() != height_ * width_ * channels_) {
      throw ShapeError("Tensor3D: element count does not match shape");
    }
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t y, std::size_t x, std::size_t c) {
    return data_[(y * width_ + x) * channels_ + c];
  }
  double operator()(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[(y * width_ + x) * channels_ + c];
  }

  std::span<double> cell(std::size_t y, std::size_t x) {
    return {data_.data() + (y * width_ + x) * channels_, channels_};
  }
  std::span<const double> cell(std::size_t y, std::size_t x) const {
    return {data_.data() + (y * width_ + x) * channels_, channels_};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  /// One row per cell, row-major over (y, x).
  Tensor2D flatten() const {
    return Tensor2D(height_ * width_, channels_, data_);
  }
  static Tensor3D unflatten(const Tensor2D& rows, std::size_t height,
                            std::size_t width) {
    if (rows.rows() != height * width) {
      throw ShapeError("Tensor3D::unflatten: row count does not match grid");
    }
    return Tensor3D(height, width, rows.cols(), rows.data());
  }

  bool operator==(const Tensor3D&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Hashing and seeding.

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char ch : bytes) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// SplitMix64 finalizer, used to decorrelate derived seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for one named sub-stream of a root seed.
constexpr std::uint64_t derive_seed(std::uint64_t root,
                                    std::string_view tag) noexcept {
  return mix64(root ^ fnv1a64(tag));
}

/// Per-image seed: root xor hash(image_id), mixed.
constexpr std::uint64_t image_seed(std::uint64_t root,
                                   std::string_view image_id) noexcept {
  return mix64(root ^ fnv1a64(image_id));
}

/// Seeded generator. The engine is std::mt19937_64, whose output sequence is
/// fixed by the C++ standard; every derived distribution below is computed
/// here rather than through <random> distributions, whose algorithms are
/// implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw DomainError("SeededRng::uniform_int: empty range");
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; both variates of a pair are used.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform random k-subset of [0, n), returned in ascending order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n,
                                                      std::size_t k) {
    if (k > n) throw DomainError("sample_without_replacement: k > n");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform_int(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  /// Fisher-Yates permutation of [0, n).
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(idx[i - 1], idx[j]);
    }
    return idx;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Kernels.

/// log(sum(exp(v))) with max-shift.
inline double logsumexp(std::span<const double> values) {
  if (values.empty()) throw DomainError("logsumexp: empty vector");
  double m = -std::numeric_limits<double>::infinity();
  for (const double v : values) {
    if (!std::isfinite(v)) throw DomainError("logsumexp: non-finite input");
    m = std::max(m, v);
  }
  double s = 0.0;
  for (const double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Scales every row to unit Euclidean norm.
inline Tensor2D l2_normalize_rows(const Tensor2D& m) {
  Tensor2D out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double n = norm(row);
    if (!std::isfinite(n)) {
      throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has non-finite norm");
    }
    if (!(n > 1e-12)) {
      throw DomainError("l2_normalize_rows: row " + std::to_string(r) +
                        " has zero norm");
    }
    for (double& v : row) v /= n;
  }
  return out;
}

inline void l2_normalize_inplace(std::span<double> v) {
  const double n = norm(v);
  if (!std::isfinite(n)) throw NumericError("l2_normalize: non-finite norm");
  if (!(n > 1e-12)) throw DomainError("l2_normalize: zero vector");
  for (double& x : v) x /= n;
}

/// out[i][j] = a_i . b_j
inline Tensor2D similarity_matrix(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("similarity_matrix: inner dimensions " +
                     std::to_string(a.cols()) + " and " +
                     std::to_string(b.cols()) + " differ");
  }
  Tensor2D out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(ai, b.row(j));
  }
  return out;
}

/// a (n x k) * b (k x m)
inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
  Tensor2D out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

/// a^T (k x n)^T * b (k x m) -> n x m
inline Tensor2D matmul_tn(const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: row counts differ");
  }
  Tensor2D out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto arow = a.row(k);
    const auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

/// a (n x k) * b^T (m x k)^T -> n x m. Same as similarity_matrix.
inline Tensor2D matmul_nt(const Tensor2D& a, const Tensor2D& b) {
  return similarity_matrix(a, b);
}

inline Tensor2D transpose(const Tensor2D& m) {
  Tensor2D out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

/// Bilinear resize of every channel, align-corners=false with edge clamping:
/// output index i samples the input at (i + 0.5) * in / out - 0.5.
inline Tensor3D bilinear_resize(const Tensor3D& grid, std::size_t out_h,
                                std::size_t out_w) {
  if (grid.height() == 0 || grid.width() == 0 || out_h == 0 || out_w == 0) {
    throw DomainError("bilinear_resize: empty input or output extent");
  }
  struct Tap {
    std::size_t i0, i1;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[i] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(grid.height(), out_h);
  const auto tx = taps(grid.width(), out_w);
  const std::size_t ch = grid.channels();
  Tensor3D out(out_h, out_w, ch);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = ty[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = tx[x];
      const auto a = grid.cell(y0, x0);
      const auto b = grid.cell(y0, x1);
      const auto c = grid.cell(y1, x0);
      const auto d = grid.cell(y1, x1);
      auto o = out.cell(y, x);
      for (std::size_t k = 0; k < ch; ++k) {
        const double top = a[k] + fx * (b[k] - a[k]);
        const double bot = c[k] + fx * (d[k] - c[k]);
        o[k] = top + fy * (bot - top);
      }
    }
  }
  return out;
}

/// Index of the maximum; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(),
                     [](double x) { return std::isfinite(x); });
}

}  // namespace fmseg

#endif  // FMSEG_NUMERICS_HPP_
