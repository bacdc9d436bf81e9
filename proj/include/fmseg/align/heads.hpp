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

// Trainable maps from vision patch space to text space.
//
//   linear       z = norm(x W + b)
//   mlp          z = norm(gelu(x W1 + b1) W2 + b2)
//   transformer  a  = LN1(x)
//                h1 = x + MHA(a)            (attention over one image's patches)
//                h2 = h1 + W2' gelu(LN2(h1) W1' + c1) + c2
//                z  = norm(h2 Wf + bf)
//
// No positional terms anywhere, so the transformer is permutation-equivariant.
// Backward passes are hand-written and exact (GELU uses erf).

#ifndef FMSEG_ALIGN_HEADS_HPP_
#define FMSEG_ALIGN_HEADS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "fmseg/error.hpp"
#include "fmseg/numerics.hpp"

namespace fmseg::align {

enum class HeadVariant { kLinear, kMlp, kTransformer };

inline std::string_view variant_name(HeadVariant v) {
  switch (v) {
    case HeadVariant::kLinear: return "linear";
    case HeadVariant::kMlp: return "mlp";
    case HeadVariant::kTransformer: return "transformer";
  }
  return "?";
}

inline HeadVariant parse_variant(std::string_view name) {
  if (name == "linear") return HeadVariant::kLinear;
  if (name == "mlp") return HeadVariant::kMlp;
  if (name == "transformer") return HeadVariant::kTransformer;
  throw ConfigError("unknown head variant '" + std::string(name) + "'");
}

struct HeadShape {
  HeadVariant variant = HeadVariant::kLinear;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::size_t hidden = 64;     // mlp width, or feed-forward width of the block
  std::size_t num_heads = 4;   // transformer only

  void validate() const {
    if (in_dim == 0 || out_dim == 0) throw ConfigError("head: dims must be positive");
    if (variant != HeadVariant::kLinear && hidden == 0) {
      throw ConfigError("head: hidden width must be positive");
    }
    if (variant == HeadVariant::kTransformer &&
        (num_heads == 0 || in_dim % num_heads != 0)) {
      throw ConfigError("head: input dim " + std::to_string(in_dim) +
                        " is not divisible by " + std::to_string(num_heads) + " heads");
    }
  }

  bool operator==(const HeadShape&) const = default;
};

struct Parameter {
  std::string name;
  Tensor2D value;
};

/// Intermediates kept by forward() for backward().
struct HeadCache {
  Tensor2D x;
  Tensor2D pre;   // output before normalisation
  Tensor2D out;
  Tensor2D u, g;  // feed-forward pre-activation and GELU output
  // transformer only
  Tensor2D ln1_hat, a;
  std::vector<double> ln1_inv;
  Tensor2D q, k, v, o;
  std::vector<Tensor2D> attn;  // one N x N softmax per head
  Tensor2D h1, ln2_hat, b;
  std::vector<double> ln2_inv;
  Tensor2D h2;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

inline Tensor2D affine(const Tensor2D& x, const Tensor2D& w, const Tensor2D& bias) {
  if (x.cols() != w.rows()) {
    throw ShapeError("head: input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(w.rows()));
  }
  Tensor2D y = matmul(x, w);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t c = 0; c < y.cols(); ++c) row[c] += bias(0, c);
  }
  return y;
}

/// Accumulates dW, db and returns dx.
inline Tensor2D affine_backward(const Tensor2D& x, const Tensor2D& w, const Tensor2D& dy,
                                Tensor2D& dw, Tensor2D& db) {
  const Tensor2D gw = matmul_tn(x, dy);
  for (std::size_t i = 0; i < gw.size(); ++i) dw.data()[i] += gw.data()[i];
  for (std::size_t r = 0; r < dy.rows(); ++r)
    for (std::size_t c = 0; c < dy.cols(); ++c) db(0, c) += dy(r, c);
  return matmul_nt(dy, w);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Tensor2D gelu(const Tensor2D& u) {
  Tensor2D g(u.rows(), u.cols());
  for (std::size_t i = 0; i < u.size(); ++i) g.data()[i] = gelu(u.data()[i]);
  return g;
}

inline Tensor2D layer_norm(const Tensor2D& x, const Tensor2D& gain, const Tensor2D& bias,
                           Tensor2D& hat, std::vector<double>& inv) {
  const std::size_t n = x.rows(), d = x.cols();
  hat = Tensor2D(n, d);
  inv.assign(n, 0.0);
  Tensor2D y(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    const auto xr = x.row(r);
    double mean = 0.0;
    for (const double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (const double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      hat(r, c) = (xr[c] - mean) * inv[r];
      y(r, c) = hat(r, c) * gain(0, c) + bias(0, c);
    }
  }
  return y;
}

inline Tensor2D layer_norm_backward(const Tensor2D& hat, const std::vector<double>& inv,
                                    const Tensor2D& gain, const Tensor2D& dy, Tensor2D& dgain,
                                    Tensor2D& dbias) {
  const std::size_t n = hat.rows(), d = hat.cols();
  Tensor2D dx(n, d);
  std::vector<double> dhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dgain(0, c) += dy(r, c) * hat(r, c);
      dbias(0, c) += dy(r, c);
      dhat[c] = dy(r, c) * gain(0, c);
      m1 += dhat[c];
      m2 += dhat[c] * hat(r, c);
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) dx(r, c) = inv[r] * (dhat[c] - m1 - hat(r, c) * m2);
  }
  return dx;
}

inline Tensor2D normalize_backward(const Tensor2D& pre, const Tensor2D& out, const Tensor2D& dz) {
  Tensor2D dy(dz.rows(), dz.cols());
  for (std::size_t r = 0; r < dz.rows(); ++r) {
    const double len = norm(pre.row(r));
    const double proj = dot(out.row(r), dz.row(r));
    for (std::size_t c = 0; c < dz.cols(); ++c) dy(r, c) = (dz(r, c) - out(r, c) * proj) / len;
  }
  return dy;
}

inline void add_into(Tensor2D& dst, const Tensor2D& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

}  // namespace detail

class AlignmentHead {
 public:
  /// Fresh head: weights uniform in +-1/sqrt(fan_in), biases 0, norm gains 1.
  static AlignmentHead create(const HeadShape& shape, std::uint64_t seed) {
    shape.validate();
    AlignmentHead h;
    h.shape_ = shape;
    SeededRng rng(derive_seed(seed, "head_init"));
    auto weight = [&](std::string name, std::size_t fan_in, std::size_t fan_out) {
      Tensor2D w(fan_in, fan_out);
      const double lim = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& v : w.data()) v = rng.uniform(-lim, lim);
      h.params_.push_back({std::move(name), std::move(w)});
    };
    auto vec = [&](std::string name, std::size_t dim, double fill) {
      h.params_.push_back({std::move(name), Tensor2D(1, dim, fill)});
    };
    const std::size_t din = shape.in_dim, dout = shape.out_dim, hid = shape.hidden;
    switch (shape.variant) {
      case HeadVariant::kLinear:
        weight("linear.weight", din, dout);
        vec("linear.bias", dout, 0.0);
        break;
      case HeadVariant::kMlp:
        weight("fc1.weight", din, hid);
        vec("fc1.bias", hid, 0.0);
        weight("fc2.weight", hid, dout);
        vec("fc2.bias", dout, 0.0);
        break;
      case HeadVariant::kTransformer:
        vec("ln1.gain", din, 1.0);
        vec("ln1.bias", din, 0.0);
        weight("attn.query.weight", din, din);
        vec("attn.query.bias", din, 0.0);
        weight("attn.key.weight", din, din);
        vec("attn.key.bias", din, 0.0);
        weight("attn.value.weight", din, din);
        vec("attn.value.bias", din, 0.0);
        weight("attn.out.weight", din, din);
        vec("attn.out.bias", din, 0.0);
        vec("ln2.gain", din, 1.0);
        vec("ln2.bias", din, 0.0);
        weight("ffn.fc1.weight", din, hid);
        vec("ffn.fc1.bias", hid, 0.0);
        weight("ffn.fc2.weight", hid, din);
        vec("ffn.fc2.bias", din, 0.0);
        weight("proj.weight", din, dout);
        vec("proj.bias", dout, 0.0);
        break;
    }
    return h;
  }

  /// Rebuilds a head from stored parameters; names and shapes must match.
  static AlignmentHead from_parameters(const HeadShape& shape, std::vector<Parameter> params) {
    AlignmentHead h = create(shape, 0);
    if (params.size() != h.params_.size()) {
      throw ValidationError("head: expected " + std::to_string(h.params_.size()) +
                            " parameters, got " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& want = h.params_[i];
      const auto& got = params[i];
      if (got.name != want.name || got.value.rows() != want.value.rows() ||
          got.value.cols() != want.value.cols()) {
        throw ValidationError("head: parameter " + std::to_string(i) + " ('" + got.name +
                              "') does not match '" + want.name + "' " +
                              std::to_string(want.value.rows()) + "x" +
                              std::to_string(want.value.cols()));
      }
    }
    h.params_ = std::move(params);
    return h;
  }

  const HeadShape& shape() const noexcept { return shape_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }

  /// Zero tensors shaped like the parameters.
  std::vector<Tensor2D> zero_gradients() const {
    std::vector<Tensor2D> g;
    for (const auto& p : params_) g.emplace_back(p.value.rows(), p.value.cols());
    return g;
  }

  /// Output normalisation; only tests turn it off.
  void set_normalize_output(bool on) noexcept { normalize_ = on; }
  bool normalize_output() const noexcept { return normalize_; }

  /// Maps one image's patches (N x in_dim) to N x out_dim.
  Tensor2D forward(const Tensor2D& x, HeadCache* cache = nullptr) const {
    if (x.cols() != shape_.in_dim) {
      throw ShapeError("head: input has " + std::to_string(x.cols()) + " columns, expected " +
                       std::to_string(shape_.in_dim));
    }
    HeadCache local;
    HeadCache& c = cache ? *cache : local;
    c.x = x;
    switch (shape_.variant) {
      case HeadVariant::kLinear:
        c.pre = detail::affine(x, p(0), p(1));
        break;
      case HeadVariant::kMlp:
        c.u = detail::affine(x, p(0), p(1));
        c.g = detail::gelu(c.u);
        c.pre = detail::affine(c.g, p(2), p(3));
        break;
      case HeadVariant::kTransformer:
        transformer_forward(c);
        break;
    }
    c.out = normalize_ ? l2_normalize_rows(c.pre) : c.pre;
    return c.out;
  }

  /// Parameter gradients given dLoss/dOutput, in parameters() order.
  std::vector<Tensor2D> backward(const HeadCache& c, const Tensor2D& dz) const {
    if (dz.rows() != c.out.rows() || dz.cols() != c.out.cols()) {
      throw ShapeError("head backward: gradient shape does not match the output");
    }
    std::vector<Tensor2D> g = zero_gradients();
    const Tensor2D dpre = normalize_ ? detail::normalize_backward(c.pre, c.out, dz) : dz;
    switch (shape_.variant) {
      case HeadVariant::kLinear:
        detail::affine_backward(c.x, p(0), dpre, g[0], g[1]);
        break;
      case HeadVariant::kMlp: {
        Tensor2D du = detail::affine_backward(c.g, p(2), dpre, g[2], g[3]);
        for (std::size_t i = 0; i < du.size(); ++i) du.data()[i] *= detail::gelu_grad(c.u.data()[i]);
        detail::affine_backward(c.x, p(0), du, g[0], g[1]);
        break;
      }
      case HeadVariant::kTransformer:
        transformer_backward(c, dpre, g);
        break;
    }
    return g;
  }

 private:
  // Transformer parameter slots.
  enum : std::size_t {
    kLn1G, kLn1B, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
    kLn2G, kLn2B, kW1, kB1, kW2, kB2, kWf, kBf
  };

  const Tensor2D& p(std::size_t i) const { return params_[i].value; }

  void transformer_forward(HeadCache& c) const {
    const std::size_t n = c.x.rows(), d = shape_.in_dim, nh = shape_.num_heads;
    const std::size_t dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.a = detail::layer_norm(c.x, p(kLn1G), p(kLn1B), c.ln1_hat, c.ln1_inv);
    c.q = detail::affine(c.a, p(kWq), p(kBq));
    c.k = detail::affine(c.a, p(kWk), p(kBk));
    c.v = detail::affine(c.a, p(kWv), p(kBv));
    c.o = Tensor2D(n, d);
    c.attn.assign(nh, Tensor2D(n, n));
    std::vector<double> logits(n);
    for (std::size_t h = 0; h < nh; ++h) {
      const std::size_t off = h * dh;
      Tensor2D& att = c.attn[h];
      for (std::size_t i = 0; i < n; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += c.q(i, off + e) * c.k(j, off + e);
          logits[j] = s * scale;
          mx = std::max(mx, logits[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += (att(i, j) = std::exp(logits[j] - mx));
        for (std::size_t j = 0; j < n; ++j) {
          att(i, j) /= sum;
          for (std::size_t e = 0; e < dh; ++e) c.o(i, off + e) += att(i, j) * c.v(j, off + e);
        }
      }
    }
    c.h1 = detail::affine(c.o, p(kWo), p(kBo));
    detail::add_into(c.h1, c.x);
    c.b = detail::layer_norm(c.h1, p(kLn2G), p(kLn2B), c.ln2_hat, c.ln2_inv);
    c.u = detail::affine(c.b, p(kW1), p(kB1));
    c.g = detail::gelu(c.u);
    c.h2 = detail::affine(c.g, p(kW2), p(kB2));
    detail::add_into(c.h2, c.h1);
    c.pre = detail::affine(c.h2, p(kWf), p(kBf));
  }

  void transformer_backward(const HeadCache& c, const Tensor2D& dpre,
                            std::vector<Tensor2D>& g) const {
    const std::size_t n = c.x.rows(), d = shape_.in_dim, nh = shape_.num_heads;
    const std::size_t dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const Tensor2D dh2 = detail::affine_backward(c.h2, p(kWf), dpre, g[kWf], g[kBf]);
    Tensor2D du = detail::affine_backward(c.g, p(kW2), dh2, g[kW2], g[kB2]);
    for (std::size_t i = 0; i < du.size(); ++i) du.data()[i] *= detail::gelu_grad(c.u.data()[i]);
    const Tensor2D db = detail::affine_backward(c.b, p(kW1), du, g[kW1], g[kB1]);
    Tensor2D dh1 = detail::layer_norm_backward(c.ln2_hat, c.ln2_inv, p(kLn2G), db, g[kLn2G],
                                               g[kLn2B]);
    detail::add_into(dh1, dh2);

    const Tensor2D dout = detail::affine_backward(c.o, p(kWo), dh1, g[kWo], g[kBo]);
    Tensor2D dq(n, d), dk(n, d), dv(n, d);
    std::vector<double> da(n);
    for (std::size_t h = 0; h < nh; ++h) {
      const std::size_t off = h * dh;
      const Tensor2D& att = c.attn[h];
      for (std::size_t i = 0; i < n; ++i) {
        double rowdot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += dout(i, off + e) * c.v(j, off + e);
          da[j] = s;
          rowdot += s * att(i, j);
          for (std::size_t e = 0; e < dh; ++e) dv(j, off + e) += att(i, j) * dout(i, off + e);
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double ds = att(i, j) * (da[j] - rowdot) * scale;
          if (ds == 0.0) continue;
          for (std::size_t e = 0; e < dh; ++e) {
            dq(i, off + e) += ds * c.k(j, off + e);
            dk(j, off + e) += ds * c.q(i, off + e);
          }
        }
      }
    }
    Tensor2D d_ln1 = detail::affine_backward(c.a, p(kWq), dq, g[kWq], g[kBq]);
    detail::add_into(d_ln1, detail::affine_backward(c.a, p(kWk), dk, g[kWk], g[kBk]));
    detail::add_into(d_ln1, detail::affine_backward(c.a, p(kWv), dv, g[kWv], g[kBv]));
    detail::layer_norm_backward(c.ln1_hat, c.ln1_inv, p(kLn1G), d_ln1, g[kLn1G], g[kLn1B]);
  }

  HeadShape shape_;
  std::vector<Parameter> params_;
  bool normalize_ = true;
};

}  // namespace fmseg::align

#endif  // FMSEG_ALIGN_HEADS_HPP_
