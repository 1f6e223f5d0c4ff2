#pragma once

// Forward and reverse-mode kernels for the layers of the toy classifier.
// Images and feature maps are [C,H,W]; convolution is cross-correlation.

#include <advrsa/tensor.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advrsa {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

// Output positions o in [lo, hi) for which o*stride - pad + k lands inside [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent, std::size_t extent,
                                                       std::size_t stride, std::size_t pad,
                                                       std::size_t k) {
  const long long off = static_cast<long long>(k) - static_cast<long long>(pad);
  long long lo = 0;
  if (off < 0) lo = (-off + static_cast<long long>(stride) - 1) / static_cast<long long>(stride);
  long long hi_excl = (static_cast<long long>(extent) - 1 - off);
  hi_excl = hi_excl < 0 ? 0 : hi_excl / static_cast<long long>(stride) + 1;
  hi_excl = std::min<long long>(hi_excl, static_cast<long long>(out_extent));
  if (lo > hi_excl) lo = hi_excl;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi_excl)};
}

}  // namespace detail

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t padding) {
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (in + 2 * padding < kernel) {
    throw ShapeError("conv2d: kernel extent " + std::to_string(kernel) +
                     " exceeds padded input extent " + std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

struct ConvGeometry {
  std::size_t cin, h, w, cout, kh, kw, stride, padding, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

// Unfolds input patches into a [cin*kh*kw, ho*wo] matrix (zero padding).
inline RowMatrix im2col(const double* in, const ConvGeometry& g) {
  RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.positions()));
  for (std::size_t c = 0; c < g.cin; ++c) {
    const double* src = in + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const auto [y0, y1] = valid_range(g.ho, g.h, g.stride, g.padding, ky);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto [x0, x1] = valid_range(g.wo, g.w, g.stride, g.padding, kx);
        double* dst = cols.data() + ((c * g.kh + ky) * g.kw + kx) * g.positions();
        for (std::size_t y = y0; y < y1; ++y) {
          const double* row = src + (y * g.stride + ky - g.padding) * g.w;
          double* drow = dst + y * g.wo;
          for (std::size_t x = x0; x < x1; ++x) drow[x] = row[x * g.stride + kx - g.padding];
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatters column gradients back onto the input grid.
inline void col2im(const RowMatrix& cols, const ConvGeometry& g, double* out) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* dst = out + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const auto [y0, y1] = valid_range(g.ho, g.h, g.stride, g.padding, ky);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto [x0, x1] = valid_range(g.wo, g.w, g.stride, g.padding, kx);
        const double* src = cols.data() + ((c * g.kh + ky) * g.kw + kx) * g.positions();
        for (std::size_t y = y0; y < y1; ++y) {
          double* row = dst + (y * g.stride + ky - g.padding) * g.w;
          const double* srow = src + y * g.wo;
          for (std::size_t x = x0; x < x1; ++x) row[x * g.stride + kx - g.padding] += srow[x];
        }
      }
    }
  }
}

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, std::size_t stride,
                                  std::size_t padding) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernels.dim(0), kernels.dim(2), kernels.dim(3),
                 stride, padding, 0, 0};
  if (kernels.dim(1) != g.cin) {
    throw ShapeError("conv2d: input has " + std::to_string(g.cin) + " channels but kernels " +
                     shape_string(kernels.shape()) + " expect " + std::to_string(kernels.dim(1)));
  }
  g.ho = conv_output_extent(g.h, g.kh, stride, padding);
  g.wo = conv_output_extent(g.w, g.kw, stride, padding);
  return g;
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                     std::size_t stride, std::size_t padding) {
  const detail::ConvGeometry g = detail::conv_geometry(input, kernels, stride, padding);
  if (bias.size() != g.cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " != " +
                     std::to_string(g.cout) + " output channels");
  }
  const detail::RowMatrix cols = detail::im2col(input.data(), g);
  Tensor out({g.cout, g.ho, g.wo});
  const auto rows = static_cast<Eigen::Index>(g.cout);
  detail::ConstMatrixMap k(kernels.data(), rows, static_cast<Eigen::Index>(g.patch()));
  detail::MatrixMap o(out.data(), rows, static_cast<Eigen::Index>(g.positions()));
  o.noalias() = k * cols;
  for (std::size_t c = 0; c < g.cout; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias[c];
  return out;
}

struct ConvGradients {
  Tensor input;    // empty when not requested
  Tensor kernels;  // empty when not requested
  Tensor bias;
};

inline ConvGradients conv2d_backward(const Tensor& input, const Tensor& kernels,
                                     std::size_t stride, std::size_t padding,
                                     const Tensor& grad_out, bool want_input, bool want_params) {
  const detail::ConvGeometry g = detail::conv_geometry(input, kernels, stride, padding);
  if (grad_out.rank() != 3 || grad_out.dim(0) != g.cout || grad_out.dim(1) != g.ho || grad_out.dim(2) != g.wo) {
    throw ShapeError("conv2d_backward: upstream gradient " + shape_string(grad_out.shape()) +
                     " does not match the forward output");
  }
  const auto rows = static_cast<Eigen::Index>(g.cout);
  const auto patch = static_cast<Eigen::Index>(g.patch());
  const auto positions = static_cast<Eigen::Index>(g.positions());
  detail::ConstMatrixMap go(grad_out.data(), rows, positions);
  detail::ConstMatrixMap k(kernels.data(), rows, patch);
  ConvGradients out;
  if (want_params) {
    const detail::RowMatrix cols = detail::im2col(input.data(), g);
    out.kernels = Tensor(kernels.shape());
    detail::MatrixMap gk(out.kernels.data(), rows, patch);
    gk.noalias() = go * cols.transpose();
    out.bias = Tensor({g.cout});
    for (std::size_t c = 0; c < g.cout; ++c) out.bias[c] = go.row(static_cast<Eigen::Index>(c)).sum();
  }
  if (want_input) {
    detail::RowMatrix gcols(patch, positions);
    gcols.noalias() = k.transpose() * go;
    out.input = Tensor(input.shape());
    detail::col2im(gcols, g, out.input.data());
  }
  return out;
}

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Tensor relu_backward(const Tensor& pre_activation, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(pre_activation[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // flat input index per output cell
};

/// Max pooling without padding. Ties resolve to the first cell in row-major window order.
inline PoolResult maxpool2d(const Tensor& input, std::size_t window, std::size_t stride) {
  detail::require_rank(input, 3, "maxpool2d input");
  if (window == 0 || stride == 0) throw std::invalid_argument("maxpool2d: window and stride must be >= 1");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (window > h || window > w) {
    throw ShapeError("maxpool2d: window " + std::to_string(window) + " larger than input " +
                     shape_string(input.shape()));
  }
  const std::size_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  PoolResult r{Tensor({c, ho, wo}), std::vector<std::size_t>(c * ho * wo)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) {
        std::size_t best = (ch * h + y * stride) * w + x * stride;
        double best_v = input[best];
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = (ch * h + y * stride + dy) * w + x * stride + dx;
            if (input[idx] > best_v) {
              best_v = input[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = (ch * ho + y) * wo + x;
        r.output[o] = best_v;
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

inline Tensor maxpool2d_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                                 const Tensor& grad_out) {
  if (argmax.size() != grad_out.size()) {
    throw ShapeError("maxpool2d_backward: argmax/gradient length mismatch");
  }
  Tensor g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

struct LrnParams {
  double k = 2.0;
  double alpha = 1e-4;
  double beta = 0.75;
  std::size_t n = 5;

  friend bool operator==(const LrnParams&, const LrnParams&) = default;
};

namespace detail {
inline void check_lrn(const Tensor& input, const LrnParams& p) {
  require_rank(input, 3, "lrn input");
  if (p.n % 2 == 0) throw std::invalid_argument("lrn: window size n must be odd");
  if (!(p.k > 0.0)) throw std::invalid_argument("lrn: k must be positive");
}

// denom[c,h,w] = k + alpha * sum over the clipped channel window of in^2
inline std::vector<double> lrn_denominators(const Tensor& input, const LrnParams& p) {
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  const std::size_t half = p.n / 2;
  std::vector<double> denom(input.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const std::size_t lo = ch >= half ? ch - half : 0;
    const std::size_t hi = std::min(c - 1, ch + half);
    for (std::size_t i = 0; i < plane; ++i) {
      double s = 0.0;
      for (std::size_t cc = lo; cc <= hi; ++cc) {
        const double v = input[cc * plane + i];
        s += v * v;
      }
      denom[ch * plane + i] = p.k + p.alpha * s;
    }
  }
  return denom;
}
}  // namespace detail

/// Local response normalization across channels; the window is clipped at the channel ends.
inline Tensor lrn(const Tensor& input, const LrnParams& p) {
  detail::check_lrn(input, p);
  const auto denom = detail::lrn_denominators(input, p);
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] * std::pow(denom[i], -p.beta);
  return out;
}

inline Tensor lrn_backward(const Tensor& input, const LrnParams& p, const Tensor& grad_out) {
  detail::check_lrn(input, p);
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  const std::size_t half = p.n / 2;
  const auto denom = detail::lrn_denominators(input, p);
  // t[c] = g_c * a_c * D_c^(-beta-1)
  std::vector<double> t(input.size());
  Tensor g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double scale = std::pow(denom[i], -p.beta);
    g[i] = grad_out[i] * scale;
    t[i] = grad_out[i] * input[i] * scale / denom[i];
  }
  const double coeff = 2.0 * p.alpha * p.beta;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const std::size_t lo = ch >= half ? ch - half : 0;
    const std::size_t hi = std::min(c - 1, ch + half);
    for (std::size_t i = 0; i < plane; ++i) {
      double s = 0.0;
      for (std::size_t cc = lo; cc <= hi; ++cc) s += t[cc * plane + i];
      g[ch * plane + i] -= coeff * input[ch * plane + i] * s;
    }
  }
  return g;
}

/// y = W x + b with W stored [m, n]; any input shape is read as a flat vector.
inline Tensor affine(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  detail::require_rank(weights, 2, "affine weights");
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  if (input.size() != n) {
    throw ShapeError("affine: input length " + std::to_string(input.size()) + " != weight columns " +
                     std::to_string(n));
  }
  if (bias.size() != m) {
    throw ShapeError("affine: bias length " + std::to_string(bias.size()) + " != " + std::to_string(m));
  }
  Tensor out({m});
  const double* x = input.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = weights.data() + i * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += row[j] * x[j];
    out[i] = s + bias[i];
  }
  return out;
}

struct AffineGradients {
  Tensor input;  // shaped like the forward input
  Tensor weights;
  Tensor bias;
};

inline AffineGradients affine_backward(const Tensor& input, const Tensor& weights,
                                       const Tensor& grad_out, bool want_input, bool want_params) {
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  if (grad_out.size() != m) throw ShapeError("affine_backward: upstream gradient length mismatch");
  AffineGradients g;
  if (want_input) {
    g.input = Tensor(input.shape());
    double* gx = g.input.data();
    for (std::size_t i = 0; i < m; ++i) {
      const double gi = grad_out[i];
      if (gi == 0.0) continue;
      const double* row = weights.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) gx[j] += row[j] * gi;
    }
  }
  if (want_params) {
    g.weights = Tensor(weights.shape());
    g.bias = Tensor({m});
    const double* x = input.data();
    for (std::size_t i = 0; i < m; ++i) {
      const double gi = grad_out[i];
      g.bias[i] = gi;
      double* row = g.weights.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] = gi * x[j];
    }
  }
  return g;
}

inline Tensor softmax(const Tensor& logits) {
  if (logits.size() < 2) throw ShapeError("softmax: need at least two classes");
  const auto v = logits.values();
  const double mx = *std::max_element(v.begin(), v.end());
  Tensor p({logits.size()});
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    p[i] = std::exp(v[i] - mx);
    z += p[i];
  }
  for (double& x : p.values()) x /= z;
  return p;
}

/// Gradient through softmax: dL/dz = p * (g - <g, p>).
inline Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs) {
  double dot = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * grad_probs[i];
  Tensor g({probs.size()});
  for (std::size_t i = 0; i < probs.size(); ++i) g[i] = probs[i] * (grad_probs[i] - dot);
  return g;
}

struct SoftmaxXent {
  Tensor probs;
  double loss = 0.0;
  Tensor grad_logits;  // p - onehot(label)
};

inline SoftmaxXent softmax_xent(const Tensor& logits, std::size_t label) {
  if (label >= logits.size()) {
    throw std::out_of_range("softmax_xent: label " + std::to_string(label) + " out of range for " +
                            std::to_string(logits.size()) + " classes");
  }
  SoftmaxXent r;
  r.probs = softmax(logits);
  // log-sum-exp keeps the loss finite even when p[label] underflows
  const auto v = logits.values();
  const double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double x : v) z += std::exp(x - mx);
  r.loss = -(v[label] - mx - std::log(z));
  r.grad_logits = r.probs;
  r.grad_logits[label] -= 1.0;
  return r;
}

}  // namespace advrsa
