#pragma once

// Forward and backward kernels for the layers used by the part and holistic nets.
// Every kernel is a pure function of its arguments and runs sequentially, so
// repeated calls with the same inputs give bit-identical results.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "panda/error.hpp"
#include "panda/tensor.hpp"

namespace panda {

/// Gradient of a scalar objective with respect to a layer's input and parameters.
struct LayerGrad {
  Tensor d_input;
  std::vector<Tensor> d_params;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidArgument(msg);
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* name) {
  require(t.rank() == rank, std::string(name) + " must have rank " + std::to_string(rank) + ", got shape " +
                                shape_string(t.shape()));
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t filters, kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t out_area() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                                  std::size_t pad) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  require(stride >= 1, "conv2d stride must be positive");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernels.dim(0), kernels.dim(2), kernels.dim(3),
                 stride,       pad,          0,            0};
  require(kernels.dim(1) == g.channels, "conv2d channel mismatch: kernels dim 1 is " + std::to_string(kernels.dim(1)) +
                                            ", input channels " + std::to_string(g.channels));
  require(bias.size() == g.filters, "conv2d bias length " + std::to_string(bias.size()) + " does not match filters " +
                                        std::to_string(g.filters));
  require(g.kernel_h <= g.height + 2 * pad, "conv2d kernel height " + std::to_string(g.kernel_h) +
                                                " exceeds padded input height " + std::to_string(g.height + 2 * pad));
  require(g.kernel_w <= g.width + 2 * pad, "conv2d kernel width " + std::to_string(g.kernel_w) +
                                               " exceeds padded input width " + std::to_string(g.width + 2 * pad));
  g.out_h = (g.height + 2 * pad - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel_w) / stride + 1;
  return g;
}

/// Output columns [lo, hi) whose input column x * stride + j - pad lies inside [0, width).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t j, const ConvGeometry& g, std::size_t extent,
                                                       std::size_t out) {
  const long s = static_cast<long>(g.stride), p = static_cast<long>(g.pad), jj = static_cast<long>(j);
  long lo = p - jj > 0 ? (p - jj + s - 1) / s : 0;
  long hi = (static_cast<long>(extent) - 1 + p - jj);
  hi = hi < 0 ? 0 : hi / s + 1;
  lo = std::min(lo, static_cast<long>(out));
  hi = std::clamp(hi, lo, static_cast<long>(out));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Unfolds input patches into a [C*kH*kW, H'*W'] matrix (zero padding).
inline void im2col(const ConvGeometry& g, const double* input, double* cols) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      const auto [ylo, yhi] = valid_range(i, g, g.height, g.out_h);
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        const auto [xlo, xhi] = valid_range(j, g, g.width, g.out_w);
        double* row = cols + ((c * g.kernel_h + i) * g.kernel_w + j) * area;
        std::fill(row, row + ylo * g.out_w, 0.0);
        std::fill(row + yhi * g.out_w, row + area, 0.0);
        for (std::size_t y = ylo; y < yhi; ++y) {
          const std::size_t iy = y * g.stride + i - g.pad;
          double* dst = row + y * g.out_w;
          const double* src = input + static_cast<std::ptrdiff_t>((c * g.height + iy) * g.width + j) -
                              static_cast<std::ptrdiff_t>(g.pad);
          std::fill(dst, dst + xlo, 0.0);
          if (g.stride == 1) {
            std::copy(src + xlo, src + xhi, dst + xlo);
          } else {
            for (std::size_t x = xlo; x < xhi; ++x) dst[x] = src[x * g.stride];
          }
          std::fill(dst + xhi, dst + g.out_w, 0.0);
        }
      }
    }
}

/// Adjoint of im2col: scatters column gradients back onto the input grid.
inline void col2im(const ConvGeometry& g, const double* cols, double* d_input) {
  const std::size_t area = g.out_area();
  std::fill(d_input, d_input + g.channels * g.height * g.width, 0.0);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      const auto [ylo, yhi] = valid_range(i, g, g.height, g.out_h);
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        const auto [xlo, xhi] = valid_range(j, g, g.width, g.out_w);
        const double* row = cols + ((c * g.kernel_h + i) * g.kernel_w + j) * area;
        for (std::size_t y = ylo; y < yhi; ++y) {
          const std::size_t iy = y * g.stride + i - g.pad;
          double* dst = d_input + static_cast<std::ptrdiff_t>((c * g.height + iy) * g.width + j) -
                        static_cast<std::ptrdiff_t>(g.pad);
          const double* src = row + y * g.out_w;
          for (std::size_t x = xlo; x < xhi; ++x) dst[x * g.stride] += src[x];
        }
      }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Direct convolution. Output is [F, H', W'] with
/// H' = (H + 2 pad - kH) / stride + 1, zero padding outside the input.
inline Tensor conv2d_direct(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                            std::size_t pad) {
  const auto g = detail::conv_geometry(input, kernels, bias, stride, pad);
  Tensor out({g.filters, g.out_h, g.out_w});
  for (std::size_t f = 0; f < g.filters; ++f)
    for (std::size_t y = 0; y < g.out_h; ++y)
      for (std::size_t x = 0; x < g.out_w; ++x) {
        double acc = bias[f];
        for (std::size_t c = 0; c < g.channels; ++c)
          for (std::size_t i = 0; i < g.kernel_h; ++i) {
            const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (std::size_t j = 0; j < g.kernel_w; ++j) {
              const long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              acc += input.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                     kernels[((f * g.channels + c) * g.kernel_h + i) * g.kernel_w + j];
            }
          }
        out.at(f, y, x) = acc;
      }
  return out;
}

/// Convolution through im2col and a dense matrix product. Same contract as conv2d_direct.
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
  const auto g = detail::conv_geometry(input, kernels, bias, stride, pad);
  AlignedVector cols(g.patch() * g.out_area());
  detail::im2col(g, input.raw(), cols.data());
  Tensor out({g.filters, g.out_h, g.out_w});
  detail::MatrixMap o(out.raw(), g.filters, g.out_area());
  o.noalias() = detail::ConstMatrixMap(kernels.raw(), g.filters, g.patch()) *
                detail::ConstMatrixMap(cols.data(), g.patch(), g.out_area());
  for (std::size_t f = 0; f < g.filters; ++f) o.row(f).array() += bias[f];
  return out;
}

/// Backward of conv2d. d_params = {d_kernels, d_bias}. When `want_input_grad`
/// is false, d_input is left empty (first layer of a net).
inline LayerGrad conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                                 std::size_t pad, const Tensor& d_output, bool want_input_grad = true) {
  const auto g = detail::conv_geometry(input, kernels, bias, stride, pad);
  detail::require(d_output.shape() == Shape({g.filters, g.out_h, g.out_w}),
                  "conv2d_backward: d_output shape " + shape_string(d_output.shape()) + " does not match output");
  AlignedVector cols(g.patch() * g.out_area());
  detail::im2col(g, input.raw(), cols.data());
  detail::ConstMatrixMap d_out(d_output.raw(), g.filters, g.out_area());
  detail::ConstMatrixMap col_mat(cols.data(), g.patch(), g.out_area());

  LayerGrad grad;
  Tensor d_kernels(kernels.shape());
  detail::MatrixMap(d_kernels.raw(), g.filters, g.patch()).noalias() = d_out * col_mat.transpose();
  Tensor d_bias(bias.shape());
  for (std::size_t f = 0; f < g.filters; ++f) d_bias[f] = d_out.row(f).sum();

  if (want_input_grad) {
    AlignedVector d_cols(cols.size());
    detail::MatrixMap(d_cols.data(), g.patch(), g.out_area()).noalias() =
        detail::ConstMatrixMap(kernels.raw(), g.filters, g.patch()).transpose() * d_out;
    grad.d_input = Tensor(input.shape());
    detail::col2im(g, d_cols.data(), grad.d_input.raw());
  }
  grad.d_params.push_back(std::move(d_kernels));
  grad.d_params.push_back(std::move(d_bias));
  return grad;
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

struct PoolResult {
  Tensor output;
  /// Flat input index of the winning element for each output cell.
  std::vector<std::size_t> argmax;
};

/// Max over window x window cells, no padding. Ties go to the lowest row-major index.
inline PoolResult maxpool(const Tensor& input, std::size_t window, std::size_t stride) {
  detail::require_rank(input, 3, "maxpool input");
  detail::require(window >= 1 && stride >= 1, "maxpool window and stride must be positive");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  detail::require(window <= H && window <= W, "maxpool window " + std::to_string(window) + " exceeds input extent " +
                                                  std::to_string(H) + "x" + std::to_string(W));
  detail::require(stride <= H && stride <= W, "maxpool stride " + std::to_string(stride) + " exceeds input extent " +
                                                  std::to_string(H) + "x" + std::to_string(W));
  const std::size_t OH = (H - window) / stride + 1, OW = (W - window) / stride + 1;
  PoolResult r{Tensor({C, OH, OW}), std::vector<std::size_t>(C * OH * OW)};
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = (c * H + oy * stride) * W + ox * stride;
        double best_v = input[best];
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (c * H + oy * stride + i) * W + ox * stride + j;
            if (input[idx] > best_v) {
              best_v = input[idx];
              best = idx;
            }
          }
        const std::size_t o = (c * OH + oy) * OW + ox;
        r.output[o] = best_v;
        r.argmax[o] = best;
      }
  return r;
}

inline Tensor maxpool_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                               const Tensor& d_output) {
  detail::require(argmax.size() == d_output.size(), "maxpool_backward: argmax/d_output size mismatch");
  Tensor d_input(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) d_input[argmax[o]] += d_output[o];
  return d_input;
}

// ---------------------------------------------------------------------------
// Cross-channel local response normalisation
// ---------------------------------------------------------------------------

struct LrnParams {
  std::size_t size = 5;
  double k = 2.0;
  double alpha = 1e-4;
  double beta = 0.75;
};

namespace detail {

inline void check_lrn(const Tensor& input, const LrnParams& p) {
  require_rank(input, 3, "lrn input");
  require(p.size >= 1, "lrn size must be >= 1");
  require(p.k > 0.0, "lrn k must be positive");
  require(p.alpha >= 0.0 && p.beta >= 0.0, "lrn alpha and beta must be non-negative");
}

/// Channel window [lo, hi] for channel c: n channels, centred, clipped to [0, C).
inline std::pair<std::size_t, std::size_t> lrn_window(std::size_t c, std::size_t channels, std::size_t n) {
  const long lo = static_cast<long>(c) - static_cast<long>((n - 1) / 2);
  const long hi = lo + static_cast<long>(n) - 1;
  return {static_cast<std::size_t>(std::max(0L, lo)),
          static_cast<std::size_t>(std::min(static_cast<long>(channels) - 1, hi))};
}

/// s[c,y,x] = k + alpha * sum over the window of input^2.
inline Tensor lrn_denominator(const Tensor& input, const LrnParams& p) {
  const std::size_t C = input.dim(0), area = input.dim(1) * input.dim(2);
  Tensor s(input.shape(), p.k);
  for (std::size_t c = 0; c < C; ++c) {
    const auto [lo, hi] = lrn_window(c, C, p.size);
    double* dst = s.raw() + c * area;
    for (std::size_t cc = lo; cc <= hi; ++cc) {
      const double* src = input.raw() + cc * area;
      for (std::size_t i = 0; i < area; ++i) dst[i] += p.alpha * src[i] * src[i];
    }
  }
  return s;
}

/// s^(-beta), with an exact-arithmetic shortcut for the default beta = 0.75.
inline double inv_pow(double s, double beta) {
  if (beta == 0.75) {
    const double r = std::sqrt(s);
    return 1.0 / (r * std::sqrt(r));
  }
  return std::pow(s, -beta);
}

}  // namespace detail

/// out[c] = in[c] / (k + alpha * sum_{c' in window(c)} in[c']^2)^beta.
inline Tensor lrn(const Tensor& input, const LrnParams& p = {}) {
  detail::check_lrn(input, p);
  Tensor s = detail::lrn_denominator(input, p);
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] * detail::inv_pow(s[i], p.beta);
  return out;
}

inline Tensor lrn_backward(const Tensor& input, const Tensor& d_output, const LrnParams& p = {}) {
  detail::check_lrn(input, p);
  detail::require(d_output.shape() == input.shape(), "lrn_backward: d_output shape mismatch");
  const std::size_t C = input.dim(0), area = input.dim(1) * input.dim(2);
  const Tensor s = detail::lrn_denominator(input, p);
  Tensor d_input(input.shape());
  // coef[c] = g[c] * x[c] * s[c]^(-beta-1); scattered onto every channel in window(c).
  std::vector<double> coef(area);
  for (std::size_t c = 0; c < C; ++c) {
    const double* x = input.raw() + c * area;
    const double* g = d_output.raw() + c * area;
    const double* sc = s.raw() + c * area;
    double* dx = d_input.raw() + c * area;
    for (std::size_t i = 0; i < area; ++i) {
      const double inv = detail::inv_pow(sc[i], p.beta);
      dx[i] += g[i] * inv;
      coef[i] = g[i] * x[i] * inv / sc[i];
    }
    const auto [lo, hi] = detail::lrn_window(c, C, p.size);
    for (std::size_t cc = lo; cc <= hi; ++cc) {
      const double* xj = input.raw() + cc * area;
      double* dxj = d_input.raw() + cc * area;
      for (std::size_t i = 0; i < area; ++i) dxj[i] -= 2.0 * p.alpha * p.beta * xj[i] * coef[i];
    }
  }
  return d_input;
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// output = weights * input + bias. The input may have any shape of volume D.
inline Tensor fully_connected(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  detail::require_rank(weights, 2, "fully_connected weights");
  const std::size_t M = weights.dim(0), D = weights.dim(1);
  detail::require(input.size() == D, "fully_connected: input length " + std::to_string(input.size()) +
                                         " does not match weight columns " + std::to_string(D));
  detail::require(bias.size() == M, "fully_connected: bias length " + std::to_string(bias.size()) +
                                        " does not match weight rows " + std::to_string(M));
  Tensor out({M});
  Eigen::Map<Eigen::VectorXd>(out.raw(), M).noalias() =
      detail::ConstMatrixMap(weights.raw(), M, D) * Eigen::Map<const Eigen::VectorXd>(input.raw(), D) +
      Eigen::Map<const Eigen::VectorXd>(bias.raw(), M);
  return out;
}

/// d_params = {d_weights, d_bias}.
inline LayerGrad fully_connected_backward(const Tensor& input, const Tensor& weights, const Tensor& d_output,
                                          bool want_input_grad = true) {
  const std::size_t M = weights.dim(0), D = weights.dim(1);
  detail::require(input.size() == D && d_output.size() == M, "fully_connected_backward: shape mismatch");
  Eigen::Map<const Eigen::VectorXd> g(d_output.raw(), M);
  Eigen::Map<const Eigen::VectorXd> x(input.raw(), D);
  LayerGrad grad;
  Tensor d_w(weights.shape());
  detail::MatrixMap(d_w.raw(), M, D).noalias() = g * x.transpose();
  grad.d_params.push_back(std::move(d_w));
  grad.d_params.push_back(Tensor({M}, d_output.values()));
  if (want_input_grad) {
    grad.d_input = Tensor(input.shape());
    Eigen::Map<Eigen::VectorXd>(grad.d_input.raw(), D).noalias() =
        detail::ConstMatrixMap(weights.raw(), M, D).transpose() * g;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

enum class Activation { rectifier, logistic };

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor nonlinearity(const Tensor& input, Activation kind) {
  Tensor out(input.shape());
  if (kind == Activation::rectifier)
    for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
  else
    for (std::size_t i = 0; i < input.size(); ++i) out[i] = logistic(input[i]);
  return out;
}

/// Needs the forward output as well as the input (the logistic derivative uses it).
inline Tensor nonlinearity_backward(const Tensor& input, const Tensor& output, const Tensor& d_output,
                                    Activation kind) {
  detail::require(input.shape() == d_output.shape() && output.shape() == d_output.shape(),
                  "nonlinearity_backward: shape mismatch");
  Tensor d(input.shape());
  if (kind == Activation::rectifier)
    for (std::size_t i = 0; i < input.size(); ++i) d[i] = input[i] > 0.0 ? d_output[i] : 0.0;
  else
    for (std::size_t i = 0; i < input.size(); ++i) d[i] = d_output[i] * output[i] * (1.0 - output[i]);
  return d;
}

inline std::string to_string(Activation a) { return a == Activation::rectifier ? "rectifier" : "logistic"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "rectifier" || s == "relu") return Activation::rectifier;
  if (s == "logistic" || s == "sigmoid") return Activation::logistic;
  throw InvalidArgument("unknown activation '" + s + "'");
}

}  // namespace panda
