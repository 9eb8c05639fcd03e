#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "panda/error.hpp"
#include "panda/layers.hpp"
#include "panda/random.hpp"
#include "panda/tensor.hpp"

namespace panda {

/// A differentiable layer as a pair of closures over (input, params).
struct LayerClosure {
  std::function<Tensor(const Tensor& input, const std::vector<Tensor>& params)> forward;
  std::function<LayerGrad(const Tensor& input, const std::vector<Tensor>& params, const Tensor& d_output)> backward;
};

struct GradientCheckOptions {
  /// Check at most this many coordinates (sampled uniformly); 0 checks all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  /// "tensor#index" of the worst coordinate.
  std::string worst;
};

namespace detail {

inline void check_epsilon(double epsilon) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-2))
    throw InvalidArgument("gradient_check epsilon must lie in [1e-6, 1e-2], got " + std::to_string(epsilon));
}

}  // namespace detail

/// Compares `analytic` (the gradient of `objective` at `point`) against central
/// differences, coordinate by coordinate. Error per coordinate is
/// |analytic - numeric| / max(1, |numeric|).
inline GradientCheckResult check_scalar_gradient(const std::function<double(const std::vector<Tensor>&)>& objective,
                                                 std::vector<Tensor> point, const std::vector<Tensor>& analytic,
                                                 double epsilon, const GradientCheckOptions& opts = {},
                                                 const std::vector<std::string>& names = {}) {
  detail::check_epsilon(epsilon);
  if (analytic.size() != point.size()) throw InvalidArgument("gradient_check: gradient count mismatch");
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < point.size(); ++t) {
    if (analytic[t].shape() != point[t].shape())
      throw InvalidArgument("gradient_check: gradient shape mismatch for tensor " + std::to_string(t));
    for (std::size_t i = 0; i < point[t].size(); ++i) coords.emplace_back(t, i);
  }
  if (opts.max_coords && coords.size() > opts.max_coords) {
    Rng rng(opts.seed);
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(opts.max_coords);
  }

  GradientCheckResult result;
  for (const auto& [t, i] : coords) {
    const double saved = point[t][i];
    point[t][i] = saved + epsilon;
    const double up = objective(point);
    point[t][i] = saved - epsilon;
    const double down = objective(point);
    point[t][i] = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double err = std::abs(analytic[t][i] - numeric) / std::max(1.0, std::abs(numeric));
    if (!(err <= result.max_relative_error)) {
      result.max_relative_error = std::isfinite(err) ? err : INFINITY;
      result.worst = (t < names.size() ? names[t] : std::to_string(t)) + "#" + std::to_string(i);
    }
    ++result.coordinates;
  }
  return result;
}

/// Gradient check of a layer closure over its input and every parameter
/// coordinate. The scalar objective is a fixed random projection of the output.
inline GradientCheckResult gradient_check_detailed(const LayerClosure& layer, const Tensor& input,
                                                   const std::vector<Tensor>& params, double epsilon,
                                                   const GradientCheckOptions& opts = {}) {
  detail::check_epsilon(epsilon);
  const Tensor out = layer.forward(input, params);
  if (!(layer.forward(input, params) == out))
    throw ContractViolation("gradient_check: layer is not deterministic under fixed inputs");

  Tensor projection(out.shape());
  Rng rng(derive_seed(opts.seed, 0x9c));
  for (auto& v : projection.values()) v = rng.uniform(-1.0, 1.0);

  const LayerGrad g = layer.backward(input, params, projection);
  if (g.d_input.shape() != input.shape()) throw InvalidArgument("gradient_check: d_input shape mismatch");
  if (g.d_params.size() != params.size()) throw InvalidArgument("gradient_check: d_params count mismatch");

  std::vector<Tensor> point{input};
  point.insert(point.end(), params.begin(), params.end());
  std::vector<Tensor> analytic{g.d_input};
  analytic.insert(analytic.end(), g.d_params.begin(), g.d_params.end());

  auto objective = [&](const std::vector<Tensor>& p) {
    const std::vector<Tensor> ps(p.begin() + 1, p.end());
    const Tensor y = layer.forward(p[0], ps);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += projection[i] * y[i];
    return acc;
  };
  std::vector<std::string> names{"input"};
  for (std::size_t i = 0; i < params.size(); ++i) names.push_back("param" + std::to_string(i));
  return check_scalar_gradient(objective, std::move(point), analytic, epsilon, opts, names);
}

/// Max relative error of the analytic gradient of `layer` (see gradient_check_detailed).
inline double gradient_check(const LayerClosure& layer, const Tensor& input, const std::vector<Tensor>& params,
                             double epsilon, const GradientCheckOptions& opts = {}) {
  return gradient_check_detailed(layer, input, params, epsilon, opts).max_relative_error;
}

// Ready-made closures for the built-in kernels.

inline LayerClosure conv2d_closure(std::size_t stride, std::size_t pad) {
  return {[=](const Tensor& x, const std::vector<Tensor>& p) { return conv2d(x, p[0], p[1], stride, pad); },
          [=](const Tensor& x, const std::vector<Tensor>& p, const Tensor& d) {
            return conv2d_backward(x, p[0], p[1], stride, pad, d);
          }};
}

inline LayerClosure fully_connected_closure() {
  return {[](const Tensor& x, const std::vector<Tensor>& p) { return fully_connected(x, p[0], p[1]); },
          [](const Tensor& x, const std::vector<Tensor>& p, const Tensor& d) {
            return fully_connected_backward(x, p[0], d);
          }};
}

inline LayerClosure maxpool_closure(std::size_t window, std::size_t stride) {
  return {[=](const Tensor& x, const std::vector<Tensor>&) { return maxpool(x, window, stride).output; },
          [=](const Tensor& x, const std::vector<Tensor>&, const Tensor& d) {
            return LayerGrad{maxpool_backward(x.shape(), maxpool(x, window, stride).argmax, d), {}};
          }};
}

inline LayerClosure lrn_closure(LrnParams params) {
  return {[=](const Tensor& x, const std::vector<Tensor>&) { return lrn(x, params); },
          [=](const Tensor& x, const std::vector<Tensor>&, const Tensor& d) {
            return LayerGrad{lrn_backward(x, d, params), {}};
          }};
}

inline LayerClosure nonlinearity_closure(Activation kind) {
  return {[=](const Tensor& x, const std::vector<Tensor>&) { return nonlinearity(x, kind); },
          [=](const Tensor& x, const std::vector<Tensor>&, const Tensor& d) {
            return LayerGrad{nonlinearity_backward(x, nonlinearity(x, kind), d, kind), {}};
          }};
}

}  // namespace panda
