#pragma once

// Per-attribute linear SVM: minimizes 1/2 |w|^2 + C sum_i max(0, 1 - y_i (w.x_i + b))
// over the examples whose label for that attribute is known.
//
// Solver: epoch-shuffled stochastic subgradient steps on w with step
// 1/(lambda t), lambda = 1/(C n), followed by projection onto the ball of
// radius 1/sqrt(lambda). The unregularized bias is eliminated: before every
// step it is set to the exact minimizer of the hinge sum for the current w, so
// the steps descend on min_b P(w, b). After each epoch the last iterate and a
// running average over the latest half of the iterates are scored on the exact
// objective and the best (w, b) seen so far is kept, so the reported objective
// never increases.
//
// SVM file, little-endian:
//
//   "PANDASVM"        8-byte magic
//   u32 version       (= 1)
//   u64 layout hash
//   u64 feature length D
//   u32 attribute count, then per attribute:
//       string name, u8 trained, f64 C, u64 iterations, f64 objective,
//       f64 bias, f64 weights[D]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "panda/binary_io.hpp"
#include "panda/error.hpp"
#include "panda/kv_config.hpp"
#include "panda/net.hpp"
#include "panda/parallel.hpp"
#include "panda/random.hpp"

namespace panda {

struct SvmOptions {
  double C = 1.0;
  std::size_t epochs = 100;
  /// Z-score every dimension on the training set; folded back into (w, b).
  bool standardize = false;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(C > 0)) throw ConfigError("svm C must be positive");
    if (epochs < 1) throw ConfigError("svm epochs must be at least 1");
  }
  void to_kv(KvConfig& cfg, const std::string& prefix = "svm.") const {
    cfg.set(prefix + "C", kv_value(C));
    cfg.set(prefix + "epochs", kv_value(epochs));
    cfg.set(prefix + "standardize", kv_value(standardize));
    cfg.set(prefix + "seed", kv_value(seed));
  }
  void apply(const KvConfig& cfg, const std::string& prefix = "svm.") {
    cfg.read(prefix + "C", C);
    cfg.read(prefix + "epochs", epochs);
    cfg.read(prefix + "standardize", standardize);
    cfg.read(prefix + "seed", seed);
  }
};

struct SvmAttribute {
  std::string name;
  /// False when the attribute had a single class; the model then scores a constant `bias`.
  bool trained = false;
  double C = 1.0;
  std::uint64_t iterations = 0;
  double objective = 0;
  double bias = 0;
  std::vector<double> weights;
  friend bool operator==(const SvmAttribute&, const SvmAttribute&) = default;
};

struct SvmModel {
  std::uint64_t layout_hash = 0;
  std::size_t feature_length = 0;
  std::vector<SvmAttribute> attributes;
  friend bool operator==(const SvmModel&, const SvmModel&) = default;
};

struct SvmTrainResult {
  SvmModel model;
  /// Per attribute, the best objective after each epoch.
  std::vector<std::vector<double>> objective_history;
  std::vector<std::string> warnings;
};

namespace svm_detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double primal_objective(const std::vector<double>& w, double b, const std::vector<const std::vector<double>*>& X,
                               const std::vector<double>& y, double C) {
  double hinge = 0;
  for (std::size_t i = 0; i < X.size(); ++i) hinge += std::max(0.0, 1.0 - y[i] * (dot(w, *X[i]) + b));
  return 0.5 * dot(w, w) + C * hinge;
}

}  // namespace svm_detail

/// Exact minimizer of sum_i max(0, 1 - y_i (s_i + b)) over b. Every term is
/// linear on either side of its breakpoint y_i - s_i, and the slope reaches
/// zero after the n+ smallest breakpoints; the midpoint of that flat segment is returned.
inline double optimal_bias(const std::vector<double>& s, const std::vector<double>& y) {
  std::vector<double> bp(s.size());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    bp[i] = y[i] - s[i];
    if (y[i] > 0) ++pos;
  }
  if (pos == 0 || pos == s.size()) throw InvalidArgument("optimal_bias needs both classes");
  const auto mid = bp.begin() + static_cast<std::ptrdiff_t>(pos);
  std::nth_element(bp.begin(), mid, bp.end());
  const double upper = *mid;
  const double lower = *std::max_element(bp.begin(), mid);
  return 0.5 * (lower + upper);
}

/// Solves one attribute. X rows must all have the same length. The iterate is
/// kept as w = sum_j beta_j x_j, so a step costs O(n) through the Gram matrix;
/// memory is O(n^2).
inline SvmAttribute train_linear_svm(const std::vector<const std::vector<double>*>& X, const std::vector<double>& y,
                                     const SvmOptions& opt, std::uint64_t seed, std::vector<double>* history = nullptr) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::VectorXd;
  const std::size_t n = X.size();
  const std::size_t D = n ? X[0]->size() : 0;
  const double lambda = 1.0 / (opt.C * static_cast<double>(n));
  const double radius = 1.0 / std::sqrt(lambda);

  Mat Xm(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(D));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j) Xm(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (*X[i])[j];
  const Mat K = Xm * Xm.transpose();
  const auto N = static_cast<Eigen::Index>(n);

  Vec beta = Vec::Zero(N), avg = Vec::Zero(N), best_beta = Vec::Zero(N);
  std::vector<double> s(n, 0.0), scratch(n);
  double ww = 0;

  auto objective = [&](const Vec& coef, std::vector<double>& scores, double& bias) {
    Eigen::Map<Vec>(scores.data(), N) = K * coef;
    bias = optimal_bias(scores, y);
    double hinge = 0;
    for (std::size_t i = 0; i < n; ++i) hinge += std::max(0.0, 1.0 - y[i] * (scores[i] + bias));
    double norm = 0;
    for (std::size_t i = 0; i < n; ++i) norm += coef[static_cast<Eigen::Index>(i)] * scores[i];
    return 0.5 * norm + opt.C * hinge;
  };

  SvmAttribute best;
  best.trained = true;
  best.C = opt.C;
  best.objective = objective(beta, scratch, best.bias);
  std::vector<double> scaled(n);
  // Each candidate direction is rescaled by golden-section search; with the
  // bias re-solved, the objective is convex in the scale.
  auto consider = [&](const Vec& coef) {
    Eigen::Map<Vec>(scratch.data(), N) = K * coef;
    double norm = 0;
    for (std::size_t i = 0; i < n; ++i) norm += coef[static_cast<Eigen::Index>(i)] * scratch[i];
    if (!(norm > 0)) return;
    auto at = [&](double alpha, double& bias) {
      for (std::size_t i = 0; i < n; ++i) scaled[i] = alpha * scratch[i];
      bias = optimal_bias(scaled, y);
      double hinge = 0;
      for (std::size_t i = 0; i < n; ++i) hinge += std::max(0.0, 1.0 - y[i] * (scaled[i] + bias));
      return 0.5 * alpha * alpha * norm + opt.C * hinge;
    };
    constexpr double g = 0.6180339887498949;
    double lo = 0, hi = radius / std::sqrt(norm), cb = 0;
    double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo);
    double f1 = at(x1, cb), f2 = at(x2, cb);
    for (int it = 0; it < 80; ++it) {
      if (f1 <= f2) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - g * (hi - lo);
        f1 = at(x1, cb);
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + g * (hi - lo);
        f2 = at(x2, cb);
      }
    }
    const double alpha = 0.5 * (lo + hi);
    const double obj = at(alpha, cb);
    if (obj < best.objective) {
      best_beta = alpha * coef;
      best.bias = cb;
      best.objective = obj;
    }
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::uint64_t t = 0;
  std::size_t averaged = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    // Restart the running average at epochs 1, 2, 4, 8, ... so it always covers the latest half.
    if ((epoch & (epoch + 1)) == 0) {
      avg.setZero();
      averaged = 0;
    }
    for (std::size_t i : order) {
      ++t;
      const auto ii = static_cast<Eigen::Index>(i);
      const double b = optimal_bias(s, y);
      const double eta = 1.0 / (lambda * static_cast<double>(t));
      const double shrink = 1.0 - eta * lambda;
      const bool violated = y[i] * (s[i] + b) < 1.0;
      const double step = violated ? eta * y[i] : 0.0;
      ww = shrink * shrink * ww + 2 * shrink * step * s[i] + step * step * K(ii, ii);
      beta *= shrink;
      beta[ii] += step;
      const double* krow = K.row(ii).data();
      for (std::size_t j = 0; j < n; ++j) s[j] = shrink * s[j] + step * krow[j];
      if (ww > radius * radius) {
        const double f = radius / std::sqrt(ww);
        beta *= f;
        for (double& v : s) v *= f;
        ww = radius * radius;
      }
      avg += beta;
      ++averaged;
    }
    // Drop accumulated rounding in the incremental quantities.
    const Vec ks = K * beta;
    std::copy(ks.data(), ks.data() + N, s.begin());
    ww = beta.dot(ks);
    consider(beta);
    consider(avg / static_cast<double>(averaged));
    if (history) history->push_back(best.objective);
  }
  best.iterations = t;
  best.weights.resize(D);
  Eigen::Map<Vec>(best.weights.data(), static_cast<Eigen::Index>(D)) = Xm.transpose() * best_beta;
  return best;
}

/// Trains one SVM per attribute on the examples whose label is known.
inline SvmTrainResult train_svm(const std::vector<std::vector<double>>& features, const std::vector<AttributeLabel>& labels,
                                const std::vector<std::string>& attributes, std::uint64_t layout_hash,
                                const SvmOptions& opt, std::size_t jobs = 1) {
  opt.validate();
  if (features.size() != labels.size())
    throw InvalidArgument("train_svm: " + std::to_string(features.size()) + " feature vectors for " +
                          std::to_string(labels.size()) + " label records");
  const std::size_t D = features.empty() ? 0 : features[0].size();
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != D) throw LayoutError("train_svm: feature vector " + std::to_string(i) + " has a different length");
    if (labels[i].size() != attributes.size())
      throw InvalidArgument("train_svm: label record " + std::to_string(i) + " has the wrong length");
  }

  std::vector<double> mean(D, 0.0), inv_sd(D, 1.0);
  std::vector<std::vector<double>> standardized;
  const std::vector<std::vector<double>>* data = &features;
  if (opt.standardize && !features.empty()) {
    for (const auto& f : features)
      for (std::size_t j = 0; j < D; ++j) mean[j] += f[j];
    for (auto& m : mean) m /= static_cast<double>(features.size());
    std::vector<double> var(D, 0.0);
    for (const auto& f : features)
      for (std::size_t j = 0; j < D; ++j) var[j] += (f[j] - mean[j]) * (f[j] - mean[j]);
    for (std::size_t j = 0; j < D; ++j) {
      const double sd = std::sqrt(var[j] / static_cast<double>(features.size()));
      inv_sd[j] = sd > 0 ? 1.0 / sd : 0.0;
    }
    standardized = features;
    for (auto& f : standardized)
      for (std::size_t j = 0; j < D; ++j) f[j] = (f[j] - mean[j]) * inv_sd[j];
    data = &standardized;
  }

  SvmTrainResult r;
  r.model.layout_hash = layout_hash;
  r.model.feature_length = D;
  r.model.attributes.resize(attributes.size());
  r.objective_history.resize(attributes.size());
  std::vector<std::string> warnings(attributes.size());
  parallel_for(attributes.size(), jobs, [&](std::size_t a) {
    std::vector<const std::vector<double>*> X;
    std::vector<double> y;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (labels[i][a] == Label::unknown) continue;
      X.push_back(&(*data)[i]);
      y.push_back(labels[i][a] == Label::positive ? 1.0 : -1.0);
      if (labels[i][a] == Label::positive) ++pos;
    }
    SvmAttribute m;
    if (pos == 0 || pos == X.size()) {
      m.C = opt.C;
      m.weights.assign(D, 0.0);
      m.bias = pos == 0 ? (X.empty() ? 0.0 : -1.0) : 1.0;
      warnings[a] = "attribute " + attributes[a] + " has " + (X.empty() ? "no known labels" : "a single class") +
                    "; it scores a constant " + detail::format_double(m.bias);
    } else {
      m = train_linear_svm(X, y, opt, derive_seed(opt.seed, a), &r.objective_history[a]);
      if (opt.standardize) {
        double shift = 0;
        for (std::size_t j = 0; j < D; ++j) {
          m.weights[j] *= inv_sd[j];
          shift += m.weights[j] * mean[j];
        }
        m.bias -= shift;
      }
    }
    m.name = attributes[a];
    r.model.attributes[a] = std::move(m);
  });
  for (auto& w : warnings)
    if (!w.empty()) r.warnings.push_back(std::move(w));
  return r;
}

/// Raw margins w_a . x + b_a, one per attribute.
inline std::vector<double> svm_score(const SvmModel& model, const std::vector<double>& x, std::uint64_t layout_hash) {
  if (layout_hash != model.layout_hash) throw LayoutError("feature layout hash does not match the SVM model");
  if (x.size() != model.feature_length)
    throw LayoutError("feature length " + std::to_string(x.size()) + " differs from the model's " +
                      std::to_string(model.feature_length));
  std::vector<double> out;
  for (const auto& a : model.attributes) out.push_back(svm_detail::dot(a.weights, x) + a.bias);
  return out;
}

inline constexpr std::string_view kSvmMagic = "PANDASVM";
inline constexpr std::uint32_t kSvmVersion = 1;

inline std::vector<char> serialize_svm(const SvmModel& m) {
  io::ByteWriter w;
  w.bytes(kSvmMagic);
  w.u32(kSvmVersion);
  w.u64(m.layout_hash);
  w.u64(m.feature_length);
  w.u32(static_cast<std::uint32_t>(m.attributes.size()));
  for (const auto& a : m.attributes) {
    if (a.weights.size() != m.feature_length) throw LayoutError("SVM attribute " + a.name + " has the wrong weight length");
    w.string(a.name);
    w.u8(a.trained ? 1 : 0);
    w.f64(a.C);
    w.u64(a.iterations);
    w.f64(a.objective);
    w.f64(a.bias);
    w.f64_array(a.weights);
  }
  return w.buffer();
}

inline SvmModel deserialize_svm(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes));
  r.expect_bytes(kSvmMagic, "SVM file magic");
  const auto version = r.u32("format version");
  if (version != kSvmVersion)
    throw VersionError("SVM file version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kSvmVersion) + ")");
  SvmModel m;
  m.layout_hash = r.u64("layout hash");
  const auto len_at = r.offset();
  m.feature_length = r.u64("feature length");
  if (m.feature_length > (std::size_t{1} << 32)) throw FormatError("implausible feature length", len_at);
  const auto count = r.u32("attribute count");
  for (std::uint32_t i = 0; i < count; ++i) {
    SvmAttribute a;
    a.name = r.string("attribute name");
    const auto flag_at = r.offset();
    const auto trained = r.u8("trained flag");
    if (trained > 1) throw FormatError("invalid trained flag", flag_at);
    a.trained = trained == 1;
    a.C = r.f64("C");
    a.iterations = r.u64("iterations");
    a.objective = r.f64("objective");
    a.bias = r.f64("bias");
    r.need(m.feature_length * sizeof(double), "weights");
    a.weights.resize(m.feature_length);
    r.f64_array(a.weights, "weights");
    m.attributes.push_back(std::move(a));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after SVM model", r.offset());
  return m;
}

inline void save_svm(const SvmModel& m, const std::filesystem::path& path) { io::write_file_atomic(path, serialize_svm(m)); }
inline SvmModel load_svm(const std::filesystem::path& path) { return deserialize_svm(io::read_file(path)); }

}  // namespace panda
