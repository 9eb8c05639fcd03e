#pragma once

// Part network (shared convolutional trunk + one branch per attribute) and the
// holistic whole-person network, which share one implementation and differ only
// in their NetworkSpec.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "panda/binary_io.hpp"
#include "panda/error.hpp"
#include "panda/kv_config.hpp"
#include "panda/layers.hpp"
#include "panda/random.hpp"
#include "panda/tensor.hpp"

namespace panda {

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

enum class Label : std::int8_t { negative = 0, positive = 1, unknown = -1 };

/// One state per attribute, in NetworkSpec::attributes order.
using AttributeLabel = std::vector<Label>;

inline char label_char(Label l) { return l == Label::positive ? '+' : l == Label::negative ? '-' : '?'; }

inline Label label_from_char(char c) {
  switch (c) {
    case '+': return Label::positive;
    case '-': return Label::negative;
    case '?': return Label::unknown;
    default: throw InvalidArgument(std::string("invalid label character '") + c + "'");
  }
}

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

struct ConvStage {
  std::size_t filters = 16;
  std::size_t kernel = 5;
  std::size_t stride = 1;
  std::size_t pad = 2;
  std::size_t pool_window = 2;
  std::size_t pool_stride = 2;
  bool lrn = false;

  friend bool operator==(const ConvStage&, const ConvStage&) = default;
};

struct NetworkSpec {
  static constexpr int kVersion = 1;

  std::size_t channels = 3;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<ConvStage> conv_stages;
  std::size_t trunk_fc_units = 576;
  std::size_t head_hidden_units = 128;
  std::vector<std::string> attributes;
  std::string tap_name = "fc_attr";
  Activation activation = Activation::rectifier;
  LrnParams lrn;

  friend bool operator==(const NetworkSpec& a, const NetworkSpec& b) { return a.to_text() == b.to_text(); }

  /// Four conv stages on 3x64x64 patches, a 576-unit trunk and 128-unit heads.
  static NetworkSpec part_default(std::vector<std::string> attributes) {
    NetworkSpec s;
    s.conv_stages = {{16, 5, 1, 2, 2, 2, true},
                     {32, 5, 1, 2, 2, 2, true},
                     {64, 3, 1, 1, 2, 2, false},
                     {64, 3, 1, 1, 2, 2, false}};
    s.attributes = std::move(attributes);
    return s;
  }

  /// Two conv stages on the stacked 12x64x64 person input, a 512-unit trunk.
  static NetworkSpec holistic_default(std::vector<std::string> attributes = default_holistic_attributes()) {
    NetworkSpec s;
    s.channels = 12;
    s.conv_stages = {{16, 5, 1, 2, 2, 2, true}, {32, 5, 1, 2, 2, 2, true}};
    s.trunk_fc_units = 512;
    s.tap_name = "fc_holistic";
    s.attributes = std::move(attributes);
    return s;
  }

  static std::vector<std::string> default_holistic_attributes() {
    return {"male", "long_hair", "glasses", "hat", "tshirt", "long_sleeves", "shorts", "jeans", "long_pants"};
  }

  struct StageShape {
    std::size_t conv_h, conv_w, pool_h, pool_w;
  };

  /// Spatial shapes after each stage; throws SpecError naming the stage that collapses.
  std::vector<StageShape> stage_shapes() const {
    std::vector<StageShape> out;
    std::size_t h = height, w = width;
    for (std::size_t i = 0; i < conv_stages.size(); ++i) {
      const auto& st = conv_stages[i];
      const std::string name = "conv stage " + std::to_string(i + 1);
      if (st.filters == 0 || st.kernel == 0 || st.stride == 0 || st.pool_window == 0 || st.pool_stride == 0)
        throw SpecError(name + ": extents must be positive");
      if (st.kernel > h + 2 * st.pad || st.kernel > w + 2 * st.pad)
        throw SpecError(name + ": kernel " + std::to_string(st.kernel) + " exceeds padded input " +
                        std::to_string(h + 2 * st.pad) + "x" + std::to_string(w + 2 * st.pad));
      StageShape s{};
      s.conv_h = (h + 2 * st.pad - st.kernel) / st.stride + 1;
      s.conv_w = (w + 2 * st.pad - st.kernel) / st.stride + 1;
      if (st.pool_window > s.conv_h || st.pool_window > s.conv_w || st.pool_stride > s.conv_h ||
          st.pool_stride > s.conv_w)
        throw SpecError(name + ": pool window " + std::to_string(st.pool_window) + " exceeds feature map " +
                        std::to_string(s.conv_h) + "x" + std::to_string(s.conv_w));
      s.pool_h = (s.conv_h - st.pool_window) / st.pool_stride + 1;
      s.pool_w = (s.conv_w - st.pool_window) / st.pool_stride + 1;
      out.push_back(s);
      h = s.pool_h;
      w = s.pool_w;
    }
    return out;
  }

  /// Length of the flattened conv output feeding the trunk layer.
  std::size_t flat_size() const {
    const auto shapes = stage_shapes();
    if (shapes.empty()) return channels * height * width;
    return conv_stages.back().filters * shapes.back().pool_h * shapes.back().pool_w;
  }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0) throw SpecError("input shape extents must be positive");
    if (trunk_fc_units == 0 || head_hidden_units == 0) throw SpecError("fully connected widths must be positive");
    if (attributes.empty()) throw SpecError("attribute list is empty");
    std::set<std::string> seen;
    for (const auto& a : attributes) {
      if (a.empty() || a.find_first_of(",;= \t\n#") != std::string::npos)
        throw SpecError("invalid attribute name '" + a + "'");
      if (!seen.insert(a).second) throw SpecError("duplicate attribute name '" + a + "'");
    }
    if (tap_name.empty()) throw SpecError("tap name is empty");
    if (lrn.size == 0 || !(lrn.k > 0) || lrn.alpha < 0 || lrn.beta < 0) throw SpecError("invalid LRN constants");
    stage_shapes();
  }

  void to_kv(KvConfig& cfg, const std::string& prefix = "") const {
    cfg.set(prefix + "input_shape", kv_value(std::vector<std::size_t>{channels, height, width}));
    std::string stages;
    for (std::size_t i = 0; i < conv_stages.size(); ++i) {
      const auto& s = conv_stages[i];
      if (i) stages += ";";
      stages += kv_value(std::vector<std::size_t>{s.filters, s.kernel, s.stride, s.pad, s.pool_window,
                                                  s.pool_stride, s.lrn ? 1u : 0u});
    }
    cfg.set(prefix + "conv_stages", stages);
    cfg.set(prefix + "trunk_fc_units", kv_value(trunk_fc_units));
    cfg.set(prefix + "head_hidden_units", kv_value(head_hidden_units));
    cfg.set(prefix + "attributes", kv_value(attributes));
    cfg.set(prefix + "tap_name", tap_name);
    cfg.set(prefix + "activation", to_string(activation));
    cfg.set(prefix + "lrn", kv_value(std::vector<double>{static_cast<double>(lrn.size), lrn.k, lrn.alpha, lrn.beta}));
  }

  void apply(const KvConfig& cfg, const std::string& prefix = "") {
    std::vector<std::size_t> shape{channels, height, width};
    cfg.read(prefix + "input_shape", shape);
    if (shape.size() != 3) throw ConfigError(prefix + "input_shape needs three extents");
    channels = shape[0];
    height = shape[1];
    width = shape[2];
    if (auto v = cfg.get(prefix + "conv_stages")) {
      conv_stages.clear();
      for (const auto& item : detail::split(*v, ';')) {
        std::vector<std::size_t> f;
        for (const auto& x : detail::split(item, ','))
          f.push_back(static_cast<std::size_t>(detail::parse_int(x, prefix + "conv_stages")));
        if (f.size() != 7)
          throw ConfigError(prefix + "conv_stages entries need filters,kernel,stride,pad,pool_window,pool_stride,lrn");
        conv_stages.push_back({f[0], f[1], f[2], f[3], f[4], f[5], f[6] != 0});
      }
    }
    cfg.read(prefix + "trunk_fc_units", trunk_fc_units);
    cfg.read(prefix + "head_hidden_units", head_hidden_units);
    if (auto v = cfg.get(prefix + "attributes")) attributes = detail::split(*v, ',');
    cfg.read(prefix + "tap_name", tap_name);
    if (auto v = cfg.get(prefix + "activation")) activation = activation_from_string(*v);
    std::vector<double> l{static_cast<double>(lrn.size), lrn.k, lrn.alpha, lrn.beta};
    cfg.read(prefix + "lrn", l);
    if (l.size() != 4) throw ConfigError(prefix + "lrn needs size,k,alpha,beta");
    lrn = {static_cast<std::size_t>(l[0]), l[1], l[2], l[3]};
  }

  /// Canonical text block stored in model files.
  std::string to_text() const {
    KvConfig cfg;
    cfg.set("spec_version", std::to_string(kVersion));
    to_kv(cfg);
    return cfg.to_text();
  }

  static NetworkSpec from_text(const std::string& text) {
    const auto cfg = KvConfig::parse(text, "network spec");
    if (cfg.get("spec_version") != std::to_string(kVersion))
      throw VersionError("network spec version mismatch: expected " + std::to_string(kVersion));
    NetworkSpec s;
    s.apply(cfg);
    if (auto unused = cfg.unused_keys(); !unused.empty())
      throw ConfigError("unknown network spec key '" + unused.front() + "'");
    return s;
  }
};

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

struct Network {
  NetworkSpec spec;
  std::vector<std::string> param_names;
  std::vector<Tensor> params;
  /// Per-channel mean subtracted from every input before the first layer.
  std::vector<double> input_mean;
  std::uint64_t seed = 0;
  /// Completed training epochs (checkpoints); 0 for a fresh network.
  std::uint64_t epoch = 0;

  std::size_t attribute_count() const { return spec.attributes.size(); }

  std::size_t param_index(const std::string& name) const {
    for (std::size_t i = 0; i < param_names.size(); ++i)
      if (param_names[i] == name) return i;
    throw InvalidArgument("no parameter named '" + name + "'");
  }
  Tensor& param(const std::string& name) { return params[param_index(name)]; }
  const Tensor& param(const std::string& name) const { return params[param_index(name)]; }

  // Layout: per conv stage {weight, bias}, then trunk {weight, bias},
  // then per head {hidden.weight, hidden.bias, out.weight, out.bias}.
  std::size_t conv_weight_index(std::size_t stage) const { return 2 * stage; }
  std::size_t trunk_index() const { return 2 * spec.conv_stages.size(); }
  std::size_t head_index(std::size_t attr) const { return trunk_index() + 2 + 4 * attr; }

  friend bool operator==(const Network&, const Network&) = default;
};

/// Parameter names and shapes in declaration order, derived from the spec alone.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const NetworkSpec& spec) {
  spec.validate();
  std::vector<std::pair<std::string, Shape>> out;
  std::size_t in_c = spec.channels;
  for (std::size_t i = 0; i < spec.conv_stages.size(); ++i) {
    const auto& s = spec.conv_stages[i];
    const std::string p = "conv" + std::to_string(i + 1);
    out.push_back({p + ".weight", {s.filters, in_c, s.kernel, s.kernel}});
    out.push_back({p + ".bias", {s.filters}});
    in_c = s.filters;
  }
  out.push_back({"trunk.weight", {spec.trunk_fc_units, spec.flat_size()}});
  out.push_back({"trunk.bias", {spec.trunk_fc_units}});
  for (const auto& a : spec.attributes) {
    const std::string p = "head." + a;
    out.push_back({p + ".hidden.weight", {spec.head_hidden_units, spec.trunk_fc_units}});
    out.push_back({p + ".hidden.bias", {spec.head_hidden_units}});
    out.push_back({p + ".out.weight", {1, spec.head_hidden_units}});
    out.push_back({p + ".out.bias", {1}});
  }
  return out;
}

/// Weights drawn uniformly from +-sqrt(3 / fan_in), biases zero. Each tensor uses
/// its own substream keyed by its name, so adding heads never changes the trunk.
inline Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
  Network net;
  net.spec = spec;
  net.seed = seed;
  net.input_mean.assign(spec.channels, 0.0);
  for (auto& [name, shape] : parameter_layout(spec)) {
    Tensor t(shape);
    if (shape.size() > 1) {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
      const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
      Rng rng(derive_seed(seed, io::fnv1a(name)));
      for (auto& v : t.values()) v = rng.uniform(-bound, bound);
    }
    net.param_names.push_back(name);
    net.params.push_back(std::move(t));
  }
  return net;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

struct StageTrace {
  Tensor input;    // conv input
  Tensor act_out;  // after the nonlinearity (LRN input)
  std::vector<std::size_t> argmax;
  Shape pool_in_shape;
};

/// Activations of one batch. Dense layers run on the whole batch as matrices
/// (rows = samples); conv stages run per sample.
struct BatchTrace {
  std::size_t batch = 0;
  std::vector<std::vector<StageTrace>> stages;  // [sample][stage]
  RowMatrix flat;                               // [B, flat_size]
  RowMatrix trunk_pre;                          // [B, T]
  RowMatrix tap;                                // [B, T]
  std::vector<RowMatrix> hidden;                // per head [B, H], post-activation
  RowMatrix logits;                             // [B, A]
};

inline Tensor normalize_input(const Network& net, Tensor x) {
  const std::size_t area = net.spec.height * net.spec.width;
  for (std::size_t c = 0; c < net.spec.channels; ++c) {
    const double m = net.input_mean[c];
    if (m == 0.0) continue;
    double* p = x.raw() + c * area;
    for (std::size_t i = 0; i < area; ++i) p[i] -= m;
  }
  return x;
}

inline void activate(RowMatrix& m, Activation kind) {
  if (kind == Activation::rectifier) {
    m = m.cwiseMax(0.0);
  } else {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = logistic(m.data()[i]);
  }
}

/// Multiplies the upstream gradient by the activation derivative, from the output alone.
inline void activate_backward(RowMatrix& grad, const RowMatrix& out, Activation kind) {
  if (kind == Activation::rectifier)
    grad = (out.array() > 0.0).select(grad, 0.0);
  else
    grad.array() *= out.array() * (1.0 - out.array());
}

/// Y = X W^T + b for row-major X [B, D], W [M, D].
inline RowMatrix dense(const RowMatrix& x, const Tensor& w, const Tensor& b) {
  const auto M = static_cast<Eigen::Index>(w.dim(0)), D = static_cast<Eigen::Index>(w.dim(1));
  RowMatrix y(x.rows(), M);
  y.noalias() = x * ConstMatrixMap(w.raw(), M, D).transpose();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.raw(), M);
  return y;
}

/// Conv stages of one sample; returns the flattened output.
inline Tensor conv_stages_forward(const Network& net, Tensor x, std::vector<StageTrace>* trace) {
  const auto& spec = net.spec;
  x = normalize_input(net, std::move(x));
  for (std::size_t s = 0; s < spec.conv_stages.size(); ++s) {
    const auto& st = spec.conv_stages[s];
    const std::size_t w = net.conv_weight_index(s);
    Tensor act = nonlinearity(conv2d(x, net.params[w], net.params[w + 1], st.stride, st.pad), spec.activation);
    auto pooled = st.lrn ? maxpool(lrn(act, spec.lrn), st.pool_window, st.pool_stride)
                         : maxpool(act, st.pool_window, st.pool_stride);
    if (trace) {
      StageTrace t;
      t.pool_in_shape = act.shape();
      t.input = std::move(x);
      t.act_out = std::move(act);
      t.argmax = std::move(pooled.argmax);
      trace->push_back(std::move(t));
    }
    x = std::move(pooled.output);
  }
  return x;
}

inline BatchTrace forward_batch(const Network& net, const Tensor& batch, bool with_heads, bool keep_trace) {
  const auto& spec = net.spec;
  BatchTrace tr;
  tr.batch = batch.dim(0);
  const auto B = static_cast<Eigen::Index>(tr.batch);
  tr.flat.resize(B, static_cast<Eigen::Index>(spec.flat_size()));
  if (keep_trace) tr.stages.resize(tr.batch);
  for (std::size_t b = 0; b < tr.batch; ++b) {
    const Tensor flat = conv_stages_forward(net, batch_row(batch, b), keep_trace ? &tr.stages[b] : nullptr);
    std::copy(flat.values().begin(), flat.values().end(), tr.flat.row(static_cast<Eigen::Index>(b)).data());
  }
  const std::size_t ti = net.trunk_index();
  tr.trunk_pre = dense(tr.flat, net.params[ti], net.params[ti + 1]);
  tr.tap = tr.trunk_pre;
  activate(tr.tap, spec.activation);
  if (!keep_trace) tr.trunk_pre.resize(0, 0);
  if (with_heads) {
    const auto A = static_cast<Eigen::Index>(spec.attributes.size());
    tr.logits.resize(B, A);
    for (Eigen::Index a = 0; a < A; ++a) {
      const std::size_t h = net.head_index(static_cast<std::size_t>(a));
      RowMatrix hid = dense(tr.tap, net.params[h], net.params[h + 1]);
      activate(hid, spec.activation);
      tr.logits.col(a) = dense(hid, net.params[h + 2], net.params[h + 3]).col(0);
      if (keep_trace) tr.hidden.push_back(std::move(hid));
    }
  }
  return tr;
}

inline void check_batch(const NetworkSpec& spec, const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != spec.channels || batch.dim(2) != spec.height ||
      batch.dim(3) != spec.width)
    throw InvalidArgument("batch shape " + shape_string(batch.shape()) + " does not match network input [B," +
                          std::to_string(spec.channels) + "," + std::to_string(spec.height) + "," +
                          std::to_string(spec.width) + "]");
}

/// Numerically stable binary log-loss on a logit.
inline double log_loss(double logit, bool positive) {
  const double softplus = std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit)));
  return softplus - (positive ? logit : 0.0);
}

inline Tensor to_tensor(const RowMatrix& m) {
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::vector<double>(m.data(), m.data() + m.size()));
}

}  // namespace detail

struct ForwardResult {
  /// [B, A] logistic outputs.
  Tensor probabilities;
  /// [B, trunk_fc_units] trunk activation.
  Tensor tap;
};

inline ForwardResult forward(const Network& net, const Tensor& batch) {
  detail::check_batch(net.spec, batch);
  auto tr = detail::forward_batch(net, batch, true, false);
  for (Eigen::Index i = 0; i < tr.logits.size(); ++i) tr.logits.data()[i] = logistic(tr.logits.data()[i]);
  return {detail::to_tensor(tr.logits), detail::to_tensor(tr.tap)};
}

/// Trunk activations [B, trunk_fc_units] of a batch, skipping the heads.
inline Tensor tap_activations(const Network& net, const Tensor& batch) {
  detail::check_batch(net.spec, batch);
  return detail::to_tensor(detail::forward_batch(net, batch, false, false).tap);
}

/// Trunk activation of a single [C,H,W] sample.
inline Tensor tap_activation(const Network& net, const Tensor& sample) {
  Shape shape{1};
  shape.insert(shape.end(), sample.shape().begin(), sample.shape().end());
  const Tensor t = tap_activations(net, sample.reshaped(shape));
  return t.reshaped({t.size()});
}

struct LossResult {
  /// Sum over samples and known labels of the binary log-loss.
  double loss = 0.0;
  /// Aligned with Network::params.
  std::vector<Tensor> grads;
  std::size_t known_labels = 0;
  /// Set when the batch carried no known label at all (loss and grads are zero).
  bool all_unknown = false;
};

inline LossResult loss_and_grad(const Network& net, const Tensor& batch, const std::vector<AttributeLabel>& labels) {
  using detail::RowMatrix;
  detail::check_batch(net.spec, batch);
  const auto& spec = net.spec;
  const std::size_t B = batch.dim(0), A = net.attribute_count();
  if (labels.size() != B)
    throw InvalidArgument("loss_and_grad: " + std::to_string(labels.size()) + " label records for batch of " +
                          std::to_string(B));
  for (std::size_t b = 0; b < B; ++b)
    if (labels[b].size() != A)
      throw InvalidArgument("loss_and_grad: label record " + std::to_string(b) + " has " +
                            std::to_string(labels[b].size()) + " entries, expected " + std::to_string(A));

  LossResult r;
  r.grads.reserve(net.params.size());
  for (const auto& p : net.params) r.grads.emplace_back(p.shape());

  // Only samples with at least one known label take part.
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < B; ++b)
    if (std::any_of(labels[b].begin(), labels[b].end(), [](Label l) { return l != Label::unknown; }))
      rows.push_back(b);
  if (rows.empty()) {
    r.all_unknown = true;
    return r;
  }
  Shape sub_shape = batch.shape();
  sub_shape[0] = rows.size();
  Tensor sub(sub_shape);
  const std::size_t per = batch.size() / B;
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(batch.raw() + rows[i] * per, batch.raw() + (rows[i] + 1) * per, sub.raw() + i * per);

  auto tr = detail::forward_batch(net, sub, true, true);
  const auto N = static_cast<Eigen::Index>(rows.size());
  auto mat = [](Tensor& t) {
    return detail::MatrixMap(t.raw(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  };
  auto cmat = [](const Tensor& t) {
    return detail::ConstMatrixMap(t.raw(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  };

  RowMatrix d_tap = RowMatrix::Zero(N, static_cast<Eigen::Index>(spec.trunk_fc_units));
  for (std::size_t a = 0; a < A; ++a) {
    Eigen::VectorXd d_logit = Eigen::VectorXd::Zero(N);
    bool any = false;
    for (Eigen::Index i = 0; i < N; ++i) {
      const Label l = labels[rows[static_cast<std::size_t>(i)]][a];
      if (l == Label::unknown) continue;
      const bool pos = l == Label::positive;
      const double z = tr.logits(i, static_cast<Eigen::Index>(a));
      r.loss += detail::log_loss(z, pos);
      ++r.known_labels;
      d_logit(i) = logistic(z) - (pos ? 1.0 : 0.0);
      any = true;
    }
    if (!any) continue;
    const std::size_t h = net.head_index(a);
    const RowMatrix& hid = tr.hidden[a];
    mat(r.grads[h + 2]).noalias() += d_logit.transpose() * hid;
    r.grads[h + 3][0] += d_logit.sum();
    RowMatrix d_hid = d_logit * cmat(net.params[h + 2]);
    detail::activate_backward(d_hid, hid, spec.activation);
    mat(r.grads[h]).noalias() += d_hid.transpose() * tr.tap;
    Eigen::Map<Eigen::RowVectorXd>(r.grads[h + 1].raw(), d_hid.cols()) += d_hid.colwise().sum();
    d_tap.noalias() += d_hid * cmat(net.params[h]);
  }

  const std::size_t ti = net.trunk_index();
  detail::activate_backward(d_tap, tr.tap, spec.activation);
  mat(r.grads[ti]).noalias() += d_tap.transpose() * tr.flat;
  Eigen::Map<Eigen::RowVectorXd>(r.grads[ti + 1].raw(), d_tap.cols()) += d_tap.colwise().sum();
  if (spec.conv_stages.empty()) return r;
  RowMatrix d_flat = d_tap * cmat(net.params[ti]);

  for (Eigen::Index i = 0; i < N; ++i) {
    auto& stages = tr.stages[static_cast<std::size_t>(i)];
    Tensor d_x({static_cast<std::size_t>(d_flat.cols())},
               std::vector<double>(d_flat.row(i).data(), d_flat.row(i).data() + d_flat.cols()));
    for (std::size_t s = spec.conv_stages.size(); s-- > 0;) {
      const auto& st = spec.conv_stages[s];
      auto& t = stages[s];
      Tensor d_act = maxpool_backward(t.pool_in_shape, t.argmax, d_x);
      if (st.lrn) d_act = lrn_backward(t.act_out, d_act, spec.lrn);
      const Tensor d_conv = nonlinearity_backward(t.act_out, t.act_out, d_act, spec.activation);
      const std::size_t w = net.conv_weight_index(s);
      auto g = conv2d_backward(t.input, net.params[w], net.params[w + 1], st.stride, st.pad, d_conv, s > 0);
      for (std::size_t j = 0; j < r.grads[w].size(); ++j) r.grads[w][j] += g.d_params[0][j];
      for (std::size_t j = 0; j < r.grads[w + 1].size(); ++j) r.grads[w + 1][j] += g.d_params[1][j];
      d_x = std::move(g.d_input);
      // Release the trace as we go.
      t = {};
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------
//
//   "PANDANET"             8-byte magic
//   u32 format version     (= 1)
//   string spec text       u32 length + canonical NetworkSpec text
//   u64 init seed
//   u64 epoch              checkpoint counter, 0 for plain models
//   u32 channel count      followed by f64 input means
//   u32 parameter count    followed per parameter by:
//       string name, u32 rank, u64 extents[rank], f64 values[volume]
//
// All integers and reals are little-endian; reals are IEEE-754 binary64.

inline constexpr std::string_view kModelMagic = "PANDANET";
inline constexpr std::uint32_t kModelVersion = 1;

inline std::vector<char> serialize_network(const Network& net) {
  io::ByteWriter w;
  w.bytes(kModelMagic);
  w.u32(kModelVersion);
  w.string(net.spec.to_text());
  w.u64(net.seed);
  w.u64(net.epoch);
  w.u32(static_cast<std::uint32_t>(net.input_mean.size()));
  w.f64_array(net.input_mean);
  w.u32(static_cast<std::uint32_t>(net.params.size()));
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    w.string(net.param_names[i]);
    w.u32(static_cast<std::uint32_t>(net.params[i].rank()));
    for (auto d : net.params[i].shape()) w.u64(d);
    w.f64_array(net.params[i].data());
  }
  return w.buffer();
}

inline Network deserialize_network(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes));
  r.expect_bytes(kModelMagic, "model magic");
  const auto version_at = r.offset();
  const auto version = r.u32("format version");
  if (version != kModelVersion)
    throw VersionError("model format version " + std::to_string(version) + " at byte " + std::to_string(version_at) +
                       ", expected " + std::to_string(kModelVersion));
  const auto spec_at = r.offset();
  Network net;
  try {
    net.spec = NetworkSpec::from_text(r.string("spec text"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad spec text: ") + e.what(), spec_at);
  }
  const auto layout = [&] {
    try {
      return parameter_layout(net.spec);
    } catch (const SpecError& e) {
      throw FormatError(std::string("inconsistent spec: ") + e.what(), spec_at);
    }
  }();
  net.seed = r.u64("seed");
  net.epoch = r.u64("epoch");
  const auto mean_at = r.offset();
  const auto channels = r.u32("input mean count");
  if (channels != net.spec.channels) throw FormatError("input mean count does not match spec", mean_at);
  net.input_mean.resize(channels);
  r.f64_array(net.input_mean, "input means");
  const auto count_at = r.offset();
  const auto count = r.u32("parameter count");
  if (count != layout.size()) throw FormatError("parameter count does not match spec", count_at);
  for (const auto& [name, shape] : layout) {
    const auto at = r.offset();
    if (r.string("parameter name") != name) throw FormatError("expected parameter '" + name + "'", at);
    const auto rank = r.u32("parameter rank");
    if (rank != shape.size()) throw FormatError("rank mismatch for '" + name + "'", at);
    for (auto d : shape)
      if (r.u64("parameter extent") != d) throw FormatError("shape mismatch for '" + name + "'", at);
    Tensor t(shape);
    r.f64_array(t.data(), name.c_str());
    net.param_names.push_back(name);
    net.params.push_back(std::move(t));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after model", r.offset());
  return net;
}

inline void save_network(const Network& net, const std::filesystem::path& path) {
  const auto bytes = serialize_network(net);
  io::write_file_atomic(path, bytes);
}

inline Network load_network(const std::filesystem::path& path) { return deserialize_network(io::read_file(path)); }

}  // namespace panda
