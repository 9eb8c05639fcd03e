#pragma once

// Minibatch SGD with momentum and weight decay, patch augmentation, and a
// detection-score curriculum: stage i trains on every example whose score is
// at least thresholds[i], so stages are nested and grow.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "panda/error.hpp"
#include "panda/eval.hpp"
#include "panda/image.hpp"
#include "panda/kv_config.hpp"
#include "panda/net.hpp"
#include "panda/random.hpp"
#include "panda/tensor.hpp"

namespace panda {

struct TrainConfig {
  double learning_rate = 0.01;
  /// Multiplies the learning rate after every epoch.
  double lr_epoch_decay = 1.0;
  /// Multiplies the learning rate when a new curriculum stage starts.
  double lr_stage_decay = 0.5;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 64;
  /// Epochs per curriculum stage; the last entry repeats for extra stages.
  std::vector<std::size_t> stage_epochs{4, 4};
  /// Explicit descending score thresholds. When empty, thresholds come from
  /// `curriculum_quantiles` (fraction of examples, by descending score, in each stage).
  std::vector<double> curriculum_thresholds;
  std::vector<double> curriculum_quantiles{0.5, 1.0};
  double jitter_translation = 4.0;
  /// Scale factor drawn from [1 - jitter_scale, 1 + jitter_scale].
  double jitter_scale = 0.1;
  double flip_probability = 0.5;
  std::uint64_t seed = 1;
  /// Checkpoint after every epoch when nonempty.
  std::string checkpoint_dir;
  std::string checkpoint_name = "net";

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (!(lr_epoch_decay > 0) || !(lr_stage_decay > 0)) throw ConfigError("learning-rate decay factors must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (stage_epochs.empty()) throw ConfigError("stage_epochs is empty");
    if (!(flip_probability >= 0 && flip_probability <= 1)) throw ConfigError("flip_probability must be in [0, 1]");
    if (!(jitter_translation >= 0) || !(jitter_scale >= 0 && jitter_scale < 1))
      throw ConfigError("jitter bounds must be non-negative (scale below 1)");
    for (std::size_t i = 1; i < curriculum_thresholds.size(); ++i)
      if (!(curriculum_thresholds[i] < curriculum_thresholds[i - 1]))
        throw ConfigError("curriculum_thresholds must be strictly descending");
    if (curriculum_thresholds.empty()) {
      if (curriculum_quantiles.empty()) throw ConfigError("curriculum needs thresholds or quantiles");
      for (std::size_t i = 0; i < curriculum_quantiles.size(); ++i) {
        const double q = curriculum_quantiles[i];
        if (!(q > 0 && q <= 1)) throw ConfigError("curriculum_quantiles must be in (0, 1]");
        if (i && !(q > curriculum_quantiles[i - 1])) throw ConfigError("curriculum_quantiles must be strictly increasing");
      }
    }
  }

  void to_kv(KvConfig& cfg, const std::string& prefix) const {
    cfg.set(prefix + "learning_rate", kv_value(learning_rate));
    cfg.set(prefix + "lr_epoch_decay", kv_value(lr_epoch_decay));
    cfg.set(prefix + "lr_stage_decay", kv_value(lr_stage_decay));
    cfg.set(prefix + "momentum", kv_value(momentum));
    cfg.set(prefix + "weight_decay", kv_value(weight_decay));
    cfg.set(prefix + "batch_size", kv_value(batch_size));
    cfg.set(prefix + "stage_epochs", kv_value(stage_epochs));
    cfg.set(prefix + "curriculum_thresholds", kv_value(curriculum_thresholds));
    cfg.set(prefix + "curriculum_quantiles", kv_value(curriculum_quantiles));
    cfg.set(prefix + "jitter_translation", kv_value(jitter_translation));
    cfg.set(prefix + "jitter_scale", kv_value(jitter_scale));
    cfg.set(prefix + "flip_probability", kv_value(flip_probability));
    cfg.set(prefix + "seed", kv_value(seed));
  }

  void apply(const KvConfig& cfg, const std::string& prefix) {
    cfg.read(prefix + "learning_rate", learning_rate);
    cfg.read(prefix + "lr_epoch_decay", lr_epoch_decay);
    cfg.read(prefix + "lr_stage_decay", lr_stage_decay);
    cfg.read(prefix + "momentum", momentum);
    cfg.read(prefix + "weight_decay", weight_decay);
    cfg.read(prefix + "batch_size", batch_size);
    cfg.read(prefix + "stage_epochs", stage_epochs);
    cfg.read(prefix + "curriculum_thresholds", curriculum_thresholds);
    cfg.read(prefix + "curriculum_quantiles", curriculum_quantiles);
    cfg.read(prefix + "jitter_translation", jitter_translation);
    cfg.read(prefix + "jitter_scale", jitter_scale);
    cfg.read(prefix + "flip_probability", flip_probability);
    cfg.read(prefix + "seed", seed);
  }
};

/// Translates, scales (about the centre) and mirrors a [C, H, W] image.
inline Tensor augment(const Tensor& patch, const TrainConfig& cfg, Rng& rng) {
  if (patch.rank() != 3) throw InvalidArgument("augment expects [C,H,W], got " + shape_string(patch.shape()));
  const double tx = cfg.jitter_translation > 0 ? rng.uniform(-cfg.jitter_translation, cfg.jitter_translation) : 0.0;
  const double ty = cfg.jitter_translation > 0 ? rng.uniform(-cfg.jitter_translation, cfg.jitter_translation) : 0.0;
  const double s = cfg.jitter_scale > 0 ? rng.uniform(1 - cfg.jitter_scale, 1 + cfg.jitter_scale) : 1.0;
  const bool flip = cfg.flip_probability > 0 && rng.bernoulli(cfg.flip_probability);
  const std::size_t C = patch.dim(0), H = patch.dim(1), W = patch.dim(2);
  Tensor out(patch.shape());
  if (tx == 0 && ty == 0 && s == 1.0) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) out.at(c, y, x) = patch.at(c, y, flip ? W - 1 - x : x);
    return out;
  }
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double xs = flip ? static_cast<double>(W - 1 - x) : static_cast<double>(x);
      const double sy = (static_cast<double>(y) - cy - ty) / s + cy;
      const double sx = (xs - cx - (flip ? -tx : tx)) / s + cx;
      for (std::size_t c = 0; c < C; ++c) out.at(c, y, x) = sample_bilinear(patch, c, sy, sx);
    }
  return out;
}

/// Threshold per stage from quantiles of the descending score list.
inline std::vector<double> quantile_thresholds(std::vector<double> scores, const std::vector<double>& quantiles) {
  std::vector<double> out;
  std::sort(scores.begin(), scores.end(), std::greater<>());
  for (double q : quantiles) {
    if (q >= 1.0 || scores.empty()) {
      out.push_back(-std::numeric_limits<double>::infinity());
      continue;
    }
    const auto idx = static_cast<std::size_t>(std::max(1.0, std::ceil(q * static_cast<double>(scores.size())))) - 1;
    out.push_back(scores[idx]);
  }
  // Ties can make neighbouring quantiles share a threshold; keep them strictly descending.
  std::vector<double> strict;
  for (double t : out)
    if (strict.empty() || t < strict.back()) strict.push_back(t);
  return strict;
}

struct CurriculumStages {
  /// stages[i] lists example indices (ascending) with score >= thresholds[i].
  std::vector<std::vector<std::size_t>> stages;
  std::vector<std::string> warnings;
};

inline CurriculumStages curriculum_partition(const std::vector<double>& scores, const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw ConfigError("curriculum needs at least one threshold");
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] < thresholds[i - 1])) throw ConfigError("curriculum thresholds must be strictly descending");
  CurriculumStages r;
  for (double t : thresholds) {
    std::vector<std::size_t> stage;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= t) stage.push_back(i);
    r.stages.push_back(std::move(stage));
  }
  if (r.stages.front().empty())
    r.warnings.push_back("curriculum stage 1 (threshold " + detail::format_double(thresholds.front()) +
                         ") is empty; training starts at the first nonempty stage");
  return r;
}

/// v <- momentum v - lr (g + weight_decay p); p <- p + v. Gradients are checked
/// for finiteness before anything is modified.
inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, std::vector<Tensor>& velocity, double lr,
                     double momentum, double weight_decay, const std::vector<std::string>& names = {}) {
  if (grads.size() != params.size() || velocity.size() != params.size())
    throw InvalidArgument("sgd_step: parameter, gradient and velocity counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || velocity[i].shape() != params[i].shape())
      throw InvalidArgument("sgd_step: shape mismatch for tensor " + (i < names.size() ? names[i] : std::to_string(i)));
    if (!grads[i].all_finite())
      throw TrainingError("non-finite gradient in tensor " + (i < names.size() ? names[i] : std::to_string(i)));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i].raw();
    double* v = velocity[i].raw();
    const double* g = grads[i].raw();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      v[j] = momentum * v[j] - lr * (g[j] + weight_decay * p[j]);
      p[j] += v[j];
    }
  }
}

struct TrainExample {
  Tensor input;  // [C, H, W]
  AttributeLabel labels;
  double score = 1.0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t stage = 0;  // 0-based curriculum stage
  std::size_t examples = 0;
  double learning_rate = 0;
  /// Mean over examples of the summed per-attribute log-loss.
  double mean_loss = 0;
  std::vector<std::optional<double>> validation_ap;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> warnings;
  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

struct TrainResult {
  Network net;
  TrainHistory history;
};

/// Per-example attribute probabilities, batched.
inline std::vector<std::vector<double>> predict(const Network& net, const std::vector<TrainExample>& examples,
                                                std::size_t batch_size = 64) {
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, examples.size() - start);
    std::vector<Tensor> items;
    for (std::size_t i = 0; i < n; ++i) items.push_back(examples[start + i].input);
    const auto fr = forward(net, stack(items));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> row(net.attribute_count());
      for (std::size_t a = 0; a < row.size(); ++a) row[a] = fr.probabilities.at(i, a);
      out.push_back(std::move(row));
    }
  }
  return out;
}

inline std::vector<double> channel_means(const std::vector<TrainExample>& examples, const std::vector<std::size_t>& index,
                                         std::size_t channels) {
  std::vector<double> mean(channels, 0.0);
  std::size_t count = 0;
  for (std::size_t i : index) {
    const Tensor& x = examples[i].input;
    const std::size_t plane = x.size() / channels;
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < plane; ++j) s += x[c * plane + j];
      mean[c] += s;
    }
    count += plane;
  }
  if (count)
    for (auto& m : mean) m /= static_cast<double>(count);
  return mean;
}

/// Trains `net` in place through the curriculum. Deterministic for a given cfg.seed.
inline TrainResult train(Network net, const std::vector<TrainExample>& examples, const TrainConfig& cfg,
                         const std::vector<TrainExample>& validation = {}) {
  cfg.validate();
  const auto& spec = net.spec;
  const Shape input_shape{spec.channels, spec.height, spec.width};
  bool any_known = false;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].input.shape() != input_shape)
      throw InvalidArgument("train: example " + std::to_string(i) + " has shape " + shape_string(examples[i].input.shape()) +
                            ", net expects " + shape_string(input_shape));
    if (examples[i].labels.size() != net.attribute_count())
      throw InvalidArgument("train: example " + std::to_string(i) + " has the wrong number of labels");
    any_known = any_known || std::any_of(examples[i].labels.begin(), examples[i].labels.end(),
                                         [](Label l) { return l != Label::unknown; });
  }
  if (!any_known) throw InvalidArgument("train: no known label in the training set");

  std::vector<double> scores;
  for (const auto& e : examples) scores.push_back(e.score);
  const auto thresholds =
      cfg.curriculum_thresholds.empty() ? quantile_thresholds(scores, cfg.curriculum_quantiles) : cfg.curriculum_thresholds;
  auto curriculum = curriculum_partition(scores, thresholds);

  TrainResult result;
  result.history.warnings = curriculum.warnings;
  std::size_t first_stage = 0;
  while (first_stage < curriculum.stages.size() && curriculum.stages[first_stage].empty()) ++first_stage;
  if (first_stage == curriculum.stages.size()) throw ConfigError("train: every curriculum stage is empty");

  net.input_mean = channel_means(examples, curriculum.stages[first_stage], spec.channels);

  std::vector<Tensor> velocity;
  for (const auto& p : net.params) velocity.emplace_back(p.shape());
  Rng rng(cfg.seed);
  double lr = cfg.learning_rate;
  std::string last_checkpoint;
  std::vector<AttributeLabel> val_labels;
  for (const auto& v : validation) val_labels.push_back(v.labels);

  for (std::size_t s = first_stage; s < curriculum.stages.size(); ++s) {
    if (s > first_stage) lr *= cfg.lr_stage_decay;
    std::vector<std::size_t> order = curriculum.stages[s];
    const std::size_t epochs = cfg.stage_epochs[std::min(s, cfg.stage_epochs.size() - 1)];
    for (std::size_t e = 0; e < epochs; ++e) {
      rng.shuffle(order.begin(), order.end());
      double loss_sum = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t n = std::min(cfg.batch_size, order.size() - start);
        std::vector<Tensor> items;
        std::vector<AttributeLabel> labels;
        for (std::size_t i = 0; i < n; ++i) {
          const auto& ex = examples[order[start + i]];
          items.push_back(augment(ex.input, cfg, rng));
          labels.push_back(ex.labels);
        }
        auto lg = loss_and_grad(net, stack(items), labels);
        if (!std::isfinite(lg.loss))
          throw TrainingError("training diverged: non-finite loss in epoch " + std::to_string(net.epoch + 1),
                              net.epoch == 0 ? -1 : static_cast<long>(net.epoch), last_checkpoint);
        if (lg.all_unknown) continue;
        loss_sum += lg.loss;
        const double inv = 1.0 / static_cast<double>(n);
        for (auto& g : lg.grads)
          for (auto& v : g.values()) v *= inv;
        try {
          sgd_step(net.params, lg.grads, velocity, lr, cfg.momentum, cfg.weight_decay, net.param_names);
        } catch (const TrainingError& err) {
          throw TrainingError(std::string(err.what()) + " in epoch " + std::to_string(net.epoch + 1),
                              net.epoch == 0 ? -1 : static_cast<long>(net.epoch), last_checkpoint);
        }
      }
      ++net.epoch;
      EpochRecord rec;
      rec.epoch = net.epoch;
      rec.stage = s;
      rec.examples = order.size();
      rec.learning_rate = lr;
      rec.mean_loss = loss_sum / static_cast<double>(order.size());
      if (!validation.empty()) {
        const auto res = evaluate_scores(predict(net, validation), val_labels, spec.attributes);
        for (const auto& c : res.attributes) rec.validation_ap.push_back(c.ap);
      }
      result.history.epochs.push_back(std::move(rec));
      if (!cfg.checkpoint_dir.empty()) {
        std::filesystem::create_directories(cfg.checkpoint_dir);
        const auto path = std::filesystem::path(cfg.checkpoint_dir) /
                          (cfg.checkpoint_name + "-epoch" + std::to_string(net.epoch) + ".model");
        save_network(net, path);
        last_checkpoint = path.string();
      }
      lr *= cfg.lr_epoch_decay;
    }
  }
  result.net = std::move(net);
  return result;
}

}  // namespace panda
