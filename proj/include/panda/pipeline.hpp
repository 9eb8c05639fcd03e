#pragma once

// End-to-end wiring: part nets and the holistic net are trained on a dataset,
// their trunk taps become FeatureSets, and per-attribute SVMs are trained on
// those features. "panda" uses parts + holistic features; "holistic" (the
// baseline) uses the holistic tap alone with the same SVM.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "panda/error.hpp"
#include "panda/eval.hpp"
#include "panda/features.hpp"
#include "panda/kv_config.hpp"
#include "panda/manifest.hpp"
#include "panda/net.hpp"
#include "panda/parallel.hpp"
#include "panda/svm.hpp"
#include "panda/synth.hpp"
#include "panda/trainer.hpp"

namespace panda {

struct PipelineConfig {
  SynthConfig synth;
  NetworkSpec part_net = NetworkSpec::part_default({"attr"});
  TrainConfig part_train;
  NetworkSpec holistic_net = NetworkSpec::holistic_default({"attr"});
  TrainConfig holistic_train;
  SvmOptions svm;
  /// When nonempty, C is chosen from this grid by validation mean AP.
  std::vector<double> svm_c_grid;
  bool l2_normalize = false;

  /// Narrow nets and short schedules that run the default synthetic family on
  /// one CPU core in a few minutes per seed.
  static PipelineConfig desk() {
    PipelineConfig c;
    c.part_net.conv_stages = {{8, 5, 1, 2, 2, 2, true},
                              {16, 5, 1, 2, 2, 2, true},
                              {32, 3, 1, 1, 2, 2, false},
                              {32, 3, 1, 1, 2, 2, false}};
    c.holistic_net.conv_stages = {{8, 5, 1, 2, 2, 2, true}, {16, 5, 1, 2, 2, 2, true}};
    for (TrainConfig* t : {&c.part_train, &c.holistic_train}) {
      t->stage_epochs = {2, 2};
      t->batch_size = 16;
    }
    return c;
  }

  /// Seconds-scale smoke configuration: two parts, 16 px patches, one-stage nets.
  static PipelineConfig tiny() {
    PipelineConfig c;
    c.synth.parts = 2;
    c.synth.attributes = 2;
    c.synth.patch_size = 16;
    c.synth.train_size = 40;
    c.synth.val_size = 16;
    c.synth.test_size = 24;
    c.part_net.height = c.part_net.width = 16;
    c.part_net.conv_stages = {{4, 3, 1, 1, 2, 2, true}};
    c.part_net.trunk_fc_units = 8;
    c.part_net.head_hidden_units = 4;
    c.holistic_net.height = c.holistic_net.width = 16;
    c.holistic_net.conv_stages = {{4, 3, 1, 1, 2, 2, false}};
    c.holistic_net.trunk_fc_units = 8;
    c.holistic_net.head_hidden_units = 4;
    for (TrainConfig* t : {&c.part_train, &c.holistic_train}) {
      t->stage_epochs = {1, 1};
      t->batch_size = 8;
      t->jitter_translation = 1;
    }
    c.svm.epochs = 50;
    return c;
  }

  /// Every key with its current value. Network attribute lists are not
  /// configurable: they always come from the dataset.
  KvConfig to_kv() const {
    KvConfig cfg;
    synth.to_kv(cfg, "synth.");
    KvConfig nets;
    part_net.to_kv(nets, "part_net.");
    holistic_net.to_kv(nets, "holistic_net.");
    for (const auto& [k, v] : nets.entries())
      if (k != "part_net.attributes" && k != "holistic_net.attributes") cfg.set(k, v);
    part_train.to_kv(cfg, "part_train.");
    holistic_train.to_kv(cfg, "holistic_train.");
    svm.to_kv(cfg, "svm.");
    cfg.set("svm.c_grid", kv_value(svm_c_grid));
    cfg.set("features.l2_normalize", kv_value(l2_normalize));
    return cfg;
  }

  /// Applies `cfg`; unknown keys are an error.
  void apply(const KvConfig& cfg) {
    for (const char* key : {"part_net.attributes", "holistic_net.attributes"})
      if (cfg.has(key)) throw ConfigError(std::string(key) + " is not configurable (attributes come from the dataset)");
    synth.apply(cfg, "synth.");
    part_net.apply(cfg, "part_net.");
    holistic_net.apply(cfg, "holistic_net.");
    part_train.apply(cfg, "part_train.");
    holistic_train.apply(cfg, "holistic_train.");
    svm.apply(cfg, "svm.");
    cfg.read("svm.c_grid", svm_c_grid);
    cfg.read("features.l2_normalize", l2_normalize);
    if (auto unused = cfg.unused_keys(); !unused.empty()) {
      std::string msg = "unknown configuration key(s):";
      for (const auto& k : unused) msg += " " + k;
      throw ConfigError(msg);
    }
  }

  void validate() const {
    synth.validate();
    part_train.validate();
    holistic_train.validate();
    svm.validate();
    for (double c : svm_c_grid)
      if (!(c > 0)) throw ConfigError("svm.c_grid entries must be positive");
    if (part_net.channels != 3) throw ConfigError("part_net input must have 3 channels");
    if (holistic_net.channels != 12) throw ConfigError("holistic_net input must have 12 channels");
    if (holistic_net.height != holistic_net.width) throw ConfigError("holistic_net input must be square");
  }

  NetworkSpec part_spec(const std::vector<std::string>& attributes) const {
    NetworkSpec s = part_net;
    s.attributes = attributes;
    s.validate();
    return s;
  }
  NetworkSpec holistic_spec(const std::vector<std::string>& attributes) const {
    NetworkSpec s = holistic_net;
    s.attributes = attributes;
    s.validate();
    return s;
  }
};

/// One example per person that has an activation of `part_id` (its best one).
inline std::vector<TrainExample> part_examples(const Dataset& d, int part_id) {
  std::vector<TrainExample> out;
  for (const auto& p : d.persons) {
    const PartObservation* best = nullptr;
    for (const auto& obs : p.parts)
      if (obs.part_id == part_id && (!best || obs.score > best->score)) best = &obs;
    if (best) out.push_back({best->patch, p.labels, best->score});
  }
  return out;
}

inline std::vector<TrainExample> holistic_examples(const Dataset& d, std::size_t size) {
  std::vector<TrainExample> out;
  for (const auto& p : d.persons) out.push_back({holistic_input(p.image, p.box, size), p.labels, 1.0});
  return out;
}

inline bool has_known_label(const std::vector<TrainExample>& ex) {
  for (const auto& e : ex)
    for (auto l : e.labels)
      if (l != Label::unknown) return true;
  return false;
}

struct PartNets {
  std::map<int, Network> nets;
  std::map<int, TrainHistory> histories;
  std::vector<std::string> warnings;
};

/// Trains one net per part id. Each part's init and SGD seeds derive from
/// (cfg.part_train.seed, part id), so results do not depend on training order or `jobs`.
inline PartNets train_part_nets(const Dataset& train, const PipelineConfig& cfg, const Dataset* val = nullptr,
                                std::size_t jobs = 1) {
  const NetworkSpec spec = cfg.part_spec(train.attributes);
  const std::size_t K = train.parts;
  std::vector<std::optional<TrainResult>> results(K);
  std::vector<std::string> warnings(K);
  parallel_for(K, jobs, [&](std::size_t k) {
    const int part = static_cast<int>(k) + 1;
    const auto examples = part_examples(train, part);
    if (!has_known_label(examples)) {
      warnings[k] = "part " + std::to_string(part) + " has no training example with a known label; no net trained";
      return;
    }
    TrainConfig tc = cfg.part_train;
    tc.seed = derive_seed(cfg.part_train.seed, 2 * static_cast<std::uint64_t>(part));
    tc.checkpoint_name = "part-" + std::to_string(part);
    const Network init = build_network(spec, derive_seed(cfg.part_train.seed, 2 * static_cast<std::uint64_t>(part) + 1));
    results[k] = panda::train(init, examples, tc, val ? part_examples(*val, part) : std::vector<TrainExample>{});
  });
  PartNets out;
  for (std::size_t k = 0; k < K; ++k) {
    if (!warnings[k].empty()) out.warnings.push_back(warnings[k]);
    if (!results[k]) continue;
    const int part = static_cast<int>(k) + 1;
    for (const auto& w : results[k]->history.warnings) out.warnings.push_back("part " + std::to_string(part) + ": " + w);
    out.histories[part] = std::move(results[k]->history);
    out.nets.emplace(part, std::move(results[k]->net));
  }
  return out;
}

inline TrainResult train_holistic(const Dataset& train, const PipelineConfig& cfg, const Dataset* val = nullptr) {
  const NetworkSpec spec = cfg.holistic_spec(train.attributes);
  TrainConfig tc = cfg.holistic_train;
  tc.checkpoint_name = "holistic";
  const Network init = build_network(spec, derive_seed(cfg.holistic_train.seed, 1));
  return panda::train(init, holistic_examples(train, spec.height), tc,
                      val ? holistic_examples(*val, spec.height) : std::vector<TrainExample>{});
}

inline FeatureLayout part_layout(const Dataset& d, const PipelineConfig& cfg, bool with_holistic) {
  return {d.parts, cfg.part_net.trunk_fc_units, with_holistic ? cfg.holistic_net.trunk_fc_units : 0, cfg.l2_normalize};
}

inline FeatureLayout holistic_layout(const PipelineConfig& cfg) {
  return {0, cfg.part_net.trunk_fc_units, cfg.holistic_net.trunk_fc_units, cfg.l2_normalize};
}

/// Per-example SVM scores.
inline std::vector<std::vector<double>> svm_scores(const SvmModel& m, const FeatureSet& fs) {
  std::vector<std::vector<double>> out;
  for (const auto& v : fs.values) out.push_back(svm_score(m, v, fs.layout.hash()));
  return out;
}

inline PartitionedAP evaluate(const SvmModel& m, const FeatureSet& fs) {
  std::vector<std::optional<std::string>> tags;
  for (const auto& v : fs.viewpoints) tags.push_back(v ? std::optional<std::string>(to_string(*v)) : std::nullopt);
  return evaluate_partitioned(svm_scores(m, fs), fs.labels, fs.attributes, tags);
}

/// Trains the SVM; with a C grid, picks C by validation mean AP (first best on ties).
inline SvmTrainResult fuse_train(const FeatureSet& train, const PipelineConfig& cfg, const FeatureSet* val = nullptr,
                                 std::size_t jobs = 1) {
  if (cfg.svm_c_grid.empty() || !val)
    return train_svm(train.values, train.labels, train.attributes, train.layout.hash(), cfg.svm, jobs);
  std::optional<SvmTrainResult> best;
  double best_map = -1;
  for (double c : cfg.svm_c_grid) {
    SvmOptions opt = cfg.svm;
    opt.C = c;
    auto r = train_svm(train.values, train.labels, train.attributes, train.layout.hash(), opt, jobs);
    const double map = evaluate(r.model, *val).overall.mean_ap.value_or(0.0);
    if (map > best_map) {
      best_map = map;
      best = std::move(r);
    }
  }
  return std::move(*best);
}

struct ExperimentResult {
  PartitionedAP panda;
  PartitionedAP holistic;
  std::vector<std::string> warnings;
};

enum class Method { holistic, panda };

inline std::string to_string(Method m) { return m == Method::panda ? "panda" : "holistic"; }

inline Method method_from_string(const std::string& s) {
  if (s == "panda") return Method::panda;
  if (s == "holistic") return Method::holistic;
  throw ConfigError("unknown method '" + s + "' (expected panda or holistic)");
}

/// Trains everything on `train` and evaluates the requested methods on `test`.
/// Both methods share the holistic net.
inline ExperimentResult run_experiment(const PipelineConfig& cfg, const Dataset& train, const Dataset& val,
                                       const Dataset& test, const std::vector<Method>& methods, std::size_t jobs = 1) {
  cfg.validate();
  ExperimentResult r;
  const auto holistic = train_holistic(train, cfg, nullptr);
  for (const auto& w : holistic.history.warnings) r.warnings.push_back("holistic: " + w);
  const bool want_panda = std::find(methods.begin(), methods.end(), Method::panda) != methods.end();
  const bool want_holistic = std::find(methods.begin(), methods.end(), Method::holistic) != methods.end();
  auto fit = [&](const FeatureSet& ftr, const FeatureSet& fva, const FeatureSet& fte) {
    auto svm = fuse_train(ftr, cfg, &fva, jobs);
    r.warnings.insert(r.warnings.end(), svm.warnings.begin(), svm.warnings.end());
    return evaluate(svm.model, fte);
  };
  if (want_panda) {
    auto parts = train_part_nets(train, cfg, nullptr, jobs);
    r.warnings.insert(r.warnings.end(), parts.warnings.begin(), parts.warnings.end());
    const auto layout = part_layout(train, cfg, true);
    const auto ftr = extract_features(parts.nets, &holistic.net, train, layout, jobs);
    const auto fva = extract_features(parts.nets, &holistic.net, val, layout, jobs);
    const auto fte = extract_features(parts.nets, &holistic.net, test, layout, jobs);
    r.panda = fit(ftr, fva, fte);
    if (want_holistic) r.holistic = fit(global_features(ftr), global_features(fva), global_features(fte));
  } else if (want_holistic) {
    const auto layout = holistic_layout(cfg);
    r.holistic = fit(extract_features({}, &holistic.net, train, layout, jobs),
                     extract_features({}, &holistic.net, val, layout, jobs),
                     extract_features({}, &holistic.net, test, layout, jobs));
  }
  return r;
}

struct SweepCell {
  std::size_t size = 0;
  Method method = Method::panda;
  std::uint64_t seed = 0;
  std::optional<double> mean_ap;
  /// Set when the cell failed; mean_ap is then absent.
  std::string error;
};

struct SweepPoint {
  std::size_t size = 0;
  Method method = Method::panda;
  std::optional<double> median_mean_ap;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<SweepPoint> points;  // one per (size, method), sizes increasing
  std::vector<std::string> warnings;

  bool failed() const {
    return std::any_of(cells.begin(), cells.end(), [](const SweepCell& c) { return !c.error.empty(); });
  }
};

inline std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace sweep_detail {

inline void check_sizes(const std::vector<std::size_t>& sizes, const std::vector<Method>& methods,
                        const std::vector<std::uint64_t>& seeds, std::size_t available, const std::string& source) {
  if (sizes.empty() || methods.empty() || seeds.empty()) throw ConfigError("sweep needs sizes, methods and seeds");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) throw ConfigError("sweep sizes must be positive");
    if (i && !(sizes[i] > sizes[i - 1])) throw ConfigError("sweep sizes must be strictly increasing");
  }
  if (sizes.back() > available)
    throw ConfigError("sweep size " + std::to_string(sizes.back()) + " exceeds the " + std::to_string(available) +
                      " available training persons (" + source + ")");
}

/// Training seeds of one (seed, size) cell.
inline PipelineConfig cell_config(const PipelineConfig& cfg, std::uint64_t seed, std::size_t size) {
  PipelineConfig c = cfg;
  const std::uint64_t cell = derive_seed(seed, size);
  c.part_train.seed = derive_seed(cfg.part_train.seed, cell);
  c.holistic_train.seed = derive_seed(cfg.holistic_train.seed, cell);
  c.svm.seed = derive_seed(cfg.svm.seed, cell);
  return c;
}

/// Runs every size for one seed; cells run in parallel with one job each.
inline void run_sizes(SweepResult& r, const PipelineConfig& cfg, std::uint64_t seed, const Dataset& full,
                      const Dataset& val, const Dataset& test, const std::vector<std::size_t>& sizes,
                      const std::vector<Method>& methods, std::size_t jobs) {
  std::vector<ExperimentResult> results(sizes.size());
  std::vector<std::string> errors(sizes.size());
  parallel_for(sizes.size(), jobs, [&](std::size_t i) {
    try {
      Dataset train = full;
      train.persons.resize(sizes[i]);
      results[i] = run_experiment(cell_config(cfg, seed, sizes[i]), train, val, test, methods, 1);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    r.warnings.insert(r.warnings.end(), results[i].warnings.begin(), results[i].warnings.end());
    for (Method m : methods) {
      SweepCell cell{sizes[i], m, seed, std::nullopt, errors[i]};
      if (errors[i].empty()) cell.mean_ap = (m == Method::panda ? results[i].panda : results[i].holistic).overall.mean_ap;
      r.cells.push_back(std::move(cell));
    }
  }
}

inline void summarize(SweepResult& r, const std::vector<std::size_t>& sizes, const std::vector<Method>& methods) {
  for (std::size_t size : sizes)
    for (Method m : methods) {
      std::vector<double> v;
      for (const auto& cell : r.cells)
        if (cell.size == size && cell.method == m && cell.mean_ap) v.push_back(*cell.mean_ap);
      r.points.push_back({size, m, median(v)});
    }
}

}  // namespace sweep_detail

/// Generator sweep. For every seed, generates the synthetic family with that
/// seed; every size trains on the first `size` training persons (smaller sets
/// nest in larger ones) and is evaluated on that seed's fixed test split.
/// A failing cell is recorded and the sweep continues.
inline SweepResult training_size_sweep(const PipelineConfig& cfg, const std::vector<std::size_t>& sizes,
                                       const std::vector<Method>& methods, const std::vector<std::uint64_t>& seeds,
                                       std::size_t jobs = 1) {
  cfg.validate();
  sweep_detail::check_sizes(sizes, methods, seeds, cfg.synth.train_size, "synth.train_size");
  SweepResult r;
  for (std::uint64_t seed : seeds) {
    SynthConfig sc = cfg.synth;
    sc.seed = seed;
    const Dataset full = synth_range(sc, SynthSplit::train, 0, sizes.back(), jobs);
    const Dataset val = synth_dataset(sc, SynthSplit::val, jobs);
    const Dataset test = synth_dataset(sc, SynthSplit::test, jobs);
    sweep_detail::run_sizes(r, cfg, seed, full, val, test, sizes, methods, jobs);
  }
  sweep_detail::summarize(r, sizes, methods);
  return r;
}

/// Dataset sweep: the data is fixed and the seeds only vary training.
inline SweepResult training_size_sweep(const PipelineConfig& cfg, const Dataset& train, const Dataset& val,
                                       const Dataset& test, const std::vector<std::size_t>& sizes,
                                       const std::vector<Method>& methods, const std::vector<std::uint64_t>& seeds,
                                       std::size_t jobs = 1) {
  cfg.validate();
  sweep_detail::check_sizes(sizes, methods, seeds, train.persons.size(), "training manifest");
  SweepResult r;
  for (std::uint64_t seed : seeds) sweep_detail::run_sizes(r, cfg, seed, train, val, test, sizes, methods, jobs);
  sweep_detail::summarize(r, sizes, methods);
  return r;
}

/// CSV: size,method,seed,mean_ap,error for every cell, then one
/// size,method,median,<value>, row per point. mean_ap is "absent" for failed cells.
inline std::string sweep_csv(const SweepResult& r) {
  std::string out = "size,method,seed,mean_ap,error\n";
  auto quote = [](std::string s) {
    if (s.empty()) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c == '\n' ? ' ' : c;
    }
    return q + "\"";
  };
  for (const auto& c : r.cells)
    out += std::to_string(c.size) + "," + to_string(c.method) + "," + std::to_string(c.seed) + "," +
           format_ap(c.mean_ap) + "," + quote(c.error) + "\n";
  for (const auto& p : r.points)
    out += std::to_string(p.size) + "," + to_string(p.method) + ",median," + format_ap(p.median_mean_ap) + ",\n";
  return out;
}

}  // namespace panda
