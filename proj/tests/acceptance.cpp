// Acceptance runner: one PASS/FAIL line per criterion, exit status 0 iff all pass.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "panda/gradient_check.hpp"
#include "panda/pipeline.hpp"
#include "svm_oracle.hpp"
#include "test_util.hpp"

using namespace panda;
using panda::test::random_tensor;
using panda::test::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  bool ok() const { return failed_ == 0; }
  std::string failures() const {
    std::string s;
    for (const auto& f : failures_) s += (s.empty() ? "" : "; ") + f;
    if (failed_ > failures_.size()) s += "; ... " + std::to_string(failed_) + " failures";
    return s;
  }

 private:
  std::vector<std::string> failures_;
  std::size_t failed_ = 0;
};

std::string fmt(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

// ---- 1: gradients ---------------------------------------------------------

Outcome gradients() {
  Checker c;
  double worst_layer = 0, worst_net = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto layer = [&](const std::string& name, const LayerClosure& l, const Tensor& x, const std::vector<Tensor>& p,
                     double eps) {
      const double e = gradient_check(l, x, p, eps, {0, seed});
      worst_layer = std::max(worst_layer, e);
      c.expect(e < 1e-4, name + " seed " + std::to_string(seed) + " error " + fmt(e));
    };
    const std::uint64_t s = 1000 * seed;
    for (std::size_t stride = 1; stride <= 2; ++stride)
      for (std::size_t pad = 0; pad <= 2; ++pad)
        layer("conv" + std::to_string(stride) + std::to_string(pad), conv2d_closure(stride, pad),
              random_tensor({2, 7, 6}, s + 1), {random_tensor({3, 2, 3, 3}, s + 2), random_tensor({3}, s + 3)}, 1e-5);
    layer("fc", fully_connected_closure(), random_tensor({7}, s + 4),
          {random_tensor({5, 7}, s + 5), random_tensor({5}, s + 6)}, 1e-5);
    layer("maxpool2", maxpool_closure(2, 2), random_tensor({3, 6, 6}, s + 7), {}, 1e-6);
    layer("maxpool3", maxpool_closure(3, 2), random_tensor({2, 7, 7}, s + 8), {}, 1e-6);
    layer("lrn", lrn_closure({5, 2.0, 0.1, 0.75}), random_tensor({7, 3, 3}, s + 9), {}, 1e-5);
    layer("lrn-even", lrn_closure({4, 1.0, 0.5, 0.6}), random_tensor({6, 2, 3}, s + 10), {}, 1e-5);
    layer("rectifier", nonlinearity_closure(Activation::rectifier), random_tensor({40}, s + 11), {}, 1e-5);
    layer("logistic", nonlinearity_closure(Activation::logistic), random_tensor({40}, s + 12, -4, 4), {}, 1e-5);

    // Composite: the tiny part net with its masked multi-attribute loss.
    NetworkSpec spec = PipelineConfig::tiny().part_net;
    spec.attributes = {"attr1", "attr2"};
    Network net = build_network(spec, 50 + seed);
    net.input_mean = {0.4, 0.5, 0.6};
    for (std::size_t i = 1; i < net.params.size(); i += 2)
      net.params[i] = random_tensor(net.params[i].shape(), s + 20 + i, -0.2, 0.2);
    const Tensor x = random_tensor({3, spec.channels, spec.height, spec.width}, s + 13, 0, 1);
    const std::vector<AttributeLabel> y{{Label::positive, Label::negative},
                                        {Label::negative, Label::unknown},
                                        {Label::positive, Label::positive}};
    const auto lg = loss_and_grad(net, x, y);
    auto objective = [&](const std::vector<Tensor>& p) {
      Network n = net;
      n.params = p;
      return loss_and_grad(n, x, y).loss;
    };
    const auto r = check_scalar_gradient(objective, net.params, lg.grads, 1e-5, {}, net.param_names);
    worst_net = std::max(worst_net, r.max_relative_error);
    c.expect(r.max_relative_error < 1e-3, "tiny net seed " + std::to_string(seed) + " error " +
                                              fmt(r.max_relative_error) + " at " + r.worst);
  }
  return {c.ok(), "worst layer error " + fmt(worst_layer) + ", worst tiny-net error " + fmt(worst_net) +
                      (c.ok() ? "" : " | " + c.failures())};
}

// ---- 2: convolution oracle ------------------------------------------------

Tensor naive_conv(const Tensor& in, const Tensor& k, const Tensor& b, int stride, int pad) {
  const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int F = k.dim(0), KH = k.dim(2), KW = k.dim(3);
  const int OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  std::vector<double> out(F * OH * OW);
  for (int f = 0; f < F; ++f)
    for (int y = 0; y < OH; ++y)
      for (int x = 0; x < OW; ++x) {
        double s = b[f];
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < KH; ++i)
            for (int j = 0; j < KW; ++j) {
              const int yy = y * stride + i - pad, xx = x * stride + j - pad;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              s += in[(c * H + yy) * W + xx] * k[((f * C + c) * KH + i) * KW + j];
            }
        out[(f * OH + y) * OW + x] = s;
      }
  return Tensor({static_cast<std::size_t>(F), static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)}, out);
}

Outcome conv_oracle() {
  Checker c;
  double worst = 0;
  std::size_t shapes = 0;
  std::uint64_t seed = 1;
  for (int stride = 1; stride <= 2; ++stride)
    for (int pad = 0; pad <= 2; ++pad)
      for (std::size_t ksz : {1u, 3u, 5u})
        for (std::size_t ch : {1u, 3u})
          for (std::size_t h : {5u, 8u, 13u}) {
            if (h + 2 * pad < ksz) continue;
            const auto in = random_tensor({ch, h, h + 3}, seed++);
            const auto k = random_tensor({4, ch, ksz, ksz}, seed++);
            const auto b = random_tensor({4}, seed++);
            const auto expected = naive_conv(in, k, b, stride, pad);
            for (const Tensor& got : {conv2d(in, k, b, stride, pad), conv2d_direct(in, k, b, stride, pad)}) {
              const bool same_shape = got.shape() == expected.shape();
              const double e = same_shape ? test::max_relative_diff(got, expected) : INFINITY;
              worst = std::max(worst, e);
              c.expect(e < 1e-6, "stride " + std::to_string(stride) + " pad " + std::to_string(pad) + " kernel " +
                                     std::to_string(ksz) + " error " + fmt(e));
            }
            ++shapes;
          }
  // The full-size first stage of the part net.
  const auto in = random_tensor({3, 64, 64}, 900, 0, 1);
  const auto k = random_tensor({32, 3, 5, 5}, 901);
  const auto b = random_tensor({32}, 902);
  const double e = test::max_relative_diff(conv2d(in, k, b, 1, 2), naive_conv(in, k, b, 1, 2));
  worst = std::max(worst, e);
  c.expect(e < 1e-6, "64x64 stage error " + fmt(e));
  return {c.ok(), std::to_string(shapes + 1) + " shapes, worst relative error " + fmt(worst) +
                      (c.ok() ? "" : " | " + c.failures())};
}

// ---- 3: AP oracle ---------------------------------------------------------

double enumerate_ap(const std::vector<bool>& ranked) {
  double sum = 0;
  int hits = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r)
    if (ranked[r]) sum += static_cast<double>(++hits) / static_cast<double>(r + 1);
  return sum / hits;
}

Outcome ap_oracle() {
  Checker c;
  const double t = 1.0 / 3.0;
  const std::vector<std::pair<std::vector<bool>, double>> cases = {
      {{true, false, true}, 0.8333333333333333},
      {{true}, 1.0},
      {{false, true}, 0.5},
      {{false, false, true}, t},
      {{false, true, true}, (0.5 + 2.0 / 3) / 2},
      {{true, true, false}, 1.0},
      {{false, true, false, true}, 0.5},
      {{true, false, false, true}, 0.75},
      {{false, false, true, true}, (t + 0.5) / 2},
      {{true, false, true, false, true}, (1 + 2.0 / 3 + 0.6) / 3},
      {{false, true, false, true, false, true}, 0.5},
      {{false, false, false, false, true}, 0.2},
      {{true, true, true, true, true}, 1.0},
      {{false, true, true, true}, (0.5 + 2.0 / 3 + 0.75) / 3},
      {{true, false, false, false, false, false, false, false, false, true}, 0.6},
      {{false, false, true, false, true}, (t + 0.4) / 2},
      {{true, true, false, false, true, true}, (1 + 1 + 0.6 + 4.0 / 6) / 4},
      {{false, true, true, false, false, true}, (0.5 + 2.0 / 3 + 0.5) / 3},
      {{true, false, true, false, true, false, true}, (1 + 2.0 / 3 + 0.6 + 4.0 / 7) / 4},
      {{false, false, false, true, true, true}, (0.25 + 0.4 + 0.5) / 3},
      {{true, false, false, true, false, false, true}, (1 + 0.5 + 3.0 / 7) / 3},
      {{false, true, false, false, false, false, false, false, false, false}, 0.5},
  };
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& [ranked, expected] = cases[i];
    std::vector<double> scores(ranked.size());
    for (std::size_t r = 0; r < ranked.size(); ++r) scores[r] = static_cast<double>(ranked.size() - r);
    const auto ap = average_precision(scores, ranked);
    c.expect(ap && std::abs(*ap - expected) <= 1e-12 && std::abs(*ap - enumerate_ap(ranked)) <= 1e-12,
             "ranking " + std::to_string(i) + " gave " + (ap ? fmt(*ap, 17) : "absent"));
  }
  Rng rng(3);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.index(40);
    std::vector<double> s(n), t1(n), t2(n), t3(n);
    std::vector<bool> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform(-3, 3);
      l[i] = rng.bernoulli(0.5);
      t1[i] = std::exp(s[i]);
      t2[i] = 7 * s[i] * s[i] * s[i] - 2;
      t3[i] = 1.0 / (1.0 + std::exp(-s[i]));
    }
    l[rng.index(n)] = true;
    const double base = *average_precision(s, l);
    for (const auto* v : {&t1, &t2, &t3}) {
      const double d = std::abs(*average_precision(*v, l) - base);
      worst = std::max(worst, d);
      c.expect(d <= 1e-12, "monotone trial " + std::to_string(trial) + " moved AP by " + fmt(d));
    }
  }
  return {c.ok(), std::to_string(cases.size()) + " hand rankings exact, 100 monotone instances, max AP change " +
                      fmt(worst) + (c.ok() ? "" : " | " + c.failures())};
}

// ---- 4: SVM oracle --------------------------------------------------------

Outcome svm_oracle() {
  Checker c;
  Rng rng(5);
  double worst = 0;
  for (int inst = 0; inst < 25; ++inst) {
    const std::size_t n = 10 + rng.index(21);
    std::vector<std::vector<double>> X(n, std::vector<double>(3));
    std::vector<double> y;
    std::vector<AttributeLabel> labels;
    const double sep = inst % 3 == 0 ? 1.4 : 0.7;
    for (std::size_t i = 0; i < n; ++i) {
      y.push_back(i % 2 ? 1.0 : -1.0);
      for (auto& v : X[i]) v = rng.normal() + (y[i] > 0 ? sep : -sep);
      labels.push_back({y[i] > 0 ? Label::positive : Label::negative});
    }
    const double C = std::pow(10.0, rng.uniform(-1, 1));
    const auto oracle = test::svm_oracle(X, y, C);
    SvmOptions opt;
    opt.C = C;
    opt.epochs = 2000;
    const auto trained = train_svm(X, labels, {"a"}, 0, opt);
    const auto& a = trained.model.attributes[0];
    const double recomputed = test::oracle_primal(X, y, C, a.weights, a.bias);
    const double gap = (a.objective - oracle.primal) / oracle.primal;
    worst = std::max(worst, gap);
    c.expect(gap <= 0.01, "instance " + std::to_string(inst) + " gap " + fmt(gap));
    c.expect(std::abs(recomputed - a.objective) <= 1e-9 * a.objective,
             "instance " + std::to_string(inst) + " reported objective differs from its weights");
    c.expect(std::abs(oracle.primal - oracle.dual) <= 1e-6 * oracle.primal,
             "oracle not converged on instance " + std::to_string(inst));
  }
  return {c.ok(), "25 instances, worst objective gap " + fmt(100 * worst) + "%" + (c.ok() ? "" : " | " + c.failures())};
}

// ---- 5, 6: desk-scale ordering --------------------------------------------

std::optional<double> point(const SweepResult& r, std::size_t size, Method m) {
  for (const auto& p : r.points)
    if (p.size == size && p.method == m) return p.median_mean_ap;
  return std::nullopt;
}

Outcome desk_gap() {
  const auto cfg = PipelineConfig::desk();
  const std::size_t n = cfg.synth.train_size;
  const auto r = training_size_sweep(cfg, {n}, {Method::panda, Method::holistic}, {1, 2, 3, 4, 5});
  if (r.failed()) return {false, "a seed failed to train"};
  std::vector<double> gaps;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    double p = 0, h = 0;
    for (const auto& cell : r.cells)
      if (cell.seed == seed) (cell.method == Method::panda ? p : h) = *cell.mean_ap;
    gaps.push_back(p - h);
    per_seed += (per_seed.empty() ? "" : " ") + fmt(p, 3) + "/" + fmt(h, 3);
  }
  const double gap = *median(gaps);
  const double p = *point(r, n, Method::panda), h = *point(r, n, Method::holistic);
  const bool ok = gap >= 0.05 && p - h >= 0.05;
  return {ok, "K=" + std::to_string(cfg.synth.parts) + " A=" + std::to_string(cfg.synth.attributes) + " train " +
                  std::to_string(n) + " test " + std::to_string(cfg.synth.test_size) + "; median PANDA " + fmt(p) +
                  " vs holistic " + fmt(h) + ", median gap " + fmt(gap) + " (panda/holistic per seed: " + per_seed +
                  ")"};
}

Outcome size_sweep() {
  const auto cfg = PipelineConfig::desk();
  const std::vector<std::size_t> sizes{200, 400, 800};
  const auto r = training_size_sweep(cfg, sizes, {Method::panda, Method::holistic}, {1, 2, 3});
  if (r.failed()) return {false, "a sweep cell failed"};
  Checker c;
  std::string line;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const double p = *point(r, sizes[i], Method::panda), h = *point(r, sizes[i], Method::holistic);
    line += (line.empty() ? "" : ", ") + std::to_string(sizes[i]) + ": " + fmt(p, 3) + "/" + fmt(h, 3);
    c.expect(p >= h, "PANDA below holistic at size " + std::to_string(sizes[i]));
    if (i) {
      c.expect(p >= *point(r, sizes[i - 1], Method::panda), "PANDA decreases at size " + std::to_string(sizes[i]));
      c.expect(h >= *point(r, sizes[i - 1], Method::holistic), "holistic decreases at size " + std::to_string(sizes[i]));
    }
  }
  return {c.ok(), "median mean AP panda/holistic " + line + (c.ok() ? "" : " | " + c.failures())};
}

// ---- 7: zero-fill ---------------------------------------------------------

bool bit_zero(const double* p, std::size_t n) {
  static const double zero = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (std::memcmp(p + i, &zero, sizeof(double)) != 0) return false;
  return true;
}

struct TinyWorld {
  PipelineConfig cfg = PipelineConfig::tiny();
  Dataset data;
  std::map<int, Network> nets;
  Network holistic;
};

TinyWorld tiny_world(std::uint64_t seed) {
  TinyWorld w;
  w.cfg.synth.seed = seed;
  w.cfg.synth.visibility = {0.5, 0.5, 0.5};
  w.data = synth_dataset(w.cfg.synth, SynthSplit::train);
  NetworkSpec ps = w.cfg.part_net, hs = w.cfg.holistic_net;
  ps.attributes = hs.attributes = w.data.attributes;
  for (int k = 1; k <= static_cast<int>(w.data.parts); ++k) {
    Network n = build_network(ps, derive_seed(seed, static_cast<std::uint64_t>(k)));
    n.input_mean = {0.3, 0.4, 0.5};
    w.nets.emplace(k, std::move(n));
  }
  w.holistic = build_network(hs, derive_seed(seed, 99));
  return w;
}

Outcome zero_fill() {
  Checker c;
  std::size_t persons = 0, absent = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed)
    for (bool l2 : {false, true}) {
      const auto w = tiny_world(seed);
      const auto layout = part_layout(w.data, w.cfg, true);
      FeatureLayout l = layout;
      l.l2_normalize = l2;
      const auto fs = extract_features(w.nets, &w.holistic, w.data, l, 2);
      std::vector<double> y;
      for (const auto& lab : fs.labels) y.push_back(lab[0] == Label::positive ? 1 : -1);
      const auto model = train_svm(fs.values, fs.labels, fs.attributes, l.hash(), w.cfg.svm).model;
      SvmModel poisoned = model;
      for (std::size_t i = 0; i < fs.size(); ++i) {
        const auto acts = PartActivationSet::from_person(w.data.persons[i], w.data.parts);
        ++persons;
        std::vector<double> present_shift = fs.values[i];
        for (std::size_t k = 0; k < l.parts; ++k) {
          const double* slot = fs.values[i].data() + k * l.trunk_width;
          if (acts.parts[k]) {
            c.expect(!bit_zero(slot, l.trunk_width), "present part " + std::to_string(k + 1) + " is all zero");
            for (std::size_t j = 0; j < l.trunk_width; ++j) present_shift[k * l.trunk_width + j] += 1.0;
            continue;
          }
          ++absent;
          c.expect(bit_zero(slot, l.trunk_width), fs.ids[i] + " part " + std::to_string(k + 1) + " not bit-zero");
        }
        // Arbitrary weights on absent slots leave the person's scores untouched.
        poisoned = model;
        for (auto& a : poisoned.attributes)
          for (std::size_t k = 0; k < l.parts; ++k)
            if (!acts.parts[k])
              for (std::size_t j = 0; j < l.trunk_width; ++j) a.weights[k * l.trunk_width + j] += 1e6 * (j % 3 + 1.0);
        const auto base = svm_score(model, fs.values[i], l.hash());
        c.expect(svm_score(poisoned, fs.values[i], l.hash()) == base, fs.ids[i] + " score moved by absent weights");
        bool any_present = false;
        for (const auto& a : acts.parts) any_present = any_present || a.has_value();
        if (any_present) {
          bool moved = false;
          const auto shifted = svm_score(model, present_shift, l.hash());
          for (std::size_t a = 0; a < base.size(); ++a)
            moved = moved || (model.attributes[a].trained && shifted[a] != base[a]);
          c.expect(moved, fs.ids[i] + " score ignores present slots");
        }
      }
    }
  c.expect(absent > 0, "no absent parts were generated");
  return {c.ok(), std::to_string(persons) + " persons, " + std::to_string(absent) + " absent part slots bit-zero" +
                      (c.ok() ? "" : " | " + c.failures())};
}

// ---- 8: determinism -------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" PANDA_CLI_PATH "' " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string tiny_pipeline(const fs::path& dir) {
  const std::string j = " --preset tiny --jobs 1";
  const std::vector<std::string> steps = {
      "synth --seed 11 --out data",
      "train-parts --manifest data/train.manifest --val-manifest data/val.manifest --out nets",
      "train-holistic --manifest data/train.manifest --out nets",
      "extract --manifest data/train.manifest --nets-dir nets --out train.features",
      "extract --manifest data/val.manifest --nets-dir nets --out val.features",
      "extract --manifest data/test.manifest --nets-dir nets --out test.features",
      "extract --method holistic --manifest data/train.manifest --nets-dir nets --out train-h.features",
      "extract --method holistic --manifest data/test.manifest --nets-dir nets --out test-h.features",
      "fuse-train --features train.features --val-features val.features --out svm.model",
      "fuse-train --features train-h.features --out svm-h.model",
      "evaluate --features test.features --models svm.model --out results.csv",
      "evaluate --features test-h.features --models svm-h.model --out results-h.csv",
  };
  for (const auto& s : steps)
    if (const int code = cli(dir, s + j); code != 0) return "'" + s + "' exited " + std::to_string(code);
  return {};
}

Outcome determinism() {
  TempDir a("accept_a"), b("accept_b");
  for (const auto* d : {&a, &b})
    if (const auto err = tiny_pipeline(d->path()); !err.empty()) return {false, err};
  Checker c;
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a.path());
    if (rel.string().ends_with(".run.json")) continue;
    ++files;
    c.expect(fs::exists(b.path() / rel) && slurp(e.path()) == slurp(b.path() / rel), rel.string() + " differs");
  }
  for (const char* f : {"nets/part-1.model", "nets/holistic.model", "test.features", "svm.model", "results.csv"})
    c.expect(fs::exists(a.path() / f), std::string(f) + " missing");
  return {c.ok(), std::to_string(files) + " files byte-identical across two runs (models, features, datasets, CSVs)" +
                      (c.ok() ? "" : " | " + c.failures())};
}

// ---- 9: serialization -----------------------------------------------------

template <class Deserialize>
void check_truncation(Checker& c, const std::string& what, const std::vector<char>& bytes, Deserialize deserialize,
                      std::size_t& cuts) {
  const std::size_t step = std::max<std::size_t>(1, bytes.size() / 400);
  for (std::size_t cut = 0; cut < bytes.size(); cut += (cut < 64 ? 1 : step)) {
    ++cuts;
    try {
      deserialize(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)));
      c.expect(false, what + " accepted a " + std::to_string(cut) + "-byte prefix");
    } catch (const FormatError& e) {
      c.expect(e.offset() <= cut && std::string(e.what()).find("at byte") != std::string::npos,
               what + " bad error at cut " + std::to_string(cut) + ": " + e.what());
    } catch (const std::exception& e) {
      c.expect(false, what + " wrong error type at cut " + std::to_string(cut) + ": " + e.what());
    }
  }
  auto extra = bytes;
  extra.push_back('\0');
  try {
    deserialize(extra);
    c.expect(false, what + " accepted a trailing byte");
  } catch (const FormatError&) {
  }
  auto version = bytes;
  version[8] = 7;
  try {
    deserialize(version);
    c.expect(false, what + " accepted version 7");
  } catch (const VersionError&) {
  }
  auto magic = bytes;
  magic[0] = 'Q';
  try {
    deserialize(magic);
    c.expect(false, what + " accepted a bad magic");
  } catch (const VersionError&) {
    c.expect(false, what + " reported bad magic as a version error");
  } catch (const FormatError&) {
  }
}

Outcome serialization() {
  Checker c;
  TempDir dir("accept_io");
  auto w = tiny_world(4);
  Network net = w.nets.at(1);
  net.epoch = 5;
  const auto layout = part_layout(w.data, w.cfg, true);
  const auto fs = extract_features(w.nets, &w.holistic, w.data, layout);
  const auto model = train_svm(fs.values, fs.labels, fs.attributes, layout.hash(), w.cfg.svm).model;

  save_network(net, dir.path() / "m.model");
  save_features(fs, dir.path() / "f.features");
  save_svm(model, dir.path() / "s.svm");
  const auto net2 = load_network(dir.path() / "m.model");
  const auto fs2 = load_features(dir.path() / "f.features");
  const auto model2 = load_svm(dir.path() / "s.svm");
  c.expect(net2 == net && serialize_network(net2) == serialize_network(net), "model round trip");
  c.expect(fs2 == fs && serialize_features(fs2) == serialize_features(fs), "feature round trip");
  c.expect(model2 == model && serialize_svm(model2) == serialize_svm(model), "SVM round trip");
  c.expect(io::read_file(dir.path() / "m.model") == serialize_network(net), "model file bytes");
  c.expect(std::memcmp(fs2.values[3].data(), fs.values[3].data(), fs.values[3].size() * sizeof(double)) == 0,
           "feature values bit-exact");

  std::size_t cuts = 0;
  check_truncation(c, "model", serialize_network(net), [](std::vector<char> b) { deserialize_network(std::move(b)); }, cuts);
  check_truncation(c, "features", serialize_features(fs), [](std::vector<char> b) { deserialize_features(std::move(b)); }, cuts);
  check_truncation(c, "svm", serialize_svm(model), [](std::vector<char> b) { deserialize_svm(std::move(b)); }, cuts);
  return {c.ok(), "3 formats round-trip bit-exactly; " + std::to_string(cuts) +
                      " truncations rejected with FormatError offsets" + (c.ok() ? "" : " | " + c.failures())};
}

struct Criterion {
  int id;
  std::string name;
  double limit_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "gradient correctness", 60, gradients},
      {2, "convolution oracle", 60, conv_oracle},
      {3, "average precision oracle", 60, ap_oracle},
      {4, "SVM oracle", 60, svm_oracle},
      {5, "PANDA beats holistic at desk scale", 20 * 60, desk_gap},
      {6, "training-size sweep ordering", 45 * 60, size_sweep},
      {7, "zero-fill contract", 60, zero_fill},
      {8, "tiny pipeline determinism", 120, determinism},
      {9, "serialization round trip and truncation", 60, serialization},
  };
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& cr : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), cr.id) == wanted.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = cr.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > cr.limit_seconds) {
      o.pass = false;
      o.detail += "; over the " + fmt(cr.limit_seconds) + " s budget";
    }
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", cr.id, cr.name.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
