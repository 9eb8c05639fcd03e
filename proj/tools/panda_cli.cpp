// panda: command-line frontend for the part-aligned attribute pipeline.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "panda/features.hpp"
#include "panda/gradient_check.hpp"
#include "panda/pipeline.hpp"

#ifndef PANDA_VERSION
#define PANDA_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace panda;

namespace {

struct Common {
  std::string config;
  std::string preset = "default";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;
  bool print_config = false;
};

struct Options {
  Common common;
  std::string manifest, val_manifest, test_manifest;
  std::string nets_dir;
  std::string features, val_features;
  std::string models;
  std::string method = "panda";
  std::vector<std::size_t> sizes{200, 400, 800};
  std::vector<std::string> methods{"holistic", "panda"};
  std::vector<std::uint64_t> seeds;
  std::string net = "tiny";
  std::size_t coords = 0;
};

class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Run {
  std::string command;
  std::vector<std::string> argv;
  PipelineConfig cfg;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::vector<std::string> inputs;
};

fs::path run_manifest_path(const fs::path& artifact) {
  fs::path p = artifact.lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  p += ".run.json";
  return p;
}

void write_run_manifest(const Run& run, const std::vector<std::string>& outputs, const std::optional<std::uint64_t>& seed) {
  json j;
  j["command"] = run.command;
  j["argv"] = run.argv;
  json config = json::object();
  const KvConfig kv = run.cfg.to_kv();
  for (const auto& [k, v] : kv.entries()) config[k] = v;
  j["config"] = config;
  j["inputs"] = run.inputs;
  j["outputs"] = outputs;
  j["seed"] = seed ? json(*seed) : json(nullptr);
  j["tool_version"] = PANDA_VERSION;
  j["wall_time_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - run.start).count();
  for (const auto& out : outputs) io::write_file_atomic(run_manifest_path(out), std::string_view(j.dump(2) + "\n"));
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

PipelineConfig load_config(const Common& c) {
  PipelineConfig cfg;
  if (c.preset == "tiny")
    cfg = PipelineConfig::tiny();
  else if (c.preset == "desk")
    cfg = PipelineConfig::desk();
  else if (c.preset != "default")
    throw ConfigError("unknown --preset '" + c.preset + "' (expected default, desk or tiny)");
  if (!c.config.empty()) cfg.apply(KvConfig::load(c.config));
  return cfg;
}

std::string history_csv(const TrainHistory& h, const std::vector<std::string>& attributes) {
  std::string out = "epoch,stage,examples,learning_rate,mean_loss";
  for (const auto& a : attributes) out += ",val_ap_" + a;
  out += "\n";
  for (const auto& e : h.epochs) {
    out += std::to_string(e.epoch) + "," + std::to_string(e.stage) + "," + std::to_string(e.examples) + "," +
           detail::format_double(e.learning_rate) + "," + detail::format_double(e.mean_loss);
    for (std::size_t a = 0; a < attributes.size(); ++a)
      out += "," + (a < e.validation_ap.size() ? format_ap(e.validation_ap[a]) : std::string("absent"));
    out += "\n";
  }
  return out;
}

void warn_all(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

Dataset load(const std::string& manifest, std::size_t patch, std::size_t jobs, Run& run) {
  run.inputs.push_back(manifest);
  return load_dataset(fs::path(manifest), patch, jobs);
}

fs::path part_model_path(const fs::path& dir, int k) { return dir / ("part-" + std::to_string(k) + ".model"); }

int cmd_synth(const Options& o, Run& run) {
  require(o.common.out, "--out");
  if (o.common.seed) run.cfg.synth.seed = *o.common.seed;
  run.cfg.synth.validate();
  synth_generate(run.cfg.synth, o.common.out, o.common.jobs);
  write_run_manifest(run, {o.common.out}, run.cfg.synth.seed);
  std::cout << "synth: " << run.cfg.synth.train_size << " train, " << run.cfg.synth.val_size << " val, "
            << run.cfg.synth.test_size << " test persons written to " << o.common.out << "\n";
  return 0;
}

int cmd_train_parts(const Options& o, Run& run) {
  require(o.manifest, "--manifest");
  require(o.common.out, "--out");
  if (o.common.seed) run.cfg.part_train.seed = *o.common.seed;
  run.cfg.validate();
  const std::size_t patch = run.cfg.part_net.height;
  const Dataset train = load(o.manifest, patch, o.common.jobs, run);
  std::optional<Dataset> val;
  if (!o.val_manifest.empty()) val = load(o.val_manifest, patch, o.common.jobs, run);
  const auto nets = train_part_nets(train, run.cfg, val ? &*val : nullptr, o.common.jobs);
  warn_all(nets.warnings);
  const fs::path dir(o.common.out);
  fs::create_directories(dir);
  for (const auto& [k, net] : nets.nets) {
    save_network(net, part_model_path(dir, k));
    const auto hist = dir / ("part-" + std::to_string(k) + ".history.csv");
    io::write_file_atomic(hist, std::string_view(history_csv(nets.histories.at(k), train.attributes)));
  }
  write_run_manifest(run, {o.common.out}, run.cfg.part_train.seed);
  std::cout << "train-parts: " << nets.nets.size() << " of " << train.parts << " part nets written to " << o.common.out
            << "\n";
  return 0;
}

int cmd_train_holistic(const Options& o, Run& run) {
  require(o.manifest, "--manifest");
  require(o.common.out, "--out");
  if (o.common.seed) run.cfg.holistic_train.seed = *o.common.seed;
  run.cfg.validate();
  const std::size_t patch = run.cfg.part_net.height;
  const Dataset train = load(o.manifest, patch, o.common.jobs, run);
  std::optional<Dataset> val;
  if (!o.val_manifest.empty()) val = load(o.val_manifest, patch, o.common.jobs, run);
  const auto r = train_holistic(train, run.cfg, val ? &*val : nullptr);
  warn_all(r.history.warnings);
  const fs::path dir(o.common.out);
  fs::create_directories(dir);
  save_network(r.net, dir / "holistic.model");
  io::write_file_atomic(dir / "holistic.history.csv", std::string_view(history_csv(r.history, train.attributes)));
  write_run_manifest(run, {(dir / "holistic.model").string()}, run.cfg.holistic_train.seed);
  std::cout << "train-holistic: final mean loss "
            << (r.history.epochs.empty() ? std::string("n/a") : detail::format_double(r.history.epochs.back().mean_loss))
            << ", model written to " << (dir / "holistic.model").string() << "\n";
  return 0;
}

int cmd_extract(const Options& o, Run& run) {
  require(o.manifest, "--manifest");
  require(o.nets_dir, "--nets-dir");
  require(o.common.out, "--out");
  const Method method = method_from_string(o.method);
  run.cfg.validate();
  const Dataset data = load(o.manifest, run.cfg.part_net.height, o.common.jobs, run);
  const fs::path dir(o.nets_dir);
  const auto hpath = dir / "holistic.model";
  if (!fs::exists(hpath)) throw ConfigError("no holistic.model in " + dir.string());
  const Network holistic = load_network(hpath);
  run.inputs.push_back(hpath.string());
  std::map<int, Network> parts;
  FeatureLayout layout{0, run.cfg.part_net.trunk_fc_units, holistic.spec.trunk_fc_units, run.cfg.l2_normalize};
  if (method == Method::panda) {
    for (std::size_t k = 1; k <= data.parts; ++k) {
      const auto p = part_model_path(dir, static_cast<int>(k));
      if (!fs::exists(p)) continue;
      parts.emplace(static_cast<int>(k), load_network(p));
      run.inputs.push_back(p.string());
    }
    layout.parts = data.parts;
  }
  const FeatureSet fs = extract_features(parts, &holistic, data, layout, o.common.jobs);
  save_features(fs, o.common.out);
  write_run_manifest(run, {o.common.out}, std::nullopt);
  std::cout << "extract: " << fs.size() << " persons x " << layout.length() << " features written to " << o.common.out
            << "\n";
  return 0;
}

int cmd_fuse_train(const Options& o, Run& run) {
  require(o.features, "--features");
  require(o.common.out, "--out");
  if (o.common.seed) run.cfg.svm.seed = *o.common.seed;
  run.cfg.validate();
  run.inputs.push_back(o.features);
  const FeatureSet train = load_features(o.features);
  std::optional<FeatureSet> val;
  if (!o.val_features.empty()) {
    run.inputs.push_back(o.val_features);
    val = load_features(o.val_features);
    if (val->layout != train.layout) throw LayoutError("validation features use a different layout");
  }
  const auto r = fuse_train(train, run.cfg, val ? &*val : nullptr, o.common.jobs);
  warn_all(r.warnings);
  save_svm(r.model, o.common.out);
  write_run_manifest(run, {o.common.out}, run.cfg.svm.seed);
  std::size_t trained = 0;
  for (const auto& a : r.model.attributes) trained += a.trained;
  std::cout << "fuse-train: " << trained << " of " << r.model.attributes.size() << " attribute SVMs trained on "
            << train.size() << " persons, written to " << o.common.out << "\n";
  return 0;
}

int cmd_evaluate(const Options& o, Run& run) {
  require(o.features, "--features");
  require(o.models, "--models");
  require(o.common.out, "--out");
  run.inputs = {o.features, o.models};
  const FeatureSet test = load_features(o.features);
  const SvmModel model = load_svm(o.models);
  const auto res = evaluate(model, test);
  io::write_file_atomic(o.common.out, std::string_view(ap_csv(res)));
  write_run_manifest(run, {o.common.out}, std::nullopt);
  std::cout << "evaluate: mean AP " << format_ap(res.overall.mean_ap) << " over " << test.size() << " persons, written to "
            << o.common.out << "\n";
  return 0;
}

int cmd_sweep(const Options& o, Run& run) {
  require(o.common.out, "--out");
  run.cfg.validate();
  std::vector<Method> methods;
  for (const auto& m : o.methods) methods.push_back(method_from_string(m));
  std::vector<std::uint64_t> seeds = o.seeds;
  if (seeds.empty()) seeds = o.common.seed ? std::vector<std::uint64_t>{*o.common.seed} : std::vector<std::uint64_t>{1, 2, 3};
  SweepResult r;
  if (!o.manifest.empty()) {
    require(o.val_manifest, "--val-manifest");
    require(o.test_manifest, "--test-manifest");
    const std::size_t patch = run.cfg.part_net.height;
    const Dataset train = load(o.manifest, patch, o.common.jobs, run);
    const Dataset val = load(o.val_manifest, patch, o.common.jobs, run);
    const Dataset test = load(o.test_manifest, patch, o.common.jobs, run);
    r = training_size_sweep(run.cfg, train, val, test, o.sizes, methods, seeds, o.common.jobs);
  } else {
    r = training_size_sweep(run.cfg, o.sizes, methods, seeds, o.common.jobs);
  }
  warn_all(r.warnings);
  io::write_file_atomic(o.common.out, std::string_view(sweep_csv(r)));
  write_run_manifest(run, {o.common.out}, seeds.size() == 1 ? std::optional<std::uint64_t>(seeds[0]) : std::nullopt);
  std::cout << "sweep:";
  for (const auto& p : r.points) std::cout << " " << to_string(p.method) << "@" << p.size << "=" << format_ap(p.median_mean_ap);
  std::cout << "\n";
  if (r.failed()) {
    for (const auto& c : r.cells)
      if (!c.error.empty())
        std::cerr << "cell size " << c.size << " " << to_string(c.method) << " seed " << c.seed << " failed: " << c.error << "\n";
    return 2;
  }
  return 0;
}

NetworkSpec gradcheck_spec(const std::string& name) {
  if (name == "part-default") return NetworkSpec::part_default({"a", "b"});
  if (name == "holistic-default") return NetworkSpec::holistic_default({"a", "b"});
  if (name == "tiny") {
    NetworkSpec s;
    s.channels = 3;
    s.height = s.width = 8;
    s.conv_stages = {{3, 3, 1, 1, 2, 2, true}, {4, 3, 1, 1, 2, 2, false}};
    s.trunk_fc_units = 6;
    s.head_hidden_units = 5;
    s.attributes = {"a", "b", "c"};
    return s;
  }
  throw ConfigError("unknown --net '" + name + "' (expected part-default, holistic-default or tiny)");
}

int cmd_gradcheck(const Options& o, Run& run) {
  const NetworkSpec spec = gradcheck_spec(o.net);
  const std::uint64_t seed = o.common.seed.value_or(1);
  Network net = build_network(spec, seed);
  Rng rng(derive_seed(seed, 7));
  for (std::size_t i = 1; i < net.params.size(); i += 2)
    for (auto& v : net.params[i].values()) v = rng.uniform(-0.2, 0.2);
  Tensor x({1, spec.channels, spec.height, spec.width});
  for (auto& v : x.values()) v = rng.uniform(-1.0, 1.0);
  AttributeLabel y;
  for (std::size_t a = 0; a < spec.attributes.size(); ++a) y.push_back(rng.bernoulli(0.5) ? Label::positive : Label::negative);
  const std::vector<AttributeLabel> labels{y};
  const auto lg = loss_and_grad(net, x, labels);
  auto objective = [&](const std::vector<Tensor>& params) {
    Network n = net;
    n.params = params;
    return loss_and_grad(n, x, labels).loss;
  };
  const std::size_t coords = o.coords ? o.coords : (o.net == "tiny" ? 0 : 200);
  const auto res = check_scalar_gradient(objective, net.params, lg.grads, 1e-5, {coords, derive_seed(seed, 8)}, net.param_names);
  const bool ok = res.max_relative_error < 1e-3;
  std::cout << "gradcheck " << o.net << ": max relative error " << detail::format_double(res.max_relative_error) << " over "
            << res.coordinates << " coordinates (worst " << res.worst << ") " << (ok ? "PASS" : "FAIL") << "\n";
  if (!o.common.out.empty()) {
    json j{{"net", o.net}, {"seed", seed}, {"coordinates", res.coordinates},
           {"max_relative_error", res.max_relative_error}, {"worst", res.worst}, {"pass", ok}};
    io::write_file_atomic(o.common.out, std::string_view(j.dump(2) + "\n"));
    write_run_manifest(run, {o.common.out}, seed);
  }
  return ok ? 0 : 2;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Key-value configuration file")->check(CLI::ExistingFile);
  sub->add_option("--preset", c.preset, "Base configuration: default, desk or tiny");
  sub->add_option("--seed", c.seed, "Seed for this stage");
  sub->add_option("--out", c.out, "Output file or directory");
  sub->add_option("--jobs", c.jobs, "Worker threads (1 = bit-exact sequential)")->check(CLI::PositiveNumber);
  sub->add_flag("--print-config", c.print_config, "Print the effective configuration and exit");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"panda: part-aligned deep attribute pipeline"};
  app.set_version_flag("--version", std::string(PANDA_VERSION));
  app.require_subcommand(1);
  Options o;

  struct Sub {
    const char* name;
    const char* help;
    int (*run)(const Options&, Run&);
  };
  const Sub subs[] = {
      {"synth", "Generate the synthetic train/val/test family", cmd_synth},
      {"train-parts", "Train one net per part", cmd_train_parts},
      {"train-holistic", "Train the whole-person net", cmd_train_holistic},
      {"extract", "Extract concatenated feature vectors", cmd_extract},
      {"fuse-train", "Train the per-attribute linear SVMs", cmd_fuse_train},
      {"evaluate", "Score features and write the AP table", cmd_evaluate},
      {"sweep", "Training-size sweep", cmd_sweep},
      {"gradcheck", "Finite-difference check of a network's gradients", cmd_gradcheck},
  };
  std::map<CLI::App*, const Sub*> by_app;
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, o.common);
    by_app[sub] = &s;
    const std::string name = s.name;
    if (name == "train-parts" || name == "train-holistic" || name == "extract" || name == "sweep") {
      sub->add_option("--manifest", o.manifest, "Input manifest")->check(CLI::ExistingFile);
    }
    if (name == "train-parts" || name == "train-holistic" || name == "sweep")
      sub->add_option("--val-manifest", o.val_manifest, "Validation manifest")->check(CLI::ExistingFile);
    if (name == "sweep") {
      sub->add_option("--test-manifest", o.test_manifest, "Test manifest")->check(CLI::ExistingFile);
      sub->add_option("--sizes", o.sizes, "Training sizes")->delimiter(',');
      sub->add_option("--methods", o.methods, "holistic and/or panda")->delimiter(',');
      sub->add_option("--seeds", o.seeds, "Seeds")->delimiter(',');
    }
    if (name == "extract") {
      sub->add_option("--nets-dir", o.nets_dir, "Directory with part-<k>.model and holistic.model")
          ->check(CLI::ExistingDirectory);
      sub->add_option("--method", o.method, "panda (parts + holistic) or holistic");
    }
    if (name == "fuse-train" || name == "evaluate")
      sub->add_option("--features", o.features, "Feature file")->check(CLI::ExistingFile);
    if (name == "fuse-train")
      sub->add_option("--val-features", o.val_features, "Validation features for the C grid")->check(CLI::ExistingFile);
    if (name == "evaluate") sub->add_option("--models", o.models, "SVM model file")->check(CLI::ExistingFile);
    if (name == "gradcheck") {
      sub->add_option("--net", o.net, "part-default, holistic-default or tiny");
      sub->add_option("--coords", o.coords, "Sampled coordinates (0 = default)");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const Sub* sub = by_app.at(chosen);
  Run run;
  run.command = sub->name;
  run.argv.assign(argv, argv + argc);
  try {
    run.cfg = load_config(o.common);
    if (o.common.print_config) {
      std::cout << run.cfg.to_kv().to_text();
      return 0;
    }
    return sub->run(o, run);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << chosen->help();
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const SchemaError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const VersionError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const LayoutError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const InvalidArgument& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const SpecError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
