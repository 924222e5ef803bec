#include "flopsgate/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "flopsgate/checkpoint.hpp"
#include "flopsgate/config.hpp"
#include "flopsgate/dataset.hpp"
#include "flopsgate/flops.hpp"
#include "flopsgate/prune.hpp"
#include "flopsgate/train.hpp"

namespace flopsgate {
namespace {

namespace fs = std::filesystem;

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::int64_t> target;
  std::optional<double> lambda_f;
  std::optional<std::size_t> samples;
  std::vector<std::string> sets;
  std::string out_dir;
  std::string data_dir;
  bool download = false;
  bool quiet = false;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data_dir;
  std::string split = "test";
  bool download = false;
};

struct PruneArgs {
  std::string checkpoint;
  std::string out;
};

struct FlopsArgs {
  std::string arch;
  std::string active;
  std::string checkpoint;
  bool penalized_only = false;
};

fs::path data_dir_for(const std::string& explicit_dir, bool download) {
  const fs::path dir = explicit_dir.empty() ? default_data_dir() : fs::path(explicit_dir);
  if (!mnist_present(dir)) {
    if (!download) {
      throw DatasetError("MNIST not found in " + dir.string() +
                         " (pass --download, --data-dir or set FLOPSGATE_DATA_DIR)");
    }
    download_mnist(dir);
  }
  return dir;
}

std::vector<std::int64_t> parse_counts(const std::string& text) {
  std::vector<std::int64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("active", "--active: cannot parse '" + item + "' as a count");
    }
  }
  return out;
}

void print_ledger(std::ostream& out, const FlopsLedger& ledger) {
  out << format_ledger(ledger) << to_json(ledger).dump() << '\n';
}

void apply_epochs(TrainConfig& cfg, std::size_t epochs) {
  cfg.finetune_epochs = std::min(cfg.finetune_epochs, epochs);
  cfg.prune_epoch = epochs - cfg.finetune_epochs;
  cfg.epochs = epochs;
}

template <typename T>
int train_with(const TrainConfig& cfg, const fs::path& data_dir, bool quiet, std::ostream& out,
               std::ostream& err) {
  auto train_set = load_mnist(data_dir, Split::train);
  auto test_set = load_mnist(data_dir, Split::test);
  if (cfg.train_subset) train_set = train_set.head(cfg.train_subset);
  if (cfg.test_subset) test_set = test_set.head(cfg.test_subset);
  TrainHooks hooks;
  if (!quiet) hooks.log = [&err](const std::string& s) { err << s << std::endl; };
  auto result = train<T>(cfg, build_model<T>(cfg), train_set, test_set, hooks);
  const auto final_eval = evaluate(result.model, test_set);
  nlohmann::json summary = {{"out_dir", cfg.out_dir},
                            {"epochs", cfg.epochs},
                            {"test_error", final_eval.error},
                            {"flops", final_eval.ledger.total}};
  out << format_ledger(final_eval.ledger);
  out << "test error " << 100.0 * final_eval.error << "%\n" << summary.dump() << '\n';
  return kExitOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = resolve_config(a.config);
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError(kv, "--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) apply_epochs(cfg, *a.epochs);
  if (a.target) cfg.target = *a.target;
  if (a.lambda_f) cfg.lambda_f = *a.lambda_f;
  if (a.samples) cfg.samples = *a.samples;
  if (!a.data_dir.empty()) cfg.data_dir = a.data_dir;
  if (!a.out_dir.empty()) {
    cfg.out_dir = a.out_dir;
  } else if (cfg.out_dir.empty()) {
    cfg.out_dir = (fs::path("runs") / (fs::path(a.config).stem().string() + "-seed" + std::to_string(cfg.seed))).string();
  }
  cfg.validate();
  const auto dir = data_dir_for(cfg.data_dir, a.download);
  return cfg.precision == 32 ? train_with<float>(cfg, dir, a.quiet, out, err)
                             : train_with<double>(cfg, dir, a.quiet, out, err);
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto ckpt = load_checkpoint<double>(a.checkpoint);
  const auto dir = data_dir_for(a.data_dir, a.download);
  if (a.split != "test" && a.split != "train") throw ConfigError("split", "--split must be test or train");
  const auto data = load_mnist(dir, a.split == "test" ? Split::test : Split::train);
  const auto r = evaluate(ckpt.model, data);
  out << format_ledger(r.ledger);
  out << a.split << " error " << 100.0 * r.error << "% over " << r.examples << " examples\n";
  out << nlohmann::json{{"split", a.split}, {"error", r.error}, {"examples", r.examples}, {"ledger", to_json(r.ledger)}}.dump()
      << '\n';
  return kExitOk;
}

int cmd_prune(const PruneArgs& a, std::ostream& out) {
  const auto ckpt = load_checkpoint<double>(a.checkpoint);
  const auto pruned = prune_model(ckpt.model);
  fs::path target = a.out;
  if (target.empty()) {
    target = fs::path(a.checkpoint);
    target.replace_extension(".pruned.ckpt");
  }
  auto extra = ckpt.extra;
  extra["stage"] = "pruned";
  extra["pruned_from"] = a.checkpoint;
  save_checkpoint(target, pruned.model, ckpt.config, extra);
  auto report_path = target;
  report_path.replace_extension(".json");
  const auto report = to_json(pruned.report);
  std::ofstream(report_path) << report.dump(2) << '\n';
  const auto ledger = deterministic_ledger(pruned.model);
  out << "removed " << pruned.report.removed_groups << " groups; wrote " << target.string() << "\n";
  out << format_ledger(ledger);
  out << nlohmann::json{{"checkpoint", target.string()}, {"report", report}, {"ledger", to_json(ledger)}}.dump()
      << '\n';
  return kExitOk;
}

int cmd_flops(const FlopsArgs& a, std::ostream& out) {
  if (!a.checkpoint.empty()) {
    if (!a.arch.empty() || !a.active.empty()) {
      throw ConfigError("checkpoint", "--checkpoint cannot be combined with --arch or --active");
    }
    const auto ckpt = load_checkpoint<double>(a.checkpoint);
    const auto spec = ckpt.model.arch();
    auto counts = effective_counts(spec, ckpt.model.deterministic_support());
    print_ledger(out, ledger_from_counts(spec, counts, a.penalized_only));
    return kExitOk;
  }
  ArchSpec spec;
  if (a.arch.empty() || a.arch == "lenet5caffe") {
    Rng rng(0, 0);
    LenetOptions opts;
    spec = build_lenet5_caffe<float>(opts, rng).arch();
  } else if (a.arch == "wrn28x10") {
    spec = build_wrn_28_10_spec().arch;
  } else {
    throw ConfigError("arch", "unknown --arch '" + a.arch + "' (expected lenet5caffe or wrn28x10)");
  }
  if (a.active.empty()) {
    print_ledger(out, static_flops(spec, a.penalized_only));
    return kExitOk;
  }
  const auto counts = parse_counts(a.active);
  const auto gated = spec.gated_layers();
  if (counts.size() != gated.size()) {
    throw ConfigError("active", "--active needs " + std::to_string(gated.size()) + " counts for " + spec.name +
                                    ", got " + std::to_string(counts.size()));
  }
  for (std::size_t k = 0; k < gated.size(); ++k) {
    if (counts[k] < 0 || counts[k] > static_cast<std::int64_t>(spec.layers[gated[k]].gate_count())) {
      throw ConfigError("active", "--active count " + std::to_string(counts[k]) + " out of range for " +
                                      spec.layers[gated[k]].name);
    }
  }
  print_ledger(out, ledger_from_counts(spec, counts, a.penalized_only));
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Training-time FLOPs-targeted structured sparsity for small conv nets"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train, prune and finetune from a config file or preset");
  train_cmd->add_option("--config", ta.config, "Config file path or preset name")->required();
  train_cmd->add_option("--seed", ta.seed, "Override the seed");
  train_cmd->add_option("--epochs", ta.epochs, "Override the total epoch count (finetune length kept)");
  train_cmd->add_option("--target", ta.target, "Override the FLOPs target T");
  train_cmd->add_option("--lambda-f", ta.lambda_f, "Override the penalty weight");
  train_cmd->add_option("--samples", ta.samples, "Override the REINFORCE sample count");
  train_cmd->add_option("--set", ta.sets, "Override any config key (key=value)");
  train_cmd->add_option("--out-dir", ta.out_dir, "Directory for metrics and checkpoints");
  train_cmd->add_option("--data-dir", ta.data_dir, "MNIST directory");
  train_cmd->add_flag("--download", ta.download, "Fetch MNIST if it is missing");
  train_cmd->add_flag("--quiet", ta.quiet, "No per-epoch progress on stderr");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data-dir", ea.data_dir, "MNIST directory");
  eval_cmd->add_option("--split", ea.split, "test or train");
  eval_cmd->add_flag("--download", ea.download, "Fetch MNIST if it is missing");

  PruneArgs pa;
  auto* prune_cmd = app.add_subcommand("prune", "Remove groups whose deterministic gate is zero");
  prune_cmd->add_option("--checkpoint", pa.checkpoint, "Gated checkpoint")->required();
  prune_cmd->add_option("--out", pa.out, "Pruned checkpoint path");

  FlopsArgs fa;
  auto* flops_cmd = app.add_subcommand("flops", "Static FLOPs ledger of an architecture or checkpoint");
  flops_cmd->add_option("--arch", fa.arch, "lenet5caffe or wrn28x10");
  flops_cmd->add_option("--active", fa.active, "Active groups per gated layer, comma separated");
  flops_cmd->add_option("--checkpoint", fa.checkpoint, "Use the deterministic support of a checkpoint");
  flops_cmd->add_flag("--penalized-only", fa.penalized_only, "Only the layers the penalty covers");

  std::vector<std::string> argv_store{"flopsgate"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(ta, out, err);
    if (*eval_cmd) return cmd_eval(ea, out);
    if (*prune_cmd) return cmd_prune(pa, out);
    if (*flops_cmd) return cmd_flops(fa, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace flopsgate
