#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "flopsgate/config.hpp"
#include "flopsgate/dataset.hpp"
#include "flopsgate/flops.hpp"
#include "flopsgate/model.hpp"
#include "flopsgate/prune.hpp"

namespace flopsgate {

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  std::string phase;      // "train" or "finetune"
  double train_nll = 0.0;
  double penalty = 0.0;  // mean lambda_f * hinge over the REINFORCE draws
  double sampled_flops = 0.0;
  double expected_flops = 0.0;
  std::int64_t flops = 0;  // deterministic support
  double test_error = 0.0;
  std::vector<std::pair<std::string, std::int64_t>> active_groups;
};

nlohmann::json to_json(const EpochMetrics& m);

struct EvalResult {
  double error = 0.0;
  std::size_t examples = 0;
  FlopsLedger ledger;
};

/// Ledger of the support the deterministic gates keep (the whole net when ungated).
template <typename T>
FlopsLedger deterministic_ledger(const GatedModel<T>& m);

/// Surviving groups per gated layer, counted the same way the ledger counts them.
template <typename T>
std::vector<std::pair<std::string, std::int64_t>> active_groups(const GatedModel<T>& m);

template <typename T>
EvalResult evaluate(const GatedModel<T>& m, const Dataset& d, std::size_t batch_size = 1000);

template <typename T>
GatedModel<T> build_model(const TrainConfig& cfg);

template <typename T>
struct TrainResult {
  GatedModel<T> model;  // averaged parameters; pruned once prune_epoch is reached
  std::vector<EpochMetrics> metrics;
  std::optional<PruneReport> prune_report;
};

struct TrainHooks {
  /// Every metrics line, header first.
  std::function<void(const nlohmann::json&)> metrics;
  /// Human-readable progress.
  std::function<void(const std::string&)> log;
};

/// Header line of the metrics stream: the effective config, verbatim.
nlohmann::json metrics_header(const TrainConfig& cfg);

/// Trains `cfg.prune_epoch` epochs with the FLOPs objective, prunes the
/// averaged model, then finetunes `cfg.finetune_epochs` epochs without the
/// penalty. With a non-empty `cfg.out_dir` it writes metrics.jsonl,
/// prune.ckpt, prune_report.json and final.ckpt there.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, GatedModel<T> model, const Dataset& train_set,
                     const Dataset& test_set, const TrainHooks& hooks = {});

}  // namespace flopsgate
