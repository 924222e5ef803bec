#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "flopsgate/objective.hpp"
#include "flopsgate/optimizer.hpp"

namespace flopsgate {

/// Bad key or value in a run config. Maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct TrainConfig {
  std::string model = "lenet5caffe";
  std::string data_dir;  // empty: FLOPSGATE_DATA_DIR or the cache default
  std::size_t train_subset = 0;  // 0 keeps the whole split
  std::size_t test_subset = 0;

  std::size_t epochs = 35;
  std::size_t prune_epoch = 30;
  std::size_t finetune_epochs = 5;
  std::size_t batch_size = 128;
  std::uint64_t seed = 1;
  int precision = 64;

  double lambda_f = 1e-6;
  std::int64_t target = 200000;
  std::size_t samples = 1000;
  Baseline baseline = Baseline::none;

  AdamConfig adam;
  double ema_decay = 0.999;
  double finetune_lr = 1e-3;
  double finetune_weight_decay = 5e-4;

  double gate_beta = 2.0 / 3.0;
  double gate_gamma = -0.1;
  double gate_zeta = 1.1;
  double droprate_input = 0.2;
  double droprate_hidden = 0.5;
  double init_noise_std = 0.01;

  std::string out_dir;  // empty: no files written

  PenaltyConfig penalty() const { return {lambda_f, target, samples, baseline}; }
  void validate() const;
};

/// Sets one key from its text form.
void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value);

/// `key = value` lines; `#` starts a comment. Keys not listed in `format_config`
/// are rejected.
TrainConfig parse_config(std::string_view text, TrainConfig base = {});
TrainConfig load_config_file(const std::filesystem::path& path);

/// Every key in a fixed order, one per line. Parsing the output gives the same config.
std::string format_config(const TrainConfig& cfg);
nlohmann::json config_to_json(const TrainConfig& cfg);
std::vector<std::string> config_keys();

std::vector<std::string> preset_names();
std::optional<TrainConfig> preset(std::string_view name);

/// A readable file path wins; otherwise the name must be a preset.
TrainConfig resolve_config(const std::string& name_or_path);

}  // namespace flopsgate
