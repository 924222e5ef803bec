#include "flopsgate/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace flopsgate {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

template <typename N>
N parse_number(std::string_view key, std::string_view text) {
  N out{};
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    throw ConfigError(std::string(key), "config key '" + std::string(key) + "': cannot parse '" +
                                            std::string(text) + "'");
  }
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, std::string_view key, std::string_view)> set;
  bool numeric = false;
};

template <typename N>
Field number(const char* key, N TrainConfig::*member) {
  return {key,
          [member](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<N>) return fmt_double(c.*member);
            else return std::to_string(c.*member);
          },
          [member](TrainConfig& c, std::string_view k, std::string_view v) { c.*member = parse_number<N>(k, v); },
          true};
}

Field adam(const char* key, double AdamConfig::*member) {
  return {key, [member](const TrainConfig& c) { return fmt_double(c.adam.*member); },
          [member](TrainConfig& c, std::string_view k, std::string_view v) {
            c.adam.*member = parse_number<double>(k, v);
          },
          true};
}

Field text(const char* key, std::string TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return c.*member; },
          [member](TrainConfig& c, std::string_view, std::string_view v) { c.*member = std::string(v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      text("model", &TrainConfig::model),
      text("data_dir", &TrainConfig::data_dir),
      number("train_subset", &TrainConfig::train_subset),
      number("test_subset", &TrainConfig::test_subset),
      number("epochs", &TrainConfig::epochs),
      number("prune_epoch", &TrainConfig::prune_epoch),
      number("finetune_epochs", &TrainConfig::finetune_epochs),
      number("batch_size", &TrainConfig::batch_size),
      number("seed", &TrainConfig::seed),
      number("precision", &TrainConfig::precision),
      number("lambda_f", &TrainConfig::lambda_f),
      number("target", &TrainConfig::target),
      number("samples", &TrainConfig::samples),
      {"baseline", [](const TrainConfig& c) { return to_string(c.baseline); },
       [](TrainConfig& c, std::string_view k, std::string_view v) {
         try {
           c.baseline = baseline_from_string(std::string(v));
         } catch (const std::invalid_argument& e) {
           throw ConfigError(std::string(k), "config key 'baseline': " + std::string(e.what()));
         }
       }},
      adam("lr", &AdamConfig::lr),
      adam("beta1", &AdamConfig::beta1),
      adam("beta2", &AdamConfig::beta2),
      adam("eps", &AdamConfig::eps),
      adam("weight_decay", &AdamConfig::weight_decay),
      number("ema_decay", &TrainConfig::ema_decay),
      number("finetune_lr", &TrainConfig::finetune_lr),
      number("finetune_weight_decay", &TrainConfig::finetune_weight_decay),
      number("gate_beta", &TrainConfig::gate_beta),
      number("gate_gamma", &TrainConfig::gate_gamma),
      number("gate_zeta", &TrainConfig::gate_zeta),
      number("droprate_input", &TrainConfig::droprate_input),
      number("droprate_hidden", &TrainConfig::droprate_hidden),
      number("init_noise_std", &TrainConfig::init_noise_std),
      text("out_dir", &TrainConfig::out_dir),
  };
  return table;
}

void require(bool ok, const char* key, const std::string& why) {
  if (!ok) throw ConfigError(key, "config key '" + std::string(key) + "': " + why);
}

TrainConfig lenet_preset(std::int64_t target, bool desk) {
  TrainConfig c;
  c.target = target;
  c.lambda_f = 1e-6;
  if (desk) {
    c.epochs = 35;
    c.prune_epoch = 30;
    c.finetune_epochs = 5;
  } else {
    c.epochs = 200;
    c.prune_epoch = 190;
    c.finetune_epochs = 10;
  }
  return c;
}

}  // namespace

void TrainConfig::validate() const {
  require(model == "lenet5caffe", "model", "unsupported model '" + model + "' (expected lenet5caffe)");
  require(prune_epoch + finetune_epochs == epochs, "epochs",
          "prune_epoch + finetune_epochs must equal epochs (" + std::to_string(prune_epoch) + " + " +
              std::to_string(finetune_epochs) + " != " + std::to_string(epochs) + ")");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(precision == 32 || precision == 64, "precision", "must be 32 or 64");
  require(std::isfinite(lambda_f) && lambda_f >= 0.0, "lambda_f", "must be finite and >= 0");
  require(target >= 0, "target", "must be >= 0");
  require(samples >= 1, "samples", "must be >= 1");
  require(adam.lr > 0.0, "lr", "must be > 0");
  require(adam.beta1 >= 0.0 && adam.beta1 < 1.0, "beta1", "must lie in [0, 1)");
  require(adam.beta2 >= 0.0 && adam.beta2 < 1.0, "beta2", "must lie in [0, 1)");
  require(adam.eps > 0.0, "eps", "must be > 0");
  require(adam.weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay", "must lie in [0, 1)");
  require(finetune_lr > 0.0, "finetune_lr", "must be > 0");
  require(finetune_weight_decay >= 0.0, "finetune_weight_decay", "must be >= 0");
  require(gate_beta > 0.0, "gate_beta", "must be > 0");
  require(gate_gamma < 0.0, "gate_gamma", "must be < 0");
  require(gate_zeta > 1.0, "gate_zeta", "must be > 1");
  require(droprate_input > 0.0 && droprate_input < 1.0, "droprate_input", "must lie in (0, 1)");
  require(droprate_hidden > 0.0 && droprate_hidden < 1.0, "droprate_hidden", "must lie in (0, 1)");
  require(init_noise_std >= 0.0, "init_noise_std", "must be >= 0");
}

void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(cfg, key, trim(value));
      return;
    }
  }
  throw ConfigError(std::string(key), "unknown config key '" + std::string(key) + "'");
}

TrainConfig parse_config(std::string_view text, TrainConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("", "config line " + std::to_string(line_no) + ": expected key = value");
    }
    set_config_value(base, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

TrainConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("", "cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

nlohmann::json config_to_json(const TrainConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : fields()) {
    j[f.key] = f.numeric ? nlohmann::json::parse(f.get(cfg)) : nlohmann::json(f.get(cfg));
  }
  return j;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.emplace_back(f.key);
  return keys;
}

std::vector<std::string> preset_names() {
  return {"lenet_t400k", "lenet_t200k", "lenet_t100k", "lenet_t400k_desk", "lenet_t200k_desk",
          "lenet_t100k_desk"};
}

std::optional<TrainConfig> preset(std::string_view name) {
  const bool desk = name.ends_with("_desk");
  const auto stem = desk ? name.substr(0, name.size() - 5) : name;
  if (stem == "lenet_t400k") return lenet_preset(400000, desk);
  if (stem == "lenet_t200k") return lenet_preset(200000, desk);
  if (stem == "lenet_t100k") return lenet_preset(100000, desk);
  return std::nullopt;
}

TrainConfig resolve_config(const std::string& name_or_path) {
  if (std::filesystem::is_regular_file(name_or_path)) return load_config_file(name_or_path);
  if (auto p = preset(name_or_path)) return *p;
  std::string names;
  for (const auto& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
  throw ConfigError("config", "no config file or preset named '" + name_or_path + "' (presets: " + names + ")");
}

}  // namespace flopsgate
