#include "flopsgate/train.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

#include "flopsgate/checkpoint.hpp"
#include "flopsgate/objective.hpp"
#include "flopsgate/optimizer.hpp"

namespace flopsgate {
namespace {

// Independent streams so that, e.g., changing S leaves the shuffle order alone.
enum Stream : std::uint64_t { kInit = 1, kShuffle = 2, kGateNoise = 3, kPenalty = 4 };

template <typename T>
std::vector<Parameter<T>*> trainable(GatedModel<T>& m) {
  return m.parameters();
}

template <typename T>
std::vector<const Parameter<T>*> as_const(const std::vector<Parameter<T>*>& ps) {
  return {ps.begin(), ps.end()};
}

template <typename T>
GatedModel<T> averaged_copy(const GatedModel<T>& m, const Ema<T>& ema) {
  GatedModel<T> copy = m;
  if (ema.updates() > 0) {
    auto ps = copy.parameters();
    ema.swap_in(ps);
  }
  return copy;
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

}  // namespace

nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [name, count] : m.active_groups) groups[name] = count;
  return {{"type", "epoch"},
          {"epoch", m.epoch},
          {"phase", m.phase},
          {"train_nll", m.train_nll},
          {"penalty", m.penalty},
          {"sampled_flops", m.sampled_flops},
          {"expected_flops", m.expected_flops},
          {"flops", m.flops},
          {"test_error", m.test_error},
          {"active_groups", groups}};
}

template <typename T>
FlopsLedger deterministic_ledger(const GatedModel<T>& m) {
  return network_flops(m.arch(), m.deterministic_support());
}

template <typename T>
std::vector<std::pair<std::string, std::int64_t>> active_groups(const GatedModel<T>& m) {
  const auto spec = m.arch();
  std::vector<std::pair<std::string, std::int64_t>> out;
  if (m.has_gates()) {
    const auto counts = effective_counts(spec, m.deterministic_support());
    const auto gated = spec.gated_layers();
    for (std::size_t k = 0; k < gated.size(); ++k) out.emplace_back(spec.layers[gated[k]].name, counts[k]);
    return out;
  }
  for (const auto& l : spec.layers) {
    if (const auto* c = std::get_if<ConvGeometry>(&l.geometry)) {
      out.emplace_back(l.name, static_cast<std::int64_t>(c->out_channels));
    } else {
      out.emplace_back(l.name, static_cast<std::int64_t>(std::get<DenseGeometry>(l.geometry).in_features));
    }
  }
  return out;
}

template <typename T>
EvalResult evaluate(const GatedModel<T>& m, const Dataset& d, std::size_t batch_size) {
  EvalResult r;
  r.ledger = deterministic_ledger(m);
  r.examples = d.size();
  if (d.size() == 0) return r;
  std::size_t wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(d.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = make_batch<T>(d, idx);
    const auto pred = predict(m, batch.inputs);
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != batch.labels[i];
  }
  r.error = static_cast<double>(wrong) / static_cast<double>(d.size());
  return r;
}

template <typename T>
GatedModel<T> build_model(const TrainConfig& cfg) {
  cfg.validate();
  LenetOptions opts;
  opts.hyper = {cfg.gate_beta, cfg.gate_gamma, cfg.gate_zeta};
  opts.droprate_input = cfg.droprate_input;
  opts.droprate_hidden = cfg.droprate_hidden;
  opts.init_noise_std = cfg.init_noise_std;
  Rng rng(cfg.seed, kInit);
  return build_lenet5_caffe<T>(opts, rng);
}

nlohmann::json metrics_header(const TrainConfig& cfg) {
  return {{"type", "header"}, {"config", config_to_json(cfg)}, {"config_text", format_config(cfg)}};
}

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, GatedModel<T> model, const Dataset& train_set,
                     const Dataset& test_set, const TrainHooks& hooks) {
  cfg.validate();
  model.validate();
  const std::filesystem::path out_dir = cfg.out_dir;
  std::ofstream metrics_file;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics_file.open(out_dir / "metrics.jsonl");
    if (!metrics_file) throw std::runtime_error("cannot write " + (out_dir / "metrics.jsonl").string());
  }
  auto emit = [&](const nlohmann::json& line) {
    if (metrics_file.is_open()) metrics_file << line.dump() << '\n' << std::flush;
    if (hooks.metrics) hooks.metrics(line);
  };
  auto log = [&](const std::string& s) {
    if (hooks.log) hooks.log(s);
  };
  const auto cfg_json = config_to_json(cfg);
  emit(metrics_header(cfg));

  Rng shuffle_rng(cfg.seed, kShuffle);
  Rng gate_rng(cfg.seed, kGateNoise);
  Rng penalty_rng(cfg.seed, kPenalty);
  const PenaltyConfig penalty = cfg.penalty();

  TrainResult<T> result{std::move(model), {}, std::nullopt};
  GatedModel<T>& m = result.model;
  auto adam = std::make_unique<Adam<T>>(cfg.adam);
  auto params = trainable(m);
  auto ema = std::make_unique<Ema<T>>(cfg.ema_decay, as_const(params));
  Tape<T> tape;

  auto do_prune = [&]() {
    GatedModel<T> averaged = averaged_copy(m, *ema);
    // Saved first so a collapsed layer leaves something to inspect.
    if (!out_dir.empty()) {
      save_checkpoint(out_dir / "prune_gated.ckpt", averaged, cfg_json, {{"stage", "before_prune"}});
    }
    auto pruned = prune_model(averaged);
    log(fmt("pruned %zu groups", pruned.report.removed_groups));
    if (!out_dir.empty()) {
      save_checkpoint(out_dir / "prune.ckpt", pruned.model, cfg_json, {{"stage", "pruned"}});
      std::ofstream(out_dir / "prune_report.json") << to_json(pruned.report).dump(2) << '\n';
    }
    result.prune_report = std::move(pruned.report);
    m = std::move(pruned.model);
    AdamConfig ft = cfg.adam;
    ft.lr = cfg.finetune_lr;
    ft.weight_decay = cfg.finetune_weight_decay;
    adam = std::make_unique<Adam<T>>(ft);
    params = trainable(m);
    ema = std::make_unique<Ema<T>>(cfg.ema_decay, as_const(params));
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool finetune = epoch > cfg.prune_epoch;
    if (finetune && !result.prune_report) do_prune();
    const auto started = std::chrono::steady_clock::now();

    EpochMetrics em;
    em.epoch = epoch;
    em.phase = finetune ? "finetune" : "train";
    double nll_sum = 0.0, pen_sum = 0.0, sampled_sum = 0.0;
    std::size_t steps = 0, seen = 0;
    for (const auto& idx : batch_indices(train_set.size(), cfg.batch_size, shuffle_rng)) {
      const auto batch = make_batch<T>(train_set, idx);
      tape.clear();
      Gradients<T> grads;
      if (!finetune && m.has_gates()) {
        auto step = training_loss_step(m, batch, penalty, gate_rng, penalty_rng, tape);
        grads = tape.backward(step.forward.loss);
        inject_penalty_gradient(m, step.penalty, grads);
        nll_sum += step.penalty.report.nll * static_cast<double>(idx.size());
        pen_sum += step.penalty.report.penalty_value;
        sampled_sum += step.penalty.report.sampled_flops_mean;
      } else {
        auto fwd = forward_train(m, batch, gate_rng, tape);
        nll_sum += static_cast<double>(tape.value(fwd.loss)[0]) * static_cast<double>(idx.size());
        grads = tape.backward(fwd.loss);
      }
      adam->step(params, grads);
      ema->update(as_const(params));
      ++steps;
      seen += idx.size();
    }
    tape.clear();

    const GatedModel<T> averaged = averaged_copy(m, *ema);
    const auto eval = evaluate(averaged, test_set);
    em.train_nll = seen ? nll_sum / static_cast<double>(seen) : 0.0;
    if (!finetune && steps) {
      em.penalty = pen_sum / static_cast<double>(steps);
      em.sampled_flops = sampled_sum / static_cast<double>(steps);
    }
    em.flops = eval.ledger.total;
    em.expected_flops = averaged.has_gates() ? expected_flops(averaged.arch(), averaged.active_probabilities())
                                             : static_cast<double>(eval.ledger.total);
    em.test_error = eval.error;
    em.active_groups = active_groups(averaged);
    emit(to_json(em));
    result.metrics.push_back(em);

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::string groups;
    for (const auto& [name, count] : em.active_groups) groups += fmt(" %s=%lld", name.c_str(), static_cast<long long>(count));
    log(fmt("epoch %zu/%zu [%s] nll %.4f penalty %.4f E[flops] %.0f flops %lld err %.2f%%%s (%.1fs)", epoch,
            cfg.epochs, em.phase.c_str(), em.train_nll, em.penalty, em.expected_flops,
            static_cast<long long>(em.flops), 100.0 * em.test_error, groups.c_str(), secs));
  }
  if (cfg.epochs > 0 && !result.prune_report && cfg.finetune_epochs == 0 && m.has_gates()) do_prune();

  if (ema->updates() > 0) m = averaged_copy(m, *ema);
  if (!out_dir.empty()) save_checkpoint(out_dir / "final.ckpt", m, cfg_json, {{"stage", "final"}});
  return result;
}

#define FLOPSGATE_INSTANTIATE_TRAIN(T)                                                                   \
  template FlopsLedger deterministic_ledger(const GatedModel<T>&);                                       \
  template std::vector<std::pair<std::string, std::int64_t>> active_groups(const GatedModel<T>&);        \
  template EvalResult evaluate(const GatedModel<T>&, const Dataset&, std::size_t);                       \
  template GatedModel<T> build_model<T>(const TrainConfig&);                                             \
  template TrainResult<T> train(const TrainConfig&, GatedModel<T>, const Dataset&, const Dataset&,       \
                                const TrainHooks&);

FLOPSGATE_INSTANTIATE_TRAIN(float)
FLOPSGATE_INSTANTIATE_TRAIN(double)

}  // namespace flopsgate
