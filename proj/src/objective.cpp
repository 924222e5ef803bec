#include "flopsgate/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace flopsgate {

std::string to_string(Baseline b) { return b == Baseline::none ? "none" : "sample_mean"; }

Baseline baseline_from_string(const std::string& s) {
  if (s == "none") return Baseline::none;
  if (s == "sample_mean") return Baseline::sample_mean;
  throw std::invalid_argument("unknown baseline '" + s + "' (expected none or sample_mean)");
}

void PenaltyConfig::validate() const {
  if (!(lambda_f >= 0.0) || !std::isfinite(lambda_f)) {
    throw std::invalid_argument("lambda_f must be a finite non-negative number");
  }
  if (target < 0) throw std::invalid_argument("target must be non-negative");
  if (sample_count < 1) throw std::invalid_argument("sample_count must be >= 1");
}

nlohmann::json to_json(const ObjectiveReport& r) {
  return {{"nll", r.nll},
          {"penalty_value", r.penalty_value},
          {"sampled_flops_mean", r.sampled_flops_mean},
          {"sampled_flops_min", r.sampled_flops_min},
          {"sampled_flops_max", r.sampled_flops_max},
          {"hinge_active_fraction", r.hinge_active_fraction},
          {"grad_logalpha_norm", r.grad_logalpha_norm}};
}

double hinge_penalty(std::int64_t flops, std::int64_t target) {
  return flops > target ? static_cast<double>(flops - target) : 0.0;
}

ScoreFunctionEstimate score_function_gradient(
    std::span<const double> psi, std::size_t samples, Baseline baseline,
    const std::function<double(std::span<const std::uint8_t>)>& payoff, Rng& rng) {
  if (samples < 1) throw std::invalid_argument("score_function_gradient: samples must be >= 1");
  const std::size_t n = psi.size();
  std::vector<std::uint8_t> z(n);
  // sum_s f_s z_sj, sum_s z_sj and sum_s f_s are enough for both estimators.
  std::vector<double> weighted(n, 0.0);
  std::vector<double> hits(n, 0.0);
  double payoff_sum = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t j = 0; j < n; ++j) z[j] = rng.bernoulli(psi[j]) ? 1 : 0;
    const double f = payoff(z);
    payoff_sum += f;
    for (std::size_t j = 0; j < n; ++j) {
      if (z[j]) {
        weighted[j] += f;
        hits[j] += 1.0;
      }
    }
  }
  ScoreFunctionEstimate out;
  out.grad.resize(n);
  const double count = static_cast<double>(samples);
  out.payoff_mean = payoff_sum / count;
  const bool leave_one_out = baseline == Baseline::sample_mean && samples > 1;
  for (std::size_t j = 0; j < n; ++j) {
    out.grad[j] = leave_one_out ? (weighted[j] - out.payoff_mean * hits[j]) / (count - 1.0)
                                : (weighted[j] - psi[j] * payoff_sum) / count;
  }
  return out;
}

PenaltyGradient reinforce_grad_logalpha(const ArchSpec& spec,
                                        const std::vector<std::vector<double>>& psi,
                                        const PenaltyConfig& cfg, Rng& rng) {
  cfg.validate();
  const FlopsEvaluator evaluator(spec);
  std::vector<double> flat;
  flat.reserve(evaluator.gate_total());
  for (const auto& layer : psi) flat.insert(flat.end(), layer.begin(), layer.end());
  if (flat.size() != evaluator.gate_total()) {
    throw ShapeError("reinforce_grad_logalpha: psi has " + std::to_string(flat.size()) +
                     " entries, model has " + std::to_string(evaluator.gate_total()) + " gates");
  }

  double flops_sum = 0.0;
  double flops_min = std::numeric_limits<double>::infinity();
  double flops_max = 0.0;
  std::size_t hinge_active = 0;
  auto payoff = [&](std::span<const std::uint8_t> z) {
    const auto flops = evaluator.total(z);
    const auto f = static_cast<double>(flops);
    flops_sum += f;
    flops_min = std::min(flops_min, f);
    flops_max = std::max(flops_max, f);
    if (flops > cfg.target) ++hinge_active;
    return cfg.lambda_f * hinge_penalty(flops, cfg.target);
  };
  const auto estimate = score_function_gradient(flat, cfg.sample_count, cfg.baseline, payoff, rng);

  PenaltyGradient out;
  const auto offsets = evaluator.offsets();
  for (std::size_t k = 0; k < psi.size(); ++k) {
    const auto begin = estimate.grad.begin() + static_cast<std::ptrdiff_t>(offsets[k]);
    out.grad.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(psi[k].size()));
  }
  const double count = static_cast<double>(cfg.sample_count);
  out.report.penalty_value = estimate.payoff_mean;
  out.report.sampled_flops_mean = flops_sum / count;
  out.report.sampled_flops_min = flops_min;
  out.report.sampled_flops_max = flops_max;
  out.report.hinge_active_fraction = static_cast<double>(hinge_active) / count;
  double sq = 0.0;
  for (double g : estimate.grad) sq += g * g;
  out.report.grad_logalpha_norm = std::sqrt(sq);
  return out;
}

template <typename T>
LossStep<T> training_loss_step(const GatedModel<T>& m, const Batch<T>& batch, const PenaltyConfig& cfg,
                               Rng& gate_rng, Rng& penalty_rng, Tape<T>& tape) {
  LossStep<T> step{forward_train(m, batch, gate_rng, tape), reinforce_grad_logalpha(m, cfg, penalty_rng)};
  step.penalty.report.nll = static_cast<double>(tape.value(step.forward.loss)[0]);
  return step;
}

template <typename T>
double inject_penalty_gradient(const GatedModel<T>& m, const PenaltyGradient& penalty,
                               Gradients<T>& grads) {
  const auto groups = m.gate_groups();
  if (groups.size() != penalty.grad.size()) {
    throw ShapeError("penalty gradient covers " + std::to_string(penalty.grad.size()) +
                     " gate groups, model has " + std::to_string(groups.size()));
  }
  double sq = 0.0;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto& p = groups[k]->log_alpha;
    auto [it, inserted] = grads.try_emplace(p.id, p.value.shape());
    auto& g = it->second;
    if (g.numel() != penalty.grad[k].size()) {
      throw ShapeError("penalty gradient length mismatch for " + p.name);
    }
    for (std::size_t j = 0; j < g.numel(); ++j) {
      g[j] += static_cast<T>(penalty.grad[k][j]);
      sq += static_cast<double>(g[j]) * static_cast<double>(g[j]);
    }
  }
  return std::sqrt(sq);
}

template LossStep<float> training_loss_step(const GatedModel<float>&, const Batch<float>&,
                                            const PenaltyConfig&, Rng&, Rng&, Tape<float>&);
template LossStep<double> training_loss_step(const GatedModel<double>&, const Batch<double>&,
                                             const PenaltyConfig&, Rng&, Rng&, Tape<double>&);
template double inject_penalty_gradient(const GatedModel<float>&, const PenaltyGradient&,
                                        Gradients<float>&);
template double inject_penalty_gradient(const GatedModel<double>&, const PenaltyGradient&,
                                        Gradients<double>&);

}  // namespace flopsgate
