#pragma once

// Training objective: mean NLL through reparameterized hard concrete gates,
// plus lambda_f * max(0, FLOPs - T) whose log-alpha gradient is estimated with
// the score function over Bernoulli(psi) gate draws.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "flopsgate/flops.hpp"
#include "flopsgate/model.hpp"
#include "flopsgate/rng.hpp"

namespace flopsgate {

enum class Baseline { none, sample_mean };

std::string to_string(Baseline b);
Baseline baseline_from_string(const std::string& s);

struct PenaltyConfig {
  double lambda_f = 0.0;
  std::int64_t target = 0;
  std::size_t sample_count = 1000;
  Baseline baseline = Baseline::none;

  void validate() const;
};

struct ObjectiveReport {
  double nll = 0.0;
  double penalty_value = 0.0;  // lambda_f * mean hinge over the samples
  double sampled_flops_mean = 0.0;
  double sampled_flops_min = 0.0;
  double sampled_flops_max = 0.0;
  double hinge_active_fraction = 0.0;
  double grad_logalpha_norm = 0.0;
};

nlohmann::json to_json(const ObjectiveReport& r);

double hinge_penalty(std::int64_t flops, std::int64_t target);

struct ScoreFunctionEstimate {
  std::vector<double> grad;  // d E[payoff] / d log_alpha, flat gate order
  double payoff_mean = 0.0;
};

/// (1/S) sum_s (f(z_s) - b_s) (z_s - psi) with z_s ~ Bernoulli(psi).
/// Baseline::sample_mean uses the leave-one-out mean of the other S - 1
/// payoffs, which keeps the estimate unbiased.
ScoreFunctionEstimate score_function_gradient(
    std::span<const double> psi, std::size_t samples, Baseline baseline,
    const std::function<double(std::span<const std::uint8_t>)>& payoff, Rng& rng);

struct PenaltyGradient {
  std::vector<std::vector<double>> grad;  // per gated layer
  ObjectiveReport report;                 // penalty and sampled-FLOPs fields
};

PenaltyGradient reinforce_grad_logalpha(const ArchSpec& spec,
                                        const std::vector<std::vector<double>>& psi,
                                        const PenaltyConfig& cfg, Rng& rng);

template <typename T>
PenaltyGradient reinforce_grad_logalpha(const GatedModel<T>& m, const PenaltyConfig& cfg, Rng& rng) {
  return reinforce_grad_logalpha(m.arch(), m.active_probabilities(), cfg, rng);
}

template <typename T>
struct LossStep {
  TrainForward<T> forward;  // loss on the tape
  PenaltyGradient penalty;  // to add onto log-alpha gradients after backward()
};

/// Records the NLL forward on `tape` (gate noise from `gate_rng`) and estimates
/// the penalty gradient (Bernoulli draws from `penalty_rng`).
template <typename T>
LossStep<T> training_loss_step(const GatedModel<T>& m, const Batch<T>& batch, const PenaltyConfig& cfg,
                               Rng& gate_rng, Rng& penalty_rng, Tape<T>& tape);

/// Adds the penalty gradient onto the log-alpha entries of `grads`; returns
/// the L2 norm of the combined log-alpha gradient.
template <typename T>
double inject_penalty_gradient(const GatedModel<T>& m, const PenaltyGradient& penalty,
                               Gradients<T>& grads);

}  // namespace flopsgate
