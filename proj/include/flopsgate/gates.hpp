#pragma once

// Hard concrete gates. A gate group holds one log alpha per parameter group
// (a conv output filter or a dense input neuron); beta, gamma and zeta are
// fixed hyperparameters.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flopsgate/autodiff.hpp"
#include "flopsgate/rng.hpp"

namespace flopsgate {

struct GateHyper {
  double beta = 2.0 / 3.0;
  double gamma = -0.1;
  double zeta = 1.1;

  /// gamma < 0 < 1 < zeta and beta > 0.
  void validate() const {
    if (!(gamma < 0.0 && zeta > 1.0)) {
      throw std::invalid_argument("hard concrete stretch requires gamma < 0 and zeta > 1");
    }
    if (!(beta > 0.0)) throw std::invalid_argument("hard concrete temperature beta must be > 0");
  }
};

enum class GateGranularity { per_output_filter, per_input_neuron };

std::string to_string(GateGranularity g);
GateGranularity granularity_from_string(const std::string& s);

template <typename T>
struct GateGroup {
  Parameter<T> log_alpha;
  GateHyper hyper;
  GateGranularity granularity = GateGranularity::per_output_filter;

  std::size_t size() const noexcept { return log_alpha.value.numel(); }
};

enum class GateSampleKind { hard_concrete, bernoulli, deterministic };

struct GateSample {
  std::vector<double> values;
  GateSampleKind kind = GateSampleKind::hard_concrete;
};

inline constexpr double kUniformClamp = 1e-7;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double clamp_uniform(double u) {
  return std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
}

/// log u - log(1 - u) after clamping u into (0, 1).
inline double logistic_noise(double u) {
  const double c = clamp_uniform(u);
  return std::log(c) - std::log1p(-c);
}

inline double hard_concrete_value(double log_alpha, double u, const GateHyper& h) {
  const double s = sigmoid((log_alpha + logistic_noise(u)) / h.beta);
  return std::clamp((h.zeta - h.gamma) * s + h.gamma, 0.0, 1.0);
}

/// P(hard concrete gate > 0) = sigmoid(log_alpha - beta * log(-gamma / zeta)).
inline double active_probability(double log_alpha, const GateHyper& h) {
  return sigmoid(log_alpha - h.beta * std::log(-h.gamma / h.zeta));
}

inline double deterministic_value(double log_alpha, const GateHyper& h) {
  return std::clamp(sigmoid(log_alpha) * (h.zeta - h.gamma) + h.gamma, 0.0, 1.0);
}

/// log alpha at which the deterministic gate reaches exactly zero: sigmoid = -gamma / (zeta - gamma).
inline double deterministic_zero_threshold(const GateHyper& h) {
  const double s = -h.gamma / (h.zeta - h.gamma);
  return std::log(s) - std::log1p(-s);
}

template <typename T>
GateSample sample_hard_concrete(const GateGroup<T>& g, std::span<const double> uniform) {
  if (uniform.size() != g.size()) {
    throw ShapeError("sample_hard_concrete: " + std::to_string(uniform.size()) +
                     " noise values for " + std::to_string(g.size()) + " gates");
  }
  GateSample out{std::vector<double>(g.size()), GateSampleKind::hard_concrete};
  for (std::size_t j = 0; j < g.size(); ++j) {
    out.values[j] = hard_concrete_value(g.log_alpha.value[j], uniform[j], g.hyper);
  }
  return out;
}

template <typename T>
std::vector<double> gate_active_prob(const GateGroup<T>& g) {
  std::vector<double> psi(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) psi[j] = active_probability(g.log_alpha.value[j], g.hyper);
  return psi;
}

/// `count` independent Bernoulli(psi) realizations.
std::vector<GateSample> sample_bernoulli(std::span<const double> psi, std::size_t count, Rng& rng);

template <typename T>
std::vector<GateSample> sample_bernoulli(const GateGroup<T>& g, std::size_t count, Rng& rng) {
  const auto psi = gate_active_prob(g);
  return sample_bernoulli(psi, count, rng);
}

template <typename T>
GateSample deterministic_gate(const GateGroup<T>& g) {
  GateSample out{std::vector<double>(g.size()), GateSampleKind::deterministic};
  for (std::size_t j = 0; j < g.size(); ++j) {
    out.values[j] = deterministic_value(g.log_alpha.value[j], g.hyper);
  }
  return out;
}

/// log alpha = log(1 - p) - log(p) + N(0, noise_std^2), where p is the dropout
/// rate the gate replaces.
template <typename T>
GateGroup<T> make_gate_group(std::string name, std::size_t count, GateGranularity granularity,
                             const GateHyper& hyper, double droprate, double noise_std, Rng& rng) {
  hyper.validate();
  if (!(droprate > 0.0 && droprate < 1.0)) {
    throw std::invalid_argument("initial dropout rate must lie in (0, 1)");
  }
  GateGroup<T> g;
  g.log_alpha.name = std::move(name);
  g.log_alpha.role = ParamRole::log_alpha;
  g.log_alpha.value = Tensor<T>({count});
  const double mean = std::log1p(-droprate) - std::log(droprate);
  for (std::size_t j = 0; j < count; ++j) {
    g.log_alpha.value[j] = static_cast<T>(mean + noise_std * rng.normal());
  }
  g.hyper = hyper;
  g.granularity = granularity;
  return g;
}

}  // namespace flopsgate
