#include "flopsgate/gates.hpp"

namespace flopsgate {

std::string to_string(GateGranularity g) {
  return g == GateGranularity::per_output_filter ? "per_output_filter" : "per_input_neuron";
}

GateGranularity granularity_from_string(const std::string& s) {
  if (s == "per_output_filter") return GateGranularity::per_output_filter;
  if (s == "per_input_neuron") return GateGranularity::per_input_neuron;
  throw std::invalid_argument("unknown gate granularity '" + s + "'");
}

std::vector<GateSample> sample_bernoulli(std::span<const double> psi, std::size_t count, Rng& rng) {
  if (count == 0) throw std::invalid_argument("sample_bernoulli: count must be >= 1");
  std::vector<GateSample> out(count);
  for (auto& sample : out) {
    sample.kind = GateSampleKind::bernoulli;
    sample.values.resize(psi.size());
    for (std::size_t j = 0; j < psi.size(); ++j) sample.values[j] = rng.bernoulli(psi[j]) ? 1.0 : 0.0;
  }
  return out;
}

}  // namespace flopsgate
