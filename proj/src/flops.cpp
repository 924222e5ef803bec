#include "flopsgate/flops.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "flopsgate/kernels.hpp"
#include "flopsgate/tensor.hpp"

namespace flopsgate {

std::size_t ConvGeometry::out_w() const {
  return kernels::conv_output_extent(in_w, kernel_w, pad_w, stride);
}

std::size_t ConvGeometry::out_h() const {
  return kernels::conv_output_extent(in_h, kernel_h, pad_h, stride);
}

std::size_t ArchLayer::gate_count() const {
  if (!gated) return 0;
  if (const auto* c = std::get_if<ConvGeometry>(&geometry)) return c->out_channels;
  return std::get<DenseGeometry>(geometry).in_features;
}

std::vector<std::size_t> ArchSpec::gated_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].gated) out.push_back(i);
  }
  return out;
}

std::int64_t conv_flops(std::size_t kernel_w, std::size_t kernel_h, std::int64_t in_channels_active,
                        std::size_t in_w, std::size_t in_h, std::size_t pad_w, std::size_t pad_h,
                        std::size_t stride, std::int64_t active_out) {
  if (in_channels_active < 0 || active_out < 0) {
    throw std::invalid_argument("conv_flops: active counts must be non-negative");
  }
  const auto ow = static_cast<std::int64_t>(kernels::conv_output_extent(in_w, kernel_w, pad_w, stride));
  const auto oh = static_cast<std::int64_t>(kernels::conv_output_extent(in_h, kernel_h, pad_h, stride));
  const auto taps = static_cast<std::int64_t>(kernel_w * kernel_h);
  return (taps * in_channels_active + 1) * ow * oh * active_out;
}

std::int64_t fc_flops(std::int64_t active_in, std::int64_t active_out) {
  if (active_in < 0 || active_out < 0) {
    throw std::invalid_argument("fc_flops: active counts must be non-negative");
  }
  return (active_in + 1) * active_out;
}

namespace {

// Per-layer active input/output counts given effective counts per gated layer.
// N is std::int64_t for realizations and double for expectations; the
// expectation factorizes because a layer's input and output counts depend on
// disjoint, independent gate sets.
template <typename N>
struct LayerCounts {
  N in{};
  N out{};
};

template <typename N>
std::vector<LayerCounts<N>> layer_counts(const ArchSpec& spec, std::span<const N> counts) {
  const auto gated = spec.gated_layers();
  if (counts.size() != gated.size()) {
    throw ShapeError("expected " + std::to_string(gated.size()) + " gated-layer counts, got " +
                     std::to_string(counts.size()));
  }
  std::vector<std::optional<std::size_t>> slot(spec.layers.size());
  for (std::size_t k = 0; k < gated.size(); ++k) slot[gated[k]] = k;

  // A dense layer's outputs are only as wide as the next gated dense layer's active inputs.
  std::vector<std::optional<std::size_t>> consumer(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.source && !l.is_conv() && l.gated) consumer[*l.source] = i;
  }

  std::vector<LayerCounts<N>> out(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.source && *l.source >= i) {
      throw std::invalid_argument("layer '" + l.name + "' reads from a later layer");
    }
    if (const auto* c = std::get_if<ConvGeometry>(&l.geometry)) {
      out[i].in = l.source ? out[*l.source].out : static_cast<N>(c->in_channels);
      out[i].out = slot[i] ? counts[*slot[i]] : static_cast<N>(c->out_channels);
    } else {
      const auto& d = std::get<DenseGeometry>(l.geometry);
      if (slot[i]) {
        out[i].in = counts[*slot[i]];
      } else if (l.source) {
        out[i].in = out[*l.source].out * static_cast<N>(l.inputs_per_source_unit);
      } else {
        out[i].in = static_cast<N>(d.in_features);
      }
      out[i].out = consumer[i] ? counts[*slot[*consumer[i]]] : static_cast<N>(d.out_features);
    }
  }
  return out;
}

template <typename N>
N layer_value(const ArchLayer& l, const LayerCounts<N>& c) {
  if (const auto* g = std::get_if<ConvGeometry>(&l.geometry)) {
    const auto spatial = static_cast<N>(g->out_w() * g->out_h());
    return (static_cast<N>(g->kernel_w * g->kernel_h) * c.in + N(1)) * spatial * c.out;
  }
  return (c.in + N(1)) * c.out;
}

// Coupled count for one gated layer; `gate` maps (layer slot, index) to a 0/1 or probability.
template <typename N, typename GateFn>
N coupled_count(const ArchSpec& spec, std::size_t layer, std::size_t k,
                const std::vector<std::optional<std::size_t>>& slot, GateFn gate) {
  const auto& l = spec.layers[layer];
  const std::size_t n = l.gate_count();
  std::optional<std::size_t> upstream;
  if (!l.is_conv() && l.source && spec.layers[*l.source].is_conv()) upstream = slot[*l.source];
  N acc{};
  for (std::size_t j = 0; j < n; ++j) {
    N v = gate(k, j);
    if (upstream) v *= gate(*upstream, j / l.inputs_per_source_unit);
    acc += v;
  }
  return acc;
}

std::vector<std::optional<std::size_t>> gate_slots(const ArchSpec& spec) {
  std::vector<std::optional<std::size_t>> slot(spec.layers.size());
  const auto gated = spec.gated_layers();
  for (std::size_t k = 0; k < gated.size(); ++k) slot[gated[k]] = k;
  return slot;
}

void check_flatten_map(const ArchSpec& spec, std::size_t layer) {
  const auto& l = spec.layers[layer];
  if (l.is_conv() || !l.gated || !l.source || !spec.layers[*l.source].is_conv()) return;
  const auto& src = std::get<ConvGeometry>(spec.layers[*l.source].geometry);
  if (src.out_channels * l.inputs_per_source_unit != l.gate_count()) {
    throw ShapeError("layer '" + l.name + "': " + std::to_string(l.gate_count()) +
                     " input gates do not tile " + std::to_string(src.out_channels) +
                     " upstream channels");
  }
}

}  // namespace

FlopsLedger ledger_from_counts(const ArchSpec& spec, std::span<const std::int64_t> counts,
                               bool penalized_only) {
  for (auto c : counts) {
    if (c < 0) throw std::invalid_argument("active counts must be non-negative");
  }
  const auto per_layer = layer_counts<std::int64_t>(spec, counts);
  FlopsLedger ledger;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (penalized_only && !l.penalized) continue;
    LedgerEntry e;
    e.layer = l.name;
    e.penalized = l.penalized;
    e.active_in = per_layer[i].in;
    e.active_out = per_layer[i].out;
    if (const auto* g = std::get_if<ConvGeometry>(&l.geometry)) {
      e.kind = "conv";
      e.kernel_w = g->kernel_w;
      e.kernel_h = g->kernel_h;
      e.in_w = g->in_w;
      e.in_h = g->in_h;
      e.pad_w = g->pad_w;
      e.pad_h = g->pad_h;
      e.stride = g->stride;
      e.out_w = g->out_w();
      e.out_h = g->out_h();
      e.flops = conv_flops(g->kernel_w, g->kernel_h, e.active_in, g->in_w, g->in_h, g->pad_w,
                           g->pad_h, g->stride, e.active_out);
    } else {
      e.kind = "dense";
      e.flops = fc_flops(e.active_in, e.active_out);
    }
    ledger.total += e.flops;
    ledger.entries.push_back(std::move(e));
  }
  return ledger;
}

std::vector<std::int64_t> effective_counts(const ArchSpec& spec, const GateRealization& z) {
  const auto gated = spec.gated_layers();
  if (z.size() != gated.size()) {
    throw ShapeError("realization covers " + std::to_string(z.size()) + " layers, model has " +
                     std::to_string(gated.size()) + " gated layers");
  }
  for (std::size_t k = 0; k < gated.size(); ++k) {
    if (z[k].size() != spec.layers[gated[k]].gate_count()) {
      throw ShapeError("realization for layer '" + spec.layers[gated[k]].name + "' has " +
                       std::to_string(z[k].size()) + " entries, expected " +
                       std::to_string(spec.layers[gated[k]].gate_count()));
    }
    for (auto v : z[k]) {
      if (v > 1) throw std::invalid_argument("gate realization entries must be 0 or 1");
    }
    check_flatten_map(spec, gated[k]);
  }
  const auto slot = gate_slots(spec);
  std::vector<std::int64_t> counts(gated.size());
  for (std::size_t k = 0; k < gated.size(); ++k) {
    counts[k] = coupled_count<std::int64_t>(spec, gated[k], k, slot, [&](std::size_t s, std::size_t j) {
      return static_cast<std::int64_t>(z[s][j]);
    });
  }
  return counts;
}

FlopsLedger network_flops(const ArchSpec& spec, const GateRealization& z) {
  const auto counts = effective_counts(spec, z);
  return ledger_from_counts(spec, counts);
}

FlopsLedger static_flops(const ArchSpec& spec, bool penalized_only) {
  GateRealization ones;
  for (auto i : spec.gated_layers()) ones.emplace_back(spec.layers[i].gate_count(), 1);
  const auto counts = effective_counts(spec, ones);
  return ledger_from_counts(spec, counts, penalized_only);
}

double expected_flops(const ArchSpec& spec, const std::vector<std::vector<double>>& psi) {
  const auto gated = spec.gated_layers();
  if (psi.size() != gated.size()) {
    throw ShapeError("psi covers " + std::to_string(psi.size()) + " layers, model has " +
                     std::to_string(gated.size()) + " gated layers");
  }
  for (std::size_t k = 0; k < gated.size(); ++k) {
    if (psi[k].size() != spec.layers[gated[k]].gate_count()) {
      throw ShapeError("psi for layer '" + spec.layers[gated[k]].name + "' has wrong length");
    }
    check_flatten_map(spec, gated[k]);
  }
  const auto slot = gate_slots(spec);
  std::vector<double> counts(gated.size());
  for (std::size_t k = 0; k < gated.size(); ++k) {
    counts[k] = coupled_count<double>(spec, gated[k], k, slot,
                                      [&](std::size_t s, std::size_t j) { return psi[s][j]; });
  }
  const auto per_layer = layer_counts<double>(spec, counts);
  double total = 0.0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) total += layer_value(spec.layers[i], per_layer[i]);
  return total;
}

FlopsEvaluator::FlopsEvaluator(const ArchSpec& spec) : spec_(spec) {
  for (auto i : spec_.gated_layers()) {
    check_flatten_map(spec_, i);
    offsets_.push_back(gate_total_);
    gate_total_ += spec_.layers[i].gate_count();
  }
}

std::int64_t FlopsEvaluator::total(std::span<const std::uint8_t> flat_gates) const {
  if (flat_gates.size() != gate_total_) {
    throw ShapeError("flat realization has " + std::to_string(flat_gates.size()) +
                     " entries, expected " + std::to_string(gate_total_));
  }
  const auto gated = spec_.gated_layers();
  const auto slot = gate_slots(spec_);
  std::vector<std::int64_t> counts(gated.size());
  for (std::size_t k = 0; k < gated.size(); ++k) {
    counts[k] = coupled_count<std::int64_t>(spec_, gated[k], k, slot, [&](std::size_t s, std::size_t j) {
      return static_cast<std::int64_t>(flat_gates[offsets_[s] + j]);
    });
  }
  const auto per_layer = layer_counts<std::int64_t>(spec_, counts);
  std::int64_t total = 0;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    total += layer_value(spec_.layers[i], per_layer[i]);
  }
  return total;
}

nlohmann::json to_json(const FlopsLedger& ledger) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& e : ledger.entries) {
    nlohmann::json inputs;
    if (e.kind == "conv") {
      inputs = {{"K_w", e.kernel_w}, {"K_h", e.kernel_h}, {"C_in_active", e.active_in},
                {"I_w", e.in_w},     {"I_h", e.in_h},     {"P_w", e.pad_w},
                {"P_h", e.pad_h},    {"stride", e.stride}, {"O_w", e.out_w},
                {"O_h", e.out_h}};
    } else {
      inputs = {{"I_n_active", e.active_in}};
    }
    layers.push_back({{"layer", e.layer},
                      {"kind", e.kind},
                      {"penalized", e.penalized},
                      {"inputs", inputs},
                      {"active_out", e.active_out},
                      {"flops", e.flops}});
  }
  return {{"layers", layers}, {"total", ledger.total}};
}

std::string format_ledger(const FlopsLedger& ledger) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "layer" << std::setw(7) << "kind" << std::right
     << std::setw(8) << "kernel" << std::setw(8) << "input" << std::setw(6) << "pad"
     << std::setw(7) << "stride" << std::setw(10) << "in_act" << std::setw(10) << "out_act"
     << std::setw(16) << "flops" << "\n";
  for (const auto& e : ledger.entries) {
    const bool conv = e.kind == "conv";
    os << std::left << std::setw(16) << e.layer << std::setw(7) << e.kind << std::right
       << std::setw(8) << (conv ? std::to_string(e.kernel_w) + "x" + std::to_string(e.kernel_h) : "-")
       << std::setw(8) << (conv ? std::to_string(e.in_w) + "x" + std::to_string(e.in_h) : "-")
       << std::setw(6) << (conv ? std::to_string(e.pad_w) + "," + std::to_string(e.pad_h) : "-")
       << std::setw(7) << (conv ? std::to_string(e.stride) : "-") << std::setw(10) << e.active_in
       << std::setw(10) << e.active_out << std::setw(16) << e.flops << "\n";
  }
  os << std::left << std::setw(72) << "total" << std::right << std::setw(16) << ledger.total << "\n";
  return os.str();
}

}  // namespace flopsgate
