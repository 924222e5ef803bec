#pragma once

// FLOPs accounting under group sparsity. Counts depend only on which groups are
// active and on layer geometry, never on weight values.
//
//   conv:  (K_w * K_h * C_in_active + 1) * O_w * O_h * active_out
//   dense: (active_in + 1) * active_out
//
// with O = floor((I - K + P_total) / stride) + 1. Pooling, activations and
// residual adds are not counted.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace flopsgate {

struct ConvGeometry {
  std::size_t kernel_w = 0;
  std::size_t kernel_h = 0;
  std::size_t in_channels = 0;
  std::size_t in_w = 0;
  std::size_t in_h = 0;
  std::size_t pad_w = 0;  // total over both sides
  std::size_t pad_h = 0;
  std::size_t stride = 1;
  std::size_t out_channels = 0;

  std::size_t out_w() const;
  std::size_t out_h() const;
};

struct DenseGeometry {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
};

/// One compute layer as the accountant sees it.
///
/// `source` names the upstream compute layer whose active outputs are this
/// layer's inputs. A dense layer fed through a flatten sees
/// `inputs_per_source_unit` inputs per upstream channel, so a dead channel
/// silences that many inputs.
struct ArchLayer {
  std::string name;
  std::variant<ConvGeometry, DenseGeometry> geometry;
  bool gated = false;
  bool penalized = true;
  std::optional<std::size_t> source;
  std::size_t inputs_per_source_unit = 1;

  bool is_conv() const { return std::holds_alternative<ConvGeometry>(geometry); }
  /// conv: one gate per output filter; dense: one per input neuron.
  std::size_t gate_count() const;
};

struct ArchSpec {
  std::string name;
  std::vector<ArchLayer> layers;
  std::size_t classes = 0;

  /// Indices into `layers` of the gated layers, in order.
  std::vector<std::size_t> gated_layers() const;
};

/// Per gated layer (ArchSpec order), one 0/1 entry per gate.
using GateRealization = std::vector<std::vector<std::uint8_t>>;

struct LedgerEntry {
  std::string layer;
  std::string kind;  // "conv" or "dense"
  bool penalized = true;
  // Formula inputs. Conv-only fields are zero for dense entries.
  std::size_t kernel_w = 0, kernel_h = 0;
  std::size_t in_w = 0, in_h = 0;
  std::size_t pad_w = 0, pad_h = 0;
  std::size_t stride = 1;
  std::size_t out_w = 1, out_h = 1;
  std::int64_t active_in = 0;  // C_in_active or I_n_active
  std::int64_t active_out = 0;
  std::int64_t flops = 0;
};

struct FlopsLedger {
  std::vector<LedgerEntry> entries;
  std::int64_t total = 0;
};

std::int64_t conv_flops(std::size_t kernel_w, std::size_t kernel_h, std::int64_t in_channels_active,
                        std::size_t in_w, std::size_t in_h, std::size_t pad_w, std::size_t pad_h,
                        std::size_t stride, std::int64_t active_out);
std::int64_t fc_flops(std::int64_t active_in, std::int64_t active_out);

/// Ledger from effective active-group counts, one per gated layer: active
/// filters for conv layers, active (coupled) inputs for dense layers.
FlopsLedger ledger_from_counts(const ArchSpec& spec, std::span<const std::int64_t> counts,
                               bool penalized_only = false);

/// Collapses a realization to effective counts. A dense input gate counts only
/// if the upstream channel feeding it is also active.
std::vector<std::int64_t> effective_counts(const ArchSpec& spec, const GateRealization& z);

FlopsLedger network_flops(const ArchSpec& spec, const GateRealization& z);

/// All gates on.
FlopsLedger static_flops(const ArchSpec& spec, bool penalized_only = false);

/// Analytic E[FLOPs] under independent Bernoulli(psi) gates.
double expected_flops(const ArchSpec& spec, const std::vector<std::vector<double>>& psi);

/// Precompiled total-FLOPs evaluator for the sampling loop. Gates are passed
/// flattened in ArchSpec order.
class FlopsEvaluator {
 public:
  explicit FlopsEvaluator(const ArchSpec& spec);

  std::size_t gate_total() const noexcept { return gate_total_; }
  std::span<const std::size_t> offsets() const noexcept { return offsets_; }
  std::int64_t total(std::span<const std::uint8_t> flat_gates) const;

 private:
  ArchSpec spec_;
  std::vector<std::size_t> offsets_;  // per gated layer, start in the flat vector
  std::size_t gate_total_ = 0;
};

nlohmann::json to_json(const FlopsLedger& ledger);
std::string format_ledger(const FlopsLedger& ledger);

}  // namespace flopsgate
