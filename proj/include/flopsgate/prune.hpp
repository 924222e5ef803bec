#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "flopsgate/model.hpp"

namespace flopsgate {

class LayerCollapsed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PrunedLayer {
  std::string layer;
  std::string granularity;             // groups this layer's gates covered
  std::size_t groups_before = 0;
  std::vector<std::size_t> kept;       // surviving group indices, original numbering
  std::vector<double> gate_values;     // deterministic gate folded into each kept group
  std::size_t inputs_before = 0;
  std::size_t inputs_after = 0;
  std::size_t outputs_before = 0;
  std::size_t outputs_after = 0;
};

struct PruneReport {
  std::vector<PrunedLayer> layers;
  std::size_t removed_groups = 0;
};

nlohmann::json to_json(const PruneReport& r);

template <typename T>
struct PruneResult {
  GatedModel<T> model;  // no gates left
  PruneReport report;
};

/// Removes every group whose deterministic gate is exactly zero and folds the
/// surviving gate values into the weights. Conv filters take their downstream
/// input-channel slices (and, through a flatten, the matching dense inputs)
/// with them; a dense output feeding only zeroed gates is dropped as well.
/// Throws LayerCollapsed if a layer loses every group.
template <typename T>
PruneResult<T> prune_model(const GatedModel<T>& m);

}  // namespace flopsgate
