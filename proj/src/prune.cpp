#include "flopsgate/prune.hpp"

#include <map>
#include <numeric>

namespace flopsgate {
namespace {

template <typename T>
std::vector<double> gate_values_or_ones(const std::optional<GateGroup<T>>& gates, std::size_t n) {
  if (gates) return deterministic_gate(*gates).values;
  return std::vector<double>(n, 1.0);
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Input gates of the next dense layer when only activations sit in between.
template <typename T>
const GateGroup<T>* next_dense_gates(const GatedModel<T>& m, std::size_t from) {
  for (std::size_t i = from + 1; i < m.layers.size(); ++i) {
    if (std::holds_alternative<Relu>(m.layers[i])) continue;
    if (const auto* d = std::get_if<DenseLayer<T>>(&m.layers[i])) {
      return d->gates && d->input_select.empty() ? &*d->gates : nullptr;
    }
    return nullptr;
  }
  return nullptr;
}

}  // namespace

nlohmann::json to_json(const PruneReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.layer},
                      {"granularity", l.granularity},
                      {"groups_before", l.groups_before},
                      {"groups_after", l.kept.size()},
                      {"kept", l.kept},
                      {"gate_values", l.gate_values},
                      {"inputs_before", l.inputs_before},
                      {"inputs_after", l.inputs_after},
                      {"outputs_before", l.outputs_before},
                      {"outputs_after", l.outputs_after}});
  }
  return {{"layers", layers}, {"removed_groups", r.removed_groups}};
}

template <typename T>
PruneResult<T> prune_model(const GatedModel<T>& m) {
  m.validate();
  PruneResult<T> result;
  auto& out = result.model;
  out.name = m.name;
  out.input_shape = m.input_shape;
  out.classes = m.classes;

  Shape cur = m.input_shape;
  std::vector<std::size_t> kept_in = iota(cur[0]);

  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const auto& layer = m.layers[li];
    if (const auto* conv = std::get_if<ConvLayer<T>>(&layer)) {
      const auto& w = conv->weight.value;
      const std::size_t f = w.dim(0), c = w.dim(1), kh = w.dim(2), kw = w.dim(3);
      const auto g = gate_values_or_ones(conv->gates, f);
      PrunedLayer rep{conv->name, to_string(GateGranularity::per_output_filter), f, {}, {}, c,
                      kept_in.size(), f, 0};
      for (std::size_t o = 0; o < f; ++o) {
        if (g[o] > 0.0) {
          rep.kept.push_back(o);
          rep.gate_values.push_back(g[o]);
        }
      }
      if (rep.kept.empty()) throw LayerCollapsed("layer collapsed: '" + conv->name + "' lost every filter");
      rep.outputs_after = rep.kept.size();

      ConvLayer<T> pruned;
      pruned.name = conv->name;
      pruned.params = conv->params;
      pruned.weight = conv->weight;
      pruned.bias = conv->bias;
      pruned.weight.id = next_param_id();
      pruned.bias.id = next_param_id();
      pruned.weight.value = Tensor<T>({rep.kept.size(), kept_in.size(), kh, kw});
      pruned.bias.value = Tensor<T>({rep.kept.size()});
      const std::size_t taps = kh * kw;
      for (std::size_t a = 0; a < rep.kept.size(); ++a) {
        const std::size_t o = rep.kept[a];
        const T scale = static_cast<T>(g[o]);
        for (std::size_t b = 0; b < kept_in.size(); ++b) {
          const T* src = w.data() + (o * c + kept_in[b]) * taps;
          T* dst = pruned.weight.value.data() + (a * kept_in.size() + b) * taps;
          for (std::size_t t = 0; t < taps; ++t) dst[t] = src[t] * scale;
        }
        pruned.bias.value[a] = conv->bias.value[o] * scale;
      }
      if (conv->gates) result.report.removed_groups += f - rep.kept.size();
      kept_in = rep.kept;
      cur = {f, kernels::conv_output_extent(cur[1], kh, 2 * conv->params.padding, conv->params.stride),
             kernels::conv_output_extent(cur[2], kw, 2 * conv->params.padding, conv->params.stride)};
      if (conv->gates) result.report.layers.push_back(std::move(rep));
      out.layers.emplace_back(std::move(pruned));
    } else if (const auto* dense = std::get_if<DenseLayer<T>>(&layer)) {
      const auto& w = dense->weight.value;
      const std::size_t in = w.dim(0), outs = w.dim(1);
      const auto g = gate_values_or_ones(dense->gates, in);
      PrunedLayer rep{dense->name, to_string(GateGranularity::per_input_neuron), in, {}, {}, in, 0,
                      outs, 0};
      // Row r reads incoming feature sel(r); kept_in lists the features the
      // pruned network still produces, in order.
      std::map<std::size_t, std::size_t> position;
      for (std::size_t p = 0; p < kept_in.size(); ++p) position.emplace(kept_in[p], p);
      std::vector<std::size_t> select;
      for (std::size_t r = 0; r < in; ++r) {
        const std::size_t feature = dense->input_select.empty() ? r : dense->input_select[r];
        const auto it = position.find(feature);
        if (g[r] > 0.0 && it != position.end()) {
          rep.kept.push_back(r);
          rep.gate_values.push_back(g[r]);
          select.push_back(it->second);
        }
      }
      if (rep.kept.empty()) throw LayerCollapsed("layer collapsed: '" + dense->name + "' lost every input");
      rep.inputs_after = rep.kept.size();
      bool identity = select.size() == kept_in.size();
      for (std::size_t p = 0; identity && p < select.size(); ++p) identity = select[p] == p;

      std::vector<std::size_t> kept_out;
      if (const auto* next = next_dense_gates(m, li)) {
        const auto gn = deterministic_gate(*next).values;
        for (std::size_t o = 0; o < outs; ++o) {
          if (gn[o] > 0.0) kept_out.push_back(o);
        }
        if (kept_out.empty()) {
          throw LayerCollapsed("layer collapsed: every input gate after '" + dense->name + "' is zero");
        }
      } else {
        kept_out = iota(outs);
      }
      rep.outputs_after = kept_out.size();
      const auto& rows = rep.kept;
      const auto& row_scale = rep.gate_values;

      DenseLayer<T> pruned;
      pruned.name = dense->name;
      pruned.weight = dense->weight;
      pruned.bias = dense->bias;
      pruned.weight.id = next_param_id();
      pruned.bias.id = next_param_id();
      if (!identity) pruned.input_select = std::move(select);
      pruned.weight.value = Tensor<T>({rows.size(), kept_out.size()});
      pruned.bias.value = Tensor<T>({kept_out.size()});
      for (std::size_t a = 0; a < rows.size(); ++a) {
        const T scale = static_cast<T>(row_scale[a]);
        for (std::size_t b = 0; b < kept_out.size(); ++b) {
          pruned.weight.value[a * kept_out.size() + b] = w[rows[a] * outs + kept_out[b]] * scale;
        }
      }
      for (std::size_t b = 0; b < kept_out.size(); ++b) pruned.bias.value[b] = dense->bias.value[kept_out[b]];
      if (dense->gates) result.report.removed_groups += in - rep.kept.size();
      kept_in = kept_out;
      cur = {outs};
      if (dense->gates) result.report.layers.push_back(std::move(rep));
      out.layers.emplace_back(std::move(pruned));
    } else if (std::holds_alternative<Flatten>(layer)) {
      const std::size_t spatial = cur.size() == 3 ? cur[1] * cur[2] : 1;
      std::vector<std::size_t> features;
      features.reserve(kept_in.size() * spatial);
      for (std::size_t ch : kept_in) {
        for (std::size_t s = 0; s < spatial; ++s) features.push_back(ch * spatial + s);
      }
      kept_in = std::move(features);
      cur = {shape_numel(cur)};
      out.layers.emplace_back(Flatten{});
    } else if (std::holds_alternative<MaxPool2x2>(layer)) {
      cur = {cur[0], cur[1] / 2, cur[2] / 2};
      out.layers.emplace_back(MaxPool2x2{});
    } else {
      out.layers.emplace_back(layer);
    }
  }
  out.validate();
  return result;
}

template PruneResult<float> prune_model(const GatedModel<float>&);
template PruneResult<double> prune_model(const GatedModel<double>&);

}  // namespace flopsgate
