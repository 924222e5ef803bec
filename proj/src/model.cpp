#include "flopsgate/model.hpp"

#include <cmath>
#include <type_traits>

namespace flopsgate {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

template <typename T>
Tensor<T> gate_tensor(const std::vector<double>& values) {
  Tensor<T> t({values.size()});
  for (std::size_t i = 0; i < values.size(); ++i) t[i] = static_cast<T>(values[i]);
  return t;
}

template <typename T>
Parameter<T> make_param(std::string name, ParamRole role, Shape shape) {
  Parameter<T> p;
  p.name = std::move(name);
  p.role = role;
  p.value = Tensor<T>(std::move(shape));
  return p;
}

template <typename T>
void he_normal(Parameter<T>& p, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : p.value.values()) v = static_cast<T>(stddev * rng.normal());
}

void require_batch_shape(const Shape& got, const Shape& per_example) {
  Shape want{got.empty() ? 0 : got[0]};
  want.insert(want.end(), per_example.begin(), per_example.end());
  if (got != want) {
    throw ShapeError("batch shape mismatch " + shape_string(got) + " vs model input " +
                     shape_string(want));
  }
}

}  // namespace

template <typename T>
void GatedModel<T>::validate() const {
  Shape cur = input_shape;
  std::size_t heads = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    std::visit(
        overloaded{
            [&](const ConvLayer<T>& l) {
              const auto& w = l.weight.value.shape();
              if (cur.size() != 3 || w.size() != 4 || w[1] != cur[0]) {
                throw ShapeError("layer '" + l.name + "': shape mismatch input " +
                                 shape_string(cur) + " vs kernel " + shape_string(w));
              }
              require_same_shape(l.bias.value.shape(), Shape{w[0]}, l.name.c_str());
              if (l.gates) require_same_shape(l.gates->log_alpha.value.shape(), Shape{w[0]}, l.name.c_str());
              cur = {w[0],
                     kernels::conv_output_extent(cur[1], w[2], 2 * l.params.padding, l.params.stride),
                     kernels::conv_output_extent(cur[2], w[3], 2 * l.params.padding, l.params.stride)};
            },
            [&](const DenseLayer<T>& l) {
              const auto& w = l.weight.value.shape();
              if (!l.input_select.empty() && cur.size() == 1) {
                for (auto c : l.input_select) {
                  if (c >= cur[0]) {
                    throw ShapeError("layer '" + l.name + "': selected input " + std::to_string(c) +
                                     " outside " + shape_string(cur));
                  }
                }
                cur = {l.input_select.size()};
              }
              if (cur.size() != 1 || w.size() != 2 || w[0] != cur[0]) {
                throw ShapeError("layer '" + l.name + "': shape mismatch input " +
                                 shape_string(cur) + " vs weight " + shape_string(w));
              }
              require_same_shape(l.bias.value.shape(), Shape{w[1]}, l.name.c_str());
              if (l.gates) require_same_shape(l.gates->log_alpha.value.shape(), Shape{w[0]}, l.name.c_str());
              cur = {w[1]};
              if (i + 1 == layers.size()) ++heads;
            },
            [&](const MaxPool2x2&) {
              if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) {
                throw ShapeError("maxpool2x2: input " + shape_string(cur));
              }
              cur = {cur[0], cur[1] / 2, cur[2] / 2};
            },
            [&](const Relu&) {},
            [&](const Flatten&) { cur = {shape_numel(cur)}; },
        },
        layers[i]);
  }
  if (heads != 1 || cur != Shape{classes}) {
    throw ShapeError("model '" + name + "' must end in one dense head with " +
                     std::to_string(classes) + " outputs, got " + shape_string(cur));
  }
}

template <typename T>
ArchSpec GatedModel<T>::arch() const {
  validate();
  ArchSpec spec;
  spec.name = name;
  spec.classes = classes;
  Shape cur = input_shape;
  std::optional<std::size_t> last;
  std::size_t unit = 1;
  for (const auto& layer : layers) {
    std::visit(overloaded{
                   [&](const ConvLayer<T>& l) {
                     const auto& w = l.weight.value.shape();
                     ConvGeometry g{w[3], w[2], cur[0], cur[2], cur[1], 2 * l.params.padding,
                                    2 * l.params.padding, l.params.stride, w[0]};
                     spec.layers.push_back({l.name, g, l.gates.has_value(), true, last, 1});
                     last = spec.layers.size() - 1;
                     cur = {w[0], g.out_h(), g.out_w()};
                     unit = 1;
                   },
                   [&](const DenseLayer<T>& l) {
                     const auto& w = l.weight.value.shape();
                     const bool from_conv = last && spec.layers[*last].is_conv();
                     // A column selection breaks the channel-to-input map, so no coupling.
                     const auto source = l.input_select.empty() ? last : std::nullopt;
                     spec.layers.push_back({l.name, DenseGeometry{w[0], w[1]}, l.gates.has_value(),
                                            true, source, from_conv ? unit : 1});
                     last = spec.layers.size() - 1;
                     cur = {w[1]};
                     unit = 1;
                   },
                   [&](const MaxPool2x2&) { cur = {cur[0], cur[1] / 2, cur[2] / 2}; },
                   [&](const Relu&) {},
                   [&](const Flatten&) {
                     unit = cur.size() == 3 ? cur[1] * cur[2] : 1;
                     cur = {shape_numel(cur)};
                   },
               },
               layer);
  }
  return spec;
}

template <typename T>
std::vector<Parameter<T>*> GatedModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& layer : layers) {
    std::visit(overloaded{
                   [&](ConvLayer<T>& l) {
                     out.push_back(&l.weight);
                     out.push_back(&l.bias);
                     if (l.gates) out.push_back(&l.gates->log_alpha);
                   },
                   [&](DenseLayer<T>& l) {
                     out.push_back(&l.weight);
                     out.push_back(&l.bias);
                     if (l.gates) out.push_back(&l.gates->log_alpha);
                   },
                   [](auto&) {},
               },
               layer);
  }
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> GatedModel<T>::parameters() const {
  auto mut = const_cast<GatedModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::vector<GateGroup<T>*> GatedModel<T>::gate_groups() {
  std::vector<GateGroup<T>*> out;
  for (auto& layer : layers) {
    std::visit(overloaded{
                   [&](ConvLayer<T>& l) {
                     if (l.gates) out.push_back(&*l.gates);
                   },
                   [&](DenseLayer<T>& l) {
                     if (l.gates) out.push_back(&*l.gates);
                   },
                   [](auto&) {},
               },
               layer);
  }
  return out;
}

template <typename T>
std::vector<const GateGroup<T>*> GatedModel<T>::gate_groups() const {
  auto mut = const_cast<GatedModel*>(this)->gate_groups();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::vector<std::vector<double>> GatedModel<T>::active_probabilities() const {
  std::vector<std::vector<double>> out;
  for (const auto* g : gate_groups()) out.push_back(gate_active_prob(*g));
  return out;
}

template <typename T>
GateRealization GatedModel<T>::deterministic_support() const {
  GateRealization out;
  for (const auto* g : gate_groups()) {
    const auto det = deterministic_gate(*g);
    std::vector<std::uint8_t> z(det.values.size());
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = det.values[j] > 0.0 ? 1 : 0;
    out.push_back(std::move(z));
  }
  return out;
}

template <typename T>
TrainForward<T> forward_train(const GatedModel<T>& m, const Batch<T>& batch,
                              const std::vector<std::vector<double>>& uniforms, Tape<T>& tape) {
  require_batch_shape(batch.inputs.shape(), m.input_shape);
  const auto groups = m.gate_groups();
  if (uniforms.size() != groups.size()) {
    throw ShapeError("forward_train: noise for " + std::to_string(uniforms.size()) +
                     " gate groups, model has " + std::to_string(groups.size()));
  }
  TrainForward<T> out;
  std::size_t slot = 0;
  auto draw = [&](const GateGroup<T>& g) {
    const auto& u = uniforms[slot++];
    if (u.size() != g.size()) throw ShapeError("forward_train: noise length mismatch for " + g.log_alpha.name);
    Tensor<T> noise({g.size()});
    for (std::size_t j = 0; j < g.size(); ++j) noise[j] = static_cast<T>(logistic_noise(u[j]));
    const Var z = tape.hard_concrete(tape.parameter(g.log_alpha), std::move(noise), g.hyper.beta,
                                     g.hyper.gamma, g.hyper.zeta);
    GateSample sample{{}, GateSampleKind::hard_concrete};
    for (auto v : tape.value(z).values()) sample.values.push_back(static_cast<double>(v));
    out.gates.push_back(std::move(sample));
    return z;
  };

  Var x = tape.constant(batch.inputs);
  for (const auto& layer : m.layers) {
    std::visit(overloaded{
                   [&](const ConvLayer<T>& l) {
                     x = tape.conv2d(x, tape.parameter(l.weight), l.params);
                     x = tape.add_bias(x, tape.parameter(l.bias));
                     if (l.gates) x = tape.scale_channels(x, draw(*l.gates));
                   },
                   [&](const DenseLayer<T>& l) {
                     if (!l.input_select.empty()) x = tape.select_columns(x, l.input_select);
                     if (l.gates) x = tape.scale_channels(x, draw(*l.gates));
                     x = tape.matmul(x, tape.parameter(l.weight));
                     x = tape.add_bias(x, tape.parameter(l.bias));
                   },
                   [&](const MaxPool2x2&) { x = tape.maxpool2x2(x); },
                   [&](const Relu&) { x = tape.relu(x); },
                   [&](const Flatten&) { x = tape.flatten(x); },
               },
               layer);
  }
  out.logits = x;
  out.loss = tape.softmax_cross_entropy(x, batch.labels);
  return out;
}

template <typename T>
TrainForward<T> forward_train(const GatedModel<T>& m, const Batch<T>& batch, Rng& rng, Tape<T>& tape) {
  std::vector<std::vector<double>> uniforms;
  for (const auto* g : m.gate_groups()) {
    std::vector<double> u(g->size());
    for (auto& v : u) v = rng.uniform_open();
    uniforms.push_back(std::move(u));
  }
  return forward_train(m, batch, uniforms, tape);
}

template <typename T>
Tensor<T> forward_eval(const GatedModel<T>& m, const Tensor<T>& inputs) {
  require_batch_shape(inputs.shape(), m.input_shape);
  Tensor<T> x = inputs;
  for (const auto& layer : m.layers) {
    std::visit(overloaded{
                   [&](const ConvLayer<T>& l) {
                     x = kernels::conv2d(x, l.weight.value, l.params).output;
                     x = kernels::add_bias(x, l.bias.value);
                     if (l.gates) x = kernels::scale_channels(x, gate_tensor<T>(deterministic_gate(*l.gates).values));
                   },
                   [&](const DenseLayer<T>& l) {
                     if (!l.input_select.empty()) x = kernels::select_columns(x, l.input_select);
                     if (l.gates) x = kernels::scale_channels(x, gate_tensor<T>(deterministic_gate(*l.gates).values));
                     x = kernels::add_bias(kernels::matmul(x, l.weight.value), l.bias.value);
                   },
                   [&](const MaxPool2x2&) { x = kernels::maxpool2x2(x).output; },
                   [&](const Relu&) { x = kernels::relu(x); },
                   [&](const Flatten&) {
                     const std::size_t n = x.dim(0);
                     x = std::move(x).reshaped({n, n ? x.numel() / n : 0});
                   },
               },
               layer);
  }
  return x;
}

std::vector<int> argmax_rows(std::span<const double> logits, std::size_t classes) {
  std::vector<int> out(classes ? logits.size() / classes : 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < classes; ++j) {
      if (logits[i * classes + j] > logits[i * classes + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
std::vector<int> predict(const GatedModel<T>& m, const Tensor<T>& inputs) {
  const auto logits = forward_eval(m, inputs);
  std::vector<double> values(logits.values().begin(), logits.values().end());
  return argmax_rows(values, m.classes);
}

template <typename T>
GatedModel<T> build_lenet5_caffe(const LenetOptions& opts, Rng& rng) {
  GatedModel<T> m;
  m.name = "lenet5caffe";
  m.input_shape = {1, 28, 28};
  m.classes = 10;

  auto conv = [&](std::string name, std::size_t in, std::size_t out, double droprate) {
    ConvLayer<T> l;
    l.name = name;
    l.weight = make_param<T>(name + ".weight", ParamRole::weight, {out, in, 5, 5});
    l.bias = make_param<T>(name + ".bias", ParamRole::bias, {out});
    he_normal(l.weight, in * 25, rng);
    if (opts.gated) {
      l.gates = make_gate_group<T>(name + ".log_alpha", out, GateGranularity::per_output_filter,
                                   opts.hyper, droprate, opts.init_noise_std, rng);
    }
    return l;
  };
  auto dense = [&](std::string name, std::size_t in, std::size_t out, double droprate) {
    DenseLayer<T> l;
    l.name = name;
    l.weight = make_param<T>(name + ".weight", ParamRole::weight, {in, out});
    l.bias = make_param<T>(name + ".bias", ParamRole::bias, {out});
    he_normal(l.weight, in, rng);
    if (opts.gated) {
      l.gates = make_gate_group<T>(name + ".log_alpha", in, GateGranularity::per_input_neuron,
                                   opts.hyper, droprate, opts.init_noise_std, rng);
    }
    return l;
  };

  m.layers.emplace_back(conv("conv1", 1, 20, opts.droprate_input));
  m.layers.emplace_back(MaxPool2x2{});
  m.layers.emplace_back(conv("conv2", 20, 50, opts.droprate_hidden));
  m.layers.emplace_back(MaxPool2x2{});
  m.layers.emplace_back(Flatten{});
  m.layers.emplace_back(dense("fc1", 800, 500, opts.droprate_hidden));
  m.layers.emplace_back(Relu{});
  m.layers.emplace_back(dense("fc2", 500, 10, opts.droprate_hidden));
  m.validate();
  return m;
}

template <typename T>
GatedModel<T> build_gated_mlp(std::size_t in, std::size_t hidden, std::size_t classes,
                              const LenetOptions& opts, Rng& rng) {
  GatedModel<T> m;
  m.name = "mlp";
  m.input_shape = {in};
  m.classes = classes;
  auto dense = [&](std::string name, std::size_t fan_in, std::size_t fan_out, double droprate) {
    DenseLayer<T> l;
    l.name = name;
    l.weight = make_param<T>(name + ".weight", ParamRole::weight, {fan_in, fan_out});
    l.bias = make_param<T>(name + ".bias", ParamRole::bias, {fan_out});
    he_normal(l.weight, fan_in, rng);
    if (opts.gated) {
      l.gates = make_gate_group<T>(name + ".log_alpha", fan_in, GateGranularity::per_input_neuron,
                                   opts.hyper, droprate, opts.init_noise_std, rng);
    }
    return l;
  };
  m.layers.emplace_back(dense("fc1", in, hidden, opts.droprate_input));
  m.layers.emplace_back(Relu{});
  m.layers.emplace_back(dense("fc2", hidden, classes, opts.droprate_hidden));
  m.validate();
  return m;
}

WideResNetSpec build_wrn_28_10_spec() {
  WideResNetSpec wrn;
  const std::size_t per_group = (wrn.depth - 4) / 6;  // 4 blocks per group
  const std::size_t base[] = {16, 32, 64};
  auto& arch = wrn.arch;
  arch.name = "wrn28x10";
  arch.classes = 10;

  auto conv = [&](std::string name, std::size_t k, std::size_t in_c, std::size_t extent,
                  std::size_t pad_total, std::size_t stride, std::size_t out_c, bool penalized) {
    ConvGeometry g{k, k, in_c, extent, extent, pad_total, pad_total, stride, out_c};
    arch.layers.push_back({std::move(name), g, penalized, penalized, std::nullopt, 1});
    return g.out_w();
  };

  std::size_t channels = 16;
  std::size_t extent = conv("stem", 3, 3, 32, 2, 1, channels, false);
  for (std::size_t group = 0; group < 3; ++group) {
    const std::size_t width = base[group] * wrn.widen;
    wrn.group_widths.push_back(width);
    for (std::size_t b = 0; b < per_group; ++b) {
      const std::size_t stride = (group > 0 && b == 0) ? 2 : 1;
      const std::string prefix = "g" + std::to_string(group + 1) + ".b" + std::to_string(b + 1);
      if (b == 0) conv(prefix + ".shortcut", 1, channels, extent, 0, stride, width, false);
      const std::size_t mid = conv(prefix + ".conv1", 3, channels, extent, 2, stride, width, true);
      conv(prefix + ".conv2", 3, width, mid, 2, 1, width, true);
      extent = mid;
      channels = width;
      ++wrn.blocks;
    }
  }
  arch.layers.push_back({"fc", DenseGeometry{channels, arch.classes}, false, false, std::nullopt, 1});
  return wrn;
}

template class GatedModel<float>;
template class GatedModel<double>;

#define FLOPSGATE_INSTANTIATE_MODEL(T)                                                              \
  template TrainForward<T> forward_train(const GatedModel<T>&, const Batch<T>&, Rng&, Tape<T>&);   \
  template TrainForward<T> forward_train(const GatedModel<T>&, const Batch<T>&,                    \
                                         const std::vector<std::vector<double>>&, Tape<T>&);       \
  template Tensor<T> forward_eval(const GatedModel<T>&, const Tensor<T>&);                         \
  template std::vector<int> predict(const GatedModel<T>&, const Tensor<T>&);                       \
  template GatedModel<T> build_lenet5_caffe(const LenetOptions&, Rng&);                            \
  template GatedModel<T> build_gated_mlp(std::size_t, std::size_t, std::size_t,                    \
                                         const LenetOptions&, Rng&);

FLOPSGATE_INSTANTIATE_MODEL(float)
FLOPSGATE_INSTANTIATE_MODEL(double)

}  // namespace flopsgate
