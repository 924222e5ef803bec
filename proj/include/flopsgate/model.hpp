#pragma once

// Gated layer graph. Conv gates scale output channels (after the bias, before
// any activation); dense gates scale the layer's input vector.

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "flopsgate/autodiff.hpp"
#include "flopsgate/flops.hpp"
#include "flopsgate/gates.hpp"
#include "flopsgate/rng.hpp"

namespace flopsgate {

template <typename T>
struct ConvLayer {
  std::string name;
  Parameter<T> weight;  // [F, C, K_h, K_w]
  Parameter<T> bias;    // [F]
  std::optional<GateGroup<T>> gates;
  kernels::ConvParams params;
};

template <typename T>
struct DenseLayer {
  std::string name;
  Parameter<T> weight;  // [in, out]
  Parameter<T> bias;    // [out]
  std::optional<GateGroup<T>> gates;
  // Pruned layers gather their surviving input columns first; empty keeps all.
  std::vector<std::size_t> input_select;
};

struct MaxPool2x2 {};
struct Relu {};
struct Flatten {};

template <typename T>
using Layer = std::variant<ConvLayer<T>, DenseLayer<T>, MaxPool2x2, Relu, Flatten>;

template <typename T>
struct Batch {
  Tensor<T> inputs;  // [N, ...input_shape]
  std::vector<int> labels;
};

template <typename T>
class GatedModel {
 public:
  std::string name;
  Shape input_shape;  // per example, e.g. {1, 28, 28}
  std::size_t classes = 0;
  std::vector<Layer<T>> layers;

  /// Walks the layer chain and throws ShapeError on the first incompatibility.
  void validate() const;
  ArchSpec arch() const;

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  std::vector<GateGroup<T>*> gate_groups();
  std::vector<const GateGroup<T>*> gate_groups() const;
  bool has_gates() const { return !gate_groups().empty(); }

  /// psi per gated layer, in ArchSpec order.
  std::vector<std::vector<double>> active_probabilities() const;
  /// Deterministic-gate support (gate > 0) per gated layer.
  GateRealization deterministic_support() const;
};

template <typename T>
struct TrainForward {
  Var loss;    // mean NLL
  Var logits;
  std::vector<GateSample> gates;  // the hard concrete draw used, per gated layer
};

/// One hard concrete draw per gate for the whole minibatch.
template <typename T>
TrainForward<T> forward_train(const GatedModel<T>& m, const Batch<T>& batch, Rng& rng, Tape<T>& tape);

/// Same, with the uniform noise supplied per gated layer (shared-noise checks).
template <typename T>
TrainForward<T> forward_train(const GatedModel<T>& m, const Batch<T>& batch,
                              const std::vector<std::vector<double>>& uniforms, Tape<T>& tape);

/// Logits with every gate replaced by its deterministic value. No tape.
template <typename T>
Tensor<T> forward_eval(const GatedModel<T>& m, const Tensor<T>& inputs);

std::vector<int> argmax_rows(std::span<const double> logits, std::size_t classes);

template <typename T>
std::vector<int> predict(const GatedModel<T>& m, const Tensor<T>& inputs);

struct LenetOptions {
  GateHyper hyper;
  double droprate_input = 0.2;   // conv1, next to the image
  double droprate_hidden = 0.5;
  double init_noise_std = 0.01;
  bool gated = true;
};

/// conv 20@5x5 -> maxpool -> conv 50@5x5 -> maxpool -> flatten(800) -> dense 500
/// -> relu -> dense 10, input 1x28x28. Gates: 20, 50, 800, 500.
template <typename T>
GatedModel<T> build_lenet5_caffe(const LenetOptions& opts, Rng& rng);

/// dense in->hidden -> relu -> dense hidden->classes with input gates on both.
template <typename T>
GatedModel<T> build_gated_mlp(std::size_t in, std::size_t hidden, std::size_t classes,
                              const LenetOptions& opts, Rng& rng);

/// WRN-28-10 as an accounting description: 12 residual blocks in three groups.
struct WideResNetSpec {
  std::size_t depth = 28;
  std::size_t widen = 10;
  std::size_t blocks = 0;
  std::vector<std::size_t> group_widths;
  ArchSpec arch;  // penalized flag marks the non-residual block convs
};

WideResNetSpec build_wrn_28_10_spec();

extern template class GatedModel<float>;
extern template class GatedModel<double>;

}  // namespace flopsgate
