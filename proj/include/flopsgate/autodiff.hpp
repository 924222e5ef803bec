#pragma once

// Minimal reverse-mode differentiation over dense tensors. A Tape records one
// forward pass; backward() may run once per recording, after which the tape
// must be cleared.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flopsgate/kernels.hpp"
#include "flopsgate/tensor.hpp"

namespace flopsgate {

using ParamId = std::uint64_t;

/// Process-wide unique parameter identity.
ParamId next_param_id();

enum class ParamRole { weight, bias, log_alpha };

std::string to_string(ParamRole role);

template <typename T>
struct Parameter {
  ParamId id = next_param_id();
  std::string name;
  ParamRole role = ParamRole::weight;
  Tensor<T> value;
};

template <typename T>
using Gradients = std::map<ParamId, Tensor<T>>;

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Var {
  std::size_t index = 0;
};

template <typename T>
class Tape {
 public:
  Var constant(Tensor<T> value);
  Var parameter(const Parameter<T>& p);

  Var matmul(Var a, Var b);
  Var conv2d(Var x, Var w, kernels::ConvParams p);
  Var maxpool2x2(Var x);
  Var relu(Var x);
  Var add_bias(Var x, Var b);
  Var scale_channels(Var x, Var gates);
  Var flatten(Var x);
  Var select_columns(Var x, std::vector<std::size_t> cols);
  /// Mean negative log-likelihood over the batch.
  Var softmax_cross_entropy(Var logits, std::vector<int> labels);
  /// Hard concrete gate: clip((zeta - gamma) * sigmoid((log_alpha + noise) / beta) + gamma, 0, 1)
  /// where noise = log u - log(1 - u) is supplied by the caller.
  Var hard_concrete(Var log_alpha, Tensor<T> logistic_noise, double beta, double gamma, double zeta);
  /// sum_i x_i * w_i; used to project tensors onto scalars.
  Var weighted_sum(Var x, Tensor<T> weights);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.index).value; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradients for every parameter leaf recorded on this tape; leaves the loss
  /// does not reach receive zeros.
  Gradients<T> backward(Var loss);
  void clear();

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    std::function<void(Tape&, const Node&, const Tensor<T>&)> backward;
    std::optional<ParamId> param;
    bool requires_grad = false;
  };

  Var push(Node node);
  bool needs_grad(std::size_t index) const { return nodes_[index].requires_grad; }
  void accumulate(std::size_t index, Tensor<T> grad);
  void require_open() const;

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool consumed_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace flopsgate
