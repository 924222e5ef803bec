#include "flopsgate/autodiff.hpp"

#include <atomic>
#include <cmath>
#include <memory>

namespace flopsgate {

ParamId next_param_id() {
  static std::atomic<ParamId> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

std::string to_string(ParamRole role) {
  switch (role) {
    case ParamRole::weight: return "weight";
    case ParamRole::bias: return "bias";
    case ParamRole::log_alpha: return "log_alpha";
  }
  return "unknown";
}

template <typename T>
void Tape<T>::require_open() const {
  if (consumed_) throw TapeError("tape already consumed by backward(); clear() before recording");
}

template <typename T>
Var Tape<T>::push(Node node) {
  require_open();
  for (std::size_t in : node.inputs) node.requires_grad = node.requires_grad || needs_grad(in);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
void Tape<T>::accumulate(std::size_t index, Tensor<T> grad) {
  if (!needs_grad(index)) return;
  auto& slot = grads_[index];
  if (slot.shape().empty()) {
    slot = std::move(grad);
  } else {
    slot.add_inplace(grad);
  }
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  return push(Node{std::move(value), {}, nullptr, std::nullopt, false});
}

template <typename T>
Var Tape<T>::parameter(const Parameter<T>& p) {
  return push(Node{p.value, {}, nullptr, p.id, true});
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  Node node{kernels::matmul(value(a), value(b)), {a.index, b.index}, nullptr, std::nullopt, false};
  node.backward = [](Tape& tape, const Node& self, const Tensor<T>& grad) {
    const auto ia = self.inputs[0], ib = self.inputs[1];
    if (tape.needs_grad(ia)) tape.accumulate(ia, kernels::matmul_a_bt(grad, tape.value(Var{ib})));
    if (tape.needs_grad(ib)) tape.accumulate(ib, kernels::matmul_at_b(tape.value(Var{ia}), grad));
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::conv2d(Var x, Var w, kernels::ConvParams p) {
  auto fwd = kernels::conv2d(value(x), value(w), p);
  auto columns = std::make_shared<Tensor<T>>(std::move(fwd.columns));
  Node node{std::move(fwd.output), {x.index, w.index}, nullptr, std::nullopt, false};
  node.backward = [columns, p](Tape& tape, const Node& self, const Tensor<T>& grad) {
    const auto ix = self.inputs[0], iw = self.inputs[1];
    const auto& kernel = tape.value(Var{iw});
    const auto& input_shape = tape.value(Var{ix}).shape();
    if (tape.needs_grad(ix)) {
      auto back = kernels::conv2d_backward(input_shape, kernel, *columns, grad, p);
      tape.accumulate(ix, std::move(back.grad_input));
      tape.accumulate(iw, std::move(back.grad_weight));
    } else if (tape.needs_grad(iw)) {
      // Weight gradient only: skip the col2im pass over the input.
      const std::size_t f = grad.dim(1), spatial = grad.dim(2) * grad.dim(3), n = grad.dim(0);
      Tensor<T> g({f, n * spatial});
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t o = 0; o < f; ++o) {
          std::copy(grad.data() + (b * f + o) * spatial, grad.data() + (b * f + o + 1) * spatial,
                    g.data() + o * n * spatial + b * spatial);
        }
      }
      tape.accumulate(iw, kernels::matmul_a_bt(g, *columns).reshaped(kernel.shape()));
    }
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::maxpool2x2(Var x) {
  auto fwd = kernels::maxpool2x2(value(x));
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(std::move(fwd.argmax));
  Node node{std::move(fwd.output), {x.index}, nullptr, std::nullopt, false};
  node.backward = [argmax](Tape& tape, const Node& self, const Tensor<T>& grad) {
    const auto ix = self.inputs[0];
    tape.accumulate(ix, kernels::maxpool2x2_backward(tape.value(Var{ix}).shape(), *argmax, grad));
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::relu(Var x) {
  Node node{kernels::relu(value(x)), {x.index}, nullptr, std::nullopt, false};
  node.backward = [](Tape& tape, const Node& self, const Tensor<T>& grad) {
    const auto ix = self.inputs[0];
    tape.accumulate(ix, kernels::relu_backward(tape.value(Var{ix}), grad));
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::add_bias(Var x, Var b) {
  Node node{kernels::add_bias(value(x), value(b)), {x.index, b.index}, nullptr, std::nullopt, false};
  node.backward = [](Tape& tape, const Node& self, const Tensor<T>& grad) {
    if (tape.needs_grad(self.inputs[0])) tape.accumulate(self.inputs[0], grad);
    if (tape.needs_grad(self.inputs[1])) {
      tape.accumulate(self.inputs[1], kernels::reduce_to_channels(grad));
    }
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::scale_channels(Var x, Var gates) {
  Node node{kernels::scale_channels(value(x), value(gates)), {x.index, gates.index}, nullptr,
            std::nullopt, false};
  node.backward = [](Tape& tape, const Node& self, const Tensor<T>& grad) {
    const auto ix = self.inputs[0], ig = self.inputs[1];
    if (tape.needs_grad(ix)) tape.accumulate(ix, kernels::scale_channels(grad, tape.value(Var{ig})));
    if (tape.needs_grad(ig)) {
      tape.accumulate(ig, kernels::reduce_to_channels(grad, &tape.value(Var{ix})));
    }
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::flatten(Var x) {
  const auto& v = value(x);
  if (v.rank() < 2) throw ShapeError("flatten: expected rank >= 2, got " + shape_string(v.shape()));
  const std::size_t n = v.dim(0);
  Node node{v.reshaped({n, n ? v.numel() / n : 0}), {x.index}, nullptr, std::nullopt, false};
  node.backward = [](Tape& tape, const Node& self, const Tensor<T>& grad) {
    const auto ix = self.inputs[0];
    tape.accumulate(ix, grad.reshaped(tape.value(Var{ix}).shape()));
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::select_columns(Var x, std::vector<std::size_t> cols) {
  Node node{kernels::select_columns(value(x), cols), {x.index}, nullptr, std::nullopt, false};
  node.backward = [cols = std::move(cols)](Tape& tape, const Node& self, const Tensor<T>& grad) {
    const auto ix = self.inputs[0];
    tape.accumulate(ix, kernels::select_columns_backward(grad, cols, tape.value(Var{ix}).dim(1)));
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::softmax_cross_entropy(Var logits, std::vector<int> labels) {
  auto fwd = kernels::softmax_cross_entropy(value(logits), labels);
  auto saved = std::make_shared<std::pair<Tensor<T>, std::vector<int>>>(std::move(fwd.softmax),
                                                                        std::move(labels));
  Node node{Tensor<T>({1}, std::vector<T>{fwd.loss}), {logits.index}, nullptr, std::nullopt, false};
  node.backward = [saved](Tape& tape, const Node& self, const Tensor<T>& grad) {
    tape.accumulate(self.inputs[0],
                    kernels::softmax_cross_entropy_backward(saved->first, saved->second, grad[0]));
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::hard_concrete(Var log_alpha, Tensor<T> logistic_noise, double beta, double gamma,
                           double zeta) {
  const auto& la = value(log_alpha);
  require_same_shape(la.shape(), logistic_noise.shape(), "hard_concrete noise");
  Tensor<T> z(la.shape());
  // dz/dlog_alpha per entry; zero where the stretched sample is clipped.
  auto slope = std::make_shared<Tensor<T>>(la.shape());
  const double stretch = zeta - gamma;
  for (std::size_t i = 0; i < la.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-(static_cast<double>(la[i]) + logistic_noise[i]) / beta));
    const double stretched = stretch * s + gamma;
    if (stretched <= 0.0) {
      z[i] = T(0);
    } else if (stretched >= 1.0) {
      z[i] = T(1);
    } else {
      z[i] = static_cast<T>(stretched);
      (*slope)[i] = static_cast<T>(stretch * s * (1.0 - s) / beta);
    }
  }
  Node node{std::move(z), {log_alpha.index}, nullptr, std::nullopt, false};
  node.backward = [slope](Tape& tape, const Node& self, const Tensor<T>& grad) {
    Tensor<T> g(grad.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = grad[i] * (*slope)[i];
    tape.accumulate(self.inputs[0], std::move(g));
  };
  return push(std::move(node));
}

template <typename T>
Var Tape<T>::weighted_sum(Var x, Tensor<T> weights) {
  const auto& v = value(x);
  require_same_shape(v.shape(), weights.shape(), "weighted_sum");
  double acc = 0.0;
  for (std::size_t i = 0; i < v.numel(); ++i) acc += static_cast<double>(v[i]) * weights[i];
  auto saved = std::make_shared<Tensor<T>>(std::move(weights));
  Node node{Tensor<T>({1}, std::vector<T>{static_cast<T>(acc)}), {x.index}, nullptr, std::nullopt,
            false};
  node.backward = [saved](Tape& tape, const Node& self, const Tensor<T>& grad) {
    Tensor<T> g(saved->shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = (*saved)[i] * grad[0];
    tape.accumulate(self.inputs[0], std::move(g));
  };
  return push(std::move(node));
}

template <typename T>
Gradients<T> Tape<T>::backward(Var loss) {
  if (consumed_) throw TapeError("backward() called twice without a new forward pass");
  const auto& lv = value(loss);
  if (lv.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_string(lv.shape()));
  consumed_ = true;
  grads_.assign(nodes_.size(), Tensor<T>());
  if (needs_grad(loss.index)) grads_[loss.index] = Tensor<T>(lv.shape(), T(1));
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.backward || grads_[i].shape().empty()) continue;
    node.backward(*this, node, grads_[i]);
    if (!node.param) grads_[i] = Tensor<T>();
  }
  Gradients<T> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].param) continue;
    auto grad = grads_[i].shape().empty() ? Tensor<T>(nodes_[i].value.shape()) : std::move(grads_[i]);
    if (auto it = out.find(*nodes_[i].param); it != out.end()) {
      it->second.add_inplace(grad);
    } else {
      out.emplace(*nodes_[i].param, std::move(grad));
    }
  }
  grads_.clear();
  return out;
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  grads_.clear();
  consumed_ = false;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace flopsgate
