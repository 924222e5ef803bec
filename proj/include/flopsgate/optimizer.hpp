#pragma once

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flopsgate/autodiff.hpp"

namespace flopsgate {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;  // decoupled; weights only
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with bias correction and decoupled weight decay. Decay touches only
/// ParamRole::weight tensors, never biases or log alpha.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const noexcept { return cfg_; }
  std::size_t step_count() const noexcept { return steps_; }

  /// Parameters without an entry in `grads` are treated as having zero gradient.
  void step(std::span<Parameter<T>* const> params, const Gradients<T>& grads) {
    for (const auto* p : params) {
      if (auto it = grads.find(p->id); it != grads.end()) {
        require_same_shape(it->second.shape(), p->value.shape(), p->name.c_str());
        for (auto g : it->second.values()) {
          if (!std::isfinite(static_cast<double>(g))) {
            throw NonFiniteGradient("non-finite gradient for parameter '" + p->name + "'");
          }
        }
      }
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (auto* p : params) {
      auto [slot, fresh] = moments_.try_emplace(p->id);
      if (fresh) {
        slot->second.first = Tensor<T>(p->value.shape());
        slot->second.second = Tensor<T>(p->value.shape());
      }
      auto& m = slot->second.first;
      auto& v = slot->second.second;
      const auto git = grads.find(p->id);
      const Tensor<T>* g = git == grads.end() ? nullptr : &git->second;
      const bool decay = p->role == ParamRole::weight && cfg_.weight_decay != 0.0;
      for (std::size_t i = 0; i < p->value.numel(); ++i) {
        const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
        const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double w = p->value[i];
        if (decay) w -= cfg_.lr * cfg_.weight_decay * w;
        w -= cfg_.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps);
        p->value[i] = static_cast<T>(w);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::size_t steps_ = 0;
  std::map<ParamId, std::pair<Tensor<T>, Tensor<T>>> moments_;
};

/// Exponential moving average of parameters ("temporal averaging"). The shadow
/// starts at the values seen at construction; evaluation reads the shadow
/// while training keeps updating the raw parameters.
template <typename T>
class Ema {
 public:
  Ema(double decay, std::span<const Parameter<T>* const> params) : decay_(decay) {
    if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("ema decay must lie in [0, 1)");
    for (const auto* p : params) shadow_.emplace(p->id, p->value);
  }

  double decay() const noexcept { return decay_; }
  std::size_t updates() const noexcept { return updates_; }

  void update(std::span<const Parameter<T>* const> params) {
    for (const auto* p : params) {
      auto it = shadow_.find(p->id);
      if (it == shadow_.end()) throw std::invalid_argument("ema: untracked parameter '" + p->name + "'");
      auto& s = it->second;
      for (std::size_t i = 0; i < s.numel(); ++i) {
        s[i] = static_cast<T>(decay_ * s[i] + (1.0 - decay_) * p->value[i]);
      }
    }
    ++updates_;
  }

  const Tensor<T>& shadow(ParamId id) const { return shadow_.at(id); }

  /// Overwrites each parameter's value with its shadow.
  void swap_in(std::span<Parameter<T>* const> params) const {
    if (updates_ == 0) throw std::logic_error("ema: swap_in before any update");
    for (auto* p : params) p->value = shadow_.at(p->id);
  }

 private:
  double decay_;
  std::size_t updates_ = 0;
  std::map<ParamId, Tensor<T>> shadow_;
};

}  // namespace flopsgate
