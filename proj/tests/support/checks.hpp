#pragma once

// Helpers shared by the unit tests and the acceptance driver: a central
// finite-difference harness over tape primitives, brute-force oracles, and
// small on-disk fixtures.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "flopsgate/autodiff.hpp"
#include "flopsgate/dataset.hpp"
#include "flopsgate/flops.hpp"
#include "flopsgate/gates.hpp"
#include "flopsgate/model.hpp"
#include "flopsgate/rng.hpp"

namespace flopsgate::testing {

using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

struct FdReport {
  double max_rel = 0.0;   // max |ad - fd| / (|fd| + 1e-8)
  std::size_t checked = 0;
  std::string worst;      // parameter[index] of the worst entry
};

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

inline Parameter<double> random_param(const std::string& name, Shape shape, Rng& rng,
                                      ParamRole role = ParamRole::weight) {
  Parameter<double> p;
  p.name = name;
  p.role = role;
  p.value = random_tensor(std::move(shape), rng);
  return p;
}

inline double loss_value(std::vector<Parameter<double>>& params, const Builder& build) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  return tape.value(build(tape, vars))[0];
}

/// Compares tape gradients with central differences for every entry of every parameter.
inline FdReport fd_check(std::vector<Parameter<double>>& params, const Builder& build, double h = 1e-5) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  const auto grads = tape.backward(build(tape, vars));
  FdReport r;
  for (auto& p : params) {
    const auto& g = grads.at(p.id);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + h;
      const double up = loss_value(params, build);
      p.value[i] = keep - h;
      const double down = loss_value(params, build);
      p.value[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double rel = std::abs(g[i] - fd) / (std::abs(fd) + 1e-8);
      ++r.checked;
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

/// Project a tensor onto a scalar with fixed random weights.
inline Var project(Tape<double>& tape, Var x, std::uint64_t seed) {
  Rng rng(seed, 99);
  return tape.weighted_sum(x, random_tensor(tape.value(x).shape(), rng));
}

enum class Primitive {
  matmul,
  conv2d,
  maxpool2x2,
  relu,
  add_bias,
  scale_channels,
  flatten,
  select_columns,
  softmax_cross_entropy,
  hard_concrete,
  weighted_sum
};

inline const std::vector<Primitive>& all_primitives() {
  static const std::vector<Primitive> all = {
      Primitive::matmul,         Primitive::conv2d,  Primitive::maxpool2x2,
      Primitive::relu,           Primitive::add_bias, Primitive::scale_channels,
      Primitive::flatten,        Primitive::select_columns, Primitive::softmax_cross_entropy,
      Primitive::hard_concrete,  Primitive::weighted_sum};
  return all;
}

inline std::string name_of(Primitive p) {
  switch (p) {
    case Primitive::matmul: return "matmul";
    case Primitive::conv2d: return "conv2d";
    case Primitive::maxpool2x2: return "maxpool2x2";
    case Primitive::relu: return "relu";
    case Primitive::add_bias: return "add_bias";
    case Primitive::scale_channels: return "scale_channels";
    case Primitive::flatten: return "flatten";
    case Primitive::select_columns: return "select_columns";
    case Primitive::softmax_cross_entropy: return "softmax_cross_entropy";
    case Primitive::hard_concrete: return "hard_concrete";
    case Primitive::weighted_sum: return "weighted_sum";
  }
  return "?";
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

// Keeps entries away from the kink at zero by at least `margin`.
inline void push_off_zero(Tensor<double>& t, double margin) {
  for (auto& v : t.values()) {
    if (std::abs(v) < margin) v = v < 0 ? -margin - std::abs(v) : margin + std::abs(v);
  }
}

/// One randomly shaped finite-difference check of a single primitive.
inline FdReport fd_primitive(Primitive prim, std::uint64_t seed) {
  Rng rng(seed, static_cast<std::uint64_t>(prim) + 1000);
  std::vector<Parameter<double>> ps;
  Builder build;
  switch (prim) {
    case Primitive::matmul: {
      const auto m = pick(rng, 1, 5), k = pick(rng, 1, 6), n = pick(rng, 1, 5);
      ps.push_back(random_param("a", {m, k}, rng));
      ps.push_back(random_param("b", {k, n}, rng));
      build = [seed](Tape<double>& t, const std::vector<Var>& v) { return project(t, t.matmul(v[0], v[1]), seed); };
      break;
    }
    case Primitive::conv2d: {
      const auto n = pick(rng, 1, 2), c = pick(rng, 1, 3), f = pick(rng, 1, 3), k = pick(rng, 1, 3);
      kernels::ConvParams cp{pick(rng, 1, 2), pick(rng, 0, 2)};
      const auto h = pick(rng, k, k + 4), w = pick(rng, k, k + 4);
      ps.push_back(random_param("x", {n, c, h, w}, rng));
      ps.push_back(random_param("w", {f, c, k, k}, rng));
      build = [seed, cp](Tape<double>& t, const std::vector<Var>& v) { return project(t, t.conv2d(v[0], v[1], cp), seed); };
      break;
    }
    case Primitive::maxpool2x2: {
      const auto n = pick(rng, 1, 2), c = pick(rng, 1, 3), h = pick(rng, 2, 7), w = pick(rng, 2, 7);
      auto x = random_param("x", {n, c, h, w}, rng);
      // Distinct values spaced well beyond the step so no window has a near tie.
      std::vector<std::size_t> order(x.value.numel());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      for (std::size_t i = 0; i < order.size(); ++i) x.value[order[i]] = -1.0 + 0.01 * static_cast<double>(i);
      ps.push_back(std::move(x));
      build = [seed](Tape<double>& t, const std::vector<Var>& v) { return project(t, t.maxpool2x2(v[0]), seed); };
      break;
    }
    case Primitive::relu: {
      auto x = random_param("x", {pick(rng, 1, 4), pick(rng, 1, 6)}, rng);
      push_off_zero(x.value, 1e-3);
      ps.push_back(std::move(x));
      build = [seed](Tape<double>& t, const std::vector<Var>& v) { return project(t, t.relu(v[0]), seed); };
      break;
    }
    case Primitive::add_bias: {
      const bool conv = rng.bernoulli(0.5);
      const auto n = pick(rng, 1, 3), c = pick(rng, 1, 4);
      ps.push_back(random_param("x", conv ? Shape{n, c, pick(rng, 1, 4), pick(rng, 1, 4)} : Shape{n, c}, rng));
      ps.push_back(random_param("b", {c}, rng, ParamRole::bias));
      build = [seed](Tape<double>& t, const std::vector<Var>& v) { return project(t, t.add_bias(v[0], v[1]), seed); };
      break;
    }
    case Primitive::scale_channels: {
      const bool conv = rng.bernoulli(0.5);
      const auto n = pick(rng, 1, 3), c = pick(rng, 1, 4);
      ps.push_back(random_param("x", conv ? Shape{n, c, pick(rng, 1, 4), pick(rng, 1, 4)} : Shape{n, c}, rng));
      ps.push_back(random_param("g", {c}, rng));
      build = [seed](Tape<double>& t, const std::vector<Var>& v) {
        return project(t, t.scale_channels(v[0], v[1]), seed);
      };
      break;
    }
    case Primitive::flatten: {
      ps.push_back(random_param("x", {pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)}, rng));
      build = [seed](Tape<double>& t, const std::vector<Var>& v) { return project(t, t.flatten(v[0]), seed); };
      break;
    }
    case Primitive::select_columns: {
      const auto n = pick(rng, 1, 3), width = pick(rng, 1, 6);
      ps.push_back(random_param("x", {n, width}, rng));
      // Repeats allowed, so the backward scatter has to add.
      std::vector<std::size_t> cols(pick(rng, 1, 8));
      for (auto& c : cols) c = rng.below(width);
      build = [seed, cols](Tape<double>& t, const std::vector<Var>& v) {
        return project(t, t.select_columns(v[0], cols), seed);
      };
      break;
    }
    case Primitive::softmax_cross_entropy: {
      const auto n = pick(rng, 1, 4), k = pick(rng, 2, 10);
      auto logits = random_param("logits", {n, k}, rng);
      for (auto& v : logits.value.values()) v *= 3.0;
      ps.push_back(std::move(logits));
      std::vector<int> labels(n);
      for (auto& l : labels) l = static_cast<int>(rng.below(k));
      build = [labels](Tape<double>& t, const std::vector<Var>& v) { return t.softmax_cross_entropy(v[0], labels); };
      break;
    }
    case Primitive::hard_concrete: {
      const GateHyper hyper;
      const auto k = pick(rng, 1, 8);
      auto la = random_param("log_alpha", {k}, rng, ParamRole::log_alpha);
      Tensor<double> noise({k});
      // Draw noise until the stretched sample is comfortably inside (0, 1).
      for (std::size_t j = 0; j < k; ++j) {
        la.value[j] *= 3.0;
        for (;;) {
          noise[j] = logistic_noise(rng.uniform_open());
          const double s = sigmoid((la.value[j] + noise[j]) / hyper.beta);
          const double z = (hyper.zeta - hyper.gamma) * s + hyper.gamma;
          if (z > 0.02 && z < 0.98) break;
        }
      }
      ps.push_back(std::move(la));
      build = [seed, noise, hyper](Tape<double>& t, const std::vector<Var>& v) {
        return project(t, t.hard_concrete(v[0], noise, hyper.beta, hyper.gamma, hyper.zeta), seed);
      };
      break;
    }
    case Primitive::weighted_sum: {
      ps.push_back(random_param("x", {pick(rng, 1, 4), pick(rng, 1, 5)}, rng));
      build = [seed](Tape<double>& t, const std::vector<Var>& v) { return project(t, v[0], seed); };
      break;
    }
  }
  return fd_check(ps, build);
}

/// Hand-made spec with 16 gates: two gated convs, a flatten to a 1x1 map, and
/// two gated dense layers, so that the coupling rules are exercised.
inline ArchSpec tiny_gated_spec() {
  Rng rng(7, 7);
  GatedModel<double> m;
  m.name = "tiny";
  m.input_shape = {1, 6, 6};
  m.classes = 3;
  LenetOptions opts;
  auto conv = [&](std::string name, std::size_t in, std::size_t out, std::size_t k) {
    ConvLayer<double> l;
    l.name = name;
    l.weight.name = name + ".weight";
    l.weight.value = Tensor<double>({out, in, k, k});
    l.bias.name = name + ".bias";
    l.bias.role = ParamRole::bias;
    l.bias.value = Tensor<double>({out});
    l.gates = make_gate_group<double>(name + ".log_alpha", out, GateGranularity::per_output_filter, opts.hyper,
                                      0.5, 0.01, rng);
    return l;
  };
  auto dense = [&](std::string name, std::size_t in, std::size_t out) {
    DenseLayer<double> l;
    l.name = name;
    l.weight.name = name + ".weight";
    l.weight.value = Tensor<double>({in, out});
    l.bias.name = name + ".bias";
    l.bias.role = ParamRole::bias;
    l.bias.value = Tensor<double>({out});
    l.gates = make_gate_group<double>(name + ".log_alpha", in, GateGranularity::per_input_neuron, opts.hyper, 0.5,
                                      0.01, rng);
    return l;
  };
  m.layers.emplace_back(conv("c1", 1, 4, 3));
  m.layers.emplace_back(conv("c2", 4, 4, 4));
  m.layers.emplace_back(Flatten{});
  m.layers.emplace_back(dense("d1", 4, 4));
  m.layers.emplace_back(Relu{});
  m.layers.emplace_back(dense("d2", 4, 3));
  m.validate();
  return m.arch();
}

/// Exact d/dlog_alpha of E_z[payoff(z)] under independent Bernoulli(psi) gates,
/// by enumerating every pattern. Flat gate order.
inline std::vector<double> brute_force_score_gradient(const ArchSpec& spec, std::span<const double> psi,
                                                      const std::function<double(std::int64_t)>& payoff_of_flops,
                                                      double* expectation = nullptr) {
  const FlopsEvaluator eval(spec);
  const std::size_t k = psi.size();
  if (k > 20) throw std::invalid_argument("brute force limited to 20 gates");
  std::vector<double> grad(k, 0.0);
  std::vector<std::uint8_t> z(k);
  double total = 0.0;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << k); ++mask) {
    double p = 1.0;
    for (std::size_t j = 0; j < k; ++j) {
      z[j] = (mask >> j) & 1u;
      p *= z[j] ? psi[j] : 1.0 - psi[j];
    }
    const double f = payoff_of_flops(eval.total(z));
    total += p * f;
    for (std::size_t j = 0; j < k; ++j) grad[j] += p * f * (static_cast<double>(z[j]) - psi[j]);
  }
  if (expectation) *expectation = total;
  return grad;
}

/// Writes a small MNIST-shaped IDX dataset (both splits) into `dir`.
inline void write_fake_mnist(const std::filesystem::path& dir, std::size_t train_n, std::size_t test_n,
                             std::uint64_t seed, bool gzip_names = false) {
  std::filesystem::create_directories(dir);
  Rng rng(seed, 3);
  auto split = [&](const std::string& prefix, std::size_t n) {
    std::vector<std::uint8_t> pixels(n * 28 * 28), labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<std::uint8_t>(rng.below(10));
      // A class-dependent bright bar makes the toy task learnable.
      for (std::size_t p = 0; p < 28 * 28; ++p) {
        const std::size_t row = p / 28;
        const bool bar = row >= 2 + 2 * labels[i] && row < 4 + 2 * labels[i];
        pixels[i * 784 + p] = bar ? 255 : static_cast<std::uint8_t>(rng.below(40));
      }
    }
    const std::string ext = gzip_names ? ".gz" : "";
    write_idx_images(dir / (prefix + "-images-idx3-ubyte" + ext), 28, 28, pixels);
    write_idx_labels(dir / (prefix + "-labels-idx1-ubyte" + ext), labels);
  };
  split("train", train_n);
  split("t10k", test_n);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("flopsgate-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace flopsgate::testing
