#include <cmath>

#include "doctest.h"

#include "flopsgate/prune.hpp"
#include "flopsgate/train.hpp"
#include "support/checks.hpp"

using namespace flopsgate;

namespace {

GatedModel<float> lenet(std::uint64_t seed) {
  Rng rng(seed);
  return build_lenet5_caffe<float>(LenetOptions{}, rng);
}

Tensor<float> random_images(std::size_t n, Rng& rng) {
  return testing::random_tensor({n, 1, 28, 28}, rng, -0.5, 2.5).cast<float>();
}

void set_all(GatedModel<float>& m, float v) {
  for (auto* g : m.gate_groups()) g->log_alpha.value.fill(v);
}

// Spreads log alpha over [-6, 4] so a good share of every layer is zero.
void scramble(GatedModel<float>& m, Rng& rng) {
  for (auto* g : m.gate_groups()) {
    for (auto& v : g->log_alpha.value.values()) v = static_cast<float>(-6.0 + 10.0 * rng.uniform());
  }
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

}  // namespace

TEST_CASE("fully open gates prune nothing and keep predictions bit-equal") {
  auto m = lenet(1);
  set_all(m, 30.0f);
  const auto r = prune_model(m);
  CHECK(r.report.removed_groups == 0);
  CHECK_FALSE(r.model.has_gates());
  Rng rng(2);
  const auto x = random_images(20, rng);
  CHECK(forward_eval(r.model, x) == forward_eval(m, x));
  CHECK(predict(r.model, x) == predict(m, x));
}

TEST_CASE("a gate sitting exactly on ln(1/11) is pruned") {
  auto m = lenet(3);
  set_all(m, 30.0f);
  const double boundary = deterministic_zero_threshold(GateHyper{});
  auto groups = m.gate_groups();
  groups[1]->log_alpha.value[4] = static_cast<float>(boundary);
  // float rounding of the boundary must still land on the zero side
  REQUIRE(deterministic_value(static_cast<double>(groups[1]->log_alpha.value[4]), GateHyper{}) == 0.0);
  const auto r = prune_model(m);
  REQUIRE(r.report.layers.size() == 4);
  const auto& conv2 = r.report.layers[1];
  CHECK(conv2.groups_before == 50);
  CHECK(conv2.kept.size() == 49);
  CHECK(std::find(conv2.kept.begin(), conv2.kept.end(), 4) == conv2.kept.end());
  // The flatten carries the loss of one 4x4 channel into fc1.
  CHECK(r.report.layers[2].inputs_after == 800 - 16);
}

TEST_CASE("pruned network matches the deterministic-gate network") {
  Rng rng(4);
  for (std::uint64_t trial = 0; trial < 3; ++trial) {
    auto m = lenet(10 + trial);
    scramble(m, rng);
    const auto r = prune_model(m);
    CHECK(r.report.removed_groups > 0);
    const auto x = random_images(100, rng);
    CHECK(max_abs_diff(forward_eval(r.model, x), forward_eval(m, x)) < 1e-5);
    // The pruned dense architecture costs what the deterministic ledger says.
    CHECK(static_flops(r.model.arch()).total == deterministic_ledger(m).total);
  }
}

TEST_CASE("64-bit pruning is also exact") {
  Rng rng(5);
  auto m = build_lenet5_caffe<double>(LenetOptions{}, rng);
  for (auto* g : m.gate_groups()) {
    for (auto& v : g->log_alpha.value.values()) v = -6.0 + 10.0 * rng.uniform();
  }
  const auto r = prune_model(m);
  const auto x = testing::random_tensor({10, 1, 28, 28}, rng);
  const auto a = forward_eval(r.model, x);
  const auto b = forward_eval(m, x);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  CHECK(worst < 1e-10);
}

TEST_CASE("a layer losing every group is reported") {
  auto m = lenet(6);
  set_all(m, 30.0f);
  m.gate_groups()[0]->log_alpha.value.fill(-10.0f);
  try {
    (void)prune_model(m);
    FAIL("expected LayerCollapsed");
  } catch (const LayerCollapsed& e) {
    CHECK(std::string(e.what()).find("layer collapsed") != std::string::npos);
    CHECK(std::string(e.what()).find("conv1") != std::string::npos);
  }
  // The input model is untouched.
  CHECK(m.gate_groups()[0]->log_alpha.value[0] == -10.0f);
}

TEST_CASE("prune report serializes kept indices") {
  auto m = lenet(7);
  set_all(m, 30.0f);
  m.gate_groups()[0]->log_alpha.value[2] = -10.0f;
  const auto j = to_json(prune_model(m).report);
  CHECK(j.at("removed_groups") == 1);
  CHECK(j.at("layers")[0].at("kept").size() == 19);
}
