#include <cmath>

#include "doctest.h"

#include "flopsgate/optimizer.hpp"
#include "support/checks.hpp"

using namespace flopsgate;

namespace {

Parameter<double> scalar(const std::string& name, double v, ParamRole role = ParamRole::weight) {
  Parameter<double> p;
  p.name = name;
  p.role = role;
  p.value = Tensor<double>({1}, v);
  return p;
}

Gradients<double> grad_of(const Parameter<double>& p, double g) {
  Gradients<double> out;
  out.emplace(p.id, Tensor<double>({1}, g));
  return out;
}

}  // namespace

TEST_CASE("zero gradient and no decay leaves parameters alone") {
  auto w = scalar("w", 0.75);
  std::vector<Parameter<double>*> ps{&w};
  Adam<double> adam({1e-3, 0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 10; ++i) adam.step(ps, grad_of(w, 0.0));
  CHECK(w.value[0] == 0.75);
}

TEST_CASE("first Adam step with g = 1 moves by lr") {
  auto w = scalar("w", 0.0);
  std::vector<Parameter<double>*> ps{&w};
  Adam<double> adam({1e-3, 0.9, 0.999, 1e-8, 0.0});
  adam.step(ps, grad_of(w, 1.0));
  CHECK(w.value[0] == doctest::Approx(-1e-3).epsilon(1e-6));
  // Constant gradients keep the bias-corrected ratio at 1.
  for (int i = 0; i < 9; ++i) adam.step(ps, grad_of(w, 1.0));
  CHECK(w.value[0] == doctest::Approx(-1e-2).epsilon(1e-5));
  CHECK(adam.step_count() == 10);
}

TEST_CASE("decoupled decay touches weights only") {
  auto w = scalar("w", 2.0);
  auto b = scalar("b", 2.0, ParamRole::bias);
  auto la = scalar("la", 2.0, ParamRole::log_alpha);
  std::vector<Parameter<double>*> ps{&w, &b, &la};
  Adam<double> adam({1e-3, 0.9, 0.999, 1e-8, 5e-4});
  double expect = 2.0;
  for (int i = 0; i < 5; ++i) {
    adam.step(ps, {});
    expect -= 1e-3 * 5e-4 * expect;
  }
  CHECK(w.value[0] == doctest::Approx(expect).epsilon(1e-15));
  CHECK(w.value[0] < 2.0);
  CHECK(b.value[0] == 2.0);
  CHECK(la.value[0] == 2.0);
}

TEST_CASE("non-finite gradients name the parameter") {
  auto w = scalar("fc1.weight", 1.0);
  std::vector<Parameter<double>*> ps{&w};
  Adam<double> adam(AdamConfig{});
  try {
    adam.step(ps, grad_of(w, std::nan("")));
    FAIL("expected NonFiniteGradient");
  } catch (const NonFiniteGradient& e) {
    CHECK(std::string(e.what()).find("fc1.weight") != std::string::npos);
  }
  CHECK(w.value[0] == 1.0);
  CHECK_THROWS_AS(adam.step(ps, grad_of(w, INFINITY)), NonFiniteGradient);
}

TEST_CASE("gradient shape must match") {
  auto w = scalar("w", 1.0);
  std::vector<Parameter<double>*> ps{&w};
  Gradients<double> g;
  g.emplace(w.id, Tensor<double>({2}, 1.0));
  Adam<double> adam(AdamConfig{});
  CHECK_THROWS_AS(adam.step(ps, g), ShapeError);
}

TEST_CASE("EMA follows the geometric series") {
  auto w = scalar("w", 0.0);
  std::vector<const Parameter<double>*> cps{&w};
  Ema<double> ema(0.999, cps);
  w.value[0] = 1.0;
  for (int k = 1; k <= 1000; ++k) {
    ema.update(cps);
    if (k == 1 || k == 10 || k == 1000) {
      CHECK(ema.shadow(w.id)[0] == doctest::Approx(1.0 - std::pow(0.999, k)).epsilon(1e-12));
    }
  }
}

TEST_CASE("EMA edge cases") {
  auto w = scalar("w", 3.0);
  std::vector<const Parameter<double>*> cps{&w};
  std::vector<Parameter<double>*> ps{&w};

  Ema<double> instant(0.0, cps);
  CHECK_THROWS_AS(instant.swap_in(ps), std::logic_error);
  w.value[0] = -4.0;
  instant.update(cps);
  CHECK(instant.shadow(w.id)[0] == -4.0);

  Ema<double> steady(0.9, cps);
  for (int i = 0; i < 50; ++i) steady.update(cps);
  CHECK(steady.shadow(w.id)[0] == -4.0);

  w.value[0] = 10.0;
  steady.swap_in(ps);
  CHECK(w.value[0] == -4.0);

  CHECK_THROWS_AS(Ema<double>(1.0, cps), std::invalid_argument);
  auto stranger = scalar("x", 0.0);
  std::vector<const Parameter<double>*> other{&stranger};
  CHECK_THROWS_AS(steady.update(other), std::invalid_argument);
}
