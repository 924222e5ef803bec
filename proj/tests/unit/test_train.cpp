#include <cmath>

#include "doctest.h"

#include "flopsgate/checkpoint.hpp"
#include "flopsgate/config.hpp"
#include "flopsgate/train.hpp"
#include "support/checks.hpp"

using namespace flopsgate;
namespace fs = std::filesystem;

namespace {

const bool kHaveMnist = mnist_present(FLOPSGATE_MNIST_DIR);

TrainConfig small_config(std::size_t epochs, std::size_t finetune) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.finetune_epochs = finetune;
  cfg.prune_epoch = epochs - finetune;
  cfg.samples = 50;
  cfg.batch_size = 32;
  return cfg;
}

std::vector<std::string> stream_of(const TrainConfig& cfg, const Dataset& tr, const Dataset& te) {
  std::vector<std::string> lines;
  TrainHooks hooks;
  hooks.metrics = [&](const nlohmann::json& j) { lines.push_back(j.dump()); };
  if (cfg.precision == 32) {
    (void)train<float>(cfg, build_model<float>(cfg), tr, te, hooks);
  } else {
    (void)train<double>(cfg, build_model<double>(cfg), tr, te, hooks);
  }
  return lines;
}

}  // namespace

TEST_CASE("zero epochs returns the initial model and no epoch metrics") {
  const auto root = testing::scratch_dir("train_zero");
  testing::write_fake_mnist(root, 8, 8, 1);
  auto cfg = small_config(0, 0);
  const auto init = build_model<double>(cfg);
  const auto r = train<double>(cfg, init, load_mnist(root, Split::train), load_mnist(root, Split::test));
  CHECK(r.metrics.empty());
  CHECK_FALSE(r.prune_report.has_value());
  const auto a = init.parameters();
  const auto b = r.model.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
}

TEST_CASE("pipeline on a toy set: phases, pruning and a constant ledger after it") {
  const auto root = testing::scratch_dir("train_toy");
  testing::write_fake_mnist(root / "data", 96, 64, 2);
  auto cfg = small_config(4, 2);
  cfg.out_dir = (root / "run").string();
  cfg.lambda_f = 1e-5;
  cfg.target = 100000;
  const auto tr = load_mnist(root / "data", Split::train);
  const auto te = load_mnist(root / "data", Split::test);
  const auto r = train<double>(cfg, build_model<double>(cfg), tr, te);
  REQUIRE(r.metrics.size() == 4);
  CHECK(r.metrics[0].phase == "train");
  CHECK(r.metrics[1].phase == "train");
  CHECK(r.metrics[2].phase == "finetune");
  CHECK(r.metrics[3].phase == "finetune");
  CHECK(r.metrics[0].penalty > 0.0);
  CHECK(r.metrics[2].penalty == 0.0);
  CHECK(r.metrics[2].flops == r.metrics[3].flops);
  CHECK(r.metrics[2].flops <= r.metrics[1].flops);
  REQUIRE(r.prune_report.has_value());
  CHECK_FALSE(r.model.has_gates());

  for (const char* f : {"metrics.jsonl", "prune_gated.ckpt", "prune.ckpt", "prune_report.json", "final.ckpt"}) {
    CHECK(fs::exists(root / "run" / f));
  }
  const auto final_ckpt = load_checkpoint<double>(root / "run" / "final.ckpt");
  CHECK(final_ckpt.config.at("target") == 100000);
  CHECK(evaluate(final_ckpt.model, te).ledger.total == r.metrics[3].flops);
}

TEST_CASE("a toy set can be memorized") {
  // Well separated blobs through the gated MLP: the train split ends at 0 error.
  const auto d = synthetic_blobs(3, 60, 6, 3, 12.0);
  auto cfg = small_config(60, 0);
  cfg.lambda_f = 0.0;
  cfg.batch_size = 10;
  cfg.ema_decay = 0.9;  // a few hundred steps: the 0.999 average would still sit near the init
  Rng rng(4);
  const auto r = train<double>(cfg, build_gated_mlp<double>(6, 16, 3, LenetOptions{}, rng), d, d);
  CHECK(evaluate(r.model, d).error == 0.0);
}

TEST_CASE("identical config and seed give an identical metrics stream") {
  const auto root = testing::scratch_dir("train_repro");
  testing::write_fake_mnist(root, 64, 32, 3);
  const auto tr = load_mnist(root, Split::train);
  const auto te = load_mnist(root, Split::test);
  auto cfg = small_config(3, 1);
  cfg.lambda_f = 1e-5;
  cfg.target = 50000;
  const auto a = stream_of(cfg, tr, te);
  const auto b = stream_of(cfg, tr, te);
  CHECK(a.size() == 4);
  CHECK(a == b);
  cfg.seed = 2;
  CHECK(stream_of(cfg, tr, te) != a);

  cfg.seed = 1;
  cfg.precision = 32;
  const auto f1 = stream_of(cfg, tr, te);
  const auto f2 = stream_of(cfg, tr, te);
  REQUIRE(f1.size() == f2.size());
  for (std::size_t i = 1; i < f1.size(); ++i) {
    const double x = nlohmann::json::parse(f1[i]).at("train_nll").get<double>();
    const double y = nlohmann::json::parse(f2[i]).at("train_nll").get<double>();
    CHECK(std::abs(x - y) <= 1e-5 * std::abs(x));
  }
}

TEST_CASE("metrics lines carry every field and no timing") {
  EpochMetrics em;
  em.epoch = 3;
  em.phase = "train";
  em.active_groups = {{"conv1", 20}};
  const auto j = to_json(em);
  for (const char* key : {"type", "epoch", "phase", "train_nll", "penalty", "sampled_flops", "expected_flops", "flops",
                          "test_error", "active_groups"}) {
    CHECK(j.contains(key));
  }
  for (const auto& [key, value] : j.items()) CHECK(key.find("time") == std::string::npos);
}

TEST_CASE("untrained LeNet sits at chance on MNIST" * doctest::skip(!kHaveMnist)) {
  const auto test = load_mnist(FLOPSGATE_MNIST_DIR, Split::test);
  TrainConfig cfg;
  const auto m = build_model<float>(cfg);
  const auto r = evaluate(m, test);
  CHECK(r.examples == 10000);
  CHECK(std::abs(r.error - 0.90) <= 0.03);
  CHECK(r.ledger.total == 2308230);
}

TEST_CASE("five epochs on 1000 MNIST images without the penalty beat 15% error" * doctest::skip(!kHaveMnist)) {
  auto cfg = small_config(5, 0);
  cfg.lambda_f = 0.0;
  cfg.batch_size = 32;
  cfg.precision = 32;
  cfg.ema_decay = 0.9;  // 160 steps in total
  const auto tr = load_mnist(FLOPSGATE_MNIST_DIR, Split::train).head(1000);
  const auto te = load_mnist(FLOPSGATE_MNIST_DIR, Split::test).head(2000);
  const auto r = train<float>(cfg, build_model<float>(cfg), tr, te);
  REQUIRE(r.metrics.size() == 5);
  INFO("error ", r.metrics.back().test_error);
  CHECK(r.metrics.back().test_error < 0.15);
}
