#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "coda/datasets.hpp"
#include "coda/train.hpp"

using coda::AdamState;
using coda::CodaNet;
using coda::Rng;
using coda::Tensor;
using coda::TrainConfig;

static std::string temp_path(const std::string& name) {
  return std::string("./") + name;
}

static CodaNet<double> tiny_net(Rng& rng) {
  CodaNet<double> net = coda::parse_net_config<double>(
      "nonlinearity sq\ntemperature 4\nnum_classes 2\n"
      "layer f=3 r=4 k=3 s=2\nlayer f=2 r=4 k=3 s=1\n");
  net.init(rng);
  return net;
}

static coda::LabeledImageSet<double> two_class_digits(int n, Rng& rng) {
  // two blurry synthetic "digits": a vertical and a horizontal bar
  Tensor<double> vert({1, 9, 9}), horiz({1, 9, 9});
  for (int i = 0; i < 9; ++i) {
    vert.at(0, i, 4) = 1.0;
    horiz.at(0, 4, i) = 1.0;
  }
  return coda::make_noisy_digits<double>({vert, horiz}, n, 0.15, rng);
}

TEST_CASE("adam with zero gradients keeps parameters, advances the step") {
  Tensor<double> p({3});
  p[0] = 1.0;
  p[1] = -2.0;
  p[2] = 0.5;
  const Tensor<double> before = p;
  std::vector<Tensor<double>*> params = {&p};
  AdamState<double> state = AdamState<double>::make(params, 1e-3);
  coda::adam_step(params, {Tensor<double>({3})}, state, 1e-3);
  CHECK(coda::max_abs_diff(p, before) == 0.0);
  CHECK(state.step == 1);
}

TEST_CASE("adam converges to lr-magnitude steps under a constant gradient") {
  Tensor<double> p({1});
  std::vector<Tensor<double>*> params = {&p};
  AdamState<double> state = AdamState<double>::make(params, 1e-3);
  Tensor<double> g({1});
  g[0] = 0.37;
  double prev = p[0];
  double last_step = 0;
  for (int i = 0; i < 1000; ++i) {
    coda::adam_step(params, {g}, state, 1e-3);
    last_step = prev - p[0];
    prev = p[0];
  }
  CHECK(last_step == doctest::Approx(1e-3).epsilon(0.01));
}

TEST_CASE("single adam step from zero moments matches the hand-rolled oracle") {
  Tensor<double> p({1});
  p[0] = 2.0;
  std::vector<Tensor<double>*> params = {&p};
  AdamState<double> state = AdamState<double>::make(params, 0.01);
  Tensor<double> g({1});
  g[0] = -1.5;
  coda::adam_step(params, {g}, state, 0.01);
  // m=(1-b1)g, v=(1-b2)g^2; mhat=g, vhat=g^2; update = -lr*g/(|g|+eps)
  const double expected = 2.0 + 0.01 * 1.5 / (1.5 + 1e-8);
  CHECK(p[0] == doctest::Approx(expected).epsilon(1e-9));
  CHECK_THROWS_AS(coda::adam_step(params, {Tensor<double>({2})}, state, 0.01), coda::shape_error);
}

TEST_CASE("lr schedule halves every decay interval, exactly") {
  TrainConfig cfg;
  cfg.base_lr = 2.5e-4;
  cfg.lr_decay_every = 60;
  CHECK(coda::schedule_lr(cfg, 0) == 2.5e-4);
  CHECK(coda::schedule_lr(cfg, 59) == 2.5e-4);
  CHECK(coda::schedule_lr(cfg, 60) == 1.25e-4);
  CHECK(coda::schedule_lr(cfg, 120) == 0.625e-4);
}

TEST_CASE("zero learning rate freezes the model") {
  Rng rng(3);
  CodaNet<double> net = tiny_net(rng);
  net.lambda = 0.0;
  const CodaNet<double> before = net;
  auto set = two_class_digits(16, rng);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.base_lr = 0.0;
  cfg.seed = 1;
  const auto stats = coda::train(net, set, cfg);
  REQUIRE(stats.size() == 2);
  CHECK(stats[0].loss == doctest::Approx(stats[1].loss).epsilon(1e-12));
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    CHECK(coda::max_abs_diff(net.layers[l].a, before.layers[l].a) == 0.0);
}

TEST_CASE("training loss strictly decreases on an easy two-class task") {
  Rng rng(5);
  CodaNet<double> net = tiny_net(rng);
  auto set = two_class_digits(64, rng);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.base_lr = 5e-3;
  cfg.seed = 11;
  const auto stats = coda::train(net, set, cfg);
  REQUIRE(stats.size() == 3);
  CHECK(stats[1].loss < stats[0].loss);
  CHECK(stats[2].loss < stats[1].loss);
  CHECK(coda::evaluate_accuracy(net, set) > 0.9);
}

TEST_CASE("same seed gives bit-identical training runs") {
  Rng rng_a(7), rng_b(7);
  CodaNet<double> a = tiny_net(rng_a), b = tiny_net(rng_b);
  Rng data_a(9), data_b(9);
  auto set_a = two_class_digits(32, data_a);
  auto set_b = two_class_digits(32, data_b);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 21;
  std::ostringstream log_a, log_b;
  coda::train(a, set_a, cfg, &log_a);
  coda::train(b, set_b, cfg, &log_b);
  CHECK(log_a.str() == log_b.str());
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(coda::max_abs_diff(a.layers[l].a, b.layers[l].a) == 0.0);
    CHECK(coda::max_abs_diff(a.layers[l].b, b.layers[l].b) == 0.0);
    CHECK(coda::max_abs_diff(a.layers[l].bias, b.layers[l].bias) == 0.0);
  }
}

TEST_CASE("training result is independent of the worker thread count") {
  Rng rng_a(17), rng_b(17);
  CodaNet<double> a = tiny_net(rng_a), b = tiny_net(rng_b);
  Rng data_a(19), data_b(19);
  auto set_a = two_class_digits(24, data_a);
  auto set_b = two_class_digits(24, data_b);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 23;
  cfg.threads = 1;
  coda::train(a, set_a, cfg);
  cfg.threads = 3;
  coda::train(b, set_b, cfg);
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    CHECK(coda::max_abs_diff(a.layers[l].a, b.layers[l].a) == 0.0);
}

TEST_CASE("post-training networks still obey the weight bound") {
  Rng rng(25);
  CodaNet<double> net = tiny_net(rng);
  auto set = two_class_digits(32, rng);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.base_lr = 5e-3;
  cfg.seed = 31;
  coda::train(net, set, cfg);
  const auto trace = coda::forward_trace(net, set.images[0]);
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const auto& w = trace.layers[l].weights;
    const int pd = net.layers[l].patch_dim();
    for (int col = 0; col < w.dim(1); ++col)
      for (int unit = 0; unit < net.layers[l].out_channels; ++unit) {
        double norm = 0;
        for (int i = 0; i < pd; ++i) norm += w.at(unit * pd + i, col) * w.at(unit * pd + i, col);
        CHECK(std::sqrt(norm) <= 1.0 + 1e-6);
      }
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(33);
  CodaNet<double> net = tiny_net(rng);
  const std::string p1 = temp_path("ckpt_a.bin"), p2 = temp_path("ckpt_b.bin");
  coda::save_checkpoint<double>(net, nullptr, p1);
  CodaNet<double> loaded = coda::load_checkpoint<double>(p1);
  coda::save_checkpoint<double>(loaded, nullptr, p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(!b1.empty());
  CHECK(b1 == b2);

  const Tensor<double> img = coda::rand_uniform<double>(rng, {1, 9, 9});
  CHECK(coda::max_abs_diff(coda::forward(net, img), coda::forward(loaded, img)) == 0.0);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint with adam state round trips") {
  Rng rng(35);
  CodaNet<double> net = tiny_net(rng);
  auto set = two_class_digits(16, rng);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 37;
  coda::train(net, set, cfg);
  const auto params = coda::trainable_params(net);
  AdamState<double> state = AdamState<double>::make(params, 1e-3);
  state.step = 42;
  for (auto& m : state.m)
    for (std::int64_t i = 0; i < m.numel(); ++i) m[i] = 0.25;
  const std::string path = temp_path("ckpt_adam.bin");
  coda::save_checkpoint<double>(net, &state, path);
  AdamState<double> restored;
  coda::load_checkpoint<double>(path, &restored);
  CHECK(restored.step == 42);
  REQUIRE(restored.m.size() == state.m.size());
  CHECK(coda::max_abs_diff(restored.m[0], state.m[0]) == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::string path = temp_path("ckpt_bad.bin");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE garbage";
  }
  CHECK_THROWS_AS((void)coda::load_checkpoint<double>(path), coda::format_error);
  {
    Rng rng(39);
    CodaNet<double> net = tiny_net(rng);
    coda::save_checkpoint<double>(net, nullptr, path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    bytes.resize(bytes.size() / 2);  // truncate
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS((void)coda::load_checkpoint<double>(path), coda::format_error);
  std::remove(path.c_str());
}

TEST_CASE("empty dataset and NaN guards abort with diagnostics") {
  Rng rng(41);
  CodaNet<double> net = tiny_net(rng);
  coda::LabeledImageSet<double> empty;
  empty.num_classes = 2;
  TrainConfig cfg;
  CHECK_THROWS_AS(coda::train(net, empty, cfg), coda::contract_error);

  // a NaN parameter makes the first batch loss non-finite
  CodaNet<double> poisoned = net;
  poisoned.layers[0].a[0] = std::nan("");
  auto set = two_class_digits(8, rng);
  bool threw = false;
  try {
    coda::train(poisoned, set, cfg);
  } catch (const coda::contract_error& e) {
    threw = true;
    CHECK(std::string(e.what()).find("batch") != std::string::npos);
  }
  CHECK(threw);
}
