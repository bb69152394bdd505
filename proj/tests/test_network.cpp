#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "coda/network.hpp"
#include "coda/verify.hpp"

using coda::CodaNet;
using coda::Graph;
using coda::Rescale;
using coda::Rng;
using coda::Tensor;

static CodaNet<double> small_net(Rng& rng, const std::string& extra = "") {
  CodaNet<double> net = coda::parse_net_config<double>(
      "nonlinearity l2\ntemperature 4\nnum_classes 3\n" + extra +
      "layer f=4 r=5 k=3 s=2\nlayer f=3 r=6 k=3 s=1\n");
  net.init(rng);
  return net;
}

TEST_CASE("encode_input of zeros has ones in channels 4-6") {
  Tensor<double> img({3, 2, 2});
  const Tensor<double> enc = coda::encode_input(img);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) {
      CHECK(enc[c * 4 + i] == 0.0);
      CHECK(enc[(c + 3) * 4 + i] == 1.0);
    }
}

TEST_CASE("encode_input fixed point at 0.5") {
  Tensor<double> img({3, 2, 2});
  for (int i = 0; i < 12; ++i) img[i] = 0.5;
  const Tensor<double> enc = coda::encode_input(img);
  for (int i = 0; i < 24; ++i) CHECK(enc[i] == 0.5);
}

TEST_CASE("encoded per-pixel norm is invariant under v -> 1-v") {
  Rng rng(5);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 3, 3});
  Tensor<double> flipped = img;
  for (int i = 0; i < 27; ++i) flipped[i] = 1.0 - flipped[i];
  const Tensor<double> a = coda::encode_input(img);
  const Tensor<double> b = coda::encode_input(flipped);
  for (int p = 0; p < 9; ++p) {
    double na = 0, nb = 0;
    for (int c = 0; c < 6; ++c) {
      na += a[c * 9 + p] * a[c * 9 + p];
      nb += b[c * 9 + p] * b[c * 9 + p];
    }
    CHECK(na == doctest::Approx(nb).epsilon(1e-12));
  }
}

TEST_CASE("encode_input validates range and accepts grayscale") {
  Tensor<double> bad({3, 1, 1});
  bad[0] = 1.5;
  CHECK_THROWS_AS((void)coda::encode_input(bad), coda::input_error);
  Tensor<double> gray({1, 2, 2});
  gray[0] = 0.25;
  const Tensor<double> enc = coda::encode_input(gray);
  REQUIRE(enc.dim(0) == 6);
  CHECK(enc[0] == 0.25);   // r
  CHECK(enc[4] == 0.25);   // g replicated
  CHECK(enc[12] == 0.75);  // 1-r
}

TEST_CASE("doubling the temperature exactly halves the logits") {
  Rng rng(7);
  CodaNet<double> net = small_net(rng);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 9, 9});
  const Tensor<double> base = coda::forward(net, img);
  CodaNet<double> hot = net;
  hot.temperature *= 2.0;
  const Tensor<double> halved = coda::forward(hot, img);
  for (int j = 0; j < 3; ++j) CHECK(halved[j] * 2.0 == base[j]);
}

TEST_CASE("1-layer collapse equals pool times the layer matrix") {
  Rng rng(9);
  CodaNet<double> net = coda::parse_net_config<double>(
      "nonlinearity sq\ntemperature 2\nnum_classes 2\nlayer f=2 r=4 k=3 s=1\n");
  net.init(rng);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 4, 4});
  const Tensor<double> enc = coda::encode_input(img);
  const auto lm = coda::layer_matrix(net.layers[0], enc);
  const Tensor<double> pooled = coda::matmul(coda::sum_pool_matrix<double>(2, 4, 4), lm.matrix);
  const Tensor<double> rows = coda::collapse_full(net, img);
  CHECK(static_cast<double>(coda::max_abs_diff(pooled, rows)) < 1e-12);
}

TEST_CASE("3-layer collapse reproduces the forward pass on a 8x8 input") {
  Rng rng(11);
  CodaNet<double> net = coda::parse_net_config<double>(
      "nonlinearity l2\ntemperature 8\nnum_classes 4\n"
      "layer f=5 r=6 k=3 s=1\nlayer f=6 r=8 k=3 s=1\nlayer f=4 r=6 k=3 s=1\n");
  net.init(rng);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 8, 8});
  const Tensor<double> enc = coda::encode_input(img);
  const Tensor<double> rows = coda::collapse_full(net, img);
  const Tensor<double> logits = coda::forward(net, img);
  for (int j = 0; j < 4; ++j) {
    double acc = 0;
    for (std::int64_t i = 0; i < enc.numel(); ++i) acc += rows[j * enc.numel() + i] * enc[i];
    CHECK(std::abs(acc / net.temperature - logits[j]) < 1e-8);
  }
}

TEST_CASE("per-layer matrices map each activation to the next") {
  Rng rng(13);
  CodaNet<double> net = small_net(rng);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 9, 9});
  const auto trace = coda::forward_trace(net, img);
  Tensor<double> current = trace.encoded;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto lm = coda::layer_matrix(net.layers[l], current);
    const Tensor<double> next =
        coda::matmul(lm.matrix, current.reshaped({static_cast<int>(current.numel()), 1}));
    CHECK(static_cast<double>(coda::max_abs_diff(next, trace.layers[l].output)) < 1e-10);
    current = trace.layers[l].output;
  }
}

TEST_CASE("collapse_rows selections agree with collapse_full") {
  Rng rng(17);
  CodaNet<double> net = small_net(rng);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 9, 9});
  const Tensor<double> full = coda::collapse_full(net, img);
  const Tensor<double> all = coda::collapse_rows(net, img, {0, 1, 2});
  CHECK(static_cast<double>(coda::max_abs_diff(full, all)) == 0.0);
  const Tensor<double> one = coda::collapse_rows(net, img, {2});
  for (std::int64_t i = 0; i < one.numel(); ++i) CHECK(one[i] == full[2 * one.numel() + i]);
  CHECK_THROWS_AS((void)coda::collapse_rows(net, img, {3}), coda::contract_error);
}

TEST_CASE("collapse_rows is differentiable w.r.t. parameters") {
  // finite differences on a lambda-only objective: mean |selected row|
  Rng rng(19);
  CodaNet<double> net = coda::parse_net_config<double>(
      "nonlinearity sq\ntemperature 2\nnum_classes 2\nlayer f=3 r=4 k=3 s=2\nlayer f=2 r=4 k=3 s=1\n");
  net.init(rng);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 7, 7});

  auto objective = [&](const CodaNet<double>& candidate) {
    const Tensor<double> row = coda::collapse_rows(candidate, img, {1});
    double acc = 0;
    for (std::int64_t i = 0; i < row.numel(); ++i) acc += std::abs(row[i]);
    return acc / static_cast<double>(row.numel());
  };

  Graph<double> graph;
  auto vars = coda::make_net_vars(graph, net, true);
  auto input = graph.constant(coda::encode_input(img));
  auto trace = coda::forward_graph(graph, net, vars, input);
  auto rows = coda::collapse_rows_graph(graph, net, trace, {1});
  auto grads = graph.backward(graph.abs_mean(rows));

  const double h = 1e-6;
  double worst = 0;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const Tensor<double> analytic = graph.grad_of(grads, vars.layers[l].a);
    for (std::int64_t i = 0; i < net.layers[l].a.numel(); i += 7) {
      const double saved = net.layers[l].a[i];
      net.layers[l].a[i] = saved + h;
      const double up = objective(net);
      net.layers[l].a[i] = saved - h;
      const double down = objective(net);
      net.layers[l].a[i] = saved;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(numeric - analytic[i]) /
                                  std::max({std::abs(numeric), std::abs(analytic[i]), 1e-4}));
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("contributions are complete and match the static-weight case") {
  Rng rng(23);
  CodaNet<double> net = small_net(rng);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 9, 9});
  const Tensor<double> logits = coda::forward(net, img);
  for (int j = 0; j < 3; ++j) {
    const auto map = coda::contributions(net, img, j);
    CHECK(std::abs(static_cast<double>(coda::sum(map.values)) - logits[j]) < 1e-10);
    CHECK(map.logit == doctest::Approx(logits[j]).epsilon(1e-10));
  }
}

TEST_CASE("static-weight single-layer net: contributions are g(b) dot x over T") {
  // k=1 global layer over a 1x1 image makes the DAU act on the whole input.
  Rng rng(27);
  CodaNet<double> net = coda::parse_net_config<double>(
      "nonlinearity l2\ntemperature 2\nnum_classes 1\nlayer f=1 r=1 k=1 s=1\n");
  net.init(rng);
  for (std::int64_t i = 0; i < net.layers[0].a.numel(); ++i) net.layers[0].a[i] = 0.0;
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 1, 1});
  const Tensor<double> enc = coda::encode_input(img);
  const auto map = coda::contributions(net, img, 0);
  // patches are single pixels: each location's weight vector is g(b)
  const Tensor<double> gb = coda::rescale_groups(net.layers[0].bias, 6, Rescale::L2);
  for (int c = 0; c < 6; ++c)
    CHECK(map.values[c] == doctest::Approx(gb[c] * enc[c] / 2.0).epsilon(1e-10));
}

TEST_CASE("contributions differ from input-times-gradient") {
  Rng rng(29);
  CodaNet<double> net = small_net(rng);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 9, 9});
  const auto map = coda::contributions(net, img, 0);

  Graph<double> graph;
  auto vars = coda::make_net_vars(graph, net, false);
  auto input = graph.leaf(coda::encode_input(img), true);
  auto trace = coda::forward_graph(graph, net, vars, input);
  Tensor<double> mask({3});
  mask[0] = 1.0;
  auto grads = graph.backward(graph.sum(graph.elementwise_mul(trace.logits, graph.constant(mask))));
  const Tensor<double> ixg = coda::mul(graph.grad_of(grads, input), coda::encode_input(img));
  CHECK(static_cast<double>(coda::max_abs_diff(map.values, ixg)) > 1e-6);
}

TEST_CASE("loss with lambda 0 reduces to sigmoid BCE over logits plus b0") {
  Rng rng(31);
  CodaNet<double> net = small_net(rng);
  net.lambda = 0.0;
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 9, 9});
  Tensor<double> onehot({3});
  onehot[1] = 1.0;
  Rng loss_rng(1);
  const double value = coda::loss(net, img, onehot, loss_rng);

  const Tensor<double> logits = coda::forward(net, img);
  double expected = 0;
  for (int j = 0; j < 3; ++j) {
    const double z = logits[j] + net.output_bias[j];
    const double y = onehot[j];
    expected += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  CHECK(value == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("lambda term equals lambda times mean abs of the selected rows") {
  Rng rng(37);
  CodaNet<double> net = small_net(rng);
  net.lambda = 0.3;
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 9, 9});
  Tensor<double> onehot({3});
  onehot[2] = 1.0;

  Graph<double> graph;
  auto vars = coda::make_net_vars(graph, net, false);
  auto input = graph.constant(coda::encode_input(img));
  Rng pick_rng(5);
  const auto lv = coda::loss_graph(graph, net, vars, input, onehot, pick_rng);
  const double reg = graph.value(lv.total)[0] - graph.value(lv.bce)[0];

  // recompute from collapse_full over the same classes
  Rng pick_again(5);
  const std::vector<int> classes = coda::regularizer_classes(net, 2, pick_again);
  const Tensor<double> full = coda::collapse_full(net, img);
  double acc = 0;
  std::int64_t count = 0;
  for (const int cls : classes)
    for (std::int64_t i = 0; i < full.numel() / 3; ++i) {
      acc += std::abs(full[cls * (full.numel() / 3) + i]);
      ++count;
    }
  CHECK(reg == doctest::Approx(0.3 * acc / static_cast<double>(count)).epsilon(1e-8));
}

TEST_CASE("malformed one-hot target is rejected") {
  Rng rng(41);
  CodaNet<double> net = small_net(rng);
  const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 9, 9});
  Tensor<double> bad({3});
  bad[0] = 0.5;
  bad[1] = 0.5;
  Rng loss_rng(1);
  CHECK_THROWS_AS((void)coda::loss(net, img, bad, loss_rng), coda::contract_error);
}

TEST_CASE("re-randomising any single layer perturbs contribution maps") {
  Rng rng(43);
  int perturbed = 0, probes = 0;
  for (int trial = 0; trial < 10; ++trial) {
    CodaNet<double> net = small_net(rng);
    const Tensor<double> img = coda::rand_uniform<double>(rng, {3, 9, 9});
    const auto base = coda::contributions(net, img, 0);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      CodaNet<double> probe = net;
      probe.layers[l].init(rng);
      const auto map = coda::contributions(probe, img, 0);
      const double denom = std::max(static_cast<double>(coda::norm2(base.values)),
                                    static_cast<double>(coda::norm2(map.values)));
      const double dist = static_cast<double>(coda::norm2(coda::sub(base.values, map.values))) / denom;
      if (dist > 0.1) ++perturbed;
      ++probes;
    }
  }
  CHECK(static_cast<double>(perturbed) >= 0.95 * probes);
}

TEST_CASE("config round trip preserves the network description") {
  Rng rng(47);
  CodaNet<double> net = small_net(rng, "lambda 0.05\nb0 -1.5\n");
  std::ostringstream out;
  coda::write_net_config(out, net);
  CodaNet<double> back = coda::parse_net_config<double>(out.str());
  CHECK(back.num_classes == net.num_classes);
  CHECK(back.temperature == net.temperature);
  CHECK(back.lambda == net.lambda);
  CHECK(back.output_bias[0] == net.output_bias[0]);
  REQUIRE(back.layers.size() == net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    CHECK(back.layers[l].out_channels == net.layers[l].out_channels);
    CHECK(back.layers[l].rank == net.layers[l].rank);
    CHECK(back.layers[l].kernel == net.layers[l].kernel);
    CHECK(back.layers[l].stride == net.layers[l].stride);
    CHECK(back.layers[l].padding == net.layers[l].padding);
  }
  CHECK_THROWS_AS((void)coda::parse_net_config<double>("temperature 1\n"), coda::format_error);
}

TEST_CASE("default output bias makes sigma(b0) the balanced prior") {
  const Tensor<double> b0 = coda::CodaNet<double>::default_output_bias(10);
  REQUIRE(b0.numel() == 10);
  for (int c = 0; c < 10; ++c) CHECK(b0[c] == doctest::Approx(std::log(1.0 / 9.0)).epsilon(1e-12));
}
