#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "coda/autodiff.hpp"
#include "coda/dau.hpp"
#include "coda/verify.hpp"

using coda::Graph;
using coda::Rescale;
using coda::Rng;
using coda::Tensor;

TEST_CASE("sq_rescale at the zero vector stays zero") {
  Graph<double> g;
  Tensor<double> zero({4});
  auto out = g.sq_rescale(g.constant(zero));
  for (int i = 0; i < 4; ++i) CHECK(g.value(out)[i] == 0.0);
}

TEST_CASE("sq_rescale of (3,4) is (15/26, 20/26)") {
  Graph<double> g;
  Tensor<double> u({2});
  u[0] = 3;
  u[1] = 4;
  auto out = g.sq_rescale(g.constant(u));
  CHECK(g.value(out)[0] == doctest::Approx(15.0 / 26.0).epsilon(1e-10));
  CHECK(g.value(out)[1] == doctest::Approx(20.0 / 26.0).epsilon(1e-10));
}

TEST_CASE("l2_rescale yields a unit vector parallel to the input") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor<double> u = coda::rand_normal<double>(rng, {6});
    Graph<double> g;
    auto out = g.l2_rescale(g.constant(u));
    const Tensor<double>& w = g.value(out);
    CHECK(std::abs(static_cast<double>(coda::norm2(w)) - 1.0) < 1e-9);
    // parallel: w * ||u|| == u
    const double n = static_cast<double>(coda::norm2(u));
    for (int i = 0; i < 6; ++i) CHECK(w[i] * n == doctest::Approx(u[i]).epsilon(1e-9));
  }
}

TEST_CASE("backward of sum is all-ones") {
  Graph<double> g;
  Rng rng(9);
  auto x = g.leaf(coda::rand_normal<double>(rng, {3, 5}), true);
  auto grads = g.backward(g.sum(x));
  const Tensor<double> gx = g.grad_of(grads, x);
  for (int i = 0; i < 15; ++i) CHECK(gx[i] == 1.0);
}

TEST_CASE("gradient of l2_rescale(x)^T x is x over its norm") {
  Rng rng(13);
  const Tensor<double> xv = coda::rand_normal<double>(rng, {7});
  Graph<double> g;
  auto x = g.leaf(xv, true);
  auto root = g.sum(g.elementwise_mul(g.l2_rescale(x), x));
  auto grads = g.backward(root);
  const Tensor<double> gx = g.grad_of(grads, x);
  const double n = static_cast<double>(coda::norm2(xv));
  for (int i = 0; i < 7; ++i) CHECK(gx[i] == doctest::Approx(xv[i] / n).epsilon(1e-8));
}

TEST_CASE("non-scalar backward root is rejected") {
  Graph<double> g;
  Rng rng(1);
  auto x = g.leaf(coda::rand_normal<double>(rng, {2, 2}), true);
  CHECK_THROWS_AS((void)g.backward(x), coda::contract_error);
}

// Scalar DAU output built from graph ops; used for the finite-difference
// oracle and the detach comparisons below.
template <bool DetachWeights>
static coda::Graph<double>::Var dau_root(Graph<double>& g, coda::Graph<double>::Var x,
                                         coda::Graph<double>::Var a, coda::Graph<double>::Var b,
                                         coda::Graph<double>::Var bias) {
  const int d = static_cast<int>(g.value(x).numel());
  auto xc = g.reshape(x, {d, 1});
  auto pre = g.add(g.reshape(g.matmul(a, g.matmul(b, xc)), {d}), bias);
  auto w = g.l2_rescale(pre);
  if constexpr (DetachWeights) w = g.detach(w);
  return g.sum(g.elementwise_mul(w, x));
}

TEST_CASE("full DAU gradient matches central differences (d=6, r=2)") {
  Rng rng(21);
  const Tensor<double> a = coda::rand_normal<double>(rng, {6, 2});
  const Tensor<double> b = coda::rand_normal<double>(rng, {2, 6});
  const Tensor<double> bias = coda::rand_normal<double>(rng, {6});
  const Tensor<double> x = coda::rand_normal<double>(rng, {6});
  const double err = coda::gradient_check<double>(
      [](Graph<double>& g, const std::vector<coda::Graph<double>::Var>& v) {
        return dau_root<false>(g, v[0], v[1], v[2], v[3]);
      },
      {x, a, b, bias});
  CHECK(err < 1e-6);
}

TEST_CASE("detached weights: gradient w.r.t. x is w, w.r.t. parameters zero") {
  Rng rng(31);
  const Tensor<double> av = coda::rand_normal<double>(rng, {6, 2});
  const Tensor<double> bv = coda::rand_normal<double>(rng, {2, 6});
  const Tensor<double> biasv = coda::rand_normal<double>(rng, {6});
  const Tensor<double> xv = coda::rand_normal<double>(rng, {6});

  Graph<double> g;
  auto x = g.leaf(xv, true);
  auto a = g.leaf(av, true);
  auto b = g.leaf(bv, true);
  auto bias = g.leaf(biasv, true);
  auto root = dau_root<true>(g, x, a, b, bias);
  auto grads = g.backward(root);

  const auto w = coda::dau_forward(xv, av, bv, biasv, Rescale::L2).weights;
  const Tensor<double> gx = g.grad_of(grads, x);
  CHECK(coda::max_abs_diff(gx, w) < 1e-12);
  CHECK(static_cast<double>(coda::max_abs(g.grad_of(grads, a))) == 0.0);
  CHECK(static_cast<double>(coda::max_abs(g.grad_of(grads, b))) == 0.0);
  CHECK(static_cast<double>(coda::max_abs(g.grad_of(grads, bias))) == 0.0);
}

TEST_CASE("detached vs full DAU input-gradients differ on random instances") {
  Rng rng(41);
  int differing = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor<double> av = coda::rand_normal<double>(rng, {6, 2});
    const Tensor<double> bv = coda::rand_normal<double>(rng, {2, 6});
    const Tensor<double> biasv = coda::rand_normal<double>(rng, {6});
    const Tensor<double> xv = coda::rand_normal<double>(rng, {6});

    auto grad_of_variant = [&](bool detach) {
      Graph<double> g;
      auto x = g.leaf(xv, true);
      auto a = g.constant(av);
      auto b = g.constant(bv);
      auto bias = g.constant(biasv);
      auto root = detach ? dau_root<true>(g, x, a, b, bias) : dau_root<false>(g, x, a, b, bias);
      auto grads = g.backward(root);
      return g.grad_of(grads, x);
    };
    if (static_cast<double>(coda::max_abs_diff(grad_of_variant(true), grad_of_variant(false))) > 1e-8)
      ++differing;
  }
  CHECK(differing == 10);
}

TEST_CASE("per-op gradient checks across 20 seeds") {
  const coda::SuiteResult r = coda::op_gradients_suite<double>(20, 1234, 1e-4);
  INFO("worst op: " << r.detail << " error " << r.worst_error);
  CHECK(r.pass);
}

TEST_CASE("end-to-end loss gradient matches finite differences") {
  const coda::SuiteResult r = coda::loss_gradient_suite<double>(77, 1e-3);
  INFO("worst error " << r.worst_error);
  CHECK(r.pass);
}

TEST_CASE("rescale backward is finite at and near the zero vector") {
  for (const Rescale kind : {Rescale::L2, Rescale::SQ}) {
    for (const double mag : {0.0, 1e-9, 1e-6}) {
      Graph<double> g;
      Tensor<double> u({3});
      u[0] = mag;
      auto x = g.leaf(u, true);
      auto out = g.group_rescale(x, 3, kind);
      Tensor<double> cot({3});
      cot[0] = 1.0;
      cot[1] = -2.0;
      auto grads = g.backward(g.sum(g.elementwise_mul(out, g.constant(cot))));
      const Tensor<double> gx = g.grad_of(grads, x);
      for (int i = 0; i < 3; ++i) CHECK(std::isfinite(gx[i]));
    }
  }
}

TEST_CASE("rescale backward is continuous for norms at or above 1e-6") {
  Rng rng(55);
  const Tensor<double> dir = coda::rand_normal<double>(rng, {4});
  const Tensor<double> cot = coda::rand_normal<double>(rng, {4});
  for (const Rescale kind : {Rescale::L2, Rescale::SQ}) {
    auto grad_at = [&](double scale) {
      Tensor<double> u = dir;
      const double n = static_cast<double>(coda::norm2(dir));
      for (int i = 0; i < 4; ++i) u[i] *= scale / n;
      Graph<double> g;
      auto x = g.leaf(u, true);
      auto out = g.group_rescale(x, 4, kind);
      auto grads = g.backward(g.sum(g.elementwise_mul(out, g.constant(cot))));
      return g.grad_of(grads, x);
    };
    const Tensor<double> g1 = grad_at(1e-6);
    const Tensor<double> g2 = grad_at(1e-6 * (1.0 + 1e-7));
    // relative continuity: a tiny relative input change produces a tiny
    // relative gradient change
    const double denom = std::max(1.0, static_cast<double>(coda::max_abs(g1)));
    CHECK(static_cast<double>(coda::max_abs_diff(g1, g2)) / denom < 1e-4);
  }
}
