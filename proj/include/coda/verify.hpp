#ifndef CODA_VERIFY_HPP
#define CODA_VERIFY_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "coda/dau.hpp"
#include "coda/network.hpp"

namespace coda {

// Test-only hook: scales one row of the first layer's dense matrix inside the
// collapse suite's reference route, so a corrupted linear map is detectable.
inline double& collapse_fault_scale() {
  static double scale = 1.0;
  return scale;
}

struct SuiteResult {
  std::string name;
  double worst_error = 0;
  double tolerance = 0;
  bool pass = false;
  std::string detail;
};

template <typename S>
struct Preset {
  std::string name;
  CodaNet<S> net;
  int height = 0, width = 0;
};

// Plain-text configs double as parser exercise; the deepest preset reaches the
// full 6x32x32 encoded input size.
template <typename S>
std::vector<Preset<S>> verification_presets() {
  std::vector<Preset<S>> presets;
  presets.push_back({"1-layer",
                     parse_net_config<S>("nonlinearity sq\ntemperature 10\nnum_classes 10\n"
                                         "layer f=10 r=8 k=4 s=2 p=1\n"),
                     16, 16});
  presets.push_back({"3-layer",
                     parse_net_config<S>("nonlinearity l2\ntemperature 64\nnum_classes 10\n"
                                         "layer f=16 r=8 k=4 s=2 p=1\n"
                                         "layer f=16 r=12 k=4 s=2 p=1\n"
                                         "layer f=10 r=12 k=3 s=1\n"),
                     32, 32});
  std::string deep = "nonlinearity sq\ntemperature 64\nnum_classes 10\n";
  const int fs[9] = {8, 8, 8, 12, 12, 12, 12, 12, 10};
  const int rs[9] = {6, 6, 6, 8, 8, 8, 8, 8, 8};
  for (int l = 0; l < 9; ++l) {
    std::ostringstream line;
    if (l % 3 == 0) line << "layer f=" << fs[l] << " r=" << rs[l] << " k=4 s=2 p=1\n";
    else line << "layer f=" << fs[l] << " r=" << rs[l] << " k=3 s=1\n";
    deep += line.str();
  }
  presets.push_back({"9-layer", parse_net_config<S>(deep), 32, 32});
  return presets;
}

template <typename S>
Tensor<S> random_image(int h, int w, Rng& rng) {
  Tensor<S> img({3, h, w});
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<S>(rng.next_double());
  return img;
}

// Suite 1: forward(x) must equal T^-1 * W_{0->L}(x) * vec(encode(x)).
template <typename S>
SuiteResult linearity_suite(int draws_per_preset, std::uint64_t seed, double tolerance) {
  SuiteResult result{"linearity", 0, tolerance, false, ""};
  Rng rng(seed);
  for (const auto& preset : verification_presets<S>()) {
    CodaNet<S> net = preset.net;
    for (int draw = 0; draw < draws_per_preset; ++draw) {
      net.init(rng);
      const Tensor<S> image = random_image<S>(preset.height, preset.width, rng);
      const Tensor<S> logits = forward(net, image);
      const Tensor<S> rows = collapse_full(net, image);
      const Tensor<S> encoded = maybe_encode(net, image);
      for (int j = 0; j < net.num_classes; ++j) {
        S acc{0};
        for (std::int64_t i = 0; i < encoded.numel(); ++i)
          acc += rows[static_cast<std::int64_t>(j) * encoded.numel() + i] * encoded[i];
        const double err = std::abs(static_cast<double>(acc / net.temperature - logits[j]));
        if (err > result.worst_error) {
          result.worst_error = err;
          result.detail = preset.name;
        }
      }
    }
  }
  result.pass = result.worst_error < tolerance;
  return result;
}

// Suite 1b: per-class contribution maps must sum back to the logits.
template <typename S>
SuiteResult completeness_suite(int probes, std::uint64_t seed, double tolerance) {
  SuiteResult result{"completeness", 0, tolerance, false, ""};
  Rng rng(seed);
  const auto presets = verification_presets<S>();
  for (int probe = 0; probe < probes; ++probe) {
    const auto& preset = presets[static_cast<std::size_t>(probe) % presets.size()];
    CodaNet<S> net = preset.net;
    net.init(rng);
    const Tensor<S> image = random_image<S>(preset.height, preset.width, rng);
    const Tensor<S> logits = forward(net, image);
    for (int j = 0; j < net.num_classes; ++j) {
      const ContributionMap<S> map = contributions(net, image, j);
      const double err = std::abs(static_cast<double>(sum(map.values) - logits[j]));
      if (err > result.worst_error) {
        result.worst_error = err;
        result.detail = preset.name;
      }
    }
  }
  result.pass = result.worst_error < tolerance;
  return result;
}

// Suite 2: |g(ABx + b)^T x| <= ||x|| for both norm rescalings.
template <typename S>
SuiteResult bounds_suite(int evaluations, std::uint64_t seed, double tolerance) {
  SuiteResult result{"bounds", 0, tolerance, false, ""};
  Rng rng(seed);
  for (int e = 0; e < evaluations; ++e) {
    const int d = 2 + static_cast<int>(rng.next_below(15));
    const int r = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(d)));
    const double mag = std::pow(10.0, 3.0 * (rng.next_double() * 2.0 - 1.0));
    Tensor<S> x({d}), bias({d});
    for (int i = 0; i < d; ++i) {
      x[i] = static_cast<S>((rng.next_double() * 2.0 - 1.0) * mag);
      bias[i] = static_cast<S>(rng.next_normal());
    }
    Tensor<S> a = rand_normal<S>(rng, {d, r}), b_mat = rand_normal<S>(rng, {r, d});
    const Rescale kind = (e % 2 == 0) ? Rescale::L2 : Rescale::SQ;
    const auto res = dau_forward(x, a, b_mat, bias, kind);
    const double violation =
        std::abs(static_cast<double>(res.output)) - static_cast<double>(norm2(x));
    if (violation > result.worst_error) result.worst_error = violation;
  }
  result.pass = result.worst_error <= tolerance;
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking: analytic gradients vs central differences. Builders get a
// fresh graph plus leaves holding (possibly perturbed) copies of the inputs
// and return a scalar root.
// ---------------------------------------------------------------------------

template <typename S>
using GraphBuilder = std::function<typename Graph<S>::Var(Graph<S>&, const std::vector<typename Graph<S>::Var>&)>;

template <typename S>
double gradient_check(const GraphBuilder<S>& build, std::vector<Tensor<S>> inputs, double h = 1e-5) {
  auto eval = [&](const std::vector<Tensor<S>>& vals) {
    Graph<S> graph;
    std::vector<typename Graph<S>::Var> leaves;
    for (const auto& v : vals) leaves.push_back(graph.leaf(v, true));
    return static_cast<double>(graph.value(build(graph, leaves))[0]);
  };

  Graph<S> graph;
  std::vector<typename Graph<S>::Var> leaves;
  for (const auto& v : inputs) leaves.push_back(graph.leaf(v, true));
  auto root = build(graph, leaves);
  if (graph.value(root).numel() != 1) throw contract_error("gradient_check: root must be scalar");
  auto grads = graph.backward(root);

  double worst = 0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Tensor<S> analytic = graph.grad_of(grads, leaves[t]);
    for (std::int64_t i = 0; i < inputs[t].numel(); ++i) {
      const S saved = inputs[t][i];
      inputs[t][i] = saved + static_cast<S>(h);
      const double up = eval(inputs);
      inputs[t][i] = saved - static_cast<S>(h);
      const double down = eval(inputs);
      inputs[t][i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = static_cast<double>(analytic[i]);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Suite 3a: per-op finite-difference checks across several random draws.
template <typename S>
SuiteResult op_gradients_suite(int seeds, std::uint64_t seed, double tolerance) {
  SuiteResult result{"gradients/ops", 0, tolerance, false, ""};
  using Var = typename Graph<S>::Var;
  using Vars = std::vector<Var>;
  auto track = [&](const std::string& op, double err) {
    if (err > result.worst_error) {
      result.worst_error = err;
      result.detail = op;
    }
  };

  // Builders run once per finite-difference evaluation, so every tensor a
  // builder uses must be drawn before the closure is created.
  Rng rng(seed);
  for (int s = 0; s < seeds; ++s) {
    const Tensor<S> m34 = rand_normal<S>(rng, {3, 4}), n34 = rand_normal<S>(rng, {3, 4});
    const Tensor<S> o34 = rand_normal<S>(rng, {3, 4}), m45 = rand_normal<S>(rng, {4, 5});
    const Tensor<S> w35 = rand_normal<S>(rng, {3, 5}), w4 = rand_normal<S>(rng, {4});
    const Tensor<S> w3 = rand_normal<S>(rng, {3}), w43 = rand_normal<S>(rng, {4, 3});
    const Tensor<S> m63 = rand_normal<S>(rng, {6, 3}), w63 = rand_normal<S>(rng, {6, 3});
    const Tensor<S> z6 = rand_normal<S>(rng, {6});
    Tensor<S> col({3}), probs({6});
    for (int i = 0; i < 3; ++i) col[i] = static_cast<S>(rng.next_normal());
    for (int i = 0; i < 6; ++i) probs[i] = static_cast<S>(rng.next_double());

    track("add", gradient_check<S>(
                     [&](Graph<S>& g, const Vars& v) {
                       return g.sum(g.elementwise_mul(g.add(v[0], v[1]), g.constant(n34)));
                     },
                     {m34, o34}));
    track("sub", gradient_check<S>(
                     [&](Graph<S>& g, const Vars& v) {
                       return g.sum(g.elementwise_mul(g.sub(v[0], v[1]), g.constant(n34)));
                     },
                     {m34, o34}));
    track("mul", gradient_check<S>(
                     [&](Graph<S>& g, const Vars& v) { return g.sum(g.elementwise_mul(v[0], v[1])); },
                     {m34, o34}));
    track("matmul", gradient_check<S>(
                        [&](Graph<S>& g, const Vars& v) {
                          return g.sum(g.elementwise_mul(g.matmul(v[0], v[1]), g.constant(w35)));
                        },
                        {m34, m45}));
    track("scale+add_scalar",
          gradient_check<S>(
              [&](Graph<S>& g, const Vars& v) { return g.sum(g.add_scalar(g.scale(v[0], S{0.7}), S{0.3})); },
              {m34}));
    track("sum_axis0", gradient_check<S>(
                           [&](Graph<S>& g, const Vars& v) {
                             return g.sum(g.elementwise_mul(g.sum_axis(v[0], 0), g.constant(w4)));
                           },
                           {m34}));
    track("sum_axis1", gradient_check<S>(
                           [&](Graph<S>& g, const Vars& v) {
                             return g.sum(g.elementwise_mul(g.sum_axis(v[0], 1), g.constant(w3)));
                           },
                           {m34}));
    track("reshape", gradient_check<S>(
                         [&](Graph<S>& g, const Vars& v) {
                           return g.sum(g.elementwise_mul(g.reshape(v[0], {4, 3}), g.constant(w43)));
                         },
                         {m34}));
    track("sigmoid", gradient_check<S>(
                         [&](Graph<S>& g, const Vars& v) {
                           return g.sum(g.elementwise_mul(g.sigmoid(v[0]), g.constant(n34)));
                         },
                         {m34}));
    track("bce_with_logits",
          gradient_check<S>(
              [&](Graph<S>& g, const Vars& v) { return g.bce_with_logits(v[0], g.constant(probs)); },
              {z6}));
    track("abs_mean", gradient_check<S>([&](Graph<S>& g, const Vars& v) { return g.abs_mean(v[0]); }, {m34}));
    track("l2_rescale", gradient_check<S>(
                            [&](Graph<S>& g, const Vars& v) {
                              return g.sum(g.elementwise_mul(g.l2_rescale(v[0]), g.constant(n34)));
                            },
                            {m34}));
    track("sq_rescale", gradient_check<S>(
                            [&](Graph<S>& g, const Vars& v) {
                              return g.sum(g.elementwise_mul(g.sq_rescale(v[0]), g.constant(n34)));
                            },
                            {m34}));
    track("group_rescale_l2",
          gradient_check<S>(
              [&](Graph<S>& g, const Vars& v) {
                return g.sum(g.elementwise_mul(g.group_rescale(v[0], 2, Rescale::L2), g.constant(w63)));
              },
              {m63}));
    track("group_rescale_sq",
          gradient_check<S>(
              [&](Graph<S>& g, const Vars& v) {
                return g.sum(g.elementwise_mul(g.group_rescale(v[0], 2, Rescale::SQ), g.constant(w63)));
              },
              {m63}));
    track("add_col", gradient_check<S>(
                         [&](Graph<S>& g, const Vars& v) {
                           return g.sum(g.elementwise_mul(g.add_col(v[0], v[1]), g.constant(n34)));
                         },
                         {m34, col}));

    const ConvGeometry geom(2, 5, 5, 3, 2, 1);
    const int f = 2, pd = geom.patch_dim(), L = geom.num_locations();
    const Tensor<S> img = rand_normal<S>(rng, {2, 5, 5});
    const Tensor<S> w_unfold = rand_normal<S>(rng, {pd, L});
    const Tensor<S> dau_w = rand_normal<S>(rng, {f * pd, L}), dau_p = rand_normal<S>(rng, {pd, L});
    const Tensor<S> w_fL = rand_normal<S>(rng, {f, L});
    const Tensor<S> bundle = rand_normal<S>(rng, {2, f * L});
    const Tensor<S> w_in = rand_normal<S>(rng, {2, static_cast<int>(geom.input_numel())});
    track("unfold", gradient_check<S>(
                        [&](Graph<S>& g, const Vars& v) {
                          auto u = g.unfold(v[0], geom.kernel, geom.stride, geom.padding);
                          return g.sum(g.elementwise_mul(u, g.constant(w_unfold)));
                        },
                        {img}));
    track("dau_apply", gradient_check<S>(
                           [&](Graph<S>& g, const Vars& v) {
                             auto out = g.dau_apply(v[0], v[1], f);
                             return g.sum(g.elementwise_mul(out, g.constant(w_fL)));
                           },
                           {dau_w, dau_p}));
    track("layer_transpose_apply",
          gradient_check<S>(
              [&](Graph<S>& g, const Vars& v) {
                auto out = g.layer_transpose_apply(v[0], v[1], geom, f);
                return g.sum(g.elementwise_mul(out, g.constant(w_in)));
              },
              {bundle, dau_w}));
  }
  result.pass = result.worst_error < tolerance;
  return result;
}

// Suite 3b: full training objective vs central differences on every parameter
// of a tiny network. Class sampling inside the loss is re-seeded per
// evaluation so perturbed evaluations see identical class subsets.
template <typename S>
SuiteResult loss_gradient_suite(std::uint64_t seed, double tolerance) {
  SuiteResult result{"gradients/loss", 0, tolerance, false, ""};
  Rng rng(seed);
  CodaNet<S> net = parse_net_config<S>(
      "nonlinearity sq\ntemperature 8\nlambda 0.05\nnum_classes 3\n"
      "layer f=4 r=4 k=3 s=2\nlayer f=3 r=4 k=3 s=1\n");
  net.init(rng);
  const Tensor<S> image = random_image<S>(7, 7, rng);
  Tensor<S> onehot({3});
  onehot[1] = S{1};

  auto eval = [&](const CodaNet<S>& candidate) {
    Rng class_rng(seed + 17);
    return static_cast<double>(loss(candidate, image, onehot, class_rng));
  };

  Graph<S> graph;
  NetVars<S> vars = make_net_vars(graph, net, true);
  auto input = graph.constant(maybe_encode(net, image));
  Rng class_rng(seed + 17);
  LossVars<S> lv = loss_graph(graph, net, vars, input, onehot, class_rng);
  auto grads = graph.backward(lv.total);

  const double h = 1e-5;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    Tensor<S>* params[3] = {&net.layers[l].a, &net.layers[l].b, &net.layers[l].bias};
    typename Graph<S>::Var leaves[3] = {vars.layers[l].a, vars.layers[l].b, vars.layers[l].bias};
    for (int p = 0; p < 3; ++p) {
      const Tensor<S> analytic = graph.grad_of(grads, leaves[p]);
      for (std::int64_t i = 0; i < params[p]->numel(); ++i) {
        const S saved = (*params[p])[i];
        (*params[p])[i] = saved + static_cast<S>(h);
        const double up = eval(net);
        (*params[p])[i] = saved - static_cast<S>(h);
        const double down = eval(net);
        (*params[p])[i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double a = static_cast<double>(analytic[i]);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
        if (rel > result.worst_error) result.worst_error = rel;
      }
    }
  }
  result.pass = result.worst_error < tolerance;
  return result;
}

// Suite 4: the production collapse (row-bundle transpose propagation) against
// an independent dense route, Pool * product of explicit per-layer matrices.
template <typename S>
SuiteResult collapse_suite(int draws, std::uint64_t seed, double tolerance) {
  SuiteResult result{"collapse", 0, tolerance, false, ""};
  Rng rng(seed);
  CodaNet<S> net = parse_net_config<S>(
      "nonlinearity l2\ntemperature 4\nnum_classes 4\n"
      "layer f=5 r=6 k=3 s=2\nlayer f=6 r=8 k=3 s=1\nlayer f=4 r=6 k=3 s=1\n");
  for (int draw = 0; draw < draws; ++draw) {
    net.init(rng);
    const Tensor<S> image = random_image<S>(9, 9, rng);
    const ForwardTrace<S> trace = forward_trace(net, image);

    Tensor<S> dense;
    Tensor<S> current = trace.encoded;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      LayerLinearMap<S> lm = layer_matrix(net.layers[l], current);
      if (l == 0 && collapse_fault_scale() != 1.0)
        for (int c = 0; c < lm.matrix.dim(1); ++c)
          lm.matrix.at(0, c) = static_cast<S>(static_cast<double>(lm.matrix.at(0, c)) * collapse_fault_scale());
      dense = (l == 0) ? lm.matrix : matmul(lm.matrix, dense);
      current = trace.layers[l].output;
    }
    const auto& last = trace.layers.back();
    const Tensor<S> pooled =
        matmul(sum_pool_matrix<S>(net.num_classes, last.geom.out_height, last.geom.out_width), dense);
    const Tensor<S> rows = collapse_full(net, image);
    const double err = static_cast<double>(max_abs_diff(pooled, rows));
    if (err > result.worst_error) result.worst_error = err;
  }
  result.pass = result.worst_error < tolerance;
  return result;
}

}  // namespace coda

#endif  // CODA_VERIFY_HPP
