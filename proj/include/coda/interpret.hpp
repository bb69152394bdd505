#ifndef CODA_INTERPRET_HPP
#define CODA_INTERPRET_HPP

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "coda/datasets.hpp"
#include "coda/network.hpp"
#include "coda/train.hpp"

namespace coda {

// Runs the layer stack on an already 6-channel-encoded input (used by
// occlusion and pixel removal, which perturb in encoded space).
template <typename S>
Tensor<S> forward_from_encoded(const CodaNet<S>& net, const Tensor<S>& encoded) {
  Tensor<S> act = encoded;
  for (const auto& layer : net.layers) act = conv_forward(layer, act).output;
  const int k = net.num_classes, plane = act.dim(1) * act.dim(2);
  Tensor<S> logits({k});
  for (int c = 0; c < k; ++c) {
    S acc{0};
    for (int i = 0; i < plane; ++i) acc += act[static_cast<std::int64_t>(c) * plane + i];
    logits[c] = acc / net.temperature;
  }
  return logits;
}

enum class AttributionKind { CoDA, Grad, IxG, Occlusion };

struct AttributionMethod {
  AttributionKind kind = AttributionKind::CoDA;
  int occlusion_size = 5;
  int occlusion_stride = 2;  // CIFAR-scale default

  static AttributionMethod coda() { return {AttributionKind::CoDA}; }
  static AttributionMethod grad() { return {AttributionKind::Grad}; }
  static AttributionMethod ixg() { return {AttributionKind::IxG}; }
  static AttributionMethod occlusion(int k, int stride = 2) { return {AttributionKind::Occlusion, k, stride}; }
};

// Raw (signed) gradient of logit j with respect to the encoded input.
template <typename S>
Tensor<S> input_gradient(const CodaNet<S>& net, const Tensor<S>& image, int class_index) {
  if (class_index < 0 || class_index >= net.num_classes) throw contract_error("input_gradient: bad class index");
  Graph<S> graph;
  NetVars<S> vars = make_net_vars(graph, net, false);
  auto input = graph.leaf(maybe_encode(net, image), true);
  GraphTrace<S> trace = forward_graph(graph, net, vars, input);
  Tensor<S> mask({net.num_classes});
  mask[class_index] = S{1};
  auto root = graph.sum(graph.elementwise_mul(trace.logits, graph.constant(mask)));
  auto grads = graph.backward(root);
  return graph.grad_of(grads, input);
}

template <typename S>
Tensor<S> channel_sum(const Tensor<S>& t) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor<S> m({h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h * w; ++i) m[i] += t[static_cast<std::int64_t>(ch) * h * w + i];
  return m;
}

// Occlusion sensitivity: logit drop when a K x K patch of the encoded input is
// zeroed in all channels, evaluated on a strided grid of patch positions and
// interpolated bilinearly back to per-pixel resolution.
template <typename S>
Tensor<S> occlusion_map(const CodaNet<S>& net, const Tensor<S>& image, int class_index, int k, int stride) {
  const Tensor<S> encoded = maybe_encode(net, image);
  const int h = encoded.dim(1), w = encoded.dim(2);
  if (k > std::min(h, w)) throw contract_error("occlusion: patch larger than image");
  const S base = forward_from_encoded(net, encoded)[class_index];

  const int nh = (h - k) / stride + 1, nw = (w - k) / stride + 1;
  Tensor<S> drops({nh, nw});
  for (int i = 0; i < nh; ++i)
    for (int j = 0; j < nw; ++j) {
      Tensor<S> occluded = encoded;
      for (int ch = 0; ch < encoded.dim(0); ++ch)
        for (int y = i * stride; y < i * stride + k; ++y)
          for (int x = j * stride; x < j * stride + k; ++x) occluded.at(ch, y, x) = S{0};
      drops.at(i, j) = base - forward_from_encoded(net, occluded)[class_index];
    }

  // Grid point (i, j) sits at the centre of its patch.
  const double off = (k - 1) / 2.0;
  auto grid_coord = [&](int idx) { return off + idx * stride; };
  Tensor<S> out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fy = std::clamp((static_cast<double>(y) - grid_coord(0)) / stride, 0.0, nh - 1.0);
      const double fx = std::clamp((static_cast<double>(x) - grid_coord(0)) / stride, 0.0, nw - 1.0);
      const int y0 = std::min(static_cast<int>(fy), nh - 1), y1 = std::min(y0 + 1, nh - 1);
      const int x0 = std::min(static_cast<int>(fx), nw - 1), x1 = std::min(x0 + 1, nw - 1);
      const double ty = fy - y0, tx = fx - x0;
      out.at(y, x) = static_cast<S>((1 - ty) * ((1 - tx) * drops.at(y0, x0) + tx * drops.at(y0, x1)) +
                                    ty * ((1 - tx) * drops.at(y1, x0) + tx * drops.at(y1, x1)));
    }
  return out;
}

// Per-pixel attribution map for one class. CoDA and IxG are channel-summed
// contribution decompositions; Grad is the raw channel-summed gradient.
template <typename S>
Tensor<S> attribute(const AttributionMethod& method, const CodaNet<S>& net, const Tensor<S>& image,
                    int class_index) {
  if (class_index < 0 || class_index >= net.num_classes) throw contract_error("attribute: bad class index");
  switch (method.kind) {
    case AttributionKind::CoDA:
      return contributions(net, image, class_index).spatial();
    case AttributionKind::Grad:
      return channel_sum(input_gradient(net, image, class_index));
    case AttributionKind::IxG: {
      const Tensor<S> g = input_gradient(net, image, class_index);
      return channel_sum(mul(g, maybe_encode(net, image)));
    }
    case AttributionKind::Occlusion:
      return occlusion_map(net, image, class_index, method.occlusion_size, method.occlusion_stride);
  }
  throw contract_error("attribute: unknown method");
}

// Pointing-game score: fraction of positive attribution mass inside the cell
// of the queried class. Zero positive mass scores 1/n^2, the random baseline.
template <typename S>
double pointing_score(const Tensor<S>& attr, const GridSample<S>& grid, int class_index) {
  const int n = grid.cells_per_side;
  if (attr.rank() != 2 || attr.dim(0) != grid.image.dim(1) || attr.dim(1) != grid.image.dim(2))
    throw shape_error("pointing_score: attribution/grid geometry mismatch");
  int target_cell = -1;
  for (int cell = 0; cell < n * n; ++cell)
    if (grid.cell_class[static_cast<std::size_t>(cell)] == class_index) target_cell = cell;
  if (target_cell < 0) throw contract_error("pointing_score: class not present in grid");

  const int ch = attr.dim(0) / n, cw = attr.dim(1) / n;
  double total = 0, inside = 0;
  for (int y = 0; y < attr.dim(0); ++y)
    for (int x = 0; x < attr.dim(1); ++x) {
      const double v = static_cast<double>(attr.at(y, x));
      if (v <= 0) continue;
      total += v;
      const int cell = (y / ch) * n + (x / cw);
      if (cell == target_cell) inside += v;
    }
  if (total <= 0) return 1.0 / (n * n);
  return inside / total;
}

enum class RemovalOrder { LeastFirst, MostFirst, Random };

template <typename S>
struct RemovalCurve {
  std::vector<double> fractions;  // strictly increasing, starts at 0
  std::vector<S> logits;
  RemovalOrder order = RemovalOrder::LeastFirst;
};

// Logit trajectory while pixels are zeroed (all encoded channels) in ranking
// order, up to a quarter of the image. Ties break in stable row-major order.
template <typename S>
RemovalCurve<S> pixel_removal_curve(const CodaNet<S>& net, const Tensor<S>& image, int class_index,
                                    const Tensor<S>& ranking, RemovalOrder order, int steps, Rng* rng = nullptr,
                                    double max_fraction = 0.25) {
  Tensor<S> encoded = maybe_encode(net, image);
  const int h = encoded.dim(1), w = encoded.dim(2);
  if (ranking.rank() != 2 || ranking.dim(0) != h || ranking.dim(1) != w)
    throw shape_error("pixel_removal_curve: ranking geometry mismatch");
  if (steps < 2) throw contract_error("pixel_removal_curve: need at least 2 steps");

  std::vector<int> pixel_order(static_cast<std::size_t>(h * w));
  std::iota(pixel_order.begin(), pixel_order.end(), 0);
  if (order == RemovalOrder::Random) {
    if (!rng) throw contract_error("pixel_removal_curve: random order needs an Rng");
    for (std::size_t i = pixel_order.size(); i > 1; --i)
      std::swap(pixel_order[i - 1], pixel_order[static_cast<std::size_t>(rng->next_below(i))]);
  } else {
    std::stable_sort(pixel_order.begin(), pixel_order.end(), [&](int a, int b) {
      return order == RemovalOrder::LeastFirst ? ranking[a] < ranking[b] : ranking[a] > ranking[b];
    });
  }

  RemovalCurve<S> curve;
  curve.order = order;
  int removed = 0;
  for (int s = 0; s < steps; ++s) {
    const double frac = max_fraction * s / (steps - 1);
    const int target = static_cast<int>(frac * h * w);
    while (removed < target) {
      const int p = pixel_order[static_cast<std::size_t>(removed++)];
      for (int ch = 0; ch < encoded.dim(0); ++ch) encoded[static_cast<std::int64_t>(ch) * h * w + p] = S{0};
    }
    curve.fractions.push_back(frac);
    curve.logits.push_back(forward_from_encoded(net, encoded)[class_index]);
  }
  return curve;
}

template <typename S>
double curve_area(const RemovalCurve<S>& curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.fractions.size(); ++i)
    area += 0.5 * (static_cast<double>(curve.logits[i]) + static_cast<double>(curve.logits[i - 1])) *
            (curve.fractions[i] - curve.fractions[i - 1]);
  return area;
}

// Parameter-randomisation sanity check: re-initialise layers one at a time to
// random parameters, deepest first, and record the contribution map after each
// cascading step. Entry 0 is the untouched network.
template <typename S>
struct SanityStep {
  int first_reinit_layer = 0;  // layers [first_reinit_layer, L) are random
  ContributionMap<S> map;
};

template <typename S>
std::vector<SanityStep<S>> sanity_randomization(const CodaNet<S>& net, const Tensor<S>& image, int class_index,
                                                Rng& rng) {
  std::vector<SanityStep<S>> steps;
  CodaNet<S> probe = net;
  const int num_layers = static_cast<int>(net.layers.size());
  steps.push_back(SanityStep<S>{num_layers, contributions(probe, image, class_index)});
  for (int l = num_layers - 1; l >= 0; --l) {
    probe.layers[static_cast<std::size_t>(l)].init(rng);
    steps.push_back(SanityStep<S>{l, contributions(probe, image, class_index)});
  }
  return steps;
}

struct EigenPair {
  double value = 0;
  Tensor<double> vector;  // unit norm, largest-magnitude entry positive
};

// Non-zero eigenpairs of the d x d rank-<=r matrix AB, obtained from the r x r
// matrix BA; pairs lift through v = A u. Complex and (near-)zero eigenvalues
// are dropped, so rank-deficient inputs yield fewer than r pairs.
template <typename S>
std::vector<EigenPair> dau_eigenvectors(const Tensor<S>& a, const Tensor<S>& b_mat, double tol = 1e-8) {
  if (a.rank() != 2 || b_mat.rank() != 2 || a.dim(1) != b_mat.dim(0) || a.dim(0) != b_mat.dim(1))
    throw shape_error("dau_eigenvectors: A must be d x r and B r x d");
  const int d = a.dim(0), r = a.dim(1);
  Eigen::MatrixXd ea(d, r), eb(r, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < r; ++j) ea(i, j) = static_cast<double>(a.at(i, j));
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < d; ++j) eb(i, j) = static_cast<double>(b_mat.at(i, j));

  const Eigen::MatrixXd ba = eb * ea;
  Eigen::EigenSolver<Eigen::MatrixXd> solver(ba);
  double max_abs_ev = 0;
  for (int i = 0; i < r; ++i) max_abs_ev = std::max(max_abs_ev, std::abs(solver.eigenvalues()[i]));

  std::vector<EigenPair> pairs;
  for (int i = 0; i < r; ++i) {
    const std::complex<double> ev = solver.eigenvalues()[i];
    if (std::abs(ev.imag()) > 1e-9 * std::max(1.0, std::abs(ev))) continue;
    if (std::abs(ev.real()) <= tol * std::max(1.0, max_abs_ev)) continue;
    Eigen::VectorXd lifted = ea * solver.eigenvectors().col(i).real();
    const double n = lifted.norm();
    if (n <= tol) continue;
    lifted /= n;
    int argmax = 0;
    for (int t = 1; t < d; ++t)
      if (std::abs(lifted(t)) > std::abs(lifted(argmax))) argmax = t;
    if (lifted(argmax) < 0) lifted = -lifted;
    EigenPair pair;
    pair.value = ev.real();
    pair.vector = Tensor<double>({d});
    for (int t = 0; t < d; ++t) pair.vector[t] = lifted(t);
    pairs.push_back(std::move(pair));
  }
  std::sort(pairs.begin(), pairs.end(), [](const EigenPair& x, const EigenPair& y) {
    return std::abs(x.value) > std::abs(y.value);
  });
  return pairs;
}

// ---------------------------------------------------------------------------
// Output maximisation of a single bias-free DAU over a sample set (gradient
// ascent with Adam on A and B, b frozen at zero). The learned AB concentrates
// on the principal directions of the data.
// ---------------------------------------------------------------------------

template <typename S>
struct DauAscentResult {
  Tensor<S> a;  // d x r
  Tensor<S> b;  // r x d
  S final_mean_output{0};
};

template <typename S>
DauAscentResult<S> train_dau_ascent(const std::vector<Tensor<S>>& samples, int rank, int steps, S lr,
                                    std::uint64_t seed, Rescale kind = Rescale::L2) {
  if (samples.empty()) throw contract_error("train_dau_ascent: empty sample set");
  const int d = static_cast<int>(samples.front().numel());
  const int n = static_cast<int>(samples.size());
  Tensor<S> x({d, n});
  for (int j = 0; j < n; ++j) {
    if (samples[static_cast<std::size_t>(j)].numel() != d) throw shape_error("train_dau_ascent: ragged samples");
    for (int i = 0; i < d; ++i) x.at(i, j) = samples[static_cast<std::size_t>(j)][i];
  }

  Rng rng(seed);
  std::vector<Tensor<S>> params = {rand_normal<S>(rng, {d, rank}, 0.0, 1.0 / std::sqrt(static_cast<double>(rank))),
                                   rand_normal<S>(rng, {rank, d}, 0.0, 1.0 / std::sqrt(static_cast<double>(d)))};
  std::vector<Tensor<S>*> refs = {&params[0], &params[1]};
  AdamState<S> adam = AdamState<S>::make(refs, lr);

  S mean_out{0};
  for (int step = 0; step < steps; ++step) {
    Graph<S> graph;
    auto va = graph.leaf(params[0], true);
    auto vb = graph.leaf(params[1], true);
    auto vx = graph.constant(x);
    auto pre = graph.matmul(va, graph.matmul(vb, vx));          // d x n
    auto weights = graph.group_rescale(pre, d, kind);           // one group per column
    auto outputs = graph.dau_apply(weights, vx, 1);             // 1 x n
    auto objective = graph.scale(graph.sum(outputs), S{-1} / static_cast<S>(n));
    auto grads = graph.backward(objective);
    std::vector<Tensor<S>> g = {graph.grad_of(grads, va), graph.grad_of(grads, vb)};
    adam_step(refs, g, adam, lr);
    mean_out = -graph.value(objective)[0];
  }
  return {std::move(params[0]), std::move(params[1]), mean_out};
}

// Cosine between a direction and its projection onto the span of the returned
// eigenvectors (Gram-Schmidt orthonormalisation; AB need not be symmetric).
inline double subspace_cosine(const std::vector<EigenPair>& pairs, const Tensor<double>& direction) {
  if (pairs.empty()) return 0.0;
  const int d = static_cast<int>(direction.numel());
  std::vector<Tensor<double>> basis;
  for (const auto& pair : pairs) {
    Tensor<double> q = pair.vector;
    for (const auto& prev : basis) {
      const double c = dot(q, prev);
      for (int i = 0; i < d; ++i) q[i] -= c * prev[i];
    }
    const double nq = static_cast<double>(norm2(q));
    if (nq < 1e-10) continue;
    for (int i = 0; i < d; ++i) q[i] /= nq;
    basis.push_back(std::move(q));
  }
  const double nv = static_cast<double>(norm2(direction));
  if (nv == 0.0) return 0.0;
  double proj_sq = 0;
  for (const auto& q : basis) {
    const double c = dot(direction, q);
    proj_sq += c * c;
  }
  return std::sqrt(proj_sq) / nv;
}

// ---------------------------------------------------------------------------
// Heatmap rendering: symmetric diverging scale with limits +-v where v is the
// 99.75th percentile of |values| (falling back to the max for sparse maps),
// positive red, negative blue, zero white; binary PPM (P6).
// ---------------------------------------------------------------------------

template <typename S>
double heatmap_limit(const Tensor<S>& map) {
  std::vector<double> mags;
  mags.reserve(static_cast<std::size_t>(map.numel()));
  for (std::int64_t i = 0; i < map.numel(); ++i) mags.push_back(std::abs(static_cast<double>(map[i])));
  std::sort(mags.begin(), mags.end());
  const double rank = 0.9975 * (static_cast<double>(mags.size()) - 1.0);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, mags.size() - 1);
  const double t = rank - static_cast<double>(lo);
  double v = (1.0 - t) * mags[lo] + t * mags[hi];
  if (v <= 0.0) v = mags.back();  // sparse maps: saturate at the max instead
  return v;
}

template <typename S>
void render_heatmap(const Tensor<S>& map, const std::string& path) {
  if (map.rank() != 2) throw shape_error("render_heatmap expects HxW");
  for (std::int64_t i = 0; i < map.numel(); ++i)
    if (!std::isfinite(static_cast<double>(map[i]))) throw input_error("render_heatmap: non-finite value");
  const double v = heatmap_limit(map);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw format_error("cannot write " + path);
  out << "P6\n" << map.dim(1) << " " << map.dim(0) << "\n255\n";
  for (std::int64_t i = 0; i < map.numel(); ++i) {
    const double t = v > 0 ? std::clamp(static_cast<double>(map[i]) / v, -1.0, 1.0) : 0.0;
    unsigned char rgb[3];
    const auto fade = static_cast<unsigned char>(std::lround(255.0 * (1.0 - std::abs(t))));
    if (t >= 0) { rgb[0] = 255; rgb[1] = fade; rgb[2] = fade; }
    else { rgb[0] = fade; rgb[1] = fade; rgb[2] = 255; }
    out.write(reinterpret_cast<const char*>(rgb), 3);
  }
}

// Minimal P5/P6 reader (maxval 255) for CLI image input.
template <typename S>
Tensor<S> load_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw format_error(path + ": expected P5 or P6");
  int w = 0, h = 0, maxval = 0;
  auto next_token = [&](int& out_val) {
    std::string tok;
    while (in >> tok) {
      if (tok[0] == '#') { std::string rest; std::getline(in, rest); continue; }
      out_val = std::stoi(tok);
      return;
    }
    throw format_error(path + ": truncated header");
  };
  next_token(w);
  next_token(h);
  next_token(maxval);
  if (maxval != 255) throw format_error(path + ": only maxval 255 supported");
  in.get();  // single whitespace after header
  const int channels = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw format_error(path + ": truncated pixel data");
  Tensor<S> img({channels, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = static_cast<S>(raw[(static_cast<std::size_t>(y) * w + x) * channels + c]) / S{255};
  return img;
}

}  // namespace coda

#endif  // CODA_INTERPRET_HPP
