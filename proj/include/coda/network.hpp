#ifndef CODA_NETWORK_HPP
#define CODA_NETWORK_HPP

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "coda/dau.hpp"

namespace coda {

// [r, g, b, 1-r, 1-g, 1-b] per pixel; grayscale inputs are replicated to
// r = g = b first so a single encoding path serves every dataset.
template <typename S>
Tensor<S> encode_input(const Tensor<S>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw shape_error("encode_input expects 1xHxW or 3xHxW, got " + shape_to_string(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  for (std::int64_t i = 0; i < image.numel(); ++i)
    if (image[i] < S{0} || image[i] > S{1})
      throw input_error("encode_input: pixel value " + std::to_string(static_cast<double>(image[i])) +
                        " outside [0,1]");
  Tensor<S> out({6, h, w});
  const int plane = h * w;
  for (int c = 0; c < 3; ++c) {
    const S* src = image.data() + (image.dim(0) == 3 ? static_cast<std::size_t>(c) * plane : 0);
    for (int i = 0; i < plane; ++i) {
      out[static_cast<std::int64_t>(c) * plane + i] = src[i];
      out[static_cast<std::int64_t>(c + 3) * plane + i] = S{1} - src[i];
    }
  }
  return out;
}

template <typename S>
struct ContributionMap {
  int class_index = 0;
  Tensor<S> values;  // C_in x H x W, sums to the logit
  S logit{0};

  // Per-pixel spatial map, channels summed.
  Tensor<S> spatial() const {
    const int c = values.dim(0), h = values.dim(1), w = values.dim(2);
    Tensor<S> m({h, w});
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h * w; ++i) m[i] += values[static_cast<std::int64_t>(ch) * h * w + i];
    return m;
  }
};

// Ordered DAU layer stack with a final global sum pool, temperature-scaled
// logits, a fixed output bias inside the BCE, and |W| regularisation.
template <typename S>
struct CodaNet {
  std::vector<DauConvLayer<S>> layers;
  int num_classes = 0;
  S temperature{1};
  Tensor<S> output_bias;  // per-class b0, fixed (not trained)
  S lambda{0};
  bool encode_negative = true;
  bool regularize_all_classes = false;

  int input_channels() const { return encode_negative ? 6 : layers.front().in_channels; }

  void validate() const {
    if (layers.empty()) throw contract_error("CodaNet: no layers");
    if (encode_negative && layers.front().in_channels != 6)
      throw contract_error("CodaNet: 6-channel encoding requires a 6-channel first layer");
    for (std::size_t i = 1; i < layers.size(); ++i)
      if (layers[i].in_channels != layers[i - 1].out_channels)
        throw contract_error("CodaNet: channel chain broken between layers " + std::to_string(i - 1) + " and " +
                             std::to_string(i));
    if (layers.back().out_channels != num_classes)
      throw contract_error("CodaNet: last layer must have num_classes units");
    if (!(temperature > S{0})) throw contract_error("CodaNet: temperature must be positive");
    if (output_bias.numel() != num_classes) throw contract_error("CodaNet: b0 must have one entry per class");
  }

  void init(Rng& rng) {
    for (auto& layer : layers) layer.init(rng);
  }

  // sigma(b0) = 1/k at zero logits: a balanced one-vs-all prior.
  static Tensor<S> default_output_bias(int k) {
    return Tensor<S>::full({k}, static_cast<S>(std::log(1.0 / (k - 1))));
  }
};

template <typename S>
Tensor<S> maybe_encode(const CodaNet<S>& net, const Tensor<S>& image) {
  return net.encode_negative ? encode_input(image) : image;
}

// Per-layer record from one forward pass, enough to rebuild every W_l.
template <typename S>
struct ForwardTrace {
  Tensor<S> encoded;                           // network input, C x H x W
  std::vector<ConvForwardResult<S>> layers;    // weights + geometry per layer
  Tensor<S> logits;                            // k, already divided by T
};

template <typename S>
ForwardTrace<S> forward_trace(const CodaNet<S>& net, const Tensor<S>& image) {
  net.validate();
  ForwardTrace<S> trace;
  trace.encoded = maybe_encode(net, image);
  Tensor<S> act = trace.encoded;
  for (const auto& layer : net.layers) {
    trace.layers.push_back(conv_forward(layer, act));
    act = trace.layers.back().output;
  }
  const int k = net.num_classes, plane = act.dim(1) * act.dim(2);
  Tensor<S> logits({k});
  for (int c = 0; c < k; ++c) {
    S acc{0};
    for (int i = 0; i < plane; ++i) acc += act[static_cast<std::int64_t>(c) * plane + i];
    logits[c] = acc / net.temperature;
  }
  trace.logits = std::move(logits);
  return trace;
}

// logits = T^-1 * sum_pool(layer_L(...layer_1(encode(image)))). The affine b0
// enters only inside the BCE.
template <typename S>
Tensor<S> forward(const CodaNet<S>& net, const Tensor<S>& image) {
  return forward_trace(net, image).logits;
}

// Value-level right-multiplication of row bundles by W_l, mirroring
// Graph::layer_transpose_apply.
template <typename S>
Tensor<S> rows_through_layer(const Tensor<S>& rows, const Tensor<S>& weights, const ConvGeometry& geom,
                             int num_units) {
  const int pd = geom.patch_dim(), L = geom.num_locations();
  const int nsel = rows.dim(0);
  Tensor<S> out({nsel, static_cast<int>(geom.input_numel())});
  for (int s = 0; s < nsel; ++s)
    for (int j = 0; j < num_units; ++j)
      for (int loc = 0; loc < L; ++loc) {
        const S vv = rows.at(s, j * L + loc);
        if (vv == S{0}) continue;
        for (int d = 0; d < pd; ++d) {
          const int idx = geom.input_index(loc, d);
          if (idx >= 0) out.at(s, idx) += vv * weights.at(j * pd + d, loc);
        }
      }
  return out;
}

// Basis rows of the final sum pool for the selected classes.
template <typename S>
Tensor<S> pool_rows(const std::vector<int>& classes, int channels, int spatial) {
  Tensor<S> rows({static_cast<int>(classes.size()), channels * spatial});
  for (std::size_t s = 0; s < classes.size(); ++s) {
    if (classes[s] < 0 || classes[s] >= channels)
      throw contract_error("class index " + std::to_string(classes[s]) + " out of range");
    for (int i = 0; i < spatial; ++i) rows.at(static_cast<int>(s), classes[s] * spatial + i) = S{1};
  }
  return rows;
}

// Selected rows of W_{0->L}(x), computed by propagating pool basis rows
// backward through the frozen per-layer linear maps of one forward pass.
template <typename S>
Tensor<S> collapse_rows(const CodaNet<S>& net, const ForwardTrace<S>& trace, const std::vector<int>& classes) {
  const auto& last = trace.layers.back();
  Tensor<S> rows = pool_rows<S>(classes, net.num_classes, last.geom.num_locations());
  for (int l = static_cast<int>(trace.layers.size()) - 1; l >= 0; --l)
    rows = rows_through_layer(rows, trace.layers[l].weights, trace.layers[l].geom, net.layers[l].out_channels);
  return rows;
}

template <typename S>
Tensor<S> collapse_rows(const CodaNet<S>& net, const Tensor<S>& image, const std::vector<int>& classes) {
  return collapse_rows(net, forward_trace(net, image), classes);
}

// The full collapsed matrix W_{0->L}(x) = Pool * prod_l W_l, one row per class.
// forward(net, x) equals T^-1 * collapse_full(net, x) * vec(encode(x)).
template <typename S>
Tensor<S> collapse_full(const CodaNet<S>& net, const Tensor<S>& image) {
  std::vector<int> all(net.num_classes);
  for (int c = 0; c < net.num_classes; ++c) all[static_cast<std::size_t>(c)] = c;
  return collapse_rows(net, image, all);
}

// Signed per-channel, per-pixel contributions to one class logit:
// row_j(W_{0->L}) elementwise the encoded input, scaled by T^-1.
template <typename S>
ContributionMap<S> contributions(const CodaNet<S>& net, const Tensor<S>& image, int class_index) {
  ForwardTrace<S> trace = forward_trace(net, image);
  Tensor<S> row = collapse_rows(net, trace, {class_index});
  ContributionMap<S> cm;
  cm.class_index = class_index;
  cm.values = Tensor<S>(trace.encoded.shape());
  const S inv_t = S{1} / net.temperature;
  for (std::int64_t i = 0; i < cm.values.numel(); ++i) cm.values[i] = row[i] * trace.encoded[i] * inv_t;
  cm.logit = trace.logits[class_index];
  return cm;
}

// Graph-level network forward for training and gradient-based attribution.
template <typename S>
struct NetVars {
  std::vector<LayerVars<S>> layers;
};

template <typename S>
NetVars<S> make_net_vars(Graph<S>& graph, const CodaNet<S>& net, bool requires_grad) {
  NetVars<S> vars;
  for (const auto& layer : net.layers)
    vars.layers.push_back(LayerVars<S>{graph.leaf(layer.a, requires_grad), graph.leaf(layer.b, requires_grad),
                                       graph.leaf(layer.bias, requires_grad)});
  return vars;
}

template <typename S>
struct GraphTrace {
  typename Graph<S>::Var input;   // encoded image leaf
  typename Graph<S>::Var logits;  // k, divided by T
  std::vector<ConvForwardVars<S>> layers;
};

template <typename S>
GraphTrace<S> forward_graph(Graph<S>& graph, const CodaNet<S>& net, const NetVars<S>& vars,
                            typename Graph<S>::Var input) {
  net.validate();
  GraphTrace<S> trace;
  trace.input = input;
  auto act = input;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    trace.layers.push_back(conv_forward_graph(graph, net.layers[l], vars.layers[l], act));
    act = trace.layers.back().output;
  }
  const auto& out_shape = graph.value(act).shape();
  auto flat = graph.reshape(act, {out_shape[0], out_shape[1] * out_shape[2]});
  trace.logits = graph.scale(graph.sum_axis(flat, 1), S{1} / net.temperature);
  return trace;
}

// Selected rows of W_{0->L} inside the graph: equal in value to collapse_rows
// and differentiable with respect to the parameters, which is what feeds the
// |W| regulariser of the loss.
template <typename S>
typename Graph<S>::Var collapse_rows_graph(Graph<S>& graph, const CodaNet<S>& net, const GraphTrace<S>& trace,
                                           const std::vector<int>& classes) {
  const auto& last = trace.layers.back();
  auto rows = graph.constant(pool_rows<S>(classes, net.num_classes, last.geom.num_locations()));
  for (int l = static_cast<int>(trace.layers.size()) - 1; l >= 0; --l)
    rows = graph.layer_transpose_apply(rows, trace.layers[l].weights, trace.layers[l].geom,
                                       net.layers[l].out_channels);
  return rows;
}

// Class subset for the |W| regulariser: the true class plus one random
// incorrect class, resampled per image, unless the full matrix is requested.
template <typename S>
std::vector<int> regularizer_classes(const CodaNet<S>& net, int true_class, Rng& rng) {
  if (net.regularize_all_classes || net.num_classes < 2) {
    std::vector<int> all(net.num_classes);
    for (int c = 0; c < net.num_classes; ++c) all[static_cast<std::size_t>(c)] = c;
    return all;
  }
  int wrong = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(net.num_classes - 1)));
  if (wrong >= true_class) ++wrong;
  return {true_class, wrong};
}

template <typename S>
struct LossVars {
  typename Graph<S>::Var total;
  typename Graph<S>::Var bce;
  typename Graph<S>::Var logits;
  S reg_value{0};
};

// Eq.-style training objective:
//   BCE(sigma(T^-1 W x + b0), y) summed over classes + lambda * mean|rows(W)|.
template <typename S>
LossVars<S> loss_graph(Graph<S>& graph, const CodaNet<S>& net, const NetVars<S>& vars,
                       typename Graph<S>::Var input, const Tensor<S>& onehot, Rng& rng) {
  if (onehot.numel() != net.num_classes) throw contract_error("loss: target length != num_classes");
  int true_class = -1;
  for (int c = 0; c < net.num_classes; ++c) {
    const S v = onehot[c];
    if (v != S{0} && v != S{1}) throw contract_error("loss: target is not one-hot");
    if (v == S{1}) {
      if (true_class >= 0) throw contract_error("loss: target has multiple ones");
      true_class = c;
    }
  }
  if (true_class < 0) throw contract_error("loss: target has no positive class");

  GraphTrace<S> trace = forward_graph(graph, net, vars, input);
  auto z = graph.add(trace.logits, graph.constant(net.output_bias));
  auto bce = graph.bce_with_logits(z, graph.constant(onehot));

  LossVars<S> result{bce, bce, trace.logits, S{0}};
  if (net.lambda > S{0}) {
    auto rows = collapse_rows_graph(graph, net, trace, regularizer_classes(net, true_class, rng));
    auto reg = graph.scale(graph.abs_mean(rows), net.lambda);
    result.reg_value = graph.value(reg)[0];
    result.total = graph.add(bce, reg);
  }
  return result;
}

// Plain scalar loss for callers that do not need gradients.
template <typename S>
S loss(const CodaNet<S>& net, const Tensor<S>& image, const Tensor<S>& onehot, Rng& rng) {
  Graph<S> graph;
  NetVars<S> vars = make_net_vars(graph, net, false);
  auto input = graph.constant(maybe_encode(net, image));
  return graph.value(loss_graph(graph, net, vars, input, onehot, rng).total)[0];
}

// ---------------------------------------------------------------------------
// Plain-text architecture config: "key value" lines plus one "layer" line per
// DAU layer with f=..., r=..., k=..., s=... and optional p=... entries.
// ---------------------------------------------------------------------------

namespace detail {
inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw format_error("config: bad boolean '" + v + "'");
}
}  // namespace detail

template <typename S>
CodaNet<S> parse_net_config(std::istream& in) {
  CodaNet<S> net;
  Rescale nonlin = Rescale::SQ;
  double b0 = 0.0;
  bool b0_auto = true;
  struct LayerSpec {
    int f = 0, r = 0, k = 3, s = 1, p = -1;
  };
  std::vector<LayerSpec> specs;

  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    auto fail = [&](const std::string& what) {
      throw format_error("config line " + std::to_string(lineno) + ": " + what);
    };
    if (key == "layer") {
      LayerSpec spec;
      std::string field;
      while (ls >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos || eq + 1 >= field.size()) fail("bad layer field '" + field + "'");
        const std::string name = field.substr(0, eq);
        const int val = std::stoi(field.substr(eq + 1));
        if (name == "f") spec.f = val;
        else if (name == "r") spec.r = val;
        else if (name == "k") spec.k = val;
        else if (name == "s") spec.s = val;
        else if (name == "p") spec.p = val;
        else fail("unknown layer field '" + name + "'");
      }
      if (spec.f < 1 || spec.r < 1) fail("layer needs f>=1 and r>=1");
      specs.push_back(spec);
    } else {
      std::string value;
      if (!(ls >> value)) fail("missing value for '" + key + "'");
      if (key == "nonlinearity") {
        std::string upper = value;
        for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        if (upper == "L2") nonlin = Rescale::L2;
        else if (upper == "SQ") nonlin = Rescale::SQ;
        else fail("nonlinearity must be L2 or SQ");
      } else if (key == "temperature") net.temperature = static_cast<S>(std::stod(value));
      else if (key == "lambda") net.lambda = static_cast<S>(std::stod(value));
      else if (key == "num_classes") net.num_classes = std::stoi(value);
      else if (key == "encode_negative") net.encode_negative = detail::parse_bool(value);
      else if (key == "regularize_all_classes") net.regularize_all_classes = detail::parse_bool(value);
      else if (key == "b0") {
        if (value == "auto") b0_auto = true;
        else { b0 = std::stod(value); b0_auto = false; }
      } else fail("unknown key '" + key + "'");
    }
  }
  if (specs.empty()) throw format_error("config: no layers");
  if (net.num_classes < 1) throw format_error("config: num_classes missing");

  int in_ch = net.encode_negative ? 6 : 3;
  for (const auto& spec : specs) {
    const int pad = spec.p >= 0 ? spec.p : (spec.k - 1) / 2;
    net.layers.emplace_back(in_ch, spec.f, spec.r, spec.k, spec.s, pad, nonlin);
    in_ch = spec.f;
  }
  net.output_bias = b0_auto ? CodaNet<S>::default_output_bias(net.num_classes)
                            : Tensor<S>::full({net.num_classes}, static_cast<S>(b0));
  net.validate();
  return net;
}

template <typename S>
CodaNet<S> parse_net_config(const std::string& text) {
  std::istringstream in(text);
  return parse_net_config<S>(in);
}

template <typename S>
void write_net_config(std::ostream& out, const CodaNet<S>& net) {
  out.precision(17);  // doubles survive the text round trip
  out << "nonlinearity " << (net.layers.front().nonlinearity == Rescale::L2 ? "L2" : "SQ") << "\n";
  out << "temperature " << static_cast<double>(net.temperature) << "\n";
  out << "lambda " << static_cast<double>(net.lambda) << "\n";
  out << "num_classes " << net.num_classes << "\n";
  out << "encode_negative " << (net.encode_negative ? "true" : "false") << "\n";
  out << "regularize_all_classes " << (net.regularize_all_classes ? "true" : "false") << "\n";
  out << "b0 " << static_cast<double>(net.output_bias[0]) << "\n";
  for (const auto& l : net.layers)
    out << "layer f=" << l.out_channels << " r=" << l.rank << " k=" << l.kernel << " s=" << l.stride
        << " p=" << l.padding << "\n";
}

}  // namespace coda

#endif  // CODA_NETWORK_HPP
