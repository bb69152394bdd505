#ifndef CODA_DAU_HPP
#define CODA_DAU_HPP

#include <cmath>
#include <string>
#include <utility>

#include "coda/autodiff.hpp"
#include "coda/errors.hpp"
#include "coda/rng.hpp"
#include "coda/tensor.hpp"

namespace coda {

// Norm rescaling of contiguous row segments of length group_len within each
// column; value-level twin of Graph::group_rescale.
template <typename S>
Tensor<S> rescale_groups(const Tensor<S>& v, int group_len, Rescale kind) {
  const int rows = v.rank() == 2 ? v.dim(0) : static_cast<int>(v.numel());
  const int cols = v.rank() == 2 ? v.dim(1) : 1;
  if (group_len < 1 || rows % group_len != 0) throw shape_error("rescale_groups: bad group length");
  constexpr S eps = rescale_eps<S>();
  Tensor<S> out(v.shape());
  for (int g = 0; g < rows / group_len; ++g)
    for (int c = 0; c < cols; ++c) {
      S nsq{0};
      for (int t = 0; t < group_len; ++t) {
        const S u = v[(static_cast<std::int64_t>(g) * group_len + t) * cols + c];
        nsq += u * u;
      }
      const S n = std::sqrt(nsq);
      const S factor = kind == Rescale::L2 ? S{1} / (n + eps) : nsq / ((n + eps) * (S{1} + nsq));
      for (int t = 0; t < group_len; ++t) {
        const std::int64_t i = (static_cast<std::int64_t>(g) * group_len + t) * cols + c;
        out[i] = v[i] * factor;
      }
    }
  return out;
}

// One Dynamic Alignment Unit on a plain vector:
//   w = g(A B x + b),  output = w^T x.
template <typename S>
struct DauResult {
  S output;
  Tensor<S> weights;
};

template <typename S>
DauResult<S> dau_forward(const Tensor<S>& x, const Tensor<S>& a, const Tensor<S>& b_mat,
                         const Tensor<S>& bias, Rescale kind) {
  const int d = static_cast<int>(x.numel());
  if (a.rank() != 2 || a.dim(0) != d || b_mat.rank() != 2 || b_mat.dim(1) != d ||
      a.dim(1) != b_mat.dim(0) || bias.numel() != d)
    throw shape_error("dau_forward shape mismatch: x " + shape_to_string(x.shape()) + ", A " +
                      shape_to_string(a.shape()) + ", B " + shape_to_string(b_mat.shape()));
  const Tensor<S> xcol = x.reshaped({d, 1});
  Tensor<S> pre = matmul(a, matmul(b_mat, xcol)).reshaped({d});
  for (int i = 0; i < d; ++i) pre[i] += bias[i];
  Tensor<S> w = rescale_groups(pre, d, kind);
  return DauResult<S>{dot(w, x), std::move(w)};
}

// Convolutional DAU layer: f units per spatial location, A per unit, B shared
// across units, bias per unit, all acting on k x k patches.
template <typename S>
struct DauConvLayer {
  int in_channels = 0;
  int out_channels = 0;  // number of DAUs f
  int rank = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  Rescale nonlinearity = Rescale::SQ;

  Tensor<S> a;     // (f * patch_dim) x r, one d x r block per unit
  Tensor<S> b;     // r x patch_dim, shared
  Tensor<S> bias;  // f * patch_dim

  DauConvLayer() = default;
  DauConvLayer(int in_ch, int out_ch, int r, int k, int s, int p, Rescale g)
      : in_channels(in_ch), out_channels(out_ch), rank(r), kernel(k), stride(s), padding(p), nonlinearity(g) {
    if (in_ch < 1 || out_ch < 1 || r < 1 || k < 1 || s < 1 || p < 0)
      throw contract_error("DauConvLayer: non-positive dimension");
    if (r > patch_dim())
      throw contract_error("DauConvLayer: rank " + std::to_string(r) + " exceeds patch dimension " +
                           std::to_string(patch_dim()));
    a = Tensor<S>({out_ch * patch_dim(), r});
    b = Tensor<S>({r, patch_dim()});
    bias = Tensor<S>({out_ch * patch_dim()});
  }

  int patch_dim() const { return in_channels * kernel * kernel; }

  ConvGeometry geometry(int h, int w) const {
    return ConvGeometry(in_channels, h, w, kernel, stride, padding);
  }

  // Entries of A and B ~ Normal(0, 1/sqrt(fan_in)), bias zero. Since g
  // rescales norms, only the direction statistics matter at initialisation.
  void init(Rng& rng) {
    a = rand_normal<S>(rng, a.shape(), 0.0, 1.0 / std::sqrt(static_cast<double>(rank)));
    b = rand_normal<S>(rng, b.shape(), 0.0, 1.0 / std::sqrt(static_cast<double>(patch_dim())));
    bias = Tensor<S>({out_channels * patch_dim()});
  }
};

template <typename S>
struct ConvForwardResult {
  Tensor<S> output;   // f x H' x W'
  Tensor<S> weights;  // (f * patch_dim) x num_locations
  ConvGeometry geom;
};

// Value-level forward implementing the two-convolution formulation: project
// patches through B, expand through A plus bias, rescale each weight vector,
// then take per-location dot products with the patches.
template <typename S>
ConvForwardResult<S> conv_forward(const DauConvLayer<S>& layer, const Tensor<S>& input) {
  if (input.rank() != 3 || input.dim(0) != layer.in_channels)
    throw shape_error("conv_forward: expected " + std::to_string(layer.in_channels) + "-channel input, got " +
                      shape_to_string(input.shape()));
  const ConvGeometry g = layer.geometry(input.dim(1), input.dim(2));
  const int pd = g.patch_dim(), L = g.num_locations(), f = layer.out_channels;

  Tensor<S> patches = unfold(input, layer.kernel, layer.stride, layer.padding);
  Tensor<S> reduced = matmul(layer.b, patches);        // r x L
  Tensor<S> pre = matmul(layer.a, reduced);            // (f*pd) x L
  for (int i = 0; i < f * pd; ++i)
    for (int loc = 0; loc < L; ++loc) pre.at(i, loc) += layer.bias[i];
  Tensor<S> weights = rescale_groups(pre, pd, layer.nonlinearity);

  Tensor<S> out({f, g.out_height, g.out_width});
  for (int j = 0; j < f; ++j)
    for (int d = 0; d < pd; ++d) {
      const S* wrow = weights.data() + static_cast<std::size_t>(j * pd + d) * L;
      const S* prow = patches.data() + static_cast<std::size_t>(d) * L;
      S* orow = out.data() + static_cast<std::size_t>(j) * g.out_height * g.out_width;
      for (int loc = 0; loc < L; ++loc) orow[loc] += wrow[loc] * prow[loc];
    }
  return ConvForwardResult<S>{std::move(out), std::move(weights), g};
}

// Graph-level twin of conv_forward for training and gradient baselines.
template <typename S>
struct LayerVars {
  typename Graph<S>::Var a, b, bias;
};

template <typename S>
struct ConvForwardVars {
  typename Graph<S>::Var output;   // f x H' x W'
  typename Graph<S>::Var weights;  // (f*pd) x L
  ConvGeometry geom;
};

template <typename S>
ConvForwardVars<S> conv_forward_graph(Graph<S>& graph, const DauConvLayer<S>& layer, const LayerVars<S>& vars,
                                      typename Graph<S>::Var input) {
  const Tensor<S>& xv = graph.value(input);
  if (xv.rank() != 3 || xv.dim(0) != layer.in_channels) throw shape_error("conv_forward_graph: channel mismatch");
  const ConvGeometry g = layer.geometry(xv.dim(1), xv.dim(2));
  const int pd = g.patch_dim();

  auto patches = graph.unfold(input, layer.kernel, layer.stride, layer.padding);
  auto reduced = graph.matmul(vars.b, patches);
  auto pre = graph.add_col(graph.matmul(vars.a, reduced), vars.bias);
  auto weights = graph.group_rescale(pre, pd, layer.nonlinearity);
  auto flat = graph.dau_apply(weights, patches, layer.out_channels);
  auto out = graph.reshape(flat, {layer.out_channels, g.out_height, g.out_width});
  return ConvForwardVars<S>{out, weights, g};
}

// Explicit dense matrix W_l with W_l * vec(input) equal to the flattened layer
// output. Row (j, loc) scatters the dynamic weight vector w_j(p_loc) into the
// input positions of patch loc; rows touch at most patch_dim entries.
template <typename S>
struct LayerLinearMap {
  Tensor<S> matrix;  // (f * L) x (C * H * W)
  ConvGeometry geom;
  int units = 0;
};

template <typename S>
LayerLinearMap<S> layer_matrix(const DauConvLayer<S>& layer, const Tensor<S>& input) {
  ConvForwardResult<S> fwd = conv_forward(layer, input);
  const ConvGeometry& g = fwd.geom;
  const int pd = g.patch_dim(), L = g.num_locations(), f = layer.out_channels;
  Tensor<S> m({f * L, static_cast<int>(g.input_numel())});
  for (int j = 0; j < f; ++j)
    for (int loc = 0; loc < L; ++loc)
      for (int d = 0; d < pd; ++d) {
        const int idx = g.input_index(loc, d);
        if (idx >= 0) m.at(j * L + loc, idx) = fwd.weights.at(j * pd + d, loc);
      }
  return LayerLinearMap<S>{std::move(m), g, f};
}

// Global sum pooling as the f x (f*H*W) 0/1 matrix summing each channel over
// space; a linear layer with no trainable parameters.
template <typename S>
Tensor<S> sum_pool_matrix(int channels, int height, int width) {
  if (channels < 1 || height < 1 || width < 1) throw contract_error("sum_pool_matrix: non-positive dims");
  const int spatial = height * width;
  Tensor<S> m({channels, channels * spatial});
  for (int c = 0; c < channels; ++c)
    for (int s = 0; s < spatial; ++s) m.at(c, c * spatial + s) = S{1};
  return m;
}

}  // namespace coda

#endif  // CODA_DAU_HPP
