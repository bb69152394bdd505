#ifndef CODA_AUTODIFF_HPP
#define CODA_AUTODIFF_HPP

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "coda/errors.hpp"
#include "coda/tensor.hpp"

namespace coda {

enum class Rescale { L2, SQ };

// Guard added to the norm denominator so g and its derivative stay finite at
// the zero vector while preserving g(0) = 0.
template <typename S>
constexpr S rescale_eps() {
  if constexpr (sizeof(S) >= 8)
    return S{1e-12};
  else
    return S{1e-8};
}

// Reverse-mode tape over tensors. One Graph records one forward evaluation;
// operations append nodes, so creation order is already topological.
template <typename S>
class Graph {
 public:
  using Var = int;

  struct Node {
    Tensor<S> value;
    bool requires_grad = false;
    // Accumulates parent gradients given this node's upstream gradient.
    std::function<void(const Tensor<S>&, std::vector<Tensor<S>>&)> back;
  };

  Var leaf(Tensor<S> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), requires_grad, nullptr});
    return static_cast<Var>(nodes_.size()) - 1;
  }

  Var constant(Tensor<S> value) { return leaf(std::move(value), false); }

  const Tensor<S>& value(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Same value, no gradient flow to the source.
  Var detach(Var a) { return constant(value(a)); }

  Var add(Var a, Var b) {
    return binary(a, b, coda::add(value(a), value(b)),
                  [](const Tensor<S>& g) { return g; },
                  [](const Tensor<S>& g) { return g; });
  }

  Var sub(Var a, Var b) {
    return binary(a, b, coda::sub(value(a), value(b)),
                  [](const Tensor<S>& g) { return g; },
                  [](const Tensor<S>& g) { return coda::scale(g, S{-1}); });
  }

  Var elementwise_mul(Var a, Var b) {
    Tensor<S> va = value(a), vb = value(b);
    return binary(a, b, coda::mul(va, vb),
                  [vb](const Tensor<S>& g) { return coda::mul(g, vb); },
                  [va](const Tensor<S>& g) { return coda::mul(g, va); });
  }

  Var matmul(Var a, Var b) {
    Tensor<S> va = value(a), vb = value(b);
    return binary(a, b, coda::matmul(va, vb),
                  [vb](const Tensor<S>& g) { return coda::matmul(g, coda::transpose(vb)); },
                  [va](const Tensor<S>& g) { return coda::matmul(coda::transpose(va), g); });
  }

  Var scale(Var a, S c) {
    return unary(a, coda::scale(value(a), c), [c](const Tensor<S>& g) { return coda::scale(g, c); });
  }

  Var add_scalar(Var a, S c) {
    Tensor<S> v = value(a);
    for (std::int64_t i = 0; i < v.numel(); ++i) v[i] += c;
    return unary(a, std::move(v), [](const Tensor<S>& g) { return g; });
  }

  // Total sum as a scalar tensor.
  Var sum(Var a) {
    const Shape in_shape = value(a).shape();
    Tensor<S> out({1});
    out[0] = coda::sum(value(a));
    return unary(a, std::move(out), [in_shape](const Tensor<S>& g) {
      return Tensor<S>::full(in_shape, g[0]);
    });
  }

  // Axis sum over a matrix: axis 0 collapses rows (result is per-column),
  // axis 1 collapses columns (result is per-row).
  Var sum_axis(Var a, int axis) {
    const Tensor<S>& v = value(a);
    if (v.rank() != 2 || (axis != 0 && axis != 1)) throw contract_error("sum_axis expects a matrix and axis 0/1");
    const int m = v.dim(0), n = v.dim(1);
    Tensor<S> out({axis == 0 ? n : m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out[axis == 0 ? j : i] += v.at(i, j);
    return unary(a, std::move(out), [m, n, axis](const Tensor<S>& g) {
      Tensor<S> d({m, n});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) d.at(i, j) = g[axis == 0 ? j : i];
      return d;
    });
  }

  Var reshape(Var a, Shape shape) {
    const Shape in_shape = value(a).shape();
    return unary(a, value(a).reshaped(std::move(shape)),
                 [in_shape](const Tensor<S>& g) { return g.reshaped(in_shape); });
  }

  Var sigmoid(Var a) {
    Tensor<S> out(value(a).shape());
    const Tensor<S>& v = value(a);
    for (std::int64_t i = 0; i < v.numel(); ++i) out[i] = S{1} / (S{1} + std::exp(-v[i]));
    Tensor<S> saved = out;
    return unary(a, std::move(out), [saved](const Tensor<S>& g) {
      Tensor<S> d(saved.shape());
      for (std::int64_t i = 0; i < saved.numel(); ++i) d[i] = g[i] * saved[i] * (S{1} - saved[i]);
      return d;
    });
  }

  // Numerically stable sum_i [max(z_i,0) - z_i y_i + log(1+exp(-|z_i|))].
  Var bce_with_logits(Var logits, Var targets) {
    const Tensor<S>& z = value(logits);
    const Tensor<S>& y = value(targets);
    if (z.numel() != y.numel()) throw shape_error("bce_with_logits length mismatch");
    Tensor<S> out({1});
    S acc{0};
    for (std::int64_t i = 0; i < z.numel(); ++i)
      acc += std::max(z[i], S{0}) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
    out[0] = acc;
    Tensor<S> zs = z, ys = y;
    return binary(logits, targets, std::move(out),
                  [zs, ys](const Tensor<S>& g) {
                    Tensor<S> d(zs.shape());
                    for (std::int64_t i = 0; i < zs.numel(); ++i)
                      d[i] = g[0] * (S{1} / (S{1} + std::exp(-zs[i])) - ys[i]);
                    return d;
                  },
                  [zs](const Tensor<S>& g) {
                    Tensor<S> d(zs.shape());
                    for (std::int64_t i = 0; i < zs.numel(); ++i) d[i] = -g[0] * zs[i];
                    return d;
                  });
  }

  // Mean of absolute values as a scalar; subgradient 0 at exact zeros.
  Var abs_mean(Var a) {
    const Tensor<S>& v = value(a);
    Tensor<S> out({1});
    S acc{0};
    for (std::int64_t i = 0; i < v.numel(); ++i) acc += std::abs(v[i]);
    const S inv_n = S{1} / static_cast<S>(v.numel());
    out[0] = acc * inv_n;
    Tensor<S> saved = v;
    return unary(a, std::move(out), [saved, inv_n](const Tensor<S>& g) {
      Tensor<S> d(saved.shape());
      for (std::int64_t i = 0; i < saved.numel(); ++i)
        d[i] = g[0] * inv_n * (saved[i] > S{0} ? S{1} : saved[i] < S{0} ? S{-1} : S{0});
      return d;
    });
  }

  // Norm rescaling applied to contiguous row segments of length group_len
  // within each column (the whole tensor is one group for plain vectors).
  // The gradient differentiates the eps-guarded expression that is computed.
  Var group_rescale(Var a, int group_len, Rescale kind) {
    const Tensor<S>& v = value(a);
    const int rows = v.rank() == 2 ? v.dim(0) : static_cast<int>(v.numel());
    const int cols = v.rank() == 2 ? v.dim(1) : 1;
    if (group_len < 1 || rows % group_len != 0)
      throw shape_error("group_rescale: rows " + std::to_string(rows) + " not divisible by group length " +
                        std::to_string(group_len));
    const int groups = rows / group_len;
    constexpr S eps = rescale_eps<S>();

    Tensor<S> out(v.shape());
    Tensor<S> saved = v;
    for (int gidx = 0; gidx < groups; ++gidx)
      for (int c = 0; c < cols; ++c) {
        S nsq{0};
        for (int t = 0; t < group_len; ++t) {
          const S u = v[(static_cast<std::int64_t>(gidx) * group_len + t) * cols + c];
          nsq += u * u;
        }
        const S n = std::sqrt(nsq);
        const S factor = kind == Rescale::L2 ? S{1} / (n + eps) : nsq / ((n + eps) * (S{1} + nsq));
        for (int t = 0; t < group_len; ++t) {
          const std::int64_t i = (static_cast<std::int64_t>(gidx) * group_len + t) * cols + c;
          out[i] = v[i] * factor;
        }
      }
    return unary(a, std::move(out), [saved, group_len, cols, groups, kind](const Tensor<S>& g) {
      constexpr S geps = rescale_eps<S>();
      Tensor<S> d(saved.shape());
      for (int gidx = 0; gidx < groups; ++gidx)
        for (int c = 0; c < cols; ++c) {
          S nsq{0}, ug{0};
          for (int t = 0; t < group_len; ++t) {
            const std::int64_t i = (static_cast<std::int64_t>(gidx) * group_len + t) * cols + c;
            nsq += saved[i] * saved[i];
            ug += saved[i] * g[i];
          }
          const S n = std::sqrt(nsq);
          const S denom = n + geps;
          S factor, radial;
          if (kind == Rescale::L2) {
            factor = S{1} / denom;
            // d(1/denom)/du_j = -u_j / denom^3 with the guarded norm derivative.
            radial = -ug / (denom * denom * denom);
          } else {
            const S q = S{1} + nsq;
            factor = nsq / (denom * q);
            const S sprime = (n / (denom * q)) * (S{2} - n / denom - S{2} * nsq / q);
            radial = sprime * ug / denom;
          }
          for (int t = 0; t < group_len; ++t) {
            const std::int64_t i = (static_cast<std::int64_t>(gidx) * group_len + t) * cols + c;
            d[i] = factor * g[i] + radial * saved[i];
          }
        }
      return d;
    });
  }

  Var l2_rescale(Var a) { return group_rescale(a, whole_group(a), Rescale::L2); }
  Var sq_rescale(Var a) { return group_rescale(a, whole_group(a), Rescale::SQ); }

  // Differentiable patch extraction; the adjoint is fold (scatter-add).
  Var unfold(Var x, int kernel, int stride, int padding) {
    const Tensor<S>& v = value(x);
    if (v.rank() != 3) throw shape_error("unfold expects CxHxW");
    const ConvGeometry g(v.dim(0), v.dim(1), v.dim(2), kernel, stride, padding);
    return unary(x, coda::unfold(v, kernel, stride, padding),
                 [g](const Tensor<S>& grad) { return coda::fold(grad, g); });
  }

  // Broadcast-adds a length-m column vector to every column of an m x n matrix.
  Var add_col(Var a, Var col) {
    const Tensor<S>& v = value(a);
    const Tensor<S>& c = value(col);
    if (v.rank() != 2 || c.numel() != v.dim(0)) throw shape_error("add_col shape mismatch");
    const int m = v.dim(0), n = v.dim(1);
    Tensor<S> out = v;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(i, j) += c[i];
    return binary(a, col, std::move(out),
                  [](const Tensor<S>& g) { return g; },
                  [m, n](const Tensor<S>& g) {
                    Tensor<S> d({m});
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < n; ++j) d[i] += g.at(i, j);
                    return d;
                  });
  }

  // Applies per-location dynamic weights to patches:
  //   out[j, loc] = sum_d w[j*pd + d, loc] * p[d, loc].
  Var dau_apply(Var weights, Var patches, int num_units) {
    const Tensor<S>& w = value(weights);
    const Tensor<S>& p = value(patches);
    if (w.rank() != 2 || p.rank() != 2 || w.dim(1) != p.dim(1) || w.dim(0) != num_units * p.dim(0))
      throw shape_error("dau_apply shape mismatch: weights " + shape_to_string(w.shape()) + ", patches " +
                        shape_to_string(p.shape()));
    const int pd = p.dim(0), L = p.dim(1);
    Tensor<S> out({num_units, L});
    for (int j = 0; j < num_units; ++j)
      for (int d = 0; d < pd; ++d) {
        const S* wrow = w.data() + static_cast<std::size_t>(j * pd + d) * L;
        const S* prow = p.data() + static_cast<std::size_t>(d) * L;
        S* orow = out.data() + static_cast<std::size_t>(j) * L;
        for (int loc = 0; loc < L; ++loc) orow[loc] += wrow[loc] * prow[loc];
      }
    Tensor<S> ws = w, ps = p;
    return binary(weights, patches, std::move(out),
                  [ps, num_units, pd, L](const Tensor<S>& g) {
                    Tensor<S> d({num_units * pd, L});
                    for (int j = 0; j < num_units; ++j)
                      for (int t = 0; t < pd; ++t)
                        for (int loc = 0; loc < L; ++loc)
                          d.at(j * pd + t, loc) = g.at(j, loc) * ps.at(t, loc);
                    return d;
                  },
                  [ws, num_units, pd, L](const Tensor<S>& g) {
                    Tensor<S> d({pd, L});
                    for (int j = 0; j < num_units; ++j)
                      for (int t = 0; t < pd; ++t)
                        for (int loc = 0; loc < L; ++loc)
                          d.at(t, loc) += g.at(j, loc) * ws.at(j * pd + t, loc);
                    return d;
                  });
  }

  // Right-multiplies a bundle of row vectors by the layer matrix W_l defined
  // by dynamic weights w and the layer geometry:
  //   out[s, input_index(loc, d)] += v[s, j*L + loc] * w[j*pd + d, loc].
  // Differentiable in both the rows and the weights; this is how selected rows
  // of the collapsed matrix stay connected to the parameters.
  Var layer_transpose_apply(Var rows, Var weights, const ConvGeometry& geom, int num_units) {
    const Tensor<S>& v = value(rows);
    const Tensor<S>& w = value(weights);
    const int pd = geom.patch_dim(), L = geom.num_locations();
    if (v.rank() != 2 || v.dim(1) != num_units * L || w.rank() != 2 || w.dim(0) != num_units * pd || w.dim(1) != L)
      throw shape_error("layer_transpose_apply shape mismatch");
    const int nsel = v.dim(0);
    const int in_numel = static_cast<int>(geom.input_numel());
    Tensor<S> out({nsel, in_numel});
    for (int s = 0; s < nsel; ++s)
      for (int j = 0; j < num_units; ++j)
        for (int loc = 0; loc < L; ++loc) {
          const S vv = v.at(s, j * L + loc);
          if (vv == S{0}) continue;
          for (int d = 0; d < pd; ++d) {
            const int idx = geom.input_index(loc, d);
            if (idx >= 0) out.at(s, idx) += vv * w.at(j * pd + d, loc);
          }
        }
    Tensor<S> vs = v, ws = w;
    return binary(rows, weights, std::move(out),
                  [ws, geom, num_units, pd, L, nsel](const Tensor<S>& g) {
                    Tensor<S> d({nsel, num_units * L});
                    for (int s = 0; s < nsel; ++s)
                      for (int j = 0; j < num_units; ++j)
                        for (int loc = 0; loc < L; ++loc) {
                          S acc{0};
                          for (int t = 0; t < pd; ++t) {
                            const int idx = geom.input_index(loc, t);
                            if (idx >= 0) acc += g.at(s, idx) * ws.at(j * pd + t, loc);
                          }
                          d.at(s, j * L + loc) = acc;
                        }
                    return d;
                  },
                  [vs, geom, num_units, pd, L, nsel](const Tensor<S>& g) {
                    Tensor<S> d({num_units * pd, L});
                    for (int s = 0; s < nsel; ++s)
                      for (int j = 0; j < num_units; ++j)
                        for (int loc = 0; loc < L; ++loc) {
                          const S vv = vs.at(s, j * L + loc);
                          if (vv == S{0}) continue;
                          for (int t = 0; t < pd; ++t) {
                            const int idx = geom.input_index(loc, t);
                            if (idx >= 0) d.at(j * pd + t, loc) += vv * g.at(s, idx);
                          }
                        }
                    return d;
                  });
  }

  // Reverse-topological sweep from a scalar root. Returns one gradient slot
  // per node; leaves that never receive gradient keep an empty tensor.
  std::vector<Tensor<S>> backward(Var root) {
    if (value(root).numel() != 1) throw contract_error("backward root must be scalar-valued");
    std::vector<Tensor<S>> grads(nodes_.size());
    grads[static_cast<std::size_t>(root)] = Tensor<S>::full({1}, S{1});
    for (int i = root; i >= 0; --i) {
      const Node& node = nodes_[static_cast<std::size_t>(i)];
      if (grads[static_cast<std::size_t>(i)].numel() == 0 || !node.back) continue;
      node.back(grads[static_cast<std::size_t>(i)], grads);
    }
    return grads;
  }

  // Gradient for a node, zero-filled when no path to the root exists.
  Tensor<S> grad_of(const std::vector<Tensor<S>>& grads, Var v) const {
    const Tensor<S>& g = grads[static_cast<std::size_t>(v)];
    if (g.numel() > 0) return g;
    return Tensor<S>(value(v).shape());
  }

 private:
  int whole_group(Var a) const {
    const Tensor<S>& v = value(a);
    return v.rank() == 2 ? v.dim(0) : static_cast<int>(v.numel());
  }

  static void accumulate(std::vector<Tensor<S>>& grads, Var target, Tensor<S> delta) {
    Tensor<S>& slot = grads[static_cast<std::size_t>(target)];
    if (slot.numel() == 0)
      slot = std::move(delta);
    else
      slot = coda::add(slot, delta);
  }

  template <typename F>
  Var unary(Var a, Tensor<S> out, F&& df) {
    const bool rg = requires_grad(a);
    Var v = leaf(std::move(out), rg);
    if (rg)
      nodes_.back().back = [a, df = std::forward<F>(df)](const Tensor<S>& g, std::vector<Tensor<S>>& grads) {
        accumulate(grads, a, df(g));
      };
    return v;
  }

  template <typename Fa, typename Fb>
  Var binary(Var a, Var b, Tensor<S> out, Fa&& dfa, Fb&& dfb) {
    const bool ra = requires_grad(a), rb = requires_grad(b);
    Var v = leaf(std::move(out), ra || rb);
    if (ra || rb)
      nodes_.back().back = [a, b, ra, rb, dfa = std::forward<Fa>(dfa), dfb = std::forward<Fb>(dfb)](
                               const Tensor<S>& g, std::vector<Tensor<S>>& grads) {
        if (ra) accumulate(grads, a, dfa(g));
        if (rb) accumulate(grads, b, dfb(g));
      };
    return v;
  }

  std::vector<Node> nodes_;
};

}  // namespace coda

#endif  // CODA_AUTODIFF_HPP
