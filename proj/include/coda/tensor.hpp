#ifndef CODA_TENSOR_HPP
#define CODA_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "coda/errors.hpp"
#include "coda/rng.hpp"

namespace coda {

using Shape = std::vector<int>;

inline std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major n-dimensional array. The scalar type is float for training
// and double for verification runs.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(numel_of(shape_)), S{0});
  }

  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::size_t>(numel_of(shape_)) != data_.size())
      throw shape_error("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_to_string(shape_));
  }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor identity(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) t.at(i, i) = S{1};
    return t;
  }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  S& at(int i) { return data_[check_index(i)]; }
  const S& at(int i) const { return data_[check_index(i)]; }
  S& at(int i, int j) { return data_[check_index2(i, j)]; }
  const S& at(int i, int j) const { return data_[check_index2(i, j)]; }
  S& at(int i, int j, int k) { return data_[check_index3(i, j, k)]; }
  const S& at(int i, int j, int k) const { return data_[check_index3(i, j, k)]; }

  // Same buffer under a new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (numel_of(shape) != numel())
      throw shape_error("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    return Tensor(std::move(shape), data_);
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw shape_error("negative dimension in shape " + shape_to_string(shape));
      n *= d;
    }
    return n;
  }

 private:
  std::size_t check_index(int i) const {
    if (rank() != 1 || i < 0 || i >= shape_[0]) throw shape_error("bad 1-d access into " + shape_to_string(shape_));
    return static_cast<std::size_t>(i);
  }
  std::size_t check_index2(int i, int j) const {
    if (rank() != 2 || i < 0 || i >= shape_[0] || j < 0 || j >= shape_[1])
      throw shape_error("bad 2-d access into " + shape_to_string(shape_));
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t check_index3(int i, int j, int k) const {
    if (rank() != 3 || i < 0 || i >= shape_[0] || j < 0 || j >= shape_[1] || k < 0 || k >= shape_[2])
      throw shape_error("bad 3-d access into " + shape_to_string(shape_));
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }

  Shape shape_;
  std::vector<S> data_;
};

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul shape mismatch: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> c({m, n});
  const S* ap = a.data();
  const S* bp = b.data();
  S* cp = c.data();
  // i-k-j order keeps the inner loop contiguous in both b and c.
  for (int i = 0; i < m; ++i) {
    for (int t = 0; t < k; ++t) {
      const S av = ap[static_cast<std::size_t>(i) * k + t];
      if (av == S{0}) continue;
      const S* brow = bp + static_cast<std::size_t>(t) * n;
      S* crow = cp + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2) throw shape_error("transpose expects a matrix, got " + shape_to_string(a.shape()));
  Tensor<S> t({a.dim(1), a.dim(0)});
  for (int i = 0; i < a.dim(0); ++i)
    for (int j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

template <typename S, typename F>
Tensor<S> zip(const Tensor<S>& a, const Tensor<S>& b, F&& f) {
  if (!a.same_shape(b))
    throw shape_error("elementwise shape mismatch: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  Tensor<S> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return zip(a, b, [](S x, S y) { return x + y; });
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return zip(a, b, [](S x, S y) { return x - y; });
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return zip(a, b, [](S x, S y) { return x * y; });
}
template <typename S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  Tensor<S> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  return out;
}

template <typename S>
S dot(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.numel() != b.numel()) throw shape_error("dot length mismatch");
  S acc{0};
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename S>
S sum(const Tensor<S>& a) {
  S acc{0};
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += a[i];
  return acc;
}

template <typename S>
S norm2(const Tensor<S>& a) {
  S acc{0};
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += a[i] * a[i];
  return std::sqrt(acc);
}

template <typename S>
S max_abs(const Tensor<S>& a) {
  S m{0};
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i]));
  return m;
}

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.numel() != b.numel()) throw shape_error("max_abs_diff length mismatch");
  S m{0};
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Spatial geometry of one convolution: output size and the mapping from
// (output location, within-patch offset) to flat input indices.
struct ConvGeometry {
  int channels = 0, height = 0, width = 0;
  int kernel = 1, stride = 1, padding = 0;
  int out_height = 0, out_width = 0;

  ConvGeometry() = default;
  ConvGeometry(int c, int h, int w, int k, int s, int p)
      : channels(c), height(h), width(w), kernel(k), stride(s), padding(p) {
    if (k < 1 || s < 1 || p < 0) throw geometry_error("kernel/stride/padding out of range");
    const int eh = h + 2 * p - k, ew = w + 2 * p - k;
    if (eh < 0 || ew < 0 || eh % s != 0 || ew % s != 0)
      throw geometry_error("non-integral convolution output for input " + std::to_string(h) + "x" +
                           std::to_string(w) + ", k=" + std::to_string(k) + ", s=" + std::to_string(s) +
                           ", p=" + std::to_string(p));
    out_height = eh / s + 1;
    out_width = ew / s + 1;
  }

  int patch_dim() const { return channels * kernel * kernel; }
  int num_locations() const { return out_height * out_width; }
  std::int64_t input_numel() const { return static_cast<std::int64_t>(channels) * height * width; }

  // Flat row-major index into the C x H x W input for patch entry d of output
  // location loc, or -1 when the entry falls into the zero padding.
  int input_index(int loc, int d) const {
    const int oh = loc / out_width, ow = loc % out_width;
    const int c = d / (kernel * kernel);
    const int rem = d % (kernel * kernel);
    const int kh = rem / kernel, kw = rem % kernel;
    const int ih = oh * stride - padding + kh;
    const int iw = ow * stride - padding + kw;
    if (ih < 0 || ih >= height || iw < 0 || iw >= width) return -1;
    return (c * height + ih) * width + iw;
  }
};

// Patch extraction: column (h,w) of the result holds the zero-padded k x k
// patch at output location (h,w), channel-major then row-major in the patch.
template <typename S>
Tensor<S> unfold(const Tensor<S>& input, int kernel, int stride, int padding) {
  if (input.rank() != 3) throw shape_error("unfold expects CxHxW, got " + shape_to_string(input.shape()));
  const ConvGeometry g(input.dim(0), input.dim(1), input.dim(2), kernel, stride, padding);
  Tensor<S> out({g.patch_dim(), g.num_locations()});
  const S* ip = input.data();
  for (int d = 0; d < g.patch_dim(); ++d)
    for (int loc = 0; loc < g.num_locations(); ++loc) {
      const int idx = g.input_index(loc, d);
      out.at(d, loc) = idx < 0 ? S{0} : ip[idx];
    }
  return out;
}

// Adjoint of unfold: scatter-adds patch columns back into a CxHxW tensor.
template <typename S>
Tensor<S> fold(const Tensor<S>& columns, const ConvGeometry& g) {
  if (columns.rank() != 2 || columns.dim(0) != g.patch_dim() || columns.dim(1) != g.num_locations())
    throw shape_error("fold shape mismatch: " + shape_to_string(columns.shape()));
  Tensor<S> out({g.channels, g.height, g.width});
  S* op = out.data();
  for (int d = 0; d < g.patch_dim(); ++d)
    for (int loc = 0; loc < g.num_locations(); ++loc) {
      const int idx = g.input_index(loc, d);
      if (idx >= 0) op[idx] += columns.at(d, loc);
    }
  return out;
}

// I.i.d. normal samples; the layout of the stream is fixed by (seed, call order).
template <typename S>
Tensor<S> rand_normal(Rng& rng, Shape shape, double mean = 0.0, double stddev = 1.0) {
  if (stddev < 0.0) throw contract_error("rand_normal: negative std");
  Tensor<S> out(std::move(shape));
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<S>(mean + stddev * rng.next_normal());
  return out;
}

template <typename S>
Tensor<S> rand_uniform(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
  Tensor<S> out(std::move(shape));
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<S>(lo + (hi - lo) * rng.next_double());
  return out;
}

}  // namespace coda

#endif  // CODA_TENSOR_HPP
