#ifndef CODA_DATASETS_HPP
#define CODA_DATASETS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "coda/errors.hpp"
#include "coda/rng.hpp"
#include "coda/tensor.hpp"

namespace coda {

template <typename S>
struct LabeledImageSet {
  std::vector<Tensor<S>> images;  // each C x H x W, values in [0,1]
  std::vector<int> labels;
  std::vector<std::string> class_names;
  int num_classes = 0;

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (images.size() != labels.size()) throw contract_error("dataset: image/label count mismatch");
    for (int l : labels)
      if (l < 0 || l >= num_classes) throw contract_error("dataset: label " + std::to_string(l) + " out of range");
    for (const auto& img : images)
      for (std::int64_t i = 0; i < img.numel(); ++i)
        if (img[i] < S{0} || img[i] > S{1}) throw contract_error("dataset: pixel outside [0,1]");
  }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char buf[4];
  if (!in.read(reinterpret_cast<char*>(buf), 4)) throw format_error("truncated file while reading " + what);
  return (std::uint32_t{buf[0]} << 24) | (std::uint32_t{buf[1]} << 16) | (std::uint32_t{buf[2]} << 8) | buf[3];
}

inline std::vector<unsigned char> read_bytes(std::istream& in, std::size_t n, const std::string& what) {
  std::vector<unsigned char> buf(n);
  if (n > 0 && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n)))
    throw format_error("truncated payload while reading " + what);
  return buf;
}

}  // namespace detail

// IDX container (the MNIST byte format): big-endian magic + dims, then raw
// uint8 pixels. Pixels are scaled to [0,1] by /255.
template <typename S>
LabeledImageSet<S> load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img_in(images_path, std::ios::binary);
  if (!img_in) throw format_error("cannot open " + images_path);
  if (detail::read_be32(img_in, "image magic") != 0x00000803u)
    throw format_error(images_path + ": bad IDX image magic");
  const std::uint32_t n = detail::read_be32(img_in, "image count");
  const std::uint32_t rows = detail::read_be32(img_in, "rows");
  const std::uint32_t cols = detail::read_be32(img_in, "cols");
  auto pixels = detail::read_bytes(img_in, static_cast<std::size_t>(n) * rows * cols, images_path);

  std::ifstream lbl_in(labels_path, std::ios::binary);
  if (!lbl_in) throw format_error("cannot open " + labels_path);
  if (detail::read_be32(lbl_in, "label magic") != 0x00000801u)
    throw format_error(labels_path + ": bad IDX label magic");
  const std::uint32_t ln = detail::read_be32(lbl_in, "label count");
  if (ln != n)
    throw format_error("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(ln) + " labels");
  auto labels = detail::read_bytes(lbl_in, ln, labels_path);

  LabeledImageSet<S> set;
  set.num_classes = 10;
  for (int c = 0; c < 10; ++c) set.class_names.push_back(std::to_string(c));
  set.images.reserve(n);
  set.labels.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Tensor<S> img({1, static_cast<int>(rows), static_cast<int>(cols)});
    const unsigned char* src = pixels.data() + static_cast<std::size_t>(i) * rows * cols;
    for (std::int64_t p = 0; p < img.numel(); ++p) img[p] = static_cast<S>(src[p]) / S{255};
    set.images.push_back(std::move(img));
    set.labels.push_back(static_cast<int>(labels[i]));
  }
  set.validate();
  return set;
}

// Writes an image/label pair in IDX format; the loader's byte-exact inverse.
template <typename S>
void save_idx(const LabeledImageSet<S>& set, const std::string& images_path, const std::string& labels_path) {
  auto write_be32 = [](std::ostream& out, std::uint32_t v) {
    const unsigned char buf[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(buf), 4);
  };
  const int rows = set.images.empty() ? 0 : set.images.front().dim(1);
  const int cols = set.images.empty() ? 0 : set.images.front().dim(2);
  std::ofstream img_out(images_path, std::ios::binary);
  if (!img_out) throw format_error("cannot write " + images_path);
  write_be32(img_out, 0x00000803u);
  write_be32(img_out, static_cast<std::uint32_t>(set.size()));
  write_be32(img_out, static_cast<std::uint32_t>(rows));
  write_be32(img_out, static_cast<std::uint32_t>(cols));
  for (const auto& img : set.images)
    for (std::int64_t p = 0; p < img.numel(); ++p) {
      const int v = static_cast<int>(std::lround(static_cast<double>(img[p]) * 255.0));
      img_out.put(static_cast<char>(std::clamp(v, 0, 255)));
    }
  std::ofstream lbl_out(labels_path, std::ios::binary);
  if (!lbl_out) throw format_error("cannot write " + labels_path);
  write_be32(lbl_out, 0x00000801u);
  write_be32(lbl_out, static_cast<std::uint32_t>(set.size()));
  for (int l : set.labels) lbl_out.put(static_cast<char>(l));
}

// CIFAR-10 binary: each record is 1 label byte + 3072 channel-major pixels.
template <typename S>
LabeledImageSet<S> load_cifar10_bin(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw format_error("cannot open " + path);
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size % 3073 != 0)
    throw format_error(path + ": size " + std::to_string(size) + " is not a multiple of 3073");
  in.seekg(0);
  const std::size_t n = size / 3073;

  LabeledImageSet<S> set;
  set.num_classes = 10;
  set.class_names = {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
  for (std::size_t i = 0; i < n; ++i) {
    auto record = detail::read_bytes(in, 3073, path);
    if (record[0] > 9)
      throw format_error(path + ": record " + std::to_string(i) + " has label byte " + std::to_string(record[0]));
    Tensor<S> img({3, 32, 32});
    for (std::int64_t p = 0; p < 3072; ++p) img[p] = static_cast<S>(record[p + 1]) / S{255};
    set.images.push_back(std::move(img));
    set.labels.push_back(record[0]);
  }
  set.validate();
  return set;
}

// Synthetic set for the eigenvector-recovery experiment: n samples, each a
// clean base image plus clamped zero-mean Gaussian noise, labelled by base.
template <typename S>
LabeledImageSet<S> make_noisy_digits(const std::vector<Tensor<S>>& bases, int n, double noise_std, Rng& rng) {
  if (bases.empty() || n % static_cast<int>(bases.size()) != 0)
    throw contract_error("make_noisy_digits: n must be a positive multiple of the base count");
  LabeledImageSet<S> set;
  set.num_classes = static_cast<int>(bases.size());
  for (int c = 0; c < set.num_classes; ++c) set.class_names.push_back("base" + std::to_string(c));
  for (int i = 0; i < n; ++i) {
    const int b = i % static_cast<int>(bases.size());
    Tensor<S> img = bases[static_cast<std::size_t>(b)];
    for (std::int64_t p = 0; p < img.numel(); ++p) {
      const double v = static_cast<double>(img[p]) + noise_std * rng.next_normal();
      img[p] = static_cast<S>(std::clamp(v, 0.0, 1.0));
    }
    set.images.push_back(std::move(img));
    set.labels.push_back(b);
  }
  return set;
}

// Desk-scale classification set grown from a pool of clean digit images:
// nearest-neighbour upscale to out_size, random shift, clamped Gaussian noise.
template <typename S>
LabeledImageSet<S> make_digit_set(const LabeledImageSet<S>& bases, int n, int out_size, int max_shift,
                                  double noise_std, Rng& rng) {
  if (bases.size() == 0) throw contract_error("make_digit_set: empty base set");
  LabeledImageSet<S> set;
  set.num_classes = bases.num_classes;
  set.class_names = bases.class_names;
  for (int i = 0; i < n; ++i) {
    const std::size_t b = static_cast<std::size_t>(rng.next_below(bases.size()));
    const Tensor<S>& src = bases.images[b];
    const int sh = src.dim(1), sw = src.dim(2);
    const int dy = max_shift > 0 ? static_cast<int>(rng.next_below(2 * max_shift + 1)) - max_shift : 0;
    const int dx = max_shift > 0 ? static_cast<int>(rng.next_below(2 * max_shift + 1)) - max_shift : 0;
    Tensor<S> img({1, out_size, out_size});
    for (int y = 0; y < out_size; ++y)
      for (int x = 0; x < out_size; ++x) {
        const int syy = (y - dy) * sh / out_size;
        const int sxx = (x - dx) * sw / out_size;
        double v = 0.0;
        if (y - dy >= 0 && y - dy < out_size && x - dx >= 0 && x - dx < out_size)
          v = static_cast<double>(src.at(0, std::clamp(syy, 0, sh - 1), std::clamp(sxx, 0, sw - 1)));
        v += noise_std * rng.next_normal();
        img.at(0, y, x) = static_cast<S>(std::clamp(v, 0.0, 1.0));
      }
    set.images.push_back(std::move(img));
    set.labels.push_back(bases.labels[b]);
  }
  return set;
}

// One n x n pointing-game composite: distinct classes, cells filled with the
// most confidently classified unused image of each sampled class.
template <typename S>
struct GridSample {
  Tensor<S> image;              // C x (n*H) x (n*W)
  int cells_per_side = 0;
  std::vector<int> cell_class;  // n*n entries, row-major cells
  std::vector<int> cell_source; // index into the source set
};

template <typename S>
std::vector<GridSample<S>> make_grids(const LabeledImageSet<S>& set, const std::vector<double>& scores, int n,
                                      int count, Rng& rng) {
  if (set.size() == 0 || scores.size() != set.size()) throw contract_error("make_grids: scores/set mismatch");
  if (n < 1 || n * n > set.num_classes)
    throw contract_error("make_grids: need at least n*n distinct classes");
  const int c = set.images.front().dim(0), h = set.images.front().dim(1), w = set.images.front().dim(2);

  // Per class, images sorted by descending confidence; consumed front-first.
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(set.num_classes));
  for (std::size_t i = 0; i < set.size(); ++i) by_class[static_cast<std::size_t>(set.labels[i])].push_back(static_cast<int>(i));
  for (auto& list : by_class)
    std::sort(list.begin(), list.end(), [&](int a, int b) {
      return scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)]
                 ? scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]
                 : a < b;
    });
  std::vector<std::size_t> cursor(static_cast<std::size_t>(set.num_classes), 0);

  std::vector<GridSample<S>> grids;
  for (int gi = 0; gi < count; ++gi) {
    std::vector<int> available;
    for (int cls = 0; cls < set.num_classes; ++cls)
      if (cursor[static_cast<std::size_t>(cls)] < by_class[static_cast<std::size_t>(cls)].size()) available.push_back(cls);
    if (static_cast<int>(available.size()) < n * n)
      throw contract_error("make_grids: image pool exhausted after building " + std::to_string(grids.size()) +
                           " of " + std::to_string(count) + " grids");
    // Uniform class sample without replacement within the grid.
    std::vector<int> chosen;
    for (int need = n * n; need > 0; --need) {
      const std::size_t pick = static_cast<std::size_t>(rng.next_below(available.size()));
      chosen.push_back(available[pick]);
      available.erase(available.begin() + static_cast<std::ptrdiff_t>(pick));
    }

    GridSample<S> grid;
    grid.cells_per_side = n;
    grid.image = Tensor<S>({c, n * h, n * w});
    for (int cell = 0; cell < n * n; ++cell) {
      const int cls = chosen[static_cast<std::size_t>(cell)];
      const int src_idx = by_class[static_cast<std::size_t>(cls)][cursor[static_cast<std::size_t>(cls)]++];
      const Tensor<S>& src = set.images[static_cast<std::size_t>(src_idx)];
      const int cy = cell / n, cx = cell % n;
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) grid.image.at(ch, cy * h + y, cx * w + x) = src.at(ch, y, x);
      grid.cell_class.push_back(cls);
      grid.cell_source.push_back(src_idx);
    }
    grids.push_back(std::move(grid));
  }
  return grids;
}

}  // namespace coda

#endif  // CODA_DATASETS_HPP
