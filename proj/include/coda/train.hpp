#ifndef CODA_TRAIN_HPP
#define CODA_TRAIN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "coda/datasets.hpp"
#include "coda/network.hpp"
#include "coda/parallel.hpp"

namespace coda {

// Mutable views of every trainable tensor of a network, in a fixed order.
template <typename S>
std::vector<Tensor<S>*> trainable_params(CodaNet<S>& net) {
  std::vector<Tensor<S>*> params;
  for (auto& layer : net.layers) {
    params.push_back(&layer.a);
    params.push_back(&layer.b);
    params.push_back(&layer.bias);
  }
  return params;
}

template <typename S>
struct AdamState {
  S beta1{static_cast<S>(0.9)};
  S beta2{static_cast<S>(0.999)};
  S eps{static_cast<S>(1e-8)};
  S base_lr{static_cast<S>(2.5e-4)};
  std::int64_t step = 0;
  std::vector<Tensor<S>> m, v;

  template <typename ParamList>
  static AdamState make(const ParamList& params, S base_lr) {
    AdamState state;
    state.base_lr = base_lr;
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
    return state;
  }
};

// Standard Adam update with bias correction.
template <typename S>
void adam_step(const std::vector<Tensor<S>*>& params, const std::vector<Tensor<S>>& grads, AdamState<S>& state,
               S lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw shape_error("adam_step: parameter/gradient/state count mismatch");
  ++state.step;
  const S bc1 = S{1} - static_cast<S>(std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step)));
  const S bc2 = S{1} - static_cast<S>(std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step)));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<S>& w = *params[p];
    const Tensor<S>& g = grads[p];
    if (!w.same_shape(g)) throw shape_error("adam_step: gradient shape mismatch at parameter " + std::to_string(p));
    Tensor<S>& m = state.m[p];
    Tensor<S>& v = state.v[p];
    for (std::int64_t i = 0; i < w.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (S{1} - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (S{1} - state.beta2) * g[i] * g[i];
      const S mhat = m[i] / bc1;
      const S vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

struct TrainConfig {
  int epochs = 3;
  int batch_size = 16;
  double base_lr = 2.5e-4;
  double lr_decay_factor = 2.0;
  int lr_decay_every = 60;   // epochs
  int warmup_epochs = 0;     // optional linear ramp, off by default
  std::uint64_t seed = 0;
  int threads = 0;           // 0: CODA_THREADS env or 1

  void validate() const {
    if (epochs < 1 || batch_size < 1 || base_lr < 0 || lr_decay_every < 1 || lr_decay_factor <= 1.0)
      throw contract_error("TrainConfig: positive counts and decay factor > 1 required");
  }
};

inline double schedule_lr(const TrainConfig& cfg, int epoch) {
  const double stepped =
      cfg.base_lr / std::pow(cfg.lr_decay_factor, static_cast<double>(epoch / cfg.lr_decay_every));
  if (cfg.warmup_epochs > 0 && epoch < cfg.warmup_epochs)
    return stepped * static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
  return stepped;
}

template <typename S>
struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double accuracy = 0;
};

template <typename S>
int predict_class(const Tensor<S>& logits) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(logits.numel()); ++c)
    if (logits[c] > logits[best]) best = c;
  return best;
}

template <typename S>
double evaluate_accuracy(const CodaNet<S>& net, const LabeledImageSet<S>& set, int threads = 0) {
  std::vector<int> correct(set.size(), 0);
  parallel_for(static_cast<int>(set.size()), threads, [&](int i) {
    const Tensor<S> logits = forward(net, set.images[static_cast<std::size_t>(i)]);
    correct[static_cast<std::size_t>(i)] = predict_class(logits) == set.labels[static_cast<std::size_t>(i)] ? 1 : 0;
  });
  return static_cast<double>(std::accumulate(correct.begin(), correct.end(), 0)) /
         static_cast<double>(set.size());
}

// Per-sample Rng derivation: independent of thread scheduling, fixed by
// (seed, epoch, dataset index).
inline Rng sample_rng(std::uint64_t seed, int epoch, int index) {
  std::uint64_t x = seed;
  x ^= 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch);
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= static_cast<std::uint64_t>(index) + (x >> 31);
  x *= 0x94d049bb133111ebULL;
  return Rng(x);
}

// One optimisation step on a batch; returns the mean per-sample loss.
// Per-sample gradients may be computed on worker threads, but accumulation
// runs in sample order, so results are bit-identical for any thread count.
template <typename S>
double train_batch(CodaNet<S>& net, const LabeledImageSet<S>& set, const std::vector<int>& batch,
                   AdamState<S>& state, double lr, std::uint64_t seed, int epoch, int threads,
                   int* correct_out = nullptr) {
  const auto params = trainable_params(net);
  const int bsize = static_cast<int>(batch.size());
  std::vector<std::vector<Tensor<S>>> sample_grads(static_cast<std::size_t>(bsize));
  std::vector<double> sample_loss(static_cast<std::size_t>(bsize));
  std::vector<int> sample_correct(static_cast<std::size_t>(bsize));

  parallel_for(bsize, threads, [&](int s) {
    const int idx = batch[static_cast<std::size_t>(s)];
    Rng rng = sample_rng(seed, epoch, idx);
    Tensor<S> onehot({net.num_classes});
    onehot[set.labels[static_cast<std::size_t>(idx)]] = S{1};

    Graph<S> graph;
    NetVars<S> vars = make_net_vars(graph, net, true);
    auto input = graph.constant(maybe_encode(net, set.images[static_cast<std::size_t>(idx)]));
    LossVars<S> lv = loss_graph(graph, net, vars, input, onehot, rng);
    sample_loss[static_cast<std::size_t>(s)] = static_cast<double>(graph.value(lv.total)[0]);
    sample_correct[static_cast<std::size_t>(s)] =
        predict_class(graph.value(lv.logits)) == set.labels[static_cast<std::size_t>(idx)] ? 1 : 0;
    auto grads = graph.backward(lv.total);
    std::vector<Tensor<S>> g;
    for (const auto& layer_vars : vars.layers) {
      g.push_back(graph.grad_of(grads, layer_vars.a));
      g.push_back(graph.grad_of(grads, layer_vars.b));
      g.push_back(graph.grad_of(grads, layer_vars.bias));
    }
    sample_grads[static_cast<std::size_t>(s)] = std::move(g);
  });

  // Batch gradient is the mean over per-sample gradients.
  std::vector<Tensor<S>> total;
  for (std::size_t p = 0; p < params.size(); ++p) total.emplace_back(params[p]->shape());
  for (int s = 0; s < bsize; ++s)
    for (std::size_t p = 0; p < params.size(); ++p) total[p] = add(total[p], sample_grads[static_cast<std::size_t>(s)][p]);
  const S inv_b = S{1} / static_cast<S>(bsize);
  for (auto& g : total) g = coda::scale(g, inv_b);

  adam_step(params, total, state, static_cast<S>(lr));
  if (correct_out) *correct_out = std::accumulate(sample_correct.begin(), sample_correct.end(), 0);
  return std::accumulate(sample_loss.begin(), sample_loss.end(), 0.0) / bsize;
}

template <typename S>
std::vector<EpochStats<S>> train(CodaNet<S>& net, const LabeledImageSet<S>& dataset, const TrainConfig& cfg,
                                 std::ostream* log = nullptr) {
  cfg.validate();
  if (dataset.size() == 0) throw contract_error("train: empty dataset");
  net.validate();

  const auto params = trainable_params(net);
  AdamState<S> state = AdamState<S>::make(params, static_cast<S>(cfg.base_lr));
  Rng shuffle_rng(cfg.seed);

  std::vector<EpochStats<S>> stats;
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = schedule_lr(cfg, epoch);
    // Fisher-Yates with the run Rng; deterministic given the seed.
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.next_below(i))]);

    double loss_sum = 0;
    int correct = 0, batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
      int batch_correct = 0;
      const double batch_loss =
          train_batch(net, dataset, batch, state, lr, cfg.seed, epoch, cfg.threads, &batch_correct);
      if (!std::isfinite(batch_loss))
        throw contract_error("train: non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches));
      loss_sum += batch_loss;
      correct += batch_correct;
      ++batches;
    }
    EpochStats<S> es;
    es.epoch = epoch;
    es.lr = lr;
    es.loss = loss_sum / batches;
    es.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
    stats.push_back(es);
    if (log)
      (*log) << "epoch " << epoch << " lr " << lr << " loss " << es.loss << " acc " << es.accuracy << "\n";
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "CODA", version, config text, then named tensors as
// little-endian IEEE floats at the run's native width. Bit-exact round
// trips, language-neutral.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_le32(std::ostream& out, std::uint32_t v) {
  const unsigned char buf[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(buf), 4);
}

inline std::uint32_t read_le32(std::istream& in, std::size_t offset_hint) {
  unsigned char buf[4];
  if (!in.read(reinterpret_cast<char*>(buf), 4))
    throw format_error("checkpoint truncated near offset " + std::to_string(offset_hint));
  return std::uint32_t{buf[0]} | (std::uint32_t{buf[1]} << 8) | (std::uint32_t{buf[2]} << 16) |
         (std::uint32_t{buf[3]} << 24);
}

inline void write_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_le32(out, bits);
}

inline float read_f32(std::istream& in, std::size_t offset_hint) {
  const std::uint32_t bits = read_le32(in, offset_hint);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_le32(out, static_cast<std::uint32_t>(bits));
  write_le32(out, static_cast<std::uint32_t>(bits >> 32));
}

inline double read_f64(std::istream& in, std::size_t offset_hint) {
  const std::uint64_t lo = read_le32(in, offset_hint);
  const std::uint64_t hi = read_le32(in, offset_hint);
  const std::uint64_t bits = lo | (hi << 32);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

template <typename S>
void write_named_tensor(std::ostream& out, const std::string& name, const Tensor<S>& t) {
  write_le32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_le32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d = 0; d < t.rank(); ++d) write_le32(out, static_cast<std::uint32_t>(t.dim(d)));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if constexpr (sizeof(S) == 8)
      write_f64(out, static_cast<double>(t[i]));
    else
      write_f32(out, static_cast<float>(t[i]));
  }
}

template <typename S>
std::pair<std::string, Tensor<S>> read_named_tensor(std::istream& in) {
  const auto pos = static_cast<std::size_t>(in.tellg());
  const std::uint32_t name_len = read_le32(in, pos);
  if (name_len > 1024) throw format_error("checkpoint: implausible tensor name length at offset " + std::to_string(pos));
  std::string name(name_len, '\0');
  if (!in.read(name.data(), name_len)) throw format_error("checkpoint truncated in tensor name at offset " + std::to_string(pos));
  const std::uint32_t rank = read_le32(in, pos);
  if (rank > 8) throw format_error("checkpoint: implausible tensor rank at offset " + std::to_string(pos));
  Shape shape;
  for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(read_le32(in, pos)));
  Tensor<S> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if constexpr (sizeof(S) == 8)
      t[i] = static_cast<S>(read_f64(in, pos));
    else
      t[i] = static_cast<S>(read_f32(in, pos));
  }
  return {name, std::move(t)};
}

}  // namespace detail

template <typename S>
Tensor<S> check_loaded(const Tensor<S>& expected, const Tensor<S>& loaded, const std::string& name) {
  if (!expected.same_shape(loaded))
    throw format_error("checkpoint tensor '" + name + "' has shape " + shape_to_string(loaded.shape()) +
                       ", expected " + shape_to_string(expected.shape()));
  return loaded;
}

template <typename S>
void save_checkpoint(const CodaNet<S>& net, const AdamState<S>* state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw format_error("cannot write " + path);
  out.write("CODA", 4);
  detail::write_le32(out, 1u);  // format version
  detail::write_le32(out, static_cast<std::uint32_t>(sizeof(S)));  // scalar width

  std::ostringstream cfg;
  write_net_config(cfg, net);
  const std::string cfg_text = cfg.str();
  detail::write_le32(out, static_cast<std::uint32_t>(cfg_text.size()));
  out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));

  std::vector<std::pair<std::string, const Tensor<S>*>> tensors;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    tensors.emplace_back(prefix + "A", &net.layers[l].a);
    tensors.emplace_back(prefix + "B", &net.layers[l].b);
    tensors.emplace_back(prefix + "bias", &net.layers[l].bias);
  }
  tensors.emplace_back("b0", &net.output_bias);

  const std::uint32_t opt_count = state ? static_cast<std::uint32_t>(state->m.size() * 2) : 0;
  detail::write_le32(out, static_cast<std::uint32_t>(tensors.size()) + opt_count);
  for (const auto& [name, t] : tensors) detail::write_named_tensor(out, name, *t);
  if (state) {
    for (std::size_t p = 0; p < state->m.size(); ++p) {
      detail::write_named_tensor(out, "adam.m" + std::to_string(p), state->m[p]);
      detail::write_named_tensor(out, "adam.v" + std::to_string(p), state->v[p]);
    }
  }
  detail::write_le32(out, static_cast<std::uint32_t>(state ? state->step : 0));
}

template <typename S>
CodaNet<S> load_checkpoint(const std::string& path, AdamState<S>* state = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "CODA")
    throw format_error(path + ": bad checkpoint magic at offset 0");
  const std::uint32_t version = detail::read_le32(in, 4);
  if (version != 1) throw format_error(path + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t width = detail::read_le32(in, 8);
  if (width != sizeof(S))
    throw format_error(path + ": checkpoint stores " + std::to_string(width * 8) + "-bit scalars, expected " +
                       std::to_string(sizeof(S) * 8) + "-bit");

  const std::uint32_t cfg_len = detail::read_le32(in, 8);
  std::string cfg_text(cfg_len, '\0');
  if (!in.read(cfg_text.data(), cfg_len)) throw format_error(path + ": truncated config block at offset 12");
  CodaNet<S> net = parse_net_config<S>(cfg_text);

  const std::uint32_t count = detail::read_le32(in, 12 + cfg_len);
  std::vector<std::pair<std::string, Tensor<S>>> adam_tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = detail::read_named_tensor<S>(in);
    bool used = false;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      if (name == prefix + "A") { net.layers[l].a = check_loaded(net.layers[l].a, t, name); used = true; }
      else if (name == prefix + "B") { net.layers[l].b = check_loaded(net.layers[l].b, t, name); used = true; }
      else if (name == prefix + "bias") { net.layers[l].bias = check_loaded(net.layers[l].bias, t, name); used = true; }
      if (used) break;
    }
    if (!used && name == "b0") { net.output_bias = t; used = true; }
    if (!used && name.rfind("adam.", 0) == 0) { adam_tensors.emplace_back(name, std::move(t)); used = true; }
    if (!used) throw format_error(path + ": unknown tensor '" + name + "'");
  }
  const std::uint32_t step = detail::read_le32(in, 0);
  if (state) {
    const auto params = trainable_params(net);
    *state = AdamState<S>::make(params, state->base_lr);
    state->step = step;
    for (auto& [name, t] : adam_tensors) {
      const bool is_m = name[5] == 'm';
      const std::size_t idx = static_cast<std::size_t>(std::stoul(name.substr(6)));
      if (idx >= params.size()) throw format_error(path + ": optimizer tensor index out of range");
      (is_m ? state->m : state->v)[idx] = std::move(t);
    }
  }
  net.validate();
  return net;
}

}  // namespace coda

#endif  // CODA_TRAIN_HPP
