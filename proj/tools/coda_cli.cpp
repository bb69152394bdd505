// Command-line front end: training, evaluation, explanation heatmaps,
// interpretability metrics, the eigenvector demo, and the invariant suites.
//
// Exit codes: 0 success, 2 usage, 3 data/format, 4 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "coda/interpret.hpp"
#include "coda/train.hpp"
#include "coda/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Options {
  std::string config, data, out, ckpt, image, method = "coda", suite = "all", out_dir = ".";
  int precision = 64;
  std::uint64_t seed = 0;
  int epochs = 3, batch_size = 16, threads = 0;
  double lr = 2.5e-4, lambda = -1.0;
  int class_index = 0, data_index = -1;
  int grids = 200, count = 100, steps = 11, probes = 50;
  int ev_n = 3072, ev_steps = 2000;
  double ev_noise = 0.25;
  bool most_first = false;
};

// --data accepts a CIFAR-10 .bin file or an IDX image file whose label file
// sits next to it ("images"->"labels", "idx3"->"idx1").
std::string derive_label_path(const std::string& images_path) {
  std::string labels = images_path;
  bool changed = false;
  for (const auto& [from, to] : {std::pair<std::string, std::string>{"images", "labels"},
                                 std::pair<std::string, std::string>{"idx3", "idx1"}}) {
    const auto pos = labels.rfind(from);
    if (pos != std::string::npos) {
      labels.replace(pos, from.size(), to);
      changed = true;
    }
  }
  if (!changed) throw coda::format_error("cannot derive a label path from '" + images_path + "'");
  return labels;
}

template <typename S>
coda::LabeledImageSet<S> load_dataset(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".bin") return coda::load_cifar10_bin<S>(path);
  return coda::load_idx<S>(path, derive_label_path(path));
}

template <typename S>
coda::Tensor<S> load_input_image(const Options& opt, const coda::CodaNet<S>& net) {
  if (!opt.image.empty()) return coda::load_pnm<S>(opt.image);
  if (opt.data.empty() || opt.data_index < 0)
    throw coda::contract_error("explain: need --image or --data with --index");
  const auto set = load_dataset<S>(opt.data);
  if (opt.data_index >= static_cast<int>(set.size()))
    throw coda::input_error("--index out of range for dataset of size " + std::to_string(set.size()));
  (void)net;
  return set.images[static_cast<std::size_t>(opt.data_index)];
}

coda::AttributionMethod parse_method(const std::string& name) {
  if (name == "coda") return coda::AttributionMethod::coda();
  if (name == "grad") return coda::AttributionMethod::grad();
  if (name == "ixg") return coda::AttributionMethod::ixg();
  if (name.rfind("occ", 0) == 0) {
    int k = 5;
    if (name.size() > 3) k = std::stoi(name.substr(3));
    return coda::AttributionMethod::occlusion(k);
  }
  throw coda::contract_error("unknown attribution method '" + name + "'");
}

void write_summary(const std::string& path, const std::vector<std::pair<std::string, double>>& entries) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw coda::format_error("cannot write " + path);
  for (const auto& [key, value] : entries) out << key << "=" << value << "\n";
}

// Confidence of each image for its own label, used to order the grid pool.
template <typename S>
std::vector<double> label_confidences(const coda::CodaNet<S>& net, const coda::LabeledImageSet<S>& set) {
  std::vector<double> scores(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const coda::Tensor<S> logits = coda::forward(net, set.images[i]);
    scores[i] = static_cast<double>(logits[set.labels[i]]);
  }
  return scores;
}

template <typename S>
int cmd_train(const Options& opt) {
  std::ifstream cfg_in(opt.config);
  if (!cfg_in) throw coda::format_error("cannot open config " + opt.config);
  coda::CodaNet<S> net = coda::parse_net_config<S>(cfg_in);
  if (opt.lambda >= 0) net.lambda = static_cast<S>(opt.lambda);
  const auto set = load_dataset<S>(opt.data);

  coda::Rng init_rng(opt.seed);
  net.init(init_rng);

  coda::TrainConfig cfg;
  cfg.epochs = opt.epochs;
  cfg.batch_size = opt.batch_size;
  cfg.base_lr = opt.lr;
  cfg.seed = opt.seed + 1;
  cfg.threads = opt.threads;
  coda::train(net, set, cfg, &std::cout);
  coda::save_checkpoint<S>(net, nullptr, opt.out);
  std::cout << "checkpoint " << opt.out << "\n";
  return kExitOk;
}

template <typename S>
int cmd_eval(const Options& opt) {
  const coda::CodaNet<S> net = coda::load_checkpoint<S>(opt.ckpt);
  const auto set = load_dataset<S>(opt.data);
  const double acc = coda::evaluate_accuracy(net, set, opt.threads);
  std::printf("accuracy=%.6f n=%zu\n", acc, set.size());
  return kExitOk;
}

template <typename S>
int cmd_explain(const Options& opt) {
  const coda::CodaNet<S> net = coda::load_checkpoint<S>(opt.ckpt);
  if (opt.class_index < 0 || opt.class_index >= net.num_classes) {
    std::cerr << "class index " << opt.class_index << " out of range [0, " << net.num_classes << ")\n";
    return kExitUsage;
  }
  const coda::Tensor<S> image = load_input_image(opt, net);
  const coda::AttributionMethod method = parse_method(opt.method);
  const coda::Tensor<S> attr = coda::attribute(method, net, image, opt.class_index);
  coda::render_heatmap(attr, opt.out);
  const coda::Tensor<S> logits = coda::forward(net, image);
  std::printf("logit=%.8f\n", static_cast<double>(logits[opt.class_index]));
  if (method.kind == coda::AttributionKind::CoDA)
    std::printf("contribution_sum=%.8f\n", static_cast<double>(coda::sum(attr)));
  std::printf("heatmap=%s\n", opt.out.c_str());
  return kExitOk;
}

template <typename S>
int cmd_pointing_game(const Options& opt) {
  const coda::CodaNet<S> net = coda::load_checkpoint<S>(opt.ckpt);
  const auto set = load_dataset<S>(opt.data);
  coda::Rng rng(opt.seed);
  const auto grids = coda::make_grids(set, label_confidences(net, set), 3, opt.grids, rng);

  std::vector<std::string> methods;
  std::stringstream names(opt.method);
  for (std::string tok; std::getline(names, tok, ',');) methods.push_back(tok);

  std::vector<std::pair<std::string, double>> summary;
  for (const auto& name : methods) {
    const coda::AttributionMethod method = parse_method(name);
    double total = 0;
    std::size_t scored = 0;
    for (const auto& grid : grids)
      for (const int cls : grid.cell_class) {
        const coda::Tensor<S> attr = coda::attribute(method, net, grid.image, cls);
        total += coda::pointing_score(attr, grid, cls);
        ++scored;
      }
    const double mean = total / static_cast<double>(scored);
    std::printf("method=%s mean_pointing=%.6f cells=%zu\n", name.c_str(), mean, scored);
    summary.emplace_back("pointing_" + name, mean);
  }
  write_summary(opt.out, summary);
  return kExitOk;
}

template <typename S>
int cmd_pixel_removal(const Options& opt) {
  const coda::CodaNet<S> net = coda::load_checkpoint<S>(opt.ckpt);
  const auto set = load_dataset<S>(opt.data);
  const int count = std::min<int>(opt.count, static_cast<int>(set.size()));
  coda::Rng rng(opt.seed);

  int wins = 0;
  double mean_least = 0, mean_random = 0, mean_most = 0;
  for (int i = 0; i < count; ++i) {
    const coda::Tensor<S>& image = set.images[static_cast<std::size_t>(i)];
    const int cls = set.labels[static_cast<std::size_t>(i)];
    const coda::Tensor<S> attr = coda::attribute(coda::AttributionMethod::coda(), net, image, cls);
    const auto least =
        coda::pixel_removal_curve(net, image, cls, attr, coda::RemovalOrder::LeastFirst, opt.steps);
    const auto random =
        coda::pixel_removal_curve(net, image, cls, attr, coda::RemovalOrder::Random, opt.steps, &rng);
    const double a_least = coda::curve_area(least), a_random = coda::curve_area(random);
    mean_least += a_least;
    mean_random += a_random;
    if (a_least >= a_random) ++wins;
    if (opt.most_first) {
      const auto most =
          coda::pixel_removal_curve(net, image, cls, attr, coda::RemovalOrder::MostFirst, opt.steps);
      mean_most += coda::curve_area(most);
    }
  }
  std::printf("images=%d least_wins=%d win_rate=%.4f mean_area_least=%.6f mean_area_random=%.6f\n", count,
              wins, static_cast<double>(wins) / count, mean_least / count, mean_random / count);
  if (opt.most_first) std::printf("mean_area_most=%.6f\n", mean_most / count);
  write_summary(opt.out, {{"win_rate", static_cast<double>(wins) / count},
                          {"mean_area_least", mean_least / count},
                          {"mean_area_random", mean_random / count}});
  return kExitOk;
}

template <typename S>
double normalized_map_distance(const coda::Tensor<S>& a, const coda::Tensor<S>& b) {
  const double na = static_cast<double>(coda::norm2(a)), nb = static_cast<double>(coda::norm2(b));
  const double denom = std::max(na, nb);
  if (denom == 0) return 0;
  return static_cast<double>(coda::norm2(coda::sub(a, b))) / denom;
}

template <typename S>
int cmd_sanity_check(const Options& opt) {
  const coda::CodaNet<S> net = coda::load_checkpoint<S>(opt.ckpt);
  const auto set = load_dataset<S>(opt.data);
  const int probes = std::min<int>(opt.probes, static_cast<int>(set.size()));
  coda::Rng rng(opt.seed);

  int perturbed = 0;
  for (int i = 0; i < probes; ++i) {
    const auto steps = coda::sanity_randomization(net, set.images[static_cast<std::size_t>(i)],
                                                  set.labels[static_cast<std::size_t>(i)], rng);
    bool all_changed = true;
    for (std::size_t s = 1; s < steps.size(); ++s)
      if (normalized_map_distance(steps[0].map.values, steps[s].map.values) <= 0.1) all_changed = false;
    if (all_changed) ++perturbed;
  }
  std::printf("probes=%d perturbed=%d rate=%.4f\n", probes, perturbed,
              static_cast<double>(perturbed) / probes);
  write_summary(opt.out, {{"perturbed_rate", static_cast<double>(perturbed) / probes}});
  return kExitOk;
}

template <typename S>
int cmd_ev_demo(const Options& opt) {
  const auto base_set = load_dataset<S>(opt.data);
  // Three clean bases: the first image of the first three classes present.
  std::vector<coda::Tensor<S>> bases;
  for (int cls = 0; cls < base_set.num_classes && bases.size() < 3; ++cls)
    for (std::size_t i = 0; i < base_set.size(); ++i)
      if (base_set.labels[i] == cls) {
        bases.push_back(base_set.images[i]);
        break;
      }
  if (bases.size() < 3) throw coda::contract_error("ev-demo: need three classes in the dataset");

  coda::Rng rng(opt.seed);
  const auto noisy = coda::make_noisy_digits(bases, opt.ev_n, opt.ev_noise, rng);
  std::vector<coda::Tensor<S>> samples;
  for (const auto& img : noisy.images) samples.push_back(img.reshaped({static_cast<int>(img.numel())}));

  const auto result =
      coda::train_dau_ascent<S>(samples, 3, opt.ev_steps, static_cast<S>(opt.lr), opt.seed + 1);
  const auto pairs = coda::dau_eigenvectors(result.a, result.b);
  std::printf("mean_output=%.6f eigenpairs=%zu\n", static_cast<double>(result.final_mean_output),
              pairs.size());

  const int h = bases.front().dim(1), w = bases.front().dim(2);
  std::vector<std::pair<std::string, double>> summary;
  for (std::size_t b = 0; b < bases.size(); ++b) {
    coda::Tensor<double> dir({h * w});
    for (int i = 0; i < h * w; ++i) dir[i] = static_cast<double>(bases[b][i]);
    const double cosine = coda::subspace_cosine(pairs, dir);
    std::printf("base%zu subspace_cosine=%.4f\n", b, cosine);
    summary.emplace_back("cosine_base" + std::to_string(b), cosine);
  }
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    coda::Tensor<double> map({h, w});
    for (int i = 0; i < h * w; ++i) map[i] = pairs[p].vector[i];
    coda::render_heatmap(map, opt.out_dir + "/eigenvector" + std::to_string(p) + ".ppm");
    std::printf("eigenvalue%zu=%.6f\n", p, pairs[p].value);
  }
  write_summary(opt.out, summary);
  return kExitOk;
}

template <typename S>
int cmd_verify(const Options& opt) {
  const bool f32 = opt.precision == 32;
  const double lin_tol = f32 ? 1e-3 : 1e-8;
  std::vector<coda::SuiteResult> results;
  if (opt.suite == "linearity" || opt.suite == "all") {
    results.push_back(coda::linearity_suite<S>(100, opt.seed + 1, lin_tol));
    results.push_back(coda::completeness_suite<S>(100, opt.seed + 2, lin_tol));
  }
  if (opt.suite == "bounds" || opt.suite == "all")
    results.push_back(coda::bounds_suite<S>(10000, opt.seed + 3, 1e-6));
  if (opt.suite == "gradients" || opt.suite == "all") {
    if (f32) {
      std::cout << "gradients: skipped (64-bit only)\n";
    } else {
      results.push_back(coda::op_gradients_suite<S>(3, opt.seed + 4, 1e-4));
      results.push_back(coda::loss_gradient_suite<S>(opt.seed + 5, 1e-3));
    }
  }
  if (opt.suite == "collapse" || opt.suite == "all")
    results.push_back(coda::collapse_suite<S>(5, opt.seed + 6, f32 ? 1e-3 : 1e-8));
  if (results.empty()) {
    std::cerr << "unknown suite '" << opt.suite << "'\n";
    return kExitUsage;
  }
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%-16s %s worst=%.3e tol=%.0e%s%s\n", r.name.c_str(), r.pass ? "pass" : "FAIL",
                r.worst_error, r.tolerance, r.detail.empty() ? "" : " at=", r.detail.c_str());
    all_pass = all_pass && r.pass;
  }
  return all_pass ? kExitOk : kExitNumeric;
}

using Runner = int (*)(const Options&);

struct Dispatch {
  Runner f64 = nullptr;
  Runner f32 = nullptr;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic-alignment network toolkit"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--precision", opt.precision, "floating-point width")->check(CLI::IsMember({32, 64}));

  std::map<const CLI::App*, Dispatch> dispatch;
  auto add = [&](const char* name, const char* desc, Runner f64, Runner f32) {
    CLI::App* sub = app.add_subcommand(name, desc);
    dispatch[sub] = {f64, f32};
    return sub;
  };

  CLI::App* train = add("train", "train a network from a config file", cmd_train<double>, cmd_train<float>);
  train->add_option("--config", opt.config)->required();
  train->add_option("--data", opt.data)->required();
  train->add_option("--out", opt.out)->required();
  train->add_option("--seed", opt.seed);
  train->add_option("--epochs", opt.epochs);
  train->add_option("--batch-size", opt.batch_size);
  train->add_option("--lr", opt.lr);
  train->add_option("--lambda", opt.lambda);
  train->add_option("--threads", opt.threads);

  CLI::App* eval = add("eval", "evaluate a checkpoint", cmd_eval<double>, cmd_eval<float>);
  eval->add_option("--ckpt", opt.ckpt)->required();
  eval->add_option("--data", opt.data)->required();
  eval->add_option("--threads", opt.threads);

  CLI::App* explain = add("explain", "write an attribution heatmap", cmd_explain<double>, cmd_explain<float>);
  explain->add_option("--ckpt", opt.ckpt)->required();
  explain->add_option("--image", opt.image);
  explain->add_option("--data", opt.data);
  explain->add_option("--index", opt.data_index);
  explain->add_option("--class", opt.class_index)->required();
  explain->add_option("--out", opt.out)->required();
  explain->add_option("--method", opt.method);

  CLI::App* pointing =
      add("pointing-game", "grid localisation metric", cmd_pointing_game<double>, cmd_pointing_game<float>);
  pointing->add_option("--ckpt", opt.ckpt)->required();
  pointing->add_option("--data", opt.data)->required();
  pointing->add_option("--grids", opt.grids);
  pointing->add_option("--methods", opt.method, "comma-separated list");
  pointing->add_option("--seed", opt.seed);
  pointing->add_option("--out", opt.out, "key=value summary file");

  CLI::App* removal =
      add("pixel-removal", "pixel perturbation metric", cmd_pixel_removal<double>, cmd_pixel_removal<float>);
  removal->add_option("--ckpt", opt.ckpt)->required();
  removal->add_option("--data", opt.data)->required();
  removal->add_option("--count", opt.count);
  removal->add_option("--steps", opt.steps);
  removal->add_option("--seed", opt.seed);
  removal->add_flag("--most-first", opt.most_first, "also report the most-important-first curve");
  removal->add_option("--out", opt.out, "key=value summary file");

  CLI::App* sanity =
      add("sanity-check", "layer randomisation check", cmd_sanity_check<double>, cmd_sanity_check<float>);
  sanity->add_option("--ckpt", opt.ckpt)->required();
  sanity->add_option("--data", opt.data)->required();
  sanity->add_option("--probes", opt.probes);
  sanity->add_option("--seed", opt.seed);
  sanity->add_option("--out", opt.out, "key=value summary file");

  CLI::App* ev = add("ev-demo", "eigenvector recovery demo", cmd_ev_demo<double>, cmd_ev_demo<float>);
  ev->add_option("--data", opt.data)->required();
  ev->add_option("--n", opt.ev_n);
  ev->add_option("--noise", opt.ev_noise);
  ev->add_option("--steps", opt.ev_steps);
  ev->add_option("--lr", opt.lr);
  ev->add_option("--seed", opt.seed);
  ev->add_option("--out-dir", opt.out_dir);
  ev->add_option("--out", opt.out, "key=value summary file");

  CLI::App* verify = add("verify", "run the invariant suites", cmd_verify<double>, cmd_verify<float>);
  verify->add_option("--suite", opt.suite)->check(CLI::IsMember({"linearity", "bounds", "gradients", "collapse", "all"}));
  verify->add_option("--seed", opt.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const Dispatch& d = dispatch.at(sub);
    return opt.precision == 32 ? d.f32(opt) : d.f64(opt);
  } catch (const coda::format_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const coda::input_error& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}
