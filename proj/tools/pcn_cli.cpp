// pcn: train, evaluate and inspect predictive coding networks.
//
// Exit codes: 0 success, 1 usage, 2 data or I/O, 3 numerical failure.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pcn/analysis.hpp"
#include "pcn/gradcheck.hpp"
#include "pcn/train.hpp"

namespace fs = std::filesystem;
using namespace pcn;

namespace {

constexpr int kOk = 0, kUsage = 1, kData = 2, kNumeric = 3;

DatasetSplits load_for(Dataset d, const std::string& data_dir) {
  const auto root = data_root(data_dir);
  if (!root)
    throw IoError("no data directory: pass --data-dir or set PCN_DATA_DIR (tools/fetch_mnist.sh downloads MNIST)");
  return load_dataset(d, *root);
}

Dataset checkpoint_dataset(const Checkpoint& c) {
  if (c.metadata.contains("dataset")) return parse_dataset(c.metadata["dataset"].get<std::string>());
  if (c.arch.input_channels == 1) return Dataset::Mnist;
  return c.arch.num_classes == 100 ? Dataset::Cifar100 : Dataset::Cifar10;
}

void write_json(const fs::path& dir, const json& j) {
  fs::create_directories(dir);
  std::ofstream f(dir / "config.json");
  f << j.dump(2) << '\n';
  if (!f) throw IoError("cannot write " + (dir / "config.json").string());
}

std::string sanitize(std::string s) {
  for (auto& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-') ch = '_';
  return s;
}

struct TrainArgs {
  std::string config_file, arch, dataset, optimizer, data_dir, out;
  int cycles = 0, epochs = 0, batch_size = 0, repeats = 1;
  std::uint64_t seed = 0;
  std::size_t subset = 0;
  double lr = 0;
  std::vector<int> milestones;
  bool tied = false, plain = false, deterministic = false, no_augment = false;
};

int cmd_train(const TrainArgs& a, CLI::App& sub) {
  TrainConfig cfg;
  if (!a.config_file.empty()) {
    std::ifstream f(a.config_file);
    if (!f) throw IoError("cannot open config " + a.config_file);
    json j;
    try {
      j = json::parse(f);
    } catch (const json::exception& e) {
      throw std::invalid_argument(a.config_file + ": " + e.what());
    }
    cfg = config_from_json(j);
  }
  auto given = [&](const char* name) { return sub.get_option(name)->count() > 0; };
  if (given("--arch")) cfg.arch = a.arch;
  if (given("--dataset")) cfg.dataset = a.dataset;
  if (given("--cycles")) cfg.cycles = a.cycles;
  if (given("--tied")) cfg.tied = true;
  if (given("--plain")) cfg.plain = true;
  if (given("--seed")) cfg.seed = a.seed;
  if (given("--subset")) cfg.subset = a.subset;
  if (given("--epochs")) cfg.epochs = a.epochs;
  if (given("--deterministic")) cfg.deterministic = true;
  if (given("--data-dir")) cfg.data_dir = a.data_dir;
  if (given("--out")) cfg.out = a.out;
  if (given("--optimizer")) cfg.optimizer = a.optimizer;
  if (given("--lr")) cfg.lr = a.lr;
  if (given("--milestones")) cfg.milestones = a.milestones;
  if (given("--batch-size")) cfg.batch_size = a.batch_size;
  if (given("--no-augment")) cfg.augment = false;
  const ResolvedConfig r = resolve(cfg);  // usage errors surface before data loading
  if (cfg.out.empty())
    cfg.out = (fs::path("runs") / sanitize(model_label(r.arch.name, cfg.plain, cfg.cycles, cfg.tied))).string();
  const auto data = load_for(r.dataset, cfg.data_dir);
  if (a.repeats > 1) {
    const auto rr = repeat_runs(cfg, data, a.repeats, &std::cout);
    std::cout << "test error % best-epoch " << format_summary(rr.best_epoch_error) << " final-epoch "
              << format_summary(rr.final_epoch_error) << '\n';
  } else {
    const auto res = train_run(cfg, data, &std::cout);
    std::cout << res.net.label() << ": best test accuracy " << res.metrics.best_test_acc << " (epoch "
              << res.metrics.best_epoch << "), final " << res.metrics.final_test_acc() << "; artifacts in " << cfg.out
              << '\n';
  }
  return kOk;
}

struct CkptArgs {
  std::string checkpoint, data_dir, split = "test", out;
  int cycles = -1;
  std::size_t index = 0, count = 1;
};

int cmd_eval(const CkptArgs& a) {
  const auto c = load_checkpoint(a.checkpoint);
  const auto data = load_for(checkpoint_dataset(c), a.data_dir);
  if (a.split != "test" && a.split != "train") throw std::invalid_argument("--split must be test or train");
  const auto r = evaluate_checkpoint(c, a.split == "test" ? data.test : data.train, a.cycles);
  const int T = a.cycles < 0 ? c.cycles : a.cycles;
  std::cout << model_label(c.arch.name, c.plain, T, c.tied) << " " << a.split << " accuracy " << r.accuracy
            << " loss " << r.loss << " (" << r.count << " images)\n";
  return kOk;
}

int cmd_trace(const CkptArgs& a) {
  const auto c = load_checkpoint(a.checkpoint);
  auto net = restore_network(c);
  const auto data = load_for(checkpoint_dataset(c), a.data_dir);
  const int T = a.cycles < 0 ? c.cycles : a.cycles;
  const Tensor<float> image = normalize(data.test.item(a.index), c.norm);
  const auto tr = cycle_trace(net, image, T);
  const fs::path out = a.out.empty() ? fs::path("trace") : fs::path(a.out);
  write_trace_csv(out, tr);
  write_json(out, {{"checkpoint", a.checkpoint}, {"index", a.index}, {"cycles", T}, {"label", data.test.labels[a.index]}});
  const auto label = std::size_t(data.test.labels[a.index]);
  std::cout << "cycle  top1  p(true=" << label << ")\n";
  for (std::size_t t = 0; t < tr.length(); ++t)
    std::cout << std::setw(5) << t << "  " << std::setw(4) << tr.top1[t] << "  " << tr.probs[t][label] << '\n';
  std::cout << "wrote " << (out / "probabilities.csv").string() << ", " << (out / "energy.csv").string() << '\n';
  return kOk;
}

int cmd_reconstruct(const CkptArgs& a) {
  const auto c = load_checkpoint(a.checkpoint);
  auto net = restore_network(c);
  const auto data = load_for(checkpoint_dataset(c), a.data_dir);
  const int T = a.cycles < 0 ? c.cycles : a.cycles;
  const fs::path out = a.out.empty() ? fs::path("reconstruct") : fs::path(a.out);
  write_json(out, {{"checkpoint", a.checkpoint}, {"index", a.index}, {"count", a.count}, {"cycles", T}});
  for (std::size_t i = a.index; i < a.index + a.count; ++i) {
    const Tensor<float> image = normalize(data.test.item(i), c.norm);
    const auto [in, rec] = write_reconstruction(net, image, c.norm, T, out, "test_" + std::to_string(i));
    std::cout << in.string() << " -> " << rec.string() << '\n';
  }
  return kOk;
}

struct FlopArgs {
  std::string arch = "A", dataset = "cifar10";
  int cycles = 6;
  bool tied = false;
  std::size_t size = 0;
};

int cmd_flops(const FlopArgs& a) {
  const auto d = parse_dataset(a.dataset);
  const ArchConfig arch = make_arch(parse_arch_name(a.arch), d);
  print_flop_report(std::cout, count_flops(arch, a.tied, a.cycles, a.size ? a.size : arch.input_size));
  return kOk;
}

struct GradArgs {
  std::string arch = "E", dataset = "mnist", precision = "float";
  int cycles = 1;
  bool tied = false, plain = false;
  std::size_t samples = 50;
  std::uint64_t seed = 1;
  double threshold = -1;
};

int cmd_gradcheck(const GradArgs& a) {
  GradCheckOptions o;
  o.arch = parse_arch_name(a.arch);
  o.dataset = parse_dataset(a.dataset);
  o.cycles = a.cycles;
  o.tied = a.tied;
  o.plain = a.plain;
  o.samples = a.samples;
  o.seed = a.seed;
  if (o.cycles < 0) throw std::invalid_argument("--cycles must be non-negative");
  GradCheckReport rep;
  double threshold = a.threshold;
  if (a.precision == "float") {
    rep = gradcheck_model<float>(o);
    if (threshold < 0) threshold = GradCheckTolerance<float>::threshold;
  } else if (a.precision == "double") {
    rep = gradcheck_model<double>(o);
    if (threshold < 0) threshold = GradCheckTolerance<double>::threshold;
  } else {
    throw std::invalid_argument("--precision must be float or double");
  }
  std::cout << model_label(o.arch, o.plain, o.cycles, o.tied) << " gradient check (" << a.precision << ")\n";
  std::cout << "group    checked  max_rel_err  worst\n";
  for (const auto& g : rep.groups)
    std::cout << std::left << std::setw(8) << g.group << std::right << std::setw(8) << g.checked << "  "
              << std::setw(11) << g.max_rel_err << "  " << g.worst << '\n';
  const bool ok = rep.max_rel_err <= threshold;
  std::cout << "max relative error " << rep.max_rel_err << (ok ? " <= " : " > ") << threshold << '\n';
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Predictive coding networks: train, evaluate and inspect"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model; writes checkpoints, metrics.csv and config.json");
  train->add_option("--config", ta.config_file, "JSON file of TrainConfig fields; flags override it");
  train->add_option("--arch", ta.arch, "architecture A-E");
  train->add_option("--dataset", ta.dataset, "mnist, cifar10 or cifar100");
  train->add_option("--cycles", ta.cycles, "recurrent cycles T");
  train->add_flag("--tied", ta.tied, "feedback reuses the feedforward kernels");
  train->add_flag("--plain", ta.plain, "train the feedforward-only baseline");
  train->add_option("--seed", ta.seed, "random seed");
  train->add_option("--subset", ta.subset, "use the first N training images");
  train->add_option("--epochs", ta.epochs, "number of epochs");
  train->add_flag("--deterministic", ta.deterministic, "reproducible output (wall-clock column written as 0)");
  train->add_option("--data-dir", ta.data_dir, "dataset root (default $PCN_DATA_DIR)");
  train->add_option("--out", ta.out, "output directory");
  train->add_option("--optimizer", ta.optimizer, "sgd or adam");
  train->add_option("--lr", ta.lr, "initial learning rate");
  train->add_option("--milestones", ta.milestones, "epochs at which the lr is divided by 10 (e.g. 8,12)")->delimiter(',');
  train->add_option("--batch-size", ta.batch_size, "mini-batch size");
  train->add_flag("--no-augment", ta.no_augment, "disable CIFAR translation/flip augmentation");
  train->add_option("--repeats", ta.repeats, "independent runs with seeds seed, seed+1, ...")->check(CLI::PositiveNumber);

  CkptArgs ea, tra, ra;
  auto add_ckpt = [](CLI::App* s, CkptArgs& a) {
    s->add_option("--checkpoint", a.checkpoint, "checkpoint file")->required();
    s->add_option("--data-dir", a.data_dir, "dataset root (default $PCN_DATA_DIR)");
    s->add_option("--cycles", a.cycles, "cycles to run (default: the trained T)");
  };
  auto* eval = app.add_subcommand("eval", "top-1 accuracy and loss of a checkpoint");
  add_ckpt(eval, ea);
  eval->add_option("--split", ea.split, "test or train");
  auto* trace = app.add_subcommand("trace", "per-cycle class probabilities and error energies for one test image");
  add_ckpt(trace, tra);
  trace->add_option("--index", tra.index, "test image index");
  trace->add_option("--out", tra.out, "output directory");
  auto* recon = app.add_subcommand("reconstruct", "top-down reconstruction of test images as PGM/PPM");
  add_ckpt(recon, ra);
  recon->add_option("--index", ra.index, "first test image index");
  recon->add_option("--count", ra.count, "number of images");
  recon->add_option("--out", ra.out, "output directory");

  FlopArgs fa;
  auto* flops = app.add_subcommand("flops", "multiply/add accounting for plain and PCN models");
  flops->add_option("--arch", fa.arch, "architecture A-E");
  flops->add_option("--dataset", fa.dataset, "sets input channels and size");
  flops->add_option("--cycles", fa.cycles, "recurrent cycles T");
  flops->add_flag("--tied", fa.tied, "label as tied (cost is identical)");
  flops->add_option("--size", fa.size, "input side length override");

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "compare tape gradients with finite differences");
  grad->add_option("--arch", ga.arch, "architecture A-E");
  grad->add_option("--dataset", ga.dataset, "sets input shape and class count");
  grad->add_option("--cycles", ga.cycles, "recurrent cycles T");
  grad->add_flag("--tied", ga.tied, "tied feedback weights");
  grad->add_flag("--plain", ga.plain, "check the plain model");
  grad->add_option("--samples", ga.samples, "coordinates per parameter group");
  grad->add_option("--seed", ga.seed, "random seed");
  grad->add_option("--precision", ga.precision, "float or double");
  grad->add_option("--threshold", ga.threshold, "maximum relative error (default 1e-2 float, 1e-5 double)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(ta, *train);
    if (*eval) return cmd_eval(ea);
    if (*trace) return cmd_trace(tra);
    if (*recon) return cmd_reconstruct(ra);
    if (*flops) return cmd_flops(fa);
    if (*grad) return cmd_gradcheck(ga);
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
