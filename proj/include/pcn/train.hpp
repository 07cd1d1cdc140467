#pragma once

// Training and evaluation loops, run metrics, repeated-seed aggregation.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pcn/checkpoint.hpp"
#include "pcn/datasets.hpp"
#include "pcn/model.hpp"
#include "pcn/optim.hpp"

namespace pcn {

/// NaN/inf during training; the message carries the batch index and parameter norms.
struct TrainingDiverged : NumericError {
  using NumericError::NumericError;
};

/// User-facing run description. Unset optionals take dataset-dependent defaults.
struct TrainConfig {
  std::string arch = "E";
  bool plain = false;
  bool tied = false;
  int cycles = 1;
  std::string dataset = "mnist";
  std::optional<std::string> optimizer;
  std::optional<double> lr;
  std::optional<std::vector<int>> milestones;
  std::optional<int> epochs;
  int batch_size = 128;
  std::uint64_t seed = 1;
  std::optional<std::size_t> subset;
  std::optional<bool> augment;
  bool deterministic = false;
  std::string data_dir;
  std::string out;
};

/// Config with every default filled in and validated.
struct ResolvedConfig {
  TrainConfig cfg;
  Dataset dataset;
  ArchConfig arch;
  OptimizerKind optimizer;
  StepSchedule schedule;
  bool augment;
};

inline ResolvedConfig resolve(const TrainConfig& c) {
  ResolvedConfig r;
  r.cfg = c;
  r.dataset = parse_dataset(c.dataset);
  r.arch = make_arch(parse_arch_name(c.arch), r.dataset);
  if (c.cycles < 0) throw std::invalid_argument("cycles must be non-negative, got " + std::to_string(c.cycles));
  if (c.batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  const bool mnist = r.dataset == Dataset::Mnist;
  r.optimizer = parse_optimizer(c.optimizer.value_or(mnist ? "adam" : "sgd"));
  StepSchedule s = r.optimizer == OptimizerKind::Adam ? StepSchedule::adam_20_10_10() : StepSchedule::cifar();
  if (c.lr) s.initial_lr = *c.lr;
  if (c.epochs) {
    if (*c.epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    s.total_epochs = *c.epochs;
    // default drops that fall past a shortened run are dropped with it
    std::erase_if(s.milestones, [&](int m) { return m >= s.total_epochs; });
  }
  if (c.milestones) s.milestones = *c.milestones;
  s.validate();
  r.schedule = s;
  r.augment = c.augment.value_or(!mnist);
  if (r.augment && (r.arch.input_size != 32))
    throw std::invalid_argument("augmentation is defined for 32x32 inputs only");
  r.cfg.cycles = c.plain ? 0 : c.cycles;
  return r;
}

inline json config_to_json(const ResolvedConfig& r) {
  const auto& c = r.cfg;
  json j = {{"arch", c.arch},
            {"plain", c.plain},
            {"tied", c.tied},
            {"cycles", c.cycles},
            {"dataset", c.dataset},
            {"optimizer", optimizer_name(r.optimizer)},
            {"lr", r.schedule.initial_lr},
            {"milestones", r.schedule.milestones},
            {"epochs", r.schedule.total_epochs},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"augment", r.augment},
            {"deterministic", c.deterministic},
            {"data_dir", c.data_dir},
            {"out", c.out}};
  j["subset"] = c.subset ? json(*c.subset) : json(nullptr);
  return j;
}

/// Reads fields present in `j` over `base`; unknown keys are rejected so typos surface.
inline TrainConfig config_from_json(const json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    try {
      if (k == "arch") base.arch = v.get<std::string>();
      else if (k == "plain") base.plain = v.get<bool>();
      else if (k == "tied") base.tied = v.get<bool>();
      else if (k == "cycles") base.cycles = v.get<int>();
      else if (k == "dataset") base.dataset = v.get<std::string>();
      else if (k == "optimizer") base.optimizer = v.get<std::string>();
      else if (k == "lr") base.lr = v.get<double>();
      else if (k == "milestones") base.milestones = v.get<std::vector<int>>();
      else if (k == "epochs") base.epochs = v.get<int>();
      else if (k == "batch_size") base.batch_size = v.get<int>();
      else if (k == "seed") base.seed = v.get<std::uint64_t>();
      else if (k == "subset") base.subset = v.is_null() ? std::nullopt : std::optional<std::size_t>(v.get<std::size_t>());
      else if (k == "augment") base.augment = v.get<bool>();
      else if (k == "deterministic") base.deterministic = v.get<bool>();
      else if (k == "data_dir") base.data_dir = v.get<std::string>();
      else if (k == "out") base.out = v.get<std::string>();
      else throw std::invalid_argument("unknown config field '" + k + "'");
    } catch (const json::exception&) {
      throw std::invalid_argument("config field '" + k + "' has the wrong type");
    }
  }
  return base;
}

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0, train_acc = 0, test_loss = 0, test_acc = 0, lr = 0, seconds = 0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  int best_epoch = -1;
  double best_test_acc = 0;

  double final_test_acc() const { return epochs.empty() ? 0.0 : epochs.back().test_acc; }

  void add(const EpochMetrics& m) {
    epochs.push_back(m);
    if (best_epoch < 0 || m.test_acc > best_test_acc) {
      best_test_acc = m.test_acc;
      best_epoch = m.epoch;
    }
  }
};

inline json metrics_to_json(const RunMetrics& m) {
  json rows = json::array();
  for (const auto& e : m.epochs)
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"train_acc", e.train_acc},
                    {"test_loss", e.test_loss},
                    {"test_acc", e.test_acc},
                    {"lr", e.lr},
                    {"seconds", e.seconds}});
  return {{"epochs", rows}, {"best_epoch", m.best_epoch}, {"best_test_acc", m.best_test_acc}};
}

inline RunMetrics metrics_from_json(const json& j) {
  RunMetrics m;
  try {
    for (const auto& e : j.at("epochs"))
      m.add({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("train_acc").get<double>(),
             e.at("test_loss").get<double>(), e.at("test_acc").get<double>(), e.at("lr").get<double>(),
             e.at("seconds").get<double>()});
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed metrics: ") + e.what());
  }
  return m;
}

inline constexpr const char* kMetricsHeader = "epoch,train_loss,train_acc,test_acc,lr,seconds";

inline void write_metrics_csv(const std::filesystem::path& path, const RunMetrics& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << kMetricsHeader << '\n';
  out << std::setprecision(9);
  for (const auto& e : m.epochs)
    out << e.epoch << ',' << e.train_loss << ',' << e.train_acc << ',' << e.test_acc << ',' << e.lr << ','
        << e.seconds << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
  std::size_t count = 0;
};

inline std::size_t count_correct(const Tensor<float>& probs, std::span<const std::int32_t> labels) {
  const std::size_t K = probs.dim(1);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (probs[b * K + k] > probs[b * K + best]) best = k;
    correct += std::size_t(labels[b]) == best;
  }
  return correct;
}

/// Top-1 accuracy and mean loss over a normalized split, in file order.
inline EvalResult evaluate(Network<float>& net, const Split& split, int cycles_override = -1,
                           std::size_t batch_size = 128) {
  const auto& a = net.arch();
  if (split.channels != a.input_channels || split.height != a.input_size || split.width != a.input_size)
    throw ShapeError("data is " + std::to_string(split.channels) + "x" + std::to_string(split.height) + "x" +
                                std::to_string(split.width) + " but the model expects " +
                                std::to_string(a.input_channels) + "x" + std::to_string(a.input_size) + "x" +
                                std::to_string(a.input_size));
  if (split.size() == 0) throw std::invalid_argument("cannot evaluate an empty split");
  BatchIterator it(split, batch_size);
  Batch b;
  double loss = 0;
  std::size_t correct = 0;
  while (it.next(b)) {
    Tape<float> tape;
    auto res = softmax_cross_entropy(net.logits(tape, b.images, cycles_override), b.labels);
    loss += double(res.loss.value().item()) * double(b.labels.size());
    correct += count_correct(res.probs, b.labels);
  }
  return {double(correct) / double(split.size()), loss / double(split.size()), split.size()};
}

/// Evaluates a checkpoint on raw [0,1] data, normalizing with the stored statistics.
inline EvalResult evaluate_checkpoint(const Checkpoint& c, const Split& raw, int cycles_override = -1) {
  auto net = restore_network(c);
  Split s = raw;
  normalize(s, c.norm);
  return evaluate(net, s, cycles_override);
}

inline std::string parameter_norms(Network<float>& net) {
  std::ostringstream os;
  for (auto* p : net.parameters()) os << "  " << p->name << " |w|=" << std::sqrt(double(squared_norm(p->value))) << '\n';
  return os.str();
}

struct TrainResult {
  Network<float> net;
  RunMetrics metrics;
  NormStats norm;
  Checkpoint final_checkpoint;
};

/// Train and test splits after subsetting and normalization with train-only statistics.
struct PreparedData {
  Split train, test;
  NormStats norm;
};

inline PreparedData prepare_data(const ResolvedConfig& r, const DatasetSplits& data) {
  if (data.id != r.dataset)
    throw std::invalid_argument("config asks for " + dataset_name(r.dataset) + " but " + dataset_name(data.id) +
                                " was loaded");
  PreparedData p;
  p.train = r.cfg.subset ? take_first(data.train, *r.cfg.subset) : data.train;
  p.test = data.test;
  p.norm = compute_norm_stats(p.train);
  normalize(p.train, p.norm);
  normalize(p.test, p.norm);
  return p;
}

inline json run_metadata(const ResolvedConfig& r, const std::string& label, int epochs_done) {
  return {{"label", label},
          {"dataset", dataset_name(r.dataset)},
          {"optimizer", optimizer_name(r.optimizer)},
          {"schedule",
           {{"initial_lr", r.schedule.initial_lr},
            {"milestones", r.schedule.milestones},
            {"factor", r.schedule.factor},
            {"total_epochs", r.schedule.total_epochs},
            {"phases", r.schedule.phases()},
            {"reading", "phase lengths: lr held for each phase, divided by 10 between phases"}}},
          {"seed", r.cfg.seed},
          {"subset", r.cfg.subset ? json(*r.cfg.subset) : json(nullptr)},
          {"batch_size", r.cfg.batch_size},
          {"augment", r.augment},
          {"epochs_completed", epochs_done}};
}

inline std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

/// Full training run. Artifacts go to cfg.out when it is non-empty:
/// config.json, metrics.csv, best.ckpt (each improvement) and final.ckpt.
inline TrainResult train_run(const TrainConfig& config, const DatasetSplits& data, std::ostream* log = nullptr) {
  const ResolvedConfig r = resolve(config);
  const PreparedData d = prepare_data(r, data);
  namespace fs = std::filesystem;
  const bool write = !r.cfg.out.empty();
  const fs::path out = r.cfg.out;
  if (write) {
    fs::create_directories(out);
    std::ofstream cj(out / "config.json");
    cj << config_to_json(r).dump(2) << '\n';
    if (!cj) throw IoError("cannot write " + (out / "config.json").string());
  }

  TrainResult res;
  res.norm = d.norm;
  res.net = Network<float>::make(r.arch, r.cfg.plain, r.cfg.tied, r.cfg.cycles, r.cfg.seed);
  auto params = res.net.parameters();
  Optimizer<float> opt(r.optimizer);
  std::mt19937_64 rng(r.cfg.seed ^ 0x5851f42d4c957f2dULL);
  const std::string label = res.net.label();

  for (int epoch = 0; epoch < r.schedule.total_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = r.schedule.lr_at(epoch);
    BatchIterator it(d.train, std::size_t(r.cfg.batch_size), &rng, r.augment);
    Batch b;
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0, batch_index = 0;
    while (it.next(b)) {
      try {
        Tape<float> tape;
        auto loss = softmax_cross_entropy(res.net.logits(tape, b.images), b.labels);
        const double lv = loss.loss.value().item();
        if (!std::isfinite(lv)) throw NumericError("loss is " + std::to_string(lv));
        for (auto* p : params) p->zero_grad();
        tape.backward(loss.loss);
        for (auto* p : params)
          if (!p->grad.all_finite()) throw NumericError("non-finite gradient for " + p->name);
        opt.step(params, lr);
        loss_sum += lv * double(b.labels.size());
        correct += count_correct(loss.probs, b.labels);
        seen += b.labels.size();
      } catch (const NumericError& e) {
        throw TrainingDiverged(label + ": training diverged at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_index) + " (" + e.what() + ")\nparameter norms:\n" +
                               parameter_norms(res.net));
      }
      ++batch_index;
    }
    const EvalResult test = evaluate(res.net, d.test, -1, std::size_t(r.cfg.batch_size));
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / double(seen);
    m.train_acc = double(correct) / double(seen);
    m.test_loss = test.loss;
    m.test_acc = test.accuracy;
    m.lr = lr;
    m.seconds = r.cfg.deterministic
                    ? 0.0
                    : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool improved = res.metrics.best_epoch < 0 || m.test_acc > res.metrics.best_test_acc;
    res.metrics.add(m);
    if (log)
      *log << label << " seed " << r.cfg.seed << " epoch " << epoch << " lr " << lr << " loss " << m.train_loss
           << " train " << m.train_acc << " test " << m.test_acc << " (" << m.seconds << "s)" << std::endl;
    if (write) {
      write_metrics_csv(out / "metrics.csv", res.metrics);
      if (improved)
        save_checkpoint(out / "best.ckpt", make_checkpoint(res.net, d.norm, run_metadata(r, label, epoch + 1),
                                                           rng_state(rng), metrics_to_json(res.metrics)));
    }
  }
  res.final_checkpoint = make_checkpoint(res.net, d.norm, run_metadata(r, label, r.schedule.total_epochs),
                                         rng_state(rng), metrics_to_json(res.metrics));
  if (write) {
    write_metrics_csv(out / "metrics.csv", res.metrics);
    save_checkpoint(out / "final.ckpt", res.final_checkpoint);
  }
  return res;
}

/// Best, mean and sample standard deviation of a list of values.
struct Summary {
  double best = 0, mean = 0, std = 0;
};

/// `lower_is_better` picks min as best (error rates).
inline Summary summarize(const std::vector<double>& v, bool lower_is_better) {
  if (v.empty()) throw std::invalid_argument("nothing to summarize");
  Summary s;
  s.best = v[0];
  for (double x : v) {
    s.mean += x;
    s.best = lower_is_better ? std::min(s.best, x) : std::max(s.best, x);
  }
  s.mean /= double(v.size());
  if (v.size() > 1) {
    double sq = 0;
    for (double x : v) sq += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(sq / double(v.size() - 1));
  }
  return s;
}

/// Table cell "best(mean±std)" with two decimals.
inline std::string format_summary(const Summary& s) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.2f(%.2f±%.2f)", s.best, s.mean, s.std);
  return buf;
}

struct RepeatResult {
  std::vector<std::uint64_t> seeds;
  std::vector<RunMetrics> runs;
  std::vector<Checkpoint> checkpoints;
  Summary best_epoch_error;   // percent, from each run's best test accuracy
  Summary final_epoch_error;  // percent, from each run's last epoch
};

/// n runs with seeds base, base+1, ...; outputs go to <out>/seed_<s> when out is set.
inline RepeatResult repeat_runs(const TrainConfig& config, const DatasetSplits& data, int n,
                                std::ostream* log = nullptr) {
  if (n < 1) throw std::invalid_argument("repeat count must be at least 1");
  RepeatResult rr;
  std::vector<double> best_err, final_err;
  for (int i = 0; i < n; ++i) {
    TrainConfig c = config;
    c.seed = config.seed + std::uint64_t(i);
    if (!config.out.empty()) c.out = (std::filesystem::path(config.out) / ("seed_" + std::to_string(c.seed))).string();
    auto res = train_run(c, data, log);
    rr.seeds.push_back(c.seed);
    best_err.push_back(100.0 * (1.0 - res.metrics.best_test_acc));
    final_err.push_back(100.0 * (1.0 - res.metrics.final_test_acc()));
    rr.runs.push_back(std::move(res.metrics));
    rr.checkpoints.push_back(std::move(res.final_checkpoint));
  }
  rr.best_epoch_error = summarize(best_err, true);
  rr.final_epoch_error = summarize(final_err, true);
  return rr;
}

}  // namespace pcn
