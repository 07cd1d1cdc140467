#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "pcn/train.hpp"
#include "synthetic.hpp"

using namespace pcn;
using pcn::test::patch_dataset;
using pcn::test::TempDir;

namespace {

TrainConfig small_config(bool plain, int cycles, int epochs) {
  TrainConfig c;
  c.arch = "E";
  c.plain = plain;
  c.tied = true;
  c.cycles = cycles;
  c.epochs = epochs;
  c.batch_size = 16;
  c.seed = 3;
  c.deterministic = true;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Resolve, DefaultsFollowTheDataset) {
  TrainConfig m;
  auto r = resolve(m);
  EXPECT_EQ(r.optimizer, OptimizerKind::Adam);
  EXPECT_EQ(r.schedule.phases(), "20-10-10");
  EXPECT_FALSE(r.augment);
  TrainConfig c;
  c.dataset = "cifar10";
  c.arch = "A";
  r = resolve(c);
  EXPECT_EQ(r.optimizer, OptimizerKind::Sgd);
  EXPECT_EQ(r.schedule.total_epochs, 250);
  EXPECT_TRUE(r.augment);
  EXPECT_EQ(r.arch.input_channels, 3u);
}

TEST(Resolve, ShortenedRunsDropLateMilestones) {
  TrainConfig c;
  c.epochs = 25;
  EXPECT_EQ(resolve(c).schedule.milestones, (std::vector<int>{20}));
  c.milestones = std::vector<int>{8, 12};
  c.epochs = 15;
  EXPECT_EQ(resolve(c).schedule.phases(), "8-4-3");
  c.milestones = std::vector<int>{12, 8};
  EXPECT_THROW(resolve(c), std::invalid_argument);
}

TEST(Resolve, RejectsInvalidFields) {
  TrainConfig c;
  c.cycles = -1;
  EXPECT_THROW(resolve(c), std::invalid_argument);
  c = {};
  c.arch = "Q";
  EXPECT_THROW(resolve(c), std::invalid_argument);
  c = {};
  c.dataset = "svhn";
  EXPECT_THROW(resolve(c), std::invalid_argument);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(resolve(c), std::invalid_argument);
  c = {};
  c.augment = true;  // translation needs 32x32 inputs
  EXPECT_THROW(resolve(c), std::invalid_argument);
}

TEST(ConfigJson, RoundTripsAndRejectsUnknownKeys) {
  TrainConfig c = small_config(false, 2, 3);
  c.subset = 100;
  const json j = config_to_json(resolve(c));
  const TrainConfig back = config_from_json(j);
  EXPECT_EQ(config_to_json(resolve(back)), j);
  EXPECT_THROW(config_from_json(json{{"cycels", 2}}), std::invalid_argument);
  EXPECT_THROW(config_from_json(json{{"cycles", "two"}}), std::invalid_argument);
  EXPECT_THROW(config_from_json(json::array()), std::invalid_argument);
  EXPECT_EQ(config_from_json(json{{"cycles", 4}}, c).batch_size, 16);
}

TEST(Train, ZeroEpochsWritesInitializedWeights) {
  TempDir d("pcn_train");
  TrainConfig c = small_config(false, 1, 0);
  c.out = d.path().string();
  const auto res = train_run(c, patch_dataset(20, 10));
  EXPECT_TRUE(res.metrics.epochs.empty());
  const auto ck = load_checkpoint(d.path() / "final.ckpt");
  auto fresh = Network<float>::make(make_arch('E', Dataset::Mnist), false, true, 1, 3);
  auto params = fresh.parameters();
  ASSERT_EQ(ck.tensors.size(), params.size());
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(ck.tensors[i].value.to_vector(), params[i]->value.to_vector());
  EXPECT_EQ(slurp(d.path() / "metrics.csv"), std::string(kMetricsHeader) + "\n");
  EXPECT_TRUE(std::filesystem::exists(d.path() / "config.json"));
}

TEST(Train, DeterministicRunsMatchExactly) {
  TempDir a("pcn_train"), b("pcn_train");
  TrainConfig c = small_config(false, 1, 2);
  const auto data = patch_dataset(40, 20);
  c.out = a.path().string();
  const auto r1 = train_run(c, data);
  c.out = b.path().string();
  const auto r2 = train_run(c, data);
  ASSERT_EQ(r1.metrics.epochs.size(), 2u);
  EXPECT_EQ(slurp(a.path() / "metrics.csv"), slurp(b.path() / "metrics.csv"));
  EXPECT_EQ(serialize_checkpoint(r1.final_checkpoint), serialize_checkpoint(r2.final_checkpoint));
  EXPECT_EQ(r1.metrics.epochs[1].seconds, 0.0);
}

TEST(Train, ZeroCyclePcnFollowsThePlainTrajectory) {
  const auto data = patch_dataset(32, 16);
  auto pcn = train_run(small_config(false, 0, 2), data);
  auto plain = train_run(small_config(true, 0, 2), data);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(pcn.metrics.epochs[e].train_loss, plain.metrics.epochs[e].train_loss);
    EXPECT_EQ(pcn.metrics.epochs[e].test_acc, plain.metrics.epochs[e].test_acc);
  }
  auto pp = plain.net.parameters();
  auto qp = pcn.net.parameters();
  for (std::size_t i = 0; i < pp.size(); ++i) EXPECT_EQ(pp[i]->value.to_vector(), qp[i]->value.to_vector()) << pp[i]->name;
}

TEST(Train, MetricsAndBestCheckpointTrackImprovements) {
  TempDir d("pcn_train");
  TrainConfig c = small_config(true, 0, 4);
  c.out = d.path().string();
  const auto res = train_run(c, patch_dataset(60, 30));
  double running = -1;
  for (const auto& m : res.metrics.epochs) {
    EXPECT_GE(m.train_acc, 0.0);
    EXPECT_LE(m.test_acc, 1.0);
    running = std::max(running, m.test_acc);
  }
  EXPECT_EQ(res.metrics.best_test_acc, running);
  const auto best = load_checkpoint(d.path() / "best.ckpt");
  EXPECT_EQ(best.metadata.at("epochs_completed").get<int>(), res.metrics.best_epoch + 1);
  std::ifstream csv(d.path() / "metrics.csv");
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4);
}

TEST(Train, DivergenceReportsBatchAndParameterNorms) {
  TrainConfig c = small_config(true, 0, 1);
  c.optimizer = "sgd";
  c.lr = 1e30;
  try {
    train_run(c, patch_dataset(48, 16));
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("batch "), std::string::npos);
    EXPECT_NE(msg.find("ff_w.0 |w|="), std::string::npos);
  }
}

TEST(Train, SubsetLargerThanSplitIsRejected) {
  TrainConfig c = small_config(true, 0, 1);
  c.subset = 1000;
  EXPECT_THROW(train_run(c, patch_dataset(20, 10)), std::invalid_argument);
}

TEST(Evaluate, OverfitToyReachesPerfectAccuracy) {
  const auto data = patch_dataset(10, 10);
  DatasetSplits same = data;
  same.test = same.train;
  TrainConfig c = small_config(false, 1, 40);
  c.lr = 3e-3;
  const auto res = train_run(c, same);
  EXPECT_EQ(evaluate_checkpoint(res.final_checkpoint, data.train).accuracy, 1.0);
}

TEST(Evaluate, UntrainedIsNearChanceAndRepeatable) {
  auto net = Network<float>::make(make_arch('E', Dataset::Mnist), false, false, 1, 5);
  Split s = pcn::test::patch_split(200, 9);
  normalize(s, compute_norm_stats(s));
  const auto a = evaluate(net, s), b = evaluate(net, s);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.count, 200u);
  EXPECT_LE(std::abs(a.accuracy - 0.1), 0.1);
  EXPECT_NEAR(a.loss, std::log(10.0), 0.5);
  EXPECT_THROW(evaluate(net, pcn::test::patch_split(2, 1, 3, 32)), ShapeError);
}

TEST(Evaluate, CycleOverrideChangesOnlyTheRecursionDepth) {
  auto net = Network<float>::make(make_arch('E', Dataset::Mnist), false, true, 2, 5);
  auto plain = Network<float>::make(make_arch('E', Dataset::Mnist), true, false, 0, 5);
  const Split s = pcn::test::patch_split(30, 2);
  EXPECT_EQ(evaluate(net, s, 0).loss, evaluate(plain, s).loss);
  EXPECT_NE(evaluate(net, s, 2).loss, evaluate(net, s, 0).loss);
}

TEST(Train, LossGradientIgnoresTraceProbes) {
  auto a = Network<float>::make(make_arch('E', Dataset::Mnist), false, false, 2, 8);
  auto b = Network<float>::make(make_arch('E', Dataset::Mnist), false, false, 2, 8);
  const auto x = pcn::test::patch_split(2, 4).item(0);
  const std::vector<std::int32_t> y{0};
  {
    Tape<float> t;
    t.backward(softmax_cross_entropy(pcn_forward(t, a.pcn, x, 2, {.trace = true}).logits, y).loss);
  }
  {
    Tape<float> t;
    t.backward(softmax_cross_entropy(pcn_forward(t, b.pcn, x, 2).logits, y).loss);
  }
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->grad.to_vector(), pb[i]->grad.to_vector());
}

TEST(Train, RealMnistSubsetBeatsChance) {
  auto mnist = pcn::test::real_mnist();
  if (!mnist) GTEST_SKIP() << "MNIST not found under PCN_DATA_DIR";
  mnist->test = take_first(mnist->test, 500);
  TrainConfig c;
  c.arch = "E";
  c.cycles = 1;
  c.subset = 200;
  c.epochs = 5;
  c.deterministic = true;
  const auto res = train_run(c, *mnist);
  EXPECT_GT(res.metrics.epochs.back().train_acc, 0.1);
}

TEST(Repeat, SeedsDifferAndSummaryFormat) {
  TempDir d("pcn_rep");
  TrainConfig c = small_config(true, 0, 1);
  c.out = d.path().string();
  const auto rr = repeat_runs(c, patch_dataset(20, 10), 2);
  EXPECT_EQ(rr.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_TRUE(std::filesystem::exists(d.path() / "seed_4" / "final.ckpt"));
  EXPECT_NE(serialize_checkpoint(rr.checkpoints[0]), serialize_checkpoint(rr.checkpoints[1]));
  EXPECT_THROW(repeat_runs(c, patch_dataset(20, 10), 0), std::invalid_argument);
}

TEST(Metrics, JsonRoundTripRestoresTheRunningBest) {
  RunMetrics m;
  m.add({0, 2.0, 0.3, 1.9, 0.4, 1e-3, 1.5});
  m.add({1, 1.0, 0.6, 1.1, 0.7, 1e-3, 1.5});
  m.add({2, 0.9, 0.7, 1.2, 0.65, 1e-4, 1.5});
  const RunMetrics back = metrics_from_json(metrics_to_json(m));
  EXPECT_EQ(metrics_to_json(back), metrics_to_json(m));
  EXPECT_EQ(back.best_epoch, 1);
  EXPECT_THROW(metrics_from_json(json{{"epochs", json::array({json{{"epoch", 0}}})}}), std::invalid_argument);
}

TEST(Summary, BestMeanStdAndTableFormat) {
  const auto one = summarize({2.5}, true);
  EXPECT_EQ(one.best, one.mean);
  EXPECT_EQ(one.std, 0.0);
  const auto s = summarize({2.28, 2.40, 2.58}, true);
  EXPECT_DOUBLE_EQ(s.best, 2.28);
  EXPECT_NEAR(s.mean, 2.42, 1e-12);
  EXPECT_NEAR(s.std, std::sqrt(((0.14 * 0.14) + (0.02 * 0.02) + (0.16 * 0.16)) / 2.0), 1e-12);
  EXPECT_EQ(format_summary({2.28, 2.42, 0.09}), "2.28(2.42±0.09)");
  EXPECT_EQ(summarize({90.0, 95.0}, false).best, 95.0);
  EXPECT_THROW(summarize({}, true), std::invalid_argument);
}
