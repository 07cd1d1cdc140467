#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <sstream>

#include "pcn/analysis.hpp"
#include "pcn/train.hpp"
#include "synthetic.hpp"

using namespace pcn;
using pcn::test::TempDir;

namespace {

Network<float> pcn_e(int cycles, std::uint64_t seed = 21) {
  return Network<float>::make(make_arch('E', Dataset::Mnist), false, false, cycles, seed);
}

Tensor<float> first_images(const Split& s, std::size_t n) {
  BatchIterator it(s, n);
  Batch b;
  it.next(b);
  return b.images;
}

Tensor<float> normalized_images(std::size_t n, std::uint64_t seed) {
  Split s = pcn::test::patch_split(n, seed);
  normalize(s, compute_norm_stats(s));
  return first_images(s, n);
}

std::vector<std::string> lines(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(f, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(CycleTrace, HasOneRowPerCycleAndProbabilitiesSumToOne) {
  auto net = pcn_e(3);
  const auto x = normalized_images(1, 4);
  const auto tr = cycle_trace(net, x, 3);
  ASSERT_EQ(tr.length(), 4u);
  EXPECT_TRUE(tr.energy[0].empty());
  for (int t = 0; t < 4; ++t) {
    EXPECT_EQ(tr.probs[t].size(), 10u);
    EXPECT_NEAR(std::accumulate(tr.probs[t].begin(), tr.probs[t].end(), 0.0), 1.0, 1e-6);
    const auto top = std::max_element(tr.probs[t].begin(), tr.probs[t].end()) - tr.probs[t].begin();
    EXPECT_EQ(tr.top1[t], top);
    if (t > 0) {
      EXPECT_EQ(tr.energy[t].size(), 6u);
      for (std::size_t l = 0; l < 6; ++l) {
        EXPECT_GE(tr.energy[t][l], 0.0);
        EXPECT_GE(tr.normalized[t][l], 0.0);
      }
    }
  }
  EXPECT_THROW(cycle_trace(net, normalized_images(2, 4), 1), ShapeError);
}

TEST(CycleTrace, CycleZeroMatchesThePlainClassifier) {
  auto net = pcn_e(2, 30);
  auto plain = Network<float>::make(make_arch('E', Dataset::Mnist), true, false, 0, 30);
  const auto x = normalized_images(1, 6);
  const auto tr = cycle_trace(net, x, 2);
  Tape<float> t;
  auto probs = softmax_cross_entropy(plain.logits(t, x), std::vector<std::int32_t>{0}).probs;
  for (std::size_t k = 0; k < 10; ++k) EXPECT_NEAR(tr.probs[0][k], probs[k], 1e-6);
}

TEST(CycleTrace, CsvFilesHaveTheDocumentedShape) {
  TempDir d("pcn_an");
  auto net = pcn_e(2);
  const auto tr = cycle_trace(net, normalized_images(1, 3), 2);
  write_trace_csv(d.path(), tr);
  const auto p = lines(d.path() / "probabilities.csv");
  ASSERT_EQ(p.size(), 1u + 3 * 10);
  EXPECT_EQ(p[0], "cycle,class,probability");
  EXPECT_EQ(p[1].substr(0, 4), "0,0,");
  const auto e = lines(d.path() / "energy.csv");
  ASSERT_EQ(e.size(), 1u + 2 * 6);  // cycle 0 has no errors yet
  EXPECT_EQ(e[0], "cycle,layer,energy");
  EXPECT_EQ(e[1].substr(0, 4), "1,0,");
  EXPECT_EQ(lines(d.path() / "energy_normalized.csv").size(), e.size());
}

TEST(Pnm, WriteReadRoundTripAndClamp) {
  TempDir d("pcn_an");
  const std::vector<float> px{0.f, 0.5f, 1.f, -0.3f, 1.7f, 0.25f};
  write_pnm(d.path() / "g.pgm", px.data(), 1, 2, 3);
  const auto g = read_pnm(d.path() / "g.pgm");
  EXPECT_EQ(g.channels, 1u);
  EXPECT_EQ(g.height, 2u);
  EXPECT_EQ(g.width, 3u);
  EXPECT_EQ(g.pixels, (std::vector<unsigned char>{0, 128, 255, 0, 255, 64}));
  const std::string head = lines(d.path() / "g.pgm")[0];
  EXPECT_EQ(head, "P5");

  std::vector<float> rgb(3 * 2 * 2);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = float(i) / 11.f;
  write_pnm(d.path() / "c.ppm", rgb.data(), 3, 2, 2);
  const auto c = read_pnm(d.path() / "c.ppm");
  EXPECT_EQ(c.channels, 3u);
  // interleaved: pixel 0 is (R,G,B) from planes 0,1,2
  EXPECT_EQ(c.pixels[1], static_cast<unsigned char>(std::lround(4.f / 11.f * 255.f)));
  EXPECT_THROW(write_pnm(d.path() / "x.pgm", px.data(), 2, 1, 3), std::invalid_argument);

  std::ofstream(d.path() / "bad.pgm", std::ios::binary) << "P5\n3 2\n255\n\x01\x02";
  EXPECT_THROW(read_pnm(d.path() / "bad.pgm"), IoError);
  std::ofstream(d.path() / "bad2.pgm", std::ios::binary) << "P2\n1 1\n255\n0";
  EXPECT_THROW(read_pnm(d.path() / "bad2.pgm"), IoError);
}

TEST(Reconstruction, ErrorMatchesThePredictionsItReturns) {
  auto net = pcn_e(3);
  const auto x = normalized_images(5, 8);
  const auto rec = reconstruct_batch(net, x, 3);
  ASSERT_EQ(rec.p0.size(), 3u);
  ASSERT_EQ(rec.mean_sq_error.size(), 3u);
  for (int t = 0; t < 3; ++t) {
    ASSERT_EQ(rec.p0[t].shape(), x.shape());
    double sum = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) sum += double(rec.p0[t][i] - x[i]) * double(rec.p0[t][i] - x[i]);
    EXPECT_NEAR(rec.mean_sq_error[t], sum / 5.0, 1e-6 * sum);
  }
  EXPECT_THROW(reconstruct_batch(net, x, 0), std::invalid_argument);
  auto plain = Network<float>::make(make_arch('E', Dataset::Mnist), true, false, 0, 1);
  EXPECT_THROW(reconstruct_batch(plain, x, 1), std::invalid_argument);
}

TEST(Reconstruction, SplitAverageIsIndependentOfBatching) {
  auto net = pcn_e(2);
  Split s = pcn::test::patch_split(12, 2);
  normalize(s, compute_norm_stats(s));
  const auto a = reconstruction_error(net, s, 10, 2, 4);
  const auto b = reconstruction_error(net, s, 10, 2, 10);
  ASSERT_EQ(a.size(), 2u);
  for (int t = 0; t < 2; ++t) EXPECT_NEAR(a[t], b[t], 1e-5 * b[t]);
  const auto whole = reconstruct_batch(net, first_images(s, 10), 2);
  EXPECT_NEAR(a[1], whole.mean_sq_error[1], 1e-5 * a[1]);
}

TEST(Reconstruction, WritesValidImagesInPixelSpace) {
  TempDir d("pcn_an");
  auto net = pcn_e(1);
  Split s = pcn::test::patch_split(4, 1);
  const NormStats ns = compute_norm_stats(s);
  normalize(s, ns);
  const auto [in, out] = write_reconstruction(net, first_images(s, 1), ns, 1, d.path(), "test_0");
  EXPECT_EQ(in.filename(), "test_0_input.pgm");
  EXPECT_EQ(out.filename(), "test_0_recon.pgm");
  const auto a = read_pnm(in), b = read_pnm(out);
  EXPECT_EQ(a.height, 28u);
  EXPECT_EQ(b.width, 28u);
  // input survives normalize/denormalize: the bright patch is still white
  const std::size_t y0 = 2, x0 = 1;
  EXPECT_EQ(a.pixels[y0 * 28 + x0], 255);
}

TEST(Flops, ConvCountIsProductsPlusAccumulations) {
  const auto c = detail::conv_ops(2, 1, 1, true);
  EXPECT_EQ(c.mul, 36u);
  EXPECT_EQ(c.add, 36u);  // 8 accumulations + 1 bias per output
  EXPECT_EQ(detail::conv_ops(2, 1, 1, false).add, 32u);
}

TEST(Flops, PlainAMatchesTheHandCount) {
  const auto r = count_flops(make_arch('A', Dataset::Cifar10), false, 0, 32);
  EXPECT_EQ(r.plain_total.flops(), 683037696u);
  EXPECT_EQ(r.pcn_total.flops(), r.plain_total.flops());
  EXPECT_DOUBLE_EQ(r.ratio(), 1.0);
  EXPECT_EQ(r.label, "Plain-A");
}

TEST(Flops, TyingDoesNotChangeTheCostAndCostGrowsLinearly) {
  const auto arch = make_arch('A', Dataset::Cifar10);
  const auto u = count_flops(arch, false, 6, 32), t = count_flops(arch, true, 6, 32);
  EXPECT_EQ(u.pcn_total.flops(), t.pcn_total.flops());
  EXPECT_NE(u.label, t.label);
  const auto r1 = count_flops(arch, false, 1, 32), r2 = count_flops(arch, false, 2, 32);
  EXPECT_EQ(r2.pcn_total.flops() - r1.pcn_total.flops(), r1.pcn_total.flops() - r1.plain_total.flops());
  EXPECT_THROW(count_flops(arch, false, -1, 32), std::invalid_argument);
  // size follows the argument, not the dataset default
  EXPECT_LT(count_flops(arch, false, 0, 16).plain_total.flops(), u.plain_total.flops());
}

TEST(Flops, ReportNamesEveryLayerAndTheRatio) {
  std::ostringstream os;
  print_flop_report(os, count_flops(make_arch('A', Dataset::Cifar10), false, 6, 32));
  const std::string s = os.str();
  EXPECT_NE(s.find("PCN-A-6"), std::string::npos);
  EXPECT_NE(s.find("ratio: 13.019 (2T = 12)"), std::string::npos);
  EXPECT_EQ(std::size_t(std::count(s.begin(), s.end(), '\n')), 1 + make_arch('A', Dataset::Cifar10).depth() + 4);
}
