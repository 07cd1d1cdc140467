#include <gtest/gtest.h>

#include <fstream>

#include "pcn/checkpoint.hpp"
#include "pcn/train.hpp"
#include "synthetic.hpp"

using namespace pcn;
using pcn::test::TempDir;

namespace {

std::string read_all(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Checkpoint sample_checkpoint(bool plain, bool tied, int cycles) {
  auto net = Network<float>::make(make_arch('E', Dataset::Mnist), plain, tied, cycles, 17);
  // perturb every value so the payload is not just the initializer
  for (auto* p : net.parameters())
    for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += 1e-3f * float(i % 7);
  RunMetrics m;
  m.add({0, 2.1, 0.3, 2.0, 0.35, 1e-3, 0.0});
  return make_checkpoint(net, NormStats{{0.1307}, {0.3081}}, {{"label", net.label()}}, "rng words", metrics_to_json(m));
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir d("pcn_ckpt");
  for (auto [plain, tied, cycles] : {std::tuple{false, false, 2}, std::tuple{false, true, 1}, std::tuple{true, false, 0}}) {
    const auto c = sample_checkpoint(plain, tied, cycles);
    save_checkpoint(d.path() / "a.ckpt", c);
    const auto loaded = load_checkpoint(d.path() / "a.ckpt");
    save_checkpoint(d.path() / "b.ckpt", loaded);
    EXPECT_EQ(read_all(d.path() / "a.ckpt"), read_all(d.path() / "b.ckpt"));
    EXPECT_EQ(loaded.arch, c.arch);
    EXPECT_EQ(loaded.plain, plain);
    EXPECT_EQ(loaded.tied, tied);
    EXPECT_EQ(loaded.cycles, cycles);
    EXPECT_EQ(loaded.norm, c.norm);
    EXPECT_EQ(loaded.rng_state, "rng words");
    EXPECT_FALSE(std::filesystem::exists(d.path() / "a.ckpt.tmp"));
  }
}

TEST(Checkpoint, RestoredNetworkEvaluatesBitIdentically) {
  const auto c = sample_checkpoint(false, false, 2);
  auto original = restore_network(c);
  auto reloaded = restore_network(parse_checkpoint(serialize_checkpoint(c), "mem"));
  const auto x = pcn::test::patch_split(4, 3).item(1);
  Tape<float> t1, t2;
  EXPECT_EQ(original.logits(t1, x).value().to_vector(), reloaded.logits(t2, x).value().to_vector());
  const Split raw = pcn::test::patch_split(20, 5);
  const auto a = evaluate_checkpoint(c, raw), b = evaluate_checkpoint(parse_checkpoint(serialize_checkpoint(c), "m"), raw);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.loss, b.loss);
}

TEST(Checkpoint, LayoutIsMagicLengthJsonThenLittleEndianFloats) {
  const auto c = sample_checkpoint(true, false, 0);
  const std::string bytes = serialize_checkpoint(c);
  ASSERT_EQ(bytes.substr(0, 8), "PCNCKPT1");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= std::uint32_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const json h = json::parse(bytes.substr(12, len));
  EXPECT_EQ(h.at("format_version"), 1);
  EXPECT_EQ(h.at("arch").at("name"), "E");
  EXPECT_EQ(h.at("T"), 0);
  const auto& first = h.at("tensors").at(0);
  EXPECT_EQ(first.at("name"), "ff_w.0");
  EXPECT_EQ(first.at("shape"), json({16, 1, 3, 3}));
  EXPECT_EQ(first.at("offset"), 0);
  float v = 0;
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data()) + 12 + len;
  std::uint32_t bits = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  v = std::bit_cast<float>(bits);
  EXPECT_EQ(v, c.tensors[0].value[0]);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const std::string good = serialize_checkpoint(sample_checkpoint(false, true, 1));
  EXPECT_THROW(parse_checkpoint("PCNCKPT2" + good.substr(8), "x"), IoError);
  EXPECT_THROW(parse_checkpoint(good.substr(0, 10), "x"), IoError);
  EXPECT_THROW(parse_checkpoint(good.substr(0, 200), "x"), IoError);
  EXPECT_THROW(parse_checkpoint(good.substr(0, good.size() - 4), "x"), IoError);
  EXPECT_THROW(parse_checkpoint(good + "z", "x"), IoError);
  std::string bad_json = good;
  bad_json[12] = '[';
  EXPECT_THROW(parse_checkpoint(bad_json, "x"), IoError);
  try {
    load_checkpoint("/nonexistent/model.ckpt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/model.ckpt"), std::string::npos);
  }
}

TEST(Checkpoint, RestoreRejectsMismatchedTensors) {
  auto c = sample_checkpoint(false, false, 1);
  c.tensors.pop_back();
  EXPECT_THROW(restore_network(c), IoError);
  auto d = sample_checkpoint(false, false, 1);
  d.tensors[0].value = Tensor<float>({16, 1, 3, 2});
  EXPECT_THROW(restore_network(d), IoError);
  auto e = sample_checkpoint(false, false, 1);
  std::swap(e.tensors[0].name, e.tensors[1].name);
  EXPECT_THROW(restore_network(e), IoError);
}
