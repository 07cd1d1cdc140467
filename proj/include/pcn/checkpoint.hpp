#pragma once

// Checkpoint file: "PCNCKPT1", u32 little-endian header length, JSON header,
// then little-endian float32 payloads in manifest order.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcn/datasets.hpp"
#include "pcn/model.hpp"

namespace pcn {

using json = nlohmann::json;

inline constexpr char kCheckpointMagic[] = "PCNCKPT1";
inline constexpr std::size_t kMagicLen = 8;
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  ArchConfig arch;
  bool plain = false;
  bool tied = false;
  int cycles = 0;
  NormStats norm;
  json metadata = json::object();
  std::string rng_state;
  json metrics = json::array();
  std::vector<NamedTensor> tensors;
};

inline json arch_to_json(const ArchConfig& a) {
  json layers = json::array();
  for (const auto& L : a.layers) layers.push_back({{"in", L.in_channels}, {"out", L.out_channels}, {"pool", L.pools_after}});
  return {{"name", std::string(1, a.name)},
          {"num_classes", a.num_classes},
          {"input_channels", a.input_channels},
          {"input_size", a.input_size},
          {"layers", layers}};
}

inline ArchConfig arch_from_json(const json& j) {
  ArchConfig a;
  const auto name = j.at("name").get<std::string>();
  if (name.size() != 1) throw IoError("checkpoint arch name '" + name + "' is not a single letter");
  a.name = name[0];
  a.num_classes = j.at("num_classes").get<std::size_t>();
  a.input_channels = j.at("input_channels").get<std::size_t>();
  a.input_size = j.at("input_size").get<std::size_t>();
  for (const auto& L : j.at("layers"))
    a.layers.push_back({L.at("in").get<std::size_t>(), L.at("out").get<std::size_t>(), L.at("pool").get<bool>()});
  a.validate();
  return a;
}

/// Snapshot of a network's parameters plus run context.
inline Checkpoint make_checkpoint(Network<float>& net, const NormStats& norm, json metadata = json::object(),
                                  std::string rng_state = {}, json metrics = json::array()) {
  Checkpoint c;
  c.arch = net.arch();
  c.plain = net.plain;
  c.tied = net.tied();
  c.cycles = net.cycles;
  c.norm = norm;
  c.metadata = std::move(metadata);
  c.rng_state = std::move(rng_state);
  c.metrics = std::move(metrics);
  for (auto* p : net.parameters()) c.tensors.push_back({p->name, p->value});
  return c;
}

/// Rebuilds the network; every parameter must be present with its exact shape.
inline Network<float> restore_network(const Checkpoint& c) {
  auto net = Network<float>::make(c.arch, c.plain, c.tied, c.cycles, 0);
  auto params = net.parameters();
  if (params.size() != c.tensors.size())
    throw IoError("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model needs " +
                  std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = c.tensors[i];
    if (t.name != params[i]->name) throw IoError("checkpoint tensor '" + t.name + "' where '" + params[i]->name + "' expected");
    if (t.value.shape() != params[i]->value.shape())
      throw IoError("checkpoint tensor '" + t.name + "' has shape " + shape_str(t.value.shape()) + ", model needs " +
                    shape_str(params[i]->value.shape()));
    params[i]->value = t.value;
  }
  return net;
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    const std::size_t bytes = t.value.numel() * 4;
    manifest.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  const json header = {{"format_version", kCheckpointVersion},
                       {"arch", arch_to_json(c.arch)},
                       {"plain", c.plain},
                       {"tied", c.tied},
                       {"T", c.cycles},
                       {"tensors", manifest},
                       {"norm", {{"mean", c.norm.mean}, {"std", c.norm.std}}},
                       {"metadata", c.metadata},
                       {"rng_state", c.rng_state},
                       {"metrics", c.metrics}};
  const std::string h = header.dump();
  if (h.size() > 0xffffffffULL) throw IoError("checkpoint header too large");
  std::string out(kCheckpointMagic, kMagicLen);
  const auto len = static_cast<std::uint32_t>(h.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& t : c.tensors)
    for (float v : t.value.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source) {
  auto fail = [&](const std::string& why) { return IoError(source + ": " + why); };
  if (bytes.size() < kMagicLen + 4 || bytes.compare(0, kMagicLen, kCheckpointMagic) != 0)
    throw fail("not a checkpoint (bad magic)");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= std::uint32_t(static_cast<unsigned char>(bytes[kMagicLen + i])) << (8 * i);
  const std::size_t payload = kMagicLen + 4 + std::size_t(len);
  if (payload > bytes.size()) throw fail("truncated header");
  json h;
  try {
    h = json::parse(bytes.begin() + kMagicLen + 4, bytes.begin() + std::ptrdiff_t(payload));
  } catch (const json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }
  Checkpoint c;
  try {
    if (h.at("format_version").get<int>() != kCheckpointVersion)
      throw fail("unsupported format version " + h.at("format_version").dump());
    c.arch = arch_from_json(h.at("arch"));
    c.plain = h.at("plain").get<bool>();
    c.tied = h.at("tied").get<bool>();
    c.cycles = h.at("T").get<int>();
    c.norm.mean = h.at("norm").at("mean").get<std::vector<double>>();
    c.norm.std = h.at("norm").at("std").get<std::vector<double>>();
    c.metadata = h.at("metadata");
    c.rng_state = h.at("rng_state").get<std::string>();
    c.metrics = h.at("metrics");
    std::size_t expect = 0;
    for (const auto& m : h.at("tensors")) {
      const auto shape = m.at("shape").get<Shape>();
      const auto offset = m.at("offset").get<std::size_t>();
      const auto nbytes = m.at("bytes").get<std::size_t>();
      if (offset != expect || nbytes != shape_numel(shape) * 4)
        throw fail("manifest entry '" + m.at("name").get<std::string>() + "' has inconsistent offset or size");
      if (payload + offset + nbytes > bytes.size()) throw fail("truncated tensor payload");
      auto t = Tensor<float>::uninit(shape);
      const char* src = bytes.data() + payload + offset;
      for (std::size_t i = 0; i < t.numel(); ++i) {
        std::uint32_t bits = 0;
        for (int k = 0; k < 4; ++k) bits |= std::uint32_t(static_cast<unsigned char>(src[4 * i + k])) << (8 * k);
        t[i] = std::bit_cast<float>(bits);
      }
      c.tensors.push_back({m.at("name").get<std::string>(), std::move(t)});
      expect = offset + nbytes;
    }
    if (payload + expect != bytes.size()) throw fail("trailing bytes after tensor payload");
    c.norm.validate(c.arch.input_channels);
  } catch (const json::exception& e) {
    throw fail(std::string("bad header field: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw fail(e.what());
  }
  return c;
}

/// Writes via a temporary file and rename, so a failed save leaves no partial file.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = serialize_checkpoint(c);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string());
}

}  // namespace pcn
