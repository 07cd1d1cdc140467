#pragma once

// Diagnostics: per-cycle probability and error-energy traces, top-down
// reconstructions written as PGM/PPM, and multiply/add accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "pcn/checkpoint.hpp"
#include "pcn/datasets.hpp"
#include "pcn/model.hpp"

namespace pcn {

struct CycleTrace {
  std::vector<std::vector<double>> probs;       // [cycle][class], cycles 0..T
  std::vector<std::vector<double>> energy;      // [cycle][layer], empty at cycle 0
  std::vector<std::vector<double>> normalized;  // energy / var(r_l)
  std::vector<int> top1;

  std::size_t length() const { return probs.size(); }
};

/// Classifier probe at every cycle for a single 1xCxHxW normalized image.
inline CycleTrace cycle_trace(Network<float>& net, const Tensor<float>& image, int cycles) {
  if (image.rank() != 4 || image.dim(0) != 1) throw ShapeError("cycle_trace expects one 1xCxHxW image");
  CycleTrace tr;
  std::vector<CycleRecord<float>> records;
  if (net.plain) {
    if (cycles != 0) throw std::invalid_argument("a plain network has no cycles to trace");
    Tape<float> tape;
    auto logits = plain_forward(tape, net.pcn.ff, image);
    CycleRecord<float> rec;
    rec.probs = kernels::softmax(logits.value());
    records.push_back(std::move(rec));
  } else {
    Tape<float> tape;
    ForwardOptions opt;
    opt.trace = true;
    records = pcn_forward(tape, net.pcn, image, cycles, opt).trace;
  }
  for (const auto& rec : records) {
    std::vector<double> p(rec.probs.data().begin(), rec.probs.data().end());
    tr.top1.push_back(int(std::max_element(p.begin(), p.end()) - p.begin()));
    tr.probs.push_back(std::move(p));
    tr.energy.push_back(rec.energies);
    tr.normalized.push_back(rec.normalized);
  }
  return tr;
}

/// Writes <dir>/probabilities.csv, <dir>/energy.csv and <dir>/energy_normalized.csv.
inline void write_trace_csv(const std::filesystem::path& dir, const CycleTrace& tr) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    f << std::setprecision(9);
    return f;
  };
  auto probs = open("probabilities.csv");
  probs << "cycle,class,probability\n";
  for (std::size_t t = 0; t < tr.length(); ++t)
    for (std::size_t k = 0; k < tr.probs[t].size(); ++k) probs << t << ',' << k << ',' << tr.probs[t][k] << '\n';
  auto energy = open("energy.csv");
  auto norm = open("energy_normalized.csv");
  energy << "cycle,layer,energy\n";
  norm << "cycle,layer,energy\n";
  for (std::size_t t = 0; t < tr.length(); ++t)
    for (std::size_t l = 0; l < tr.energy[t].size(); ++l) {
      energy << t << ',' << l << ',' << tr.energy[t][l] << '\n';
      norm << t << ',' << l << ',' << tr.normalized[t][l] << '\n';
    }
  if (!probs || !energy || !norm) throw IoError("write failed under " + dir.string());
}

/// Binary PGM (1 channel) or PPM (3 channels), maxval 255, from a CxHxW buffer in [0,1].
inline void write_pnm(const std::filesystem::path& path, const float* chw, std::size_t C, std::size_t H,
                      std::size_t W) {
  if (C != 1 && C != 3) throw std::invalid_argument("PNM output needs 1 or 3 channels, got " + std::to_string(C));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << (C == 1 ? "P5" : "P6") << '\n' << W << ' ' << H << '\n' << 255 << '\n';
  std::string bytes(C * H * W, '\0');
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        const float v = std::clamp(chw[(c * H + y) * W + x], 0.0f, 1.0f);
        bytes[(y * W + x) * C + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
      }
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

struct PnmImage {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<unsigned char> pixels;  // interleaved, row-major
};

/// Strict reader for the files write_pnm produces: magic, dimensions,
/// maxval 255 and an exact payload length.
inline PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (!f || (magic != "P5" && magic != "P6") || w == 0 || h == 0 || maxval != 255)
    throw IoError(path.string() + ": malformed PNM header");
  if (f.get() != '\n') throw IoError(path.string() + ": header must end with a single newline");
  PnmImage img;
  img.channels = magic == "P5" ? 1 : 3;
  img.height = h;
  img.width = w;
  img.pixels.resize(img.channels * h * w);
  f.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (f.gcount() != std::streamsize(img.pixels.size())) throw IoError(path.string() + ": truncated pixel data");
  if (f.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes");
  return img;
}

/// Per-cycle reconstruction of a batch: p_0 after each feedback sweep, and
/// the mean over images of ||p_0 - r_0||^2 (normalized input space).
struct Reconstruction {
  std::vector<Tensor<float>> p0;  // cycles 1..T, each NxCxHxW, normalized space
  std::vector<double> mean_sq_error;
};

inline Reconstruction reconstruct_batch(Network<float>& net, const Tensor<float>& images, int cycles) {
  if (net.plain) throw std::invalid_argument("reconstruction needs a PCN (the plain model has no feedback)");
  if (cycles < 1) throw std::invalid_argument("reconstruction needs at least one cycle");
  Tape<float> tape;
  auto state = initial_state(tape, net.pcn, images);
  Reconstruction rec;
  const double n = double(images.dim(0));
  for (int t = 1; t <= cycles; ++t) {
    feedback_sweep(tape, net.pcn, state);
    feedforward_sweep(tape, net.pcn, state);
    rec.p0.push_back(state.p[0]->value());
    rec.mean_sq_error.push_back(double(squared_norm(state.e[0]->value())) / n);
  }
  return rec;
}

/// Mean reconstruction error per cycle over the first `count` items of a normalized split.
inline std::vector<double> reconstruction_error(Network<float>& net, const Split& split, std::size_t count, int cycles,
                                                std::size_t batch_size = 128) {
  const Split s = take_first(split, count);
  BatchIterator it(s, batch_size);
  Batch b;
  std::vector<double> total(std::size_t(cycles), 0.0);
  while (it.next(b)) {
    const auto rec = reconstruct_batch(net, b.images, cycles);
    for (int t = 0; t < cycles; ++t) total[std::size_t(t)] += rec.mean_sq_error[std::size_t(t)] * double(b.labels.size());
  }
  for (auto& v : total) v /= double(count);
  return total;
}

/// Final-cycle p_0 mapped back to pixel space and clamped, written next to the
/// input as <stem>_input.p?m and <stem>_recon.p?m. Returns the two paths.
inline std::pair<std::filesystem::path, std::filesystem::path> write_reconstruction(
    Network<float>& net, const Tensor<float>& image, const NormStats& norm, int cycles,
    const std::filesystem::path& dir, const std::string& stem) {
  const auto rec = reconstruct_batch(net, image, cycles);
  const Tensor<float> input = denormalize(image, norm);
  const Tensor<float> recon = denormalize(rec.p0.back(), norm);
  const std::size_t C = image.dim(1), H = image.dim(2), W = image.dim(3);
  const std::string ext = C == 1 ? ".pgm" : ".ppm";
  std::filesystem::create_directories(dir);
  const auto in_path = dir / (stem + "_input" + ext), out_path = dir / (stem + "_recon" + ext);
  write_pnm(in_path, input.data().data(), C, H, W);
  write_pnm(out_path, recon.data().data(), C, H, W);
  return {in_path, out_path};
}

/// Multiply and add counts; comparisons (ReLU, max-pool) are not counted.
struct OpCount {
  std::uint64_t mul = 0, add = 0;
  std::uint64_t flops() const { return mul + add; }
  OpCount& operator+=(const OpCount& o) {
    mul += o.mul;
    add += o.add;
    return *this;
  }
  friend OpCount operator*(std::uint64_t k, OpCount c) { return {k * c.mul, k * c.add}; }
};

struct LayerFlops {
  OpCount feedforward;  // conv + bias of the initial pass
  OpCount feedback;     // upsample, transposed conv, top-down mix
  OpCount error;        // error, bias-free conv, bottom-up update
};

struct FlopReport {
  std::string label;
  int cycles = 0;
  std::vector<LayerFlops> layers;
  OpCount classifier;  // global average pool + linear
  OpCount plain_total;
  OpCount pcn_total;

  double ratio() const { return double(pcn_total.flops()) / double(plain_total.flops()); }
};

namespace detail {
// 3x3 'same' conv over an s x s map: every output sums 9*cin products.
inline OpCount conv_ops(std::uint64_t s, std::uint64_t cin, std::uint64_t cout, bool bias) {
  const std::uint64_t outs = s * s * cout, products = outs * 9 * cin;
  return {products, bias ? products : products - outs};
}
}  // namespace detail

/// Pure function of the architecture, cycle count and input size. Tied and
/// untied models cost the same; `tied` only affects the label.
inline FlopReport count_flops(const ArchConfig& arch_in, bool tied, int cycles, std::size_t input_size) {
  if (cycles < 0) throw std::invalid_argument("cycle count must be non-negative");
  ArchConfig arch = arch_in;
  arch.input_size = input_size;
  arch.validate();
  FlopReport r;
  r.label = model_label(arch.name, cycles == 0, cycles, tied);
  r.cycles = cycles;
  const std::size_t L = arch.depth();
  r.layers.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    const std::uint64_t s = arch.spatial(l), cin = arch.channels(l), cout = arch.channels(l + 1);
    const std::uint64_t s_out = arch.spatial(l + 1);
    LayerFlops& f = r.layers[l];
    f.feedforward = detail::conv_ops(s, cin, cout, true);
    // feedback predicting r_l from r_{l+1}: bilinear upsample (4 mul, 3 add per
    // output) when the layer pooled, then the transposed conv
    if (arch.layers[l].pools_after) f.feedback += OpCount{4 * cout * s * s, 3 * cout * s * s};
    f.feedback += detail::conv_ops(s, cout, cin, false);
    // (1-b) r + b p on interior layers
    if (l > 0) f.feedback += OpCount{2 * cin * s * s, cin * s * s};
    // e = r - p, conv, then r + a * drive at the pooled size
    f.error += OpCount{0, cin * s * s};
    f.error += detail::conv_ops(s, cin, cout, false);
    f.error += OpCount{cout * s_out * s_out, cout * s_out * s_out};
  }
  const std::uint64_t c = arch.channels(L), s = arch.spatial(L), k = arch.num_classes;
  r.classifier = OpCount{c, c * (s * s - 1)};  // average: sums then one scale per channel
  r.classifier += OpCount{k * c, k * c};
  for (const auto& f : r.layers) r.plain_total += f.feedforward;
  r.plain_total += r.classifier;
  r.pcn_total = r.plain_total;
  for (const auto& f : r.layers) {
    r.pcn_total += std::uint64_t(cycles) * f.feedback;
    r.pcn_total += std::uint64_t(cycles) * f.error;
  }
  return r;
}

inline void print_flop_report(std::ostream& os, const FlopReport& r) {
  auto g = [](std::uint64_t v) { return double(v) / 1e9; };
  os << std::fixed << std::setprecision(4);
  os << "layer  ff_mul(G)  ff_add(G)  fb_flops(G)  err_flops(G)\n";
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& f = r.layers[l];
    os << std::setw(5) << l << "  " << std::setw(9) << g(f.feedforward.mul) << "  " << std::setw(9)
       << g(f.feedforward.add) << "  " << std::setw(11) << g(f.feedback.flops()) << "  " << std::setw(12)
       << g(f.error.flops()) << '\n';
  }
  os << "classifier flops(G): " << g(r.classifier.flops()) << '\n';
  os << "plain: " << g(r.plain_total.mul) << " G multiply-adds, " << g(r.plain_total.flops())
     << " G FLOPs (mul and add counted separately)\n";
  os << r.label << ": " << g(r.pcn_total.flops()) << " G FLOPs\n";
  os << std::setprecision(3) << "ratio: " << r.ratio() << " (2T = " << 2 * r.cycles << ")\n";
  os.unsetf(std::ios::floatfield);
}

}  // namespace pcn
