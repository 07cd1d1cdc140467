#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pcn/arch.hpp"
#include "pcn/autodiff.hpp"

namespace pcn {

/// Feedforward-only network: conv stack plus classifier.
template <class T>
struct PlainParams {
  ArchConfig arch;
  std::vector<Parameter<T>> conv_w;  // [out, in, 3, 3]
  std::vector<Parameter<T>> conv_b;  // [out]
  Parameter<T> fc_w;                 // [classes, last width]
  Parameter<T> fc_b;                 // [classes]

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (std::size_t l = 0; l < conv_w.size(); ++l) {
      out.push_back(&conv_w[l]);
      out.push_back(&conv_b[l]);
    }
    out.push_back(&fc_w);
    out.push_back(&fc_b);
    return out;
  }
};

/// Predictive coding network: the plain stack plus feedback weights and
/// per-filter update rates. With `tied`, feedback reuses the feedforward kernels.
template <class T>
struct PcnParams {
  PlainParams<T> ff;
  bool tied = false;
  std::vector<Parameter<T>> fb_w;    // untied only; fb_w[l] predicts r_l from r_{l+1}
  std::vector<Parameter<T>> rate_a;  // rate_a[l]: channels of r_{l+1}
  std::vector<Parameter<T>> rate_b;  // rate_b[l-1]: channels of r_l, l = 1..L-1

  const ArchConfig& arch() const { return ff.arch; }
  std::size_t depth() const { return ff.arch.depth(); }

  Parameter<T>& feedback_weight(std::size_t layer) { return tied ? ff.conv_w.at(layer) : fb_w.at(layer); }
  Parameter<T>& feedback_rate(std::size_t l) { return rate_b.at(l - 1); }

  std::vector<Parameter<T>*> parameters() {
    auto out = ff.parameters();
    for (auto& p : fb_w) out.push_back(&p);
    for (auto& p : rate_a) out.push_back(&p);
    for (auto& p : rate_b) out.push_back(&p);
    return out;
  }
};

namespace detail {
template <class T>
Parameter<T> uniform_param(std::string name, Shape shape, double fan_in, bool decay, std::mt19937_64& rng) {
  const double k = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> dist(-k, k);
  Tensor<T> v(std::move(shape));
  for (auto& x : v.data()) x = static_cast<T>(dist(rng));
  return Parameter<T>(std::move(name), std::move(v), decay);
}
}  // namespace detail

/// Uniform(-k, k) initialization with k = 1/sqrt(fan_in), drawn in a fixed order.
template <class T = float>
PlainParams<T> build_plain(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  PlainParams<T> p;
  p.arch = arch;
  for (std::size_t l = 0; l < arch.depth(); ++l) {
    const auto& L = arch.layers[l];
    const double fan_in = double(L.in_channels * 9);
    p.conv_w.push_back(detail::uniform_param<T>("ff_w." + std::to_string(l), {L.out_channels, L.in_channels, 3, 3},
                                                fan_in, true, rng));
    p.conv_b.push_back(detail::uniform_param<T>("ff_b." + std::to_string(l), {L.out_channels}, fan_in, false, rng));
  }
  const std::size_t feat = arch.layers.back().out_channels;
  p.fc_w = detail::uniform_param<T>("fc_w", {arch.num_classes, feat}, double(feat), true, rng);
  p.fc_b = detail::uniform_param<T>("fc_b", {arch.num_classes}, double(feat), false, rng);
  return p;
}

inline constexpr double kInitRateA = 1.0;
inline constexpr double kInitRateB = 0.5;

template <class T = float>
PcnParams<T> build_pcn(const ArchConfig& arch, bool tied, std::uint64_t seed) {
  PcnParams<T> p;
  p.ff = build_plain<T>(arch, seed);
  p.tied = tied;
  // feedback kernels draw from a second stream so the feedforward part matches build_plain
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  if (!tied)
    for (std::size_t l = 0; l < arch.depth(); ++l) {
      const auto& L = arch.layers[l];
      p.fb_w.push_back(detail::uniform_param<T>("fb_w." + std::to_string(l), {L.out_channels, L.in_channels, 3, 3},
                                                double(L.in_channels * 9), true, rng));
    }
  for (std::size_t l = 0; l < arch.depth(); ++l)
    p.rate_a.emplace_back("rate_a." + std::to_string(l), Tensor<T>({arch.channels(l + 1)}, T(kInitRateA)), false);
  for (std::size_t l = 1; l < arch.depth(); ++l)
    p.rate_b.emplace_back("rate_b." + std::to_string(l), Tensor<T>({arch.channels(l)}, T(kInitRateB)), false);
  return p;
}

template <class T>
std::size_t count_params(const PlainParams<T>& p) {
  std::size_t n = p.fc_w.value.numel() + p.fc_b.value.numel();
  for (std::size_t l = 0; l < p.conv_w.size(); ++l) n += p.conv_w[l].value.numel() + p.conv_b[l].value.numel();
  return n;
}

template <class T>
std::size_t count_params(const PcnParams<T>& p) {
  std::size_t n = count_params(p.ff);
  for (const auto& w : p.fb_w) n += w.value.numel();
  for (const auto& r : p.rate_a) n += r.value.numel();
  for (const auto& r : p.rate_b) n += r.value.numel();
  return n;
}

/// Convolution and classifier weights and biases only, without the per-filter
/// rate vectors. Published parameter counts match this figure.
template <class T>
std::size_t count_weights(const PcnParams<T>& p) {
  std::size_t n = count_params(p.ff);
  for (const auto& w : p.fb_w) n += w.value.numel();
  return n;
}

/// Per-batch recursion state. r[0] is the input; p[l] and e[l] exist for l < L
/// once the first cycle has run.
template <class T>
struct PcnState {
  std::vector<Var<T>> r;
  std::vector<std::optional<Var<T>>> p;
  std::vector<std::optional<Var<T>>> e;

  std::size_t depth() const { return r.size() - 1; }
};

struct ForwardOptions {
  bool linear = false;  // test hook: sweeps skip the rectifier
  bool trace = false;
};

/// Read-only probe recorded after each cycle.
template <class T>
struct CycleRecord {
  Tensor<T> probs;                // [B, classes]
  std::vector<double> energies;   // ||e_l||^2 for l < L; empty at cycle 0
  std::vector<double> normalized; // energies divided by var(r_l)
};

template <class T>
struct ForwardResult {
  Var<T> logits;
  PcnState<T> state;
  std::vector<CycleRecord<T>> trace;
};

/// conv (+bias) -> ReLU -> optional 2x2 max-pool.
template <class T>
Var<T> feedforward_layer(Tape<T>& tape, PlainParams<T>& params, std::size_t l, Var<T> x) {
  Var<T> y = relu(conv2d(x, tape.param(params.conv_w[l]), tape.param(params.conv_b[l])));
  return params.arch.layers[l].pools_after ? maxpool2x2(y) : y;
}

template <class T>
Var<T> classify(Tape<T>& tape, PlainParams<T>& params, Var<T> top) {
  return linear(global_avg_pool(top), tape.param(params.fc_w), tape.param(params.fc_b));
}

template <class T>
void check_images(const ArchConfig& arch, const Tensor<T>& images) {
  const auto [N, C, H, W] = dims4(images.shape(), "forward");
  (void)N;
  if (C != arch.input_channels || H != W)
    throw ShapeError("images " + shape_str(images.shape()) + " do not fit architecture " + std::string(1, arch.name));
  ArchConfig probe = arch;
  probe.input_size = H;
  probe.validate();
}

template <class T>
Var<T> plain_forward(Tape<T>& tape, PlainParams<T>& params, const Tensor<T>& images) {
  check_images(params.arch, images);
  Var<T> x = tape.constant(images);
  for (std::size_t l = 0; l < params.arch.depth(); ++l) x = feedforward_layer(tape, params, l, x);
  return classify(tape, params, x);
}

/// Top-down prediction of r_{l-1} from r_l: optional bilinear upsampling, then
/// the transposed 3x3 convolution of layer l-1 (no bias).
template <class T>
Var<T> predict(Tape<T>& tape, PcnParams<T>& params, std::size_t l, Var<T> r_l) {
  if (l < 1 || l > params.depth()) throw std::out_of_range("predict: layer " + std::to_string(l));
  const auto& spec = params.arch().layers[l - 1];
  Var<T> x = spec.pools_after ? bilinear_upsample2x(r_l) : r_l;
  return conv_transpose2d(x, tape.param(params.feedback_weight(l - 1)));
}

/// Bottom-up error drive for r_{l+1}: bias-free conv of e_l, then max-pool if the layer pools.
template <class T>
Var<T> error_drive(Tape<T>& tape, PcnParams<T>& params, std::size_t l, Var<T> e_l) {
  Var<T> d = conv2d(e_l, tape.param(params.ff.conv_w[l]));
  return params.arch().layers[l].pools_after ? maxpool2x2(d) : d;
}

template <class T>
Var<T> effective_rate(Tape<T>& tape, Parameter<T>& rate) {
  return relu(tape.param(rate));
}

template <class T>
PcnState<T> initial_state(Tape<T>& tape, PcnParams<T>& params, const Tensor<T>& images) {
  check_images(params.arch(), images);
  PcnState<T> s;
  const std::size_t L = params.depth();
  s.r.push_back(tape.constant(images));
  for (std::size_t l = 0; l < L; ++l) s.r.push_back(feedforward_layer(tape, params.ff, l, s.r.back()));
  s.p.resize(L);
  s.e.resize(L);
  return s;
}

/// One feedback step for layer l (top-down): p_{l-1} from r_l, then r_{l-1}
/// moves toward p_{l-1} when l > 1.
template <class T>
void feedback_step(Tape<T>& tape, PcnParams<T>& params, PcnState<T>& s, std::size_t l, const ForwardOptions& opt) {
  Var<T> p = predict(tape, params, l, s.r[l]);
  s.p[l - 1] = p;
  if (l > 1) s.r[l - 1] = convex_mix_relu(s.r[l - 1], effective_rate(tape, params.feedback_rate(l - 1)), p, !opt.linear);
}

template <class T>
void feedback_sweep(Tape<T>& tape, PcnParams<T>& params, PcnState<T>& s, const ForwardOptions& opt = {}) {
  for (std::size_t l = params.depth(); l >= 1; --l) feedback_step(tape, params, s, l, opt);
}

template <class T>
void feedforward_step(Tape<T>& tape, PcnParams<T>& params, PcnState<T>& s, std::size_t l, const ForwardOptions& opt) {
  if (!s.p[l]) throw std::logic_error("feedforward sweep requires a prior feedback sweep");
  Var<T> e = sub(s.r[l], *s.p[l]);
  s.e[l] = e;
  s.r[l + 1] = axpy_relu(s.r[l + 1], effective_rate(tape, params.rate_a[l]), error_drive(tape, params, l, e), !opt.linear);
}

template <class T>
void feedforward_sweep(Tape<T>& tape, PcnParams<T>& params, PcnState<T>& s, const ForwardOptions& opt = {}) {
  for (std::size_t l = 0; l < params.depth(); ++l) feedforward_step(tape, params, s, l, opt);
}

/// Sample variance of all elements of a tensor.
template <class T>
double sample_variance(const Tensor<T>& x) {
  double mean = 0;
  for (auto v : x.data()) mean += double(v);
  mean /= double(x.numel());
  double var = 0;
  for (auto v : x.data()) var += (double(v) - mean) * (double(v) - mean);
  return x.numel() > 1 ? var / double(x.numel() - 1) : 0.0;
}

inline constexpr double kVarianceFloor = 1e-8;

/// ||e_l||^2, optionally divided by the sample variance of r_l.
template <class T>
double layer_energy(const PcnState<T>& s, std::size_t l, bool normalized) {
  if (l >= s.e.size() || !s.e[l]) throw std::out_of_range("layer_energy: no error at layer " + std::to_string(l));
  const double en = double(squared_norm(s.e[l]->value()));
  if (!normalized) return en;
  return en / std::max(sample_variance(s.r[l].value()), kVarianceFloor);
}

template <class T>
CycleRecord<T> probe_cycle(PcnParams<T>& params, const PcnState<T>& s, bool with_energies) {
  CycleRecord<T> rec;
  rec.probs = kernels::softmax(kernels::linear(kernels::global_avg_pool(s.r.back().value()), params.ff.fc_w.value,
                                               params.ff.fc_b.value));
  if (with_energies)
    for (std::size_t l = 0; l < s.depth(); ++l) {
      rec.energies.push_back(layer_energy(s, l, false));
      rec.normalized.push_back(layer_energy(s, l, true));
    }
  return rec;
}

/// Initial feedforward pass followed by `cycles` rounds of feedback then
/// feedforward sweeps; the classifier reads the top representation last.
template <class T>
ForwardResult<T> pcn_forward(Tape<T>& tape, PcnParams<T>& params, const Tensor<T>& images, int cycles,
                             const ForwardOptions& opt = {}) {
  if (cycles < 0) throw std::invalid_argument("cycle count must be non-negative, got " + std::to_string(cycles));
  ForwardResult<T> out;
  out.state = initial_state(tape, params, images);
  if (opt.trace) out.trace.push_back(probe_cycle(params, out.state, false));
  for (int t = 1; t <= cycles; ++t) {
    feedback_sweep(tape, params, out.state, opt);
    feedforward_sweep(tape, params, out.state, opt);
    if (opt.trace) out.trace.push_back(probe_cycle(params, out.state, true));
  }
  out.logits = classify(tape, params.ff, out.state.r.back());
  return out;
}

/// A trainable model: the plain CNN, or a PCN run for a fixed number of cycles.
/// The plain variant uses only `pcn.ff`.
template <class T = float>
struct Network {
  bool plain = false;
  int cycles = 0;
  PcnParams<T> pcn;

  static Network make(const ArchConfig& arch, bool plain, bool tied, int cycles, std::uint64_t seed) {
    if (cycles < 0) throw std::invalid_argument("cycle count must be non-negative, got " + std::to_string(cycles));
    Network n;
    n.plain = plain;
    n.cycles = plain ? 0 : cycles;
    if (plain) {
      n.pcn.ff = build_plain<T>(arch, seed);
    } else {
      n.pcn = build_pcn<T>(arch, tied, seed);
    }
    return n;
  }

  const ArchConfig& arch() const { return pcn.arch(); }
  bool tied() const { return !plain && pcn.tied; }
  std::string label() const { return model_label(arch().name, plain, cycles, tied()); }

  std::vector<Parameter<T>*> parameters() { return plain ? pcn.ff.parameters() : pcn.parameters(); }
  std::size_t num_params() const { return plain ? count_params(pcn.ff) : count_params(pcn); }

  /// Classifier logits after `cycles_override` cycles (the trained count when negative).
  Var<T> logits(Tape<T>& tape, const Tensor<T>& images, int cycles_override = -1) {
    if (plain) return plain_forward(tape, pcn.ff, images);
    return pcn_forward(tape, pcn, images, cycles_override < 0 ? cycles : cycles_override).logits;
  }
};

}  // namespace pcn
