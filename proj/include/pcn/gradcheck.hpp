#pragma once

// Whole-model gradient check: tape gradients of the classification loss
// against central differences on sampled coordinates of each parameter group.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pcn/model.hpp"

namespace pcn {

struct GradCheckOptions {
  char arch = 'E';
  Dataset dataset = Dataset::Mnist;
  bool plain = false;
  bool tied = false;
  int cycles = 1;
  std::size_t batch = 2;
  std::size_t samples = 50;  // per group; small groups are checked exhaustively
  std::uint64_t seed = 1;
};

struct GroupResult {
  std::string group;
  std::size_t checked = 0;
  double max_rel_err = 0;
  double max_abs_grad = 0;
  std::string worst;  // "<param>[index]" of the largest error
  std::size_t unsmooth = 0;  // coordinates where no step avoided a kink
};

struct GradCheckReport {
  std::vector<GroupResult> groups;
  double max_rel_err = 0;
};

/// Acceptance threshold and relative-error floor per precision of the analytic gradient.
template <class T>
struct GradCheckTolerance;
template <>
struct GradCheckTolerance<float> {
  static constexpr double floor = 1e-6;
  static constexpr double threshold = 1e-2;
};
template <>
struct GradCheckTolerance<double> {
  static constexpr double floor = 1e-4;
  static constexpr double threshold = 1e-5;
};

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Group key of a parameter name: "ff_w.3" -> "ff_w".
inline std::string param_group(const std::string& name) { return name.substr(0, name.find('.')); }

/// Same network with every parameter value converted to U.
template <class U, class T>
Network<U> cast_network(Network<T>& net) {
  auto out = Network<U>::make(net.arch(), net.plain, net.tied(), net.cycles, 0);
  auto src = net.parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
  return out;
}

/// Finite differences of a double-precision loss taken on the piece of the
/// piecewise-smooth loss that contains the base point. Central differences
/// when neither probe flips a ReLU or max-pool winner; otherwise a
/// second-order one-sided difference on a side whose probes at h and 2h stay
/// on the base piece; otherwise the step shrinks tenfold.
struct KinkAwareDiff {
  double value = 0;
  double step = 0;
  bool smooth = false;  // false if no step down to h_min avoided a kink
};

template <class F>
KinkAwareDiff kink_aware_diff(F&& loss_and_sig, double f0, std::uint64_t base_sig, double& coord, double h0 = 1e-6,
                              double h_min = 1e-10) {
  const double saved = coord;
  auto at = [&](double x) {
    coord = x;
    auto r = loss_and_sig();
    coord = saved;
    return r;
  };
  KinkAwareDiff d;
  for (double h = h0; h >= h_min; h /= 10) {
    const auto [fp, sp] = at(saved + h);
    const auto [fm, sm] = at(saved - h);
    d.step = h;
    d.value = (fp - fm) / (2 * h);
    if (sp == base_sig && sm == base_sig) {
      d.smooth = true;
      return d;
    }
    for (const double dir : {1.0, -1.0}) {
      if ((dir > 0 ? sp : sm) != base_sig) continue;
      const auto [f2, s2] = at(saved + 2 * dir * h);
      if (s2 != base_sig) continue;
      const double f1 = dir > 0 ? fp : fm;
      d.value = dir * (-3 * f0 + 4 * f1 - f2) / (2 * h);
      d.smooth = true;
      return d;
    }
  }
  return d;
}

/// Analytic gradients from the precision-T build against the double-precision
/// finite-difference oracle on identical parameter values.
template <class T>
GradCheckReport gradcheck_model(const GradCheckOptions& o, double floor = GradCheckTolerance<T>::floor) {
  const ArchConfig arch = make_arch(o.arch, o.dataset);
  auto net = Network<T>::make(arch, o.plain, o.tied, o.cycles, o.seed);
  std::mt19937_64 rng(o.seed * 7919 + 17);
  Tensor<T> images({o.batch, arch.input_channels, arch.input_size, arch.input_size});
  std::normal_distribution<double> pix(0.0, 1.0);
  for (auto& v : images.data()) v = T(pix(rng));
  std::vector<std::int32_t> labels(o.batch);
  std::uniform_int_distribution<std::int32_t> cls(0, std::int32_t(arch.num_classes) - 1);
  for (auto& l : labels) l = cls(rng);

  auto params = net.parameters();
  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape;
    auto loss = softmax_cross_entropy(net.logits(tape, images), labels);
    tape.backward(loss.loss);
  }

  auto oracle = cast_network<double>(net);
  auto oracle_params = oracle.parameters();
  const Tensor<double> images64 = images.template cast<double>();
  auto loss_and_sig = [&] {
    Tape<double> tape;
    tape.track_kinks(true);
    const double l = softmax_cross_entropy(oracle.logits(tape, images64), labels).loss.value().item();
    return std::pair<double, std::uint64_t>(l, tape.kink_signature());
  };

  const auto [base_loss, base_sig] = loss_and_sig();

  // coordinates per group, in parameter order
  std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> groups;
  std::vector<std::string> order;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto g = param_group(params[k]->name);
    if (!groups.count(g)) order.push_back(g);
    for (std::size_t i = 0; i < params[k]->value.numel(); ++i) groups[g].push_back({k, i});
  }

  GradCheckReport rep;
  for (const auto& g : order) {
    auto& coords = groups[g];
    std::vector<std::size_t> pick(coords.size());
    std::iota(pick.begin(), pick.end(), std::size_t(0));
    if (coords.size() > o.samples) {
      std::shuffle(pick.begin(), pick.end(), rng);
      pick.resize(o.samples);
    }
    GroupResult gr;
    gr.group = g;
    for (auto idx : pick) {
      auto [k, i] = coords[idx];
      const double analytic = double(params[k]->grad[i]);
      const auto numeric = kink_aware_diff(loss_and_sig, base_loss, base_sig, oracle_params[k]->value[i]);
      const double err = relative_error(analytic, numeric.value, floor);
      gr.max_abs_grad = std::max(gr.max_abs_grad, std::abs(analytic));
      gr.unsmooth += !numeric.smooth;
      if (gr.worst.empty() || err > gr.max_rel_err) {
        gr.max_rel_err = err;
        gr.worst = params[k]->name + "[" + std::to_string(i) + "]";
      }
      ++gr.checked;
    }
    rep.max_rel_err = std::max(rep.max_rel_err, gr.max_rel_err);
    rep.groups.push_back(std::move(gr));
  }
  return rep;
}

}  // namespace pcn
