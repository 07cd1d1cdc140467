#pragma once

// SGD with momentum, Adam, and step learning-rate schedules. Weight decay is
// the L2 kind (added to the gradient) and skips parameters whose decay flag is off.

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "pcn/autodiff.hpp"

namespace pcn {

/// Piecewise-constant schedule: lr = initial * factor^(milestones passed).
struct StepSchedule {
  double initial_lr = 1e-3;
  std::vector<int> milestones;
  double factor = 0.1;
  int total_epochs = 40;

  void validate() const {
    if (!(initial_lr >= 0)) throw std::invalid_argument("learning rate must be non-negative");
    if (total_epochs < 0) throw std::invalid_argument("total epochs must be non-negative");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] <= 0 || milestones[i] >= total_epochs)
        throw std::invalid_argument("milestone " + std::to_string(milestones[i]) + " must lie in (0, " +
                                    std::to_string(total_epochs) + ")");
      if (i && milestones[i] <= milestones[i - 1]) throw std::invalid_argument("milestones must strictly increase");
    }
  }

  double lr_at(int epoch) const {
    if (epoch < 0 || epoch >= total_epochs)
      throw std::out_of_range("epoch " + std::to_string(epoch) + " outside schedule of " +
                              std::to_string(total_epochs) + " epochs");
    double lr = initial_lr;
    for (int m : milestones)
      if (epoch >= m) lr *= factor;
    return lr;
  }

  /// Dash-separated phase lengths, e.g. "20-10-10".
  std::string phases() const {
    std::ostringstream os;
    int prev = 0;
    for (int m : milestones) {
      os << (m - prev) << '-';
      prev = m;
    }
    os << (total_epochs - prev);
    return os.str();
  }

  /// CIFAR: SGD from 0.01, divided by 10 at epochs 80, 140 and 200, 250 epochs.
  static StepSchedule cifar() { return {0.01, {80, 140, 200}, 0.1, 250}; }
  /// MNIST/SVHN "20-10-10": Adam from 1e-3, 20 epochs, then 10 at 1e-4, then 10 at 1e-5.
  static StepSchedule adam_20_10_10() { return {1e-3, {20, 30}, 0.1, 40}; }
};

enum class OptimizerKind { Sgd, Adam };

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

namespace detail {
template <class T>
void check_buffers(std::vector<Tensor<T>>& bufs, const std::vector<Parameter<T>*>& params) {
  if (bufs.empty()) {
    for (auto* p : params) bufs.emplace_back(p->value.shape());
    return;
  }
  if (bufs.size() != params.size()) throw std::invalid_argument("optimizer used with a different parameter list");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (bufs[i].shape() != params[i]->value.shape())
      throw ShapeError("optimizer state for " + params[i]->name + " has shape " + shape_str(bufs[i].shape()));
}

template <class T>
double decayed_grad(const Parameter<T>& p, std::size_t i, double wd) {
  return p.decay ? double(p.grad[i]) + wd * double(p.value[i]) : double(p.grad[i]);
}
}  // namespace detail

/// v <- m v + g';  w <- w - lr v
template <class T>
struct SgdMomentum {
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<Tensor<T>> velocity;

  void step(const std::vector<Parameter<T>*>& params, double lr) {
    detail::check_buffers(velocity, params);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter<T>& p = *params[k];
      Tensor<T>& v = velocity[k];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = detail::decayed_grad(p, i, weight_decay);
        v[i] = T(momentum * double(v[i]) + g);
        p.value[i] = T(double(p.value[i]) - lr * double(v[i]));
      }
    }
  }
};

/// Bias-corrected Adam with the L2 term folded into the gradient.
template <class T>
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  std::vector<Tensor<T>> m, v;
  long long steps = 0;

  void step(const std::vector<Parameter<T>*>& params, double lr) {
    detail::check_buffers(m, params);
    detail::check_buffers(v, params);
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, double(steps));
    const double c2 = 1.0 - std::pow(beta2, double(steps));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter<T>& p = *params[k];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = detail::decayed_grad(p, i, weight_decay);
        const double mi = beta1 * double(m[k][i]) + (1 - beta1) * g;
        const double vi = beta2 * double(v[k][i]) + (1 - beta2) * g * g;
        m[k][i] = T(mi);
        v[k][i] = T(vi);
        p.value[i] = T(double(p.value[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
      }
    }
  }
};

/// Either optimizer behind one interface.
template <class T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind, double weight_decay = 5e-4) : kind_(kind) {
    sgd_.weight_decay = weight_decay;
    adam_.weight_decay = weight_decay;
  }
  void step(const std::vector<Parameter<T>*>& params, double lr) {
    if (kind_ == OptimizerKind::Sgd)
      sgd_.step(params, lr);
    else
      adam_.step(params, lr);
  }
  OptimizerKind kind() const { return kind_; }

 private:
  OptimizerKind kind_;
  SgdMomentum<T> sgd_;
  Adam<T> adam_;
};

}  // namespace pcn
