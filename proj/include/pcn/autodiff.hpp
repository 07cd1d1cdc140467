#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcn/kernels.hpp"
#include "pcn/tensor.hpp"

namespace pcn {

/// Learnable tensor with its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;  // participates in weight decay

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool decayed)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(decayed) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

enum class OpKind : std::uint8_t {
  Constant,
  Leaf,
  Conv2d,
  ConvTranspose2d,
  MaxPool2x2,
  Upsample2x,
  Relu,
  AxpyRelu,
  ConvexMixRelu,
  Sub,
  Add,
  GlobalAvgPool,
  Linear,
  SoftmaxCrossEntropy,
  Sum,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Constant: return "constant";
    case OpKind::Leaf: return "parameter";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::ConvTranspose2d: return "conv_transpose2d";
    case OpKind::MaxPool2x2: return "maxpool2x2";
    case OpKind::Upsample2x: return "bilinear_upsample2x";
    case OpKind::Relu: return "relu";
    case OpKind::AxpyRelu: return "axpy_relu";
    case OpKind::ConvexMixRelu: return "convex_mix_relu";
    case OpKind::Sub: return "sub";
    case OpKind::Add: return "add";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Linear: return "linear";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::Sum: return "sum";
  }
  return "?";
}

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

/// Records a computation graph in creation (= topological) order and runs
/// reverse-mode differentiation over it.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  struct Node {
    OpKind op;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(OpKind::Constant, std::move(v), {}, nullptr); }

  /// Leaf bound to a parameter. Repeated calls return the same node, so every
  /// use of the parameter contributes to one accumulated gradient.
  Var<T> param(Parameter<T>& p) {
    if (auto it = leaves_.find(&p); it != leaves_.end()) return {this, it->second};
    Var<T> v = push(OpKind::Leaf, p.value, {}, nullptr);
    nodes_[v.id].param = &p;
    nodes_[v.id].requires_grad = true;
    leaves_.emplace(&p, v.id);
    return v;
  }

  /// Optional fingerprint of every piecewise-linear decision (ReLU on/off,
  /// max-pool winner). Central differences are only meaningful when the
  /// fingerprint at both probes equals the one at the base point.
  void track_kinks(bool on) { track_kinks_ = on; }
  bool tracking_kinks() const noexcept { return track_kinks_; }
  std::uint64_t kink_signature() const noexcept { return kink_sig_; }
  void mix_kink(std::uint64_t v) noexcept { kink_sig_ = (kink_sig_ ^ v) * 0x100000001b3ULL; }
  void mix_positive_mask(const Tensor<T>& y) noexcept {
    if (!track_kinks_) return;
    const std::size_t n = y.numel();
    for (std::size_t base = 0; base < n; base += 64) {
      std::uint64_t word = 0;
      const std::size_t end = std::min(n, base + 64);
      for (std::size_t i = base; i < end; ++i) word |= std::uint64_t(y[i] > T(0)) << (i - base);
      mix_kink(word);
    }
    mix_kink(n);
  }

  /// Detached copy of a value: gradients never flow through it.
  Var<T> detach(Var<T> v) { return constant(v.value()); }

  Var<T> push(OpKind op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    if (!value.all_finite())
      throw NumericError(std::string("non-finite value produced by ") + op_name(op));
    Node n{op, std::move(value), {}, std::move(inputs), std::move(fn), nullptr, false};
    for (auto i : n.inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    if (!n.requires_grad) n.backward = nullptr;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  OpKind op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds `g` into the gradient slot of node `id` (no-op for constants).
  void accumulate(std::size_t id, Tensor<T> g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty())
      n.grad = std::move(g);
    else
      n.grad += g;
  }

  /// Gradient slot of `id`, allocated as zeros; null when the node needs no gradient.
  Tensor<T>* grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

  /// Reverse sweep from a scalar node; adds leaf gradients into Parameter::grad.
  void backward(Var<T> loss) {
    const Node& root = nodes_.at(loss.id);
    if (root.value.numel() != 1)
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root.value.shape()));
    backward_from(loss, Tensor<T>(root.value.shape(), T(1)));
  }

  /// Vector-Jacobian product: reverse sweep from `out` seeded with `seed`.
  void backward_from(Var<T> out, const Tensor<T>& seed) {
    Tensor<T>::require_same_shape(nodes_.at(out.id).value, seed, "backward seed");
    if (!nodes_[out.id].requires_grad) return;
    nodes_[out.id].grad = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        Tensor<T> g = std::move(n.grad);
        n.grad = Tensor<T>();
        n.backward(*this, g);
      }
    }
  }

 private:
  std::deque<Node> nodes_;  // stable addresses: value() references survive later ops
  bool track_kinks_ = false;
  std::uint64_t kink_sig_ = 1469598103934665603ULL;
  std::unordered_map<const Parameter<T>*, std::size_t> leaves_;
};

namespace detail {
template <class T>
Tape<T>& same_tape(std::initializer_list<Var<T>> vars) {
  Tape<T>* t = vars.begin()->tape;
  for (const auto& v : vars)
    if (v.tape != t) throw std::logic_error("operands recorded on different tapes");
  return *t;
}

inline void check_rate(const Shape& rate, const Shape& r, const char* what) {
  if (rate.size() != 1 || r.size() != 4 || rate[0] != r[1])
    throw ShapeError(std::string(what) + ": rate " + shape_str(rate) + " does not match channels of " +
                     shape_str(r));
}
}  // namespace detail

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, const Var<T>* bias = nullptr) {
  Tape<T>& tape = detail::same_tape({x, w});
  Tensor<T> y = kernels::conv2d(x.value(), w.value(), bias ? &bias->value() : nullptr);
  std::vector<std::size_t> in{x.id, w.id};
  if (bias) in.push_back(bias->id);
  const bool has_bias = bias != nullptr;
  const std::size_t xi = x.id, wi = w.id, bi = bias ? bias->id : 0;
  return tape.push(OpKind::Conv2d, std::move(y), std::move(in),
                   [xi, wi, bi, has_bias](Tape<T>& t, const Tensor<T>& g) {
                     kernels::conv2d_backward(t.value(xi), t.value(wi), g, t.grad_slot(xi),
                                              t.grad_slot(wi), has_bias ? t.grad_slot(bi) : nullptr);
                   });
}

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias) {
  return conv2d(x, w, &bias);
}

template <class T>
Var<T> conv_transpose2d(Var<T> y, Var<T> w) {
  Tape<T>& tape = detail::same_tape({y, w});
  Tensor<T> x = kernels::conv_transpose2d(y.value(), w.value());
  const std::size_t yi = y.id, wi = w.id;
  return tape.push(OpKind::ConvTranspose2d, std::move(x), {yi, wi},
                   [yi, wi](Tape<T>& t, const Tensor<T>& g) {
                     kernels::conv_transpose2d_backward(t.value(yi), t.value(wi), g, t.grad_slot(yi),
                                                        t.grad_slot(wi));
                   });
}

template <class T>
Var<T> maxpool2x2(Var<T> x) {
  std::vector<std::uint32_t> argmax;
  Tensor<T> y = kernels::maxpool2x2(x.value(), &argmax);
  if (x.tape->tracking_kinks())
    for (auto a : argmax) x.tape->mix_kink(a);
  const std::size_t xi = x.id;
  return x.tape->push(OpKind::MaxPool2x2, std::move(y), {xi},
                      [xi, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& g) {
                        Tensor<T>* gx = t.grad_slot(xi);
                        for (std::size_t o = 0; o < argmax.size(); ++o) (*gx)[argmax[o]] += g[o];
                      });
}

template <class T>
Var<T> bilinear_upsample2x(Var<T> x) {
  Tensor<T> y = kernels::bilinear_upsample2x(x.value());
  const std::size_t xi = x.id;
  return x.tape->push(OpKind::Upsample2x, std::move(y), {xi}, [xi](Tape<T>& t, const Tensor<T>& g) {
    kernels::bilinear_upsample2x_backward(g, *t.grad_slot(xi));
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  auto y = Tensor<T>::uninit(xv.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  x.tape->mix_positive_mask(y);
  const std::size_t xi = x.id;
  return x.tape->push(OpKind::Relu, std::move(y), {xi}, [xi](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(xi);
    auto gx = Tensor<T>::uninit(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] = xv[i] > T(0) ? g[i] : T(0);
    t.accumulate(xi, std::move(gx));
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape({a, b});
  Tensor<T> y = a.value();
  y += b.value();
  const std::size_t ai = a.id, bi = b.id;
  return tape.push(OpKind::Add, std::move(y), {ai, bi}, [ai, bi](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ai, g);
    t.accumulate(bi, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape({a, b});
  Tensor<T> y = a.value() - b.value();
  const std::size_t ai = a.id, bi = b.id;
  return tape.push(OpKind::Sub, std::move(y), {ai, bi}, [ai, bi](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ai, g);
    if (t.requires_grad(bi)) {
      auto gb = Tensor<T>::uninit(g.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] = -g[i];
      t.accumulate(bi, std::move(gb));
    }
  });
}

/// Sum of all elements, as a scalar node.
template <class T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (auto v : x.value().data()) s += v;
  const std::size_t xi = x.id;
  return x.tape->push(OpKind::Sum, Tensor<T>::scalar(s), {xi}, [xi](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(xi, Tensor<T>(t.value(xi).shape(), g[0]));
  });
}

/// Representation update driven by a bottom-up signal, with an optional
/// rectifier: out = relu(r + rate (.) delta), rate broadcast per channel.
template <class T>
Var<T> axpy_relu(Var<T> r, Var<T> rate, Var<T> delta, bool rectify = true) {
  Tape<T>& tape = detail::same_tape({r, rate, delta});
  detail::check_rate(rate.shape(), r.shape(), "axpy_relu");
  Tensor<T>::require_same_shape(r.value(), delta.value(), "axpy_relu");
  const auto [N, C, H, W] = dims4(r.shape(), "axpy_relu");
  const std::size_t hw = H * W;
  const Tensor<T>&rv = r.value(), &av = rate.value(), &dv = delta.value();
  auto y = Tensor<T>::uninit(rv.shape());
  for (std::size_t p = 0; p < N * C; ++p) {
    const T a = av[p % C];
    for (std::size_t i = p * hw; i < (p + 1) * hw; ++i) {
      const T v = rv[i] + a * dv[i];
      y[i] = (!rectify || v > T(0)) ? v : T(0);
    }
  }
  if (rectify) tape.mix_positive_mask(y);
  const std::size_t ri = r.id, ai = rate.id, di = delta.id, out = tape.size();
  return tape.push(OpKind::AxpyRelu, std::move(y), {ri, ai, di},
                   [=](Tape<T>& t, const Tensor<T>& g) {
                     const Tensor<T>&yv = t.value(out), &av = t.value(ai), &dv = t.value(di);
                     Tensor<T>* gr = t.grad_slot(ri);
                     Tensor<T>* ga = t.grad_slot(ai);
                     Tensor<T>* gd = t.grad_slot(di);
                     for (std::size_t p = 0; p < N * C; ++p) {
                       const T a = av[p % C];
                       T acc = 0;
                       for (std::size_t i = p * hw; i < (p + 1) * hw; ++i) {
                         // the rectifier passes gradient only where the output is positive
                         const T gi = (!rectify || yv[i] > T(0)) ? g[i] : T(0);
                         if (gr) (*gr)[i] += gi;
                         if (gd) (*gd)[i] += a * gi;
                         acc += dv[i] * gi;
                       }
                       if (ga) (*ga)[p % C] += acc;
                     }
                   });
}

/// Top-down update: out = relu((1 - rate) (.) r + rate (.) p), rate broadcast per channel.
template <class T>
Var<T> convex_mix_relu(Var<T> r, Var<T> rate, Var<T> p, bool rectify = true) {
  Tape<T>& tape = detail::same_tape({r, rate, p});
  detail::check_rate(rate.shape(), r.shape(), "convex_mix_relu");
  Tensor<T>::require_same_shape(r.value(), p.value(), "convex_mix_relu");
  const auto [N, C, H, W] = dims4(r.shape(), "convex_mix_relu");
  const std::size_t hw = H * W;
  const Tensor<T>&rv = r.value(), &bv = rate.value(), &pv = p.value();
  auto y = Tensor<T>::uninit(rv.shape());
  for (std::size_t q = 0; q < N * C; ++q) {
    const T b = bv[q % C];
    for (std::size_t i = q * hw; i < (q + 1) * hw; ++i) {
      const T v = (T(1) - b) * rv[i] + b * pv[i];
      y[i] = (!rectify || v > T(0)) ? v : T(0);
    }
  }
  if (rectify) tape.mix_positive_mask(y);
  const std::size_t ri = r.id, bi = rate.id, pi = p.id, out = tape.size();
  return tape.push(OpKind::ConvexMixRelu, std::move(y), {ri, bi, pi},
                   [=](Tape<T>& t, const Tensor<T>& g) {
                     const Tensor<T>&yv = t.value(out), &rv = t.value(ri), &bv = t.value(bi),
                                     &pv = t.value(pi);
                     Tensor<T>* gr = t.grad_slot(ri);
                     Tensor<T>* gb = t.grad_slot(bi);
                     Tensor<T>* gp = t.grad_slot(pi);
                     for (std::size_t q = 0; q < N * C; ++q) {
                       const T b = bv[q % C];
                       T acc = 0;
                       for (std::size_t i = q * hw; i < (q + 1) * hw; ++i) {
                         const T gi = (!rectify || yv[i] > T(0)) ? g[i] : T(0);
                         if (gr) (*gr)[i] += (T(1) - b) * gi;
                         if (gp) (*gp)[i] += b * gi;
                         acc += (pv[i] - rv[i]) * gi;
                       }
                       if (gb) (*gb)[q % C] += acc;
                     }
                   });
}

template <class T>
Var<T> global_avg_pool(Var<T> x) {
  Tensor<T> y = kernels::global_avg_pool(x.value());
  const std::size_t xi = x.id;
  return x.tape->push(OpKind::GlobalAvgPool, std::move(y), {xi}, [xi](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.grad_slot(xi);
    const std::size_t hw = gx->dim(2) * gx->dim(3);
    for (std::size_t p = 0; p < g.numel(); ++p) {
      const T v = g[p] / T(hw);
      for (std::size_t i = p * hw; i < (p + 1) * hw; ++i) (*gx)[i] += v;
    }
  });
}

template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>& tape = detail::same_tape({x, w, b});
  Tensor<T> y = kernels::linear(x.value(), w.value(), b.value());
  const std::size_t xi = x.id, wi = w.id, bi = b.id;
  return tape.push(OpKind::Linear, std::move(y), {xi, wi, bi},
                   [xi, wi, bi](Tape<T>& t, const Tensor<T>& g) {
                     using M = kernels::RowMat<T>;
                     const Tensor<T>&xv = t.value(xi), &wv = t.value(wi);
                     const std::size_t B = xv.dim(0), C = xv.dim(1), K = wv.dim(0);
                     Eigen::Map<const M> gm(g.data().data(), B, K);
                     if (Tensor<T>* gx = t.grad_slot(xi))
                       Eigen::Map<M>(gx->data().data(), B, C).noalias() +=
                           gm * Eigen::Map<const M>(wv.data().data(), K, C);
                     if (Tensor<T>* gw = t.grad_slot(wi))
                       Eigen::Map<M>(gw->data().data(), K, C).noalias() +=
                           gm.transpose() * Eigen::Map<const M>(xv.data().data(), B, C);
                     if (Tensor<T>* gb = t.grad_slot(bi))
                       for (std::size_t i = 0; i < B; ++i)
                         for (std::size_t k = 0; k < K; ++k) (*gb)[k] += g[i * K + k];
                   });
}

template <class T>
struct LossResult {
  Var<T> loss;
  Tensor<T> probs;
};

/// Mean negative log-likelihood of integer labels under a max-subtracted softmax.
template <class T>
LossResult<T> softmax_cross_entropy(Var<T> logits, std::span<const std::int32_t> labels) {
  const Tensor<T>& lv = logits.value();
  if (lv.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [B,K]");
  const std::size_t B = lv.dim(0), K = lv.dim(1);
  if (labels.size() != B)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(B));
  for (auto l : labels)
    if (l < 0 || std::size_t(l) >= K)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(l) + " outside [0," +
                              std::to_string(K) + ")");
  Tensor<T> probs = kernels::softmax(lv);
  double nll = 0;
  for (std::size_t i = 0; i < B; ++i) {
    const T* row = lv.data().data() + i * K;
    const T m = *std::max_element(row, row + K);
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(double(row[k] - m));
    nll += std::log(s) - double(row[labels[i]] - m);
  }
  const std::size_t li = logits.id;
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  Var<T> loss = logits.tape->push(OpKind::SoftmaxCrossEntropy, Tensor<T>::scalar(T(nll / double(B))), {li},
                                  [li, probs, lab = std::move(lab), B, K](Tape<T>& t, const Tensor<T>& g) {
                                    Tensor<T> gl = probs;
                                    for (std::size_t i = 0; i < B; ++i) gl[i * K + lab[i]] -= T(1);
                                    const T s = g[0] / T(B);
                                    for (auto& v : gl.data()) v *= s;
                                    t.accumulate(li, gl);
                                  });
  return {loss, std::move(probs)};
}

/// Central difference (f(x+h) - f(x-h)) / 2h of a scalar function around one
/// parameter coordinate; the coordinate is restored afterwards.
template <class T, class F>
double finite_diff_grad(F&& f, T& coordinate, T h) {
  if (!(h > T(0))) throw std::invalid_argument("finite_diff_grad: step must be positive");
  const T saved = coordinate;
  coordinate = saved + h;
  const double fp = double(f());
  coordinate = saved - h;
  const double fm = double(f());
  coordinate = saved;
  return (fp - fm) / (2.0 * double(h));
}

}  // namespace pcn
