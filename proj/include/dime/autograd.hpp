#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// Every op produces a Var whose node remembers its parents and a closure that
// pushes the node's gradient into them. Graph recording is skipped entirely
// under NoGradGuard or when no input requires a gradient, so inference paths
// pay only for the forward computation.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <unordered_set>

#include "dime/tensor.hpp"

namespace dime::ag {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape);
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  bool requires_grad() const { return node_->requires_grad; }

  // Gradient accumulated by the last backward(); zeros when none reached this node.
  const Tensor<T>& grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  T item() const {
    if (value().numel() != 1) throw std::logic_error("item() on non-scalar Var");
    return value()[0];
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (auto& in : inputs) node.parents.push_back(in.node());
  node.backward_fn = std::move(fn);
  return out;
}

// Runs reverse accumulation from a scalar root.
template <typename T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1) throw std::logic_error("backward() requires a scalar root");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.numel() == n->value.numel()) n->backward_fn(*n);
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using ColMap = Eigen::Map<ColMat<T>>;
template <typename T>
using ConstColMap = Eigen::Map<const ColMat<T>>;

namespace detail {

struct ConvGeom {
  int c, h, w, k, stride, pad, ho, wo;
  int rows() const { return c * k * k; }
  int cols() const { return ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        T* dst = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * g.cols();
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride + ki - g.pad;
          T* row = dst + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(row, row + g.wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * g.h + ih) * g.w;
          if (g.stride == 1) {
            const int lo = std::max(0, g.pad - kj);
            const int hi = std::min(g.wo, g.w + g.pad - kj);
            std::fill(row, row + lo, T(0));
            if (hi > lo) std::copy(src + lo + kj - g.pad, src + hi + kj - g.pad, row + lo);
            std::fill(row + std::max(lo, hi), row + g.wo, T(0));
          } else {
            for (int ow = 0; ow < g.wo; ++ow) {
              const int iw = ow * g.stride + kj - g.pad;
              row[ow] = (iw >= 0 && iw < g.w) ? src[iw] : T(0);
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        const T* src = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * g.cols();
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride + ki - g.pad;
          if (ih < 0 || ih >= g.h) continue;
          T* dst = x + (static_cast<std::size_t>(c) * g.h + ih) * g.w;
          const T* row = src + oh * g.wo;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.stride + kj - g.pad;
            if (iw >= 0 && iw < g.w) dst[iw] += row[ow];
          }
        }
      }
}

}  // namespace detail

// 2-D convolution, NCHW input, weight [out, in, k, k], bias [out].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3])
    throw std::invalid_argument("conv2d: bad shapes " + shape_str(xs) + " * " + shape_str(ws));
  const int n = xs[0], out_c = ws[0];
  detail::ConvGeom g{xs[1], xs[2], xs[3], ws[2], stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;

  Tensor<T> out({n, out_c, g.ho, g.wo});
  std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
  const T* b = bias.value().ptr();
  const std::size_t in_sz = x.value().sample_size(), out_sz = out.sample_size();
  for (int i = 0; i < n; ++i) {
    detail::im2col(x.value().ptr() + i * in_sz, g, col.data());
    // Spatial-major product: the long spatial axis is the GEMM row dimension.
    ColMap<T> O(out.ptr() + i * out_sz, g.cols(), out_c);
    for (int o = 0; o < out_c; ++o) O.col(o).setConstant(b[o]);
    O.noalias() += ConstColMap<T>(col.data(), g.cols(), g.rows()) * ConstColMap<T>(weight.value().ptr(), g.rows(), out_c);
  }

  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_op<T>(std::move(out), {x, weight, bias}, [xn, wn, bn, g, n, out_c, in_sz, out_sz](Node<T>& self) {
    std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
    std::vector<T> dcol(col.size());
    ConstMatMap<T> W(wn->value.ptr(), out_c, g.rows());
    for (int i = 0; i < n; ++i) {
      ConstMatMap<T> dO(self.grad.ptr() + i * out_sz, out_c, g.cols());
      if (wn->requires_grad) {
        detail::im2col(xn->value.ptr() + i * in_sz, g, col.data());
        MatMap<T> dW(wn->ensure_grad().ptr(), out_c, g.rows());
        dW.noalias() += dO * ConstMatMap<T>(col.data(), g.rows(), g.cols()).transpose();
      }
      if (bn->requires_grad) {
        T* db = bn->ensure_grad().ptr();
        for (int o = 0; o < out_c; ++o) db[o] += dO.row(o).sum();
      }
      if (xn->requires_grad) {
        MatMap<T> dC(dcol.data(), g.rows(), g.cols());
        dC.noalias() = W.transpose() * dO;
        detail::col2im_add(dcol.data(), g, xn->ensure_grad().ptr() + i * in_sz);
      }
    }
  });
}

// y = x W^T + b with x [N, D], W [O, D], b [O].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
    throw std::invalid_argument("linear: bad shapes " + shape_str(xs) + " * " + shape_str(ws));
  const int n = xs[0], d = xs[1], o = ws[0];
  Tensor<T> out({n, o});
  MatMap<T> Y(out.ptr(), n, o);
  ConstMatMap<T> X(x.value().ptr(), n, d), W(weight.value().ptr(), o, d);
  // row by row so each output row is independent of the batch it came in
  for (int i = 0; i < n; ++i) {
    Y.row(i).noalias() = X.row(i) * W.transpose();
    for (int j = 0; j < o; ++j) Y(i, j) += bias.value()[j];
  }

  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_op<T>(std::move(out), {x, weight, bias}, [xn, wn, bn, n, d, o](Node<T>& self) {
    ConstMatMap<T> dY(self.grad.ptr(), n, o);
    if (xn->requires_grad)
      MatMap<T>(xn->ensure_grad().ptr(), n, d).noalias() += dY * ConstMatMap<T>(wn->value.ptr(), o, d);
    if (wn->requires_grad)
      MatMap<T>(wn->ensure_grad().ptr(), o, d).noalias() += dY.transpose() * ConstMatMap<T>(xn->value.ptr(), n, d);
    if (bn->requires_grad) {
      T* db = bn->ensure_grad().ptr();
      for (int j = 0; j < o; ++j) db[j] += dY.col(j).sum();
    }
  });
}

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto n = static_cast<Eigen::Index>(out.numel());
  ConstArrMap<T> v(x.value().ptr(), n);
  ArrMap<T>(out.ptr(), n) = v / (T(1) + (-v).exp());
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, n](Node<T>& self) {
    ConstArrMap<T> v(xn->value.ptr(), n);
    const auto s = (T(1) / (T(1) + (-v).exp())).eval();
    ArrMap<T>(xn->ensure_grad().ptr(), n) += ConstArrMap<T>(self.grad.ptr(), n) * s * (T(1) + v * (T(1) - s));
  });
}

// Scales every feature vector (the C values at one position) to unit length.
template <typename T>
Tensor<T> unit_channels(const Tensor<T>& x, Tensor<T>* norms = nullptr) {
  if (x.rank() != 4) throw std::invalid_argument("unit_channels expects [N, C, H, W]");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out(x.shape);
  if (norms) *norms = Tensor<T>({n, 1, x.dim(2), x.dim(3)});
  for (int i = 0; i < n; ++i)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = static_cast<std::size_t>(i) * c * hw + p;
      T ss = T(1e-10);
      for (int k = 0; k < c; ++k) ss += x[base + k * hw] * x[base + k * hw];
      const T r = std::sqrt(ss);
      for (int k = 0; k < c; ++k) out[base + k * hw] = x[base + k * hw] / r;
      if (norms) (*norms)[i * hw + p] = r;
    }
  return out;
}

template <typename T>
Var<T> unit_channels(const Var<T>& x) {
  Tensor<T> norms;
  Tensor<T> out = unit_channels(x.value(), &norms);
  auto xn = x.node();
  auto y = std::make_shared<Tensor<T>>(out);
  return make_op<T>(std::move(out), {x}, [xn, y, norms = std::move(norms)](Node<T>& self) {
    auto& g = xn->ensure_grad();
    const int n = y->dim(0), c = y->dim(1);
    const std::size_t hw = static_cast<std::size_t>(y->dim(2)) * y->dim(3);
    for (int i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t base = static_cast<std::size_t>(i) * c * hw + p;
        T dot = 0;
        for (int k = 0; k < c; ++k) dot += self.grad[base + k * hw] * (*y)[base + k * hw];
        const T r = norms[i * hw + p];
        for (int k = 0; k < c; ++k) g[base + k * hw] += (self.grad[base + k * hw] - (*y)[base + k * hw] * dot) / r;
      }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  for (auto& v : out.data) v *= s;
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, s](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
  });
}

// x [N, C, H, W] + e [N, C] broadcast over spatial positions.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& e) {
  const auto& xs = x.shape();
  if (xs.size() != 4 || e.shape() != Shape{xs[0], xs[1]})
    throw std::invalid_argument("add_channel_bias: bad shapes");
  const int nc = xs[0] * xs[1], hw = xs[2] * xs[3];
  Tensor<T> out = x.value();
  for (int i = 0; i < nc; ++i)
    for (int j = 0; j < hw; ++j) out[static_cast<std::size_t>(i) * hw + j] += e.value()[i];
  auto xn = x.node(), en = e.node();
  return make_op<T>(std::move(out), {x, e}, [xn, en, nc, hw](Node<T>& self) {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (en->requires_grad) {
      auto& g = en->ensure_grad();
      for (int i = 0; i < nc; ++i) {
        T s = 0;
        for (int j = 0; j < hw; ++j) s += self.grad[static_cast<std::size_t>(i) * hw + j];
        g[i] += s;
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const auto& xs = x.shape();
  const int nc = xs[0] * xs[1], h = xs[2], w = xs[3];
  Tensor<T> out({xs[0], xs[1], 2 * h, 2 * w});
  for (int c = 0; c < nc; ++c)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j)
        out[(static_cast<std::size_t>(c) * 2 * h + i) * 2 * w + j] = x.value()[(static_cast<std::size_t>(c) * h + i / 2) * w + j / 2];
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, nc, h, w](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (int c = 0; c < nc; ++c)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j)
          g[(static_cast<std::size_t>(c) * h + i / 2) * w + j / 2] += self.grad[(static_cast<std::size_t>(c) * 2 * h + i) * 2 * w + j];
  });
}

// [N, C, H, W] -> [N, C] spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& xs = x.shape();
  const int nc = xs[0] * xs[1], hw = xs[2] * xs[3];
  Tensor<T> out({xs[0], xs[1]});
  for (int i = 0; i < nc; ++i) {
    T s = 0;
    for (int j = 0; j < hw; ++j) s += x.value()[static_cast<std::size_t>(i) * hw + j];
    out[i] = s / T(hw);
  }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, nc, hw](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (int i = 0; i < nc; ++i)
      for (int j = 0; j < hw; ++j) g[static_cast<std::size_t>(i) * hw + j] += self.grad[i] / T(hw);
  });
}

// Scalar sum_i x_i * w_i against a constant weight tensor.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  require_same_shape(x.value(), weights, "weighted_sum");
  T s = 0;
  for (std::size_t i = 0; i < weights.numel(); ++i) s += x.value()[i] * weights[i];
  auto xn = x.node();
  return make_op<T>(Tensor<T>({1}, {s}), {x}, [xn, weights](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[0] * weights[i];
  });
}

// Scalar factor * sum_i (x_i - target_i)^2 against a constant target.
template <typename T>
Var<T> scaled_sq_error(const Var<T>& x, const Tensor<T>& target, T factor) {
  require_same_shape(x.value(), target, "scaled_sq_error");
  T s = 0;
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const T d = x.value()[i] - target[i];
    s += d * d;
  }
  auto xn = x.node();
  return make_op<T>(Tensor<T>({1}, {factor * s}), {x}, [xn, target, factor](Node<T>& self) {
    auto& g = xn->ensure_grad();
    const T k = T(2) * factor * self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += k * (xn->value[i] - target[i]);
  });
}

template <typename T>
Var<T> mse(const Var<T>& x, const Tensor<T>& target) {
  return scaled_sq_error(x, target, T(1) / T(target.numel()));
}

// Mean binary cross-entropy over all entries, logits against {0,1} targets.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
  require_same_shape(logits.value(), targets, "bce_with_logits");
  const auto& z = logits.value();
  T s = 0;
  for (std::size_t i = 0; i < z.numel(); ++i)
    s += std::max(z[i], T(0)) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
  const T inv = T(1) / T(z.numel());
  auto ln = logits.node();
  return make_op<T>(Tensor<T>({1}, {s * inv}), {logits}, [ln, targets, inv](Node<T>& self) {
    auto& g = ln->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T p = T(1) / (T(1) + std::exp(-ln->value[i]));
      g[i] += self.grad[0] * inv * (p - targets[i]);
    }
  });
}

template <typename T>
Var<T> sum(const std::vector<Var<T>>& terms) {
  if (terms.empty()) throw std::invalid_argument("sum of no terms");
  Var<T> acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace dime::ag
