#pragma once

#include <map>
#include <string>

#include "dime/autograd.hpp"

namespace dime::nn {

using ag::Var;

template <typename T>
struct ParamRef {
  std::string name;
  Var<T>* var;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

// Named float32 weights as stored in checkpoints.
using WeightMap = std::map<std::string, Tensor<float>>;

template <typename T>
Var<T> param_uniform(const Shape& shape, T bound, Rng& rng) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
  return Var<T>(std::move(t), true);
}

template <typename T>
struct Conv2d {
  Var<T> weight, bias;
  int stride = 1, pad = 1;

  Conv2d() = default;
  Conv2d(int in_c, int out_c, int k, int stride_, int pad_, Rng& rng, T gain = T(1)) : stride(stride_), pad(pad_) {
    const T bound = gain / std::sqrt(T(in_c * k * k));
    weight = param_uniform<T>({out_c, in_c, k, k}, bound, rng);
    bias = param_uniform<T>({out_c}, bound, rng);
  }
  Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

template <typename T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(int in_f, int out_f, Rng& rng, T gain = T(1)) {
    const T bound = gain / std::sqrt(T(in_f));
    weight = param_uniform<T>({out_f, in_f}, bound, rng);
    bias = param_uniform<T>({out_f}, bound, rng);
  }
  Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight, bias); }
  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

template <typename T>
WeightMap export_weights(const ParamList<T>& params) {
  WeightMap out;
  for (const auto& p : params) out[p.name] = p.var->value().template cast<float>();
  return out;
}

// Overwrites every parameter from the map; names and shapes must match exactly.
template <typename T>
void import_weights(const ParamList<T>& params, const WeightMap& weights) {
  if (weights.size() != params.size())
    throw std::runtime_error("weight map has " + std::to_string(weights.size()) + " tensors, model expects " +
                             std::to_string(params.size()));
  for (const auto& p : params) {
    auto it = weights.find(p.name);
    if (it == weights.end()) throw std::runtime_error("missing weight tensor " + p.name);
    if (it->second.shape != p.var->shape())
      throw std::runtime_error("weight " + p.name + " has shape " + shape_str(it->second.shape) + ", expected " +
                               shape_str(p.var->shape()));
    p.var->mutable_value() = it->second.template cast<T>();
  }
}

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) p.var->zero_grad();
}

template <typename T>
std::size_t count_params(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var->value().numel();
  return n;
}

// Adam with decoupled weight decay and optional global-norm clipping.
template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0 disables clipping
  };

  Adam(const ParamList<T>& params, Options opt) : params_(params), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var->shape());
      v_.emplace_back(p.var->shape());
    }
  }

  // Returns the pre-clipping global gradient norm.
  double step() {
    ++t_;
    double sq = 0;
    for (const auto& p : params_) {
      const auto& g = p.var->grad();
      for (auto x : g.data) sq += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(sq);
    const double clip = (opt_.clip_norm > 0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& w = params_[k].var->mutable_value();
      const auto& g = params_[k].var->grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const double gi = g[i] * clip;
        m[i] = static_cast<T>(opt_.beta1 * m[i] + (1 - opt_.beta1) * gi);
        v[i] = static_cast<T>(opt_.beta2 * v[i] + (1 - opt_.beta2) * gi * gi);
        const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
        w[i] = static_cast<T>(w[i] - opt_.lr * (upd + opt_.weight_decay * w[i]));
      }
    }
    return norm;
  }

  void set_lr(double lr) { opt_.lr = lr; }

 private:
  ParamList<T> params_;
  Options opt_;
  std::vector<Tensor<T>> m_, v_;
  int t_ = 0;
};

// Exponential moving average of a parameter set.
template <typename T>
class Ema {
 public:
  Ema(const ParamList<T>& params, double decay) : decay_(decay) {
    for (const auto& p : params) shadow_[p.name] = p.var->value();
  }
  void update(const ParamList<T>& params) {
    for (const auto& p : params) {
      auto& s = shadow_.at(p.name);
      const auto& w = p.var->value();
      for (std::size_t i = 0; i < w.numel(); ++i) s[i] = static_cast<T>(decay_ * s[i] + (1 - decay_) * w[i]);
    }
  }
  WeightMap weights() const {
    WeightMap out;
    for (const auto& [k, v] : shadow_) out[k] = v.template cast<float>();
    return out;
  }

 private:
  double decay_;
  std::map<std::string, Tensor<T>> shadow_;
};

}  // namespace dime::nn
