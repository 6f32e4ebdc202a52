#pragma once

// Noise schedules and the closed-form forward (corruption) process.
//
// Step indices are 1-based: step t in 1..T uses betas[t-1]. alpha_bar(0) == 1.

#include <optional>

#include <nlohmann/json.hpp>

#include "dime/tensor.hpp"

namespace dime {

class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  // Builds a schedule from per-step variances. Model timesteps default to 1..T.
  static NoiseSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw std::invalid_argument("schedule needs at least one step");
    NoiseSchedule s;
    s.alphas_bar_.reserve(betas.size());
    double a = 1.0;
    for (double b : betas) {
      if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta outside (0,1): " + std::to_string(b));
      a *= (1.0 - b);
      s.alphas_bar_.push_back(a);
    }
    s.betas_ = std::move(betas);
    s.model_steps_.resize(s.betas_.size());
    std::iota(s.model_steps_.begin(), s.model_steps_.end(), 1);
    return s;
  }

  int num_steps() const { return static_cast<int>(betas_.size()); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas_bar() const { return alphas_bar_; }
  std::optional<int> respaced_from() const { return respaced_from_; }

  double beta(int t) const { return betas_.at(check(t) - 1); }
  double alpha_bar(int t) const {
    if (t == 0) return 1.0;
    return alphas_bar_.at(check(t) - 1);
  }
  // Timestep the denoiser was trained with for active step t.
  int model_step(int t) const { return model_steps_.at(check(t) - 1); }

  // Variance of q(z_{t-1} | z_t, x); zero at t = 1.
  double posterior_variance(int t) const {
    return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t));
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"betas", betas_}, {"num_steps", num_steps()}};
    if (respaced_from_) {
      j["respaced_from"] = *respaced_from_;
      j["model_steps"] = model_steps_;
      j["alphas_bar"] = alphas_bar_;
    }
    return j;
  }

  static NoiseSchedule from_json(const nlohmann::json& j) {
    auto s = from_betas(j.at("betas").get<std::vector<double>>());
    if (j.at("num_steps").get<int>() != s.num_steps()) throw std::runtime_error("schedule num_steps mismatch");
    if (j.contains("respaced_from")) {
      s.respaced_from_ = j.at("respaced_from").get<int>();
      s.model_steps_ = j.at("model_steps").get<std::vector<int>>();
      s.alphas_bar_ = j.at("alphas_bar").get<std::vector<double>>();
      if (s.model_steps_.size() != s.betas_.size() || s.alphas_bar_.size() != s.betas_.size())
        throw std::runtime_error("respaced schedule arrays disagree in length");
    }
    return s;
  }

  friend NoiseSchedule respace(const NoiseSchedule& base, std::span<const int> keep);

 private:
  int check(int t) const {
    if (t < 1 || t > num_steps())
      throw std::out_of_range("step " + std::to_string(t) + " outside 1.." + std::to_string(num_steps()));
    return t;
  }

  std::vector<double> betas_;
  std::vector<double> alphas_bar_;
  std::vector<int> model_steps_;
  std::optional<int> respaced_from_;
};

inline NoiseSchedule build_linear_schedule(int num_steps, double beta_start, double beta_end) {
  if (num_steps < 1) throw std::invalid_argument("num_steps must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(num_steps);
  for (int i = 0; i < num_steps; ++i)
    betas[i] = num_steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (num_steps - 1);
  return NoiseSchedule::from_betas(std::move(betas));
}

// Linear schedule with the 1e-4..0.02 range of a 1000-step chain rescaled to num_steps.
inline NoiseSchedule build_default_schedule(int num_steps) {
  const double k = 1000.0 / num_steps;
  return build_linear_schedule(num_steps, 1e-4 * k, std::min(0.02 * k, 0.999));
}

inline NoiseSchedule build_cosine_schedule(int num_steps, double offset = 0.008) {
  if (num_steps < 1) throw std::invalid_argument("num_steps must be positive");
  auto f = [&](double t) {
    const double c = std::cos((t / num_steps + offset) / (1 + offset) * 3.14159265358979323846 / 2);
    return c * c;
  };
  std::vector<double> betas(num_steps);
  for (int i = 0; i < num_steps; ++i) betas[i] = std::min(1.0 - f(i + 1) / f(i), 0.999);
  return NoiseSchedule::from_betas(std::move(betas));
}

// Keeps a strictly increasing subset of steps, preserving alpha_bar at each kept index.
inline NoiseSchedule respace(const NoiseSchedule& base, std::span<const int> keep) {
  if (keep.empty()) throw std::invalid_argument("respace: keep is empty");
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<int> steps;
  double prev = 1.0;
  int last = 0;
  for (int k : keep) {
    if (k <= last) throw std::invalid_argument("respace: keep must be strictly increasing");
    if (k > base.num_steps()) throw std::invalid_argument("respace: step beyond schedule length");
    const double a = base.alpha_bar(k);
    betas.push_back(1.0 - a / prev);
    alphas.push_back(a);
    steps.push_back(base.model_step(k));
    prev = a;
    last = k;
  }
  auto s = NoiseSchedule::from_betas(std::move(betas));
  s.alphas_bar_ = std::move(alphas);
  s.model_steps_ = std::move(steps);
  s.respaced_from_ = base.respaced_from_.value_or(base.num_steps());
  return s;
}

// Uniform stride over 1..T ending at T.
inline std::vector<int> uniform_keep(int total, int count) {
  if (count < 1 || count > total) throw std::invalid_argument("respace count must be in 1..T");
  std::vector<int> keep(count);
  for (int i = 0; i < count; ++i)
    keep[i] = static_cast<int>(std::llround(static_cast<double>(total) * (i + 1) / count));
  return keep;
}

// One recursive corruption step: sqrt(1-beta_t) z_{t-1} + sqrt(beta_t) noise.
template <typename T>
Tensor<T> forward_step(const NoiseSchedule& s, const Tensor<T>& z_prev, int t, const Tensor<T>& noise) {
  require_same_shape(z_prev, noise, "forward_step");
  const double b = s.beta(t);
  const T a = static_cast<T>(std::sqrt(1.0 - b)), c = static_cast<T>(std::sqrt(b));
  Tensor<T> out(z_prev.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * z_prev[i] + c * noise[i];
  return out;
}

// Direct corruption to step t: sqrt(alpha_t) x + sqrt(1-alpha_t) noise.
template <typename T>
Tensor<T> forward_sample(const NoiseSchedule& s, const Tensor<T>& x, int t, const Tensor<T>& noise) {
  require_same_shape(x, noise, "forward_sample");
  if (t < 1) throw std::out_of_range("forward_sample needs t >= 1");
  const double ab = s.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab)), c = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x[i] + c * noise[i];
  return out;
}

}  // namespace dime
