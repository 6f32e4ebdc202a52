#pragma once

// Reverse (denoising) chain of the diffusion model and epsilon-matching training.

#include <chrono>
#include <concepts>
#include <functional>

#include "dime/denoiser.hpp"
#include "dime/schedule.hpp"

namespace dime {

// Anything that maps (noisy batch, per-sample model timesteps) to predicted noise.
template <typename M>
concept NoisePredictor = requires(const M& m, const Tensor<float>& z, std::span<const int> t) {
  { m.predict_noise(z, t) } -> std::convertible_to<Tensor<float>>;
};

struct SamplerOptions {
  // Clamp the implied clean image to [-1, 1] before forming the posterior mean.
  bool clip_denoised = true;
};

struct DenoiserOutput {
  Tensor<float> predicted_noise;
  Tensor<float> mean;
  double variance = 0.0;
};

// Per-row noise, each row drawn from its own stream.
inline Tensor<float> randn_rows(const Shape& shape, std::span<Rng> rngs) {
  Tensor<float> t(shape);
  if (rngs.size() != static_cast<std::size_t>(shape.at(0)))
    throw std::invalid_argument("one rng per batch row required");
  for (std::size_t n = 0; n < rngs.size(); ++n) fill_normal<float>(t.sample(static_cast<int>(n)), rngs[n]);
  return t;
}

template <NoisePredictor Model>
DenoiserOutput predict_mean_variance(const Model& model, const NoiseSchedule& s, const Tensor<float>& z_t, int t,
                                     SamplerOptions opt = {}) {
  if (t < 1 || t > s.num_steps()) throw std::out_of_range("predict_mean_variance: step out of range");
  if (!all_finite(z_t)) throw std::runtime_error("predict_mean_variance: non-finite input at step " + std::to_string(t));
  const std::vector<int> steps(z_t.dim(0), s.model_step(t));
  DenoiserOutput out;
  out.predicted_noise = model.predict_noise(z_t, steps);
  require_same_shape(out.predicted_noise, z_t, "denoiser output");
  if (!all_finite(out.predicted_noise))
    throw std::runtime_error("denoiser produced non-finite output at step " + std::to_string(t));

  const double a_t = s.alpha_bar(t), a_prev = s.alpha_bar(t - 1), b_t = s.beta(t);
  out.variance = s.posterior_variance(t);
  out.mean = Tensor<float>(z_t.shape);
  const auto& eps = out.predicted_noise;
  if (!opt.clip_denoised) {
    const double k = 1.0 / std::sqrt(1.0 - b_t);
    const double c = b_t / std::sqrt(1.0 - a_t);
    for (std::size_t i = 0; i < z_t.numel(); ++i) out.mean[i] = static_cast<float>(k * (z_t[i] - c * eps[i]));
    return out;
  }
  const double inv_sa = 1.0 / std::sqrt(a_t), s1ma = std::sqrt(1.0 - a_t);
  const double c_x0 = std::sqrt(a_prev) * b_t / (1.0 - a_t);
  const double c_zt = std::sqrt(1.0 - b_t) * (1.0 - a_prev) / (1.0 - a_t);
  for (std::size_t i = 0; i < z_t.numel(); ++i) {
    const double x0 = std::clamp((z_t[i] - s1ma * eps[i]) * inv_sa, -1.0, 1.0);
    out.mean[i] = static_cast<float>(c_x0 * x0 + c_zt * z_t[i]);
  }
  return out;
}

// mean + sigma * noise; the t = 1 step ignores the noise argument.
inline Tensor<float> sample_from(const DenoiserOutput& o, int t, const Tensor<float>& noise) {
  require_same_shape(o.mean, noise, "reverse_step noise");
  Tensor<float> out = o.mean;
  if (t > 1) {
    const float sigma = static_cast<float>(std::sqrt(o.variance));
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += sigma * noise[i];
  }
  return out;
}

template <NoisePredictor Model>
Tensor<float> reverse_step(const Model& model, const NoiseSchedule& s, const Tensor<float>& z_t, int t,
                           const Tensor<float>& noise, SamplerOptions opt = {}) {
  return sample_from(predict_mean_variance(model, s, z_t, t, opt), t, noise);
}

// Runs the unconditional chain t, t-1, ..., 1 from z_t; exactly t model evaluations.
template <NoisePredictor Model>
Tensor<float> denoise_to_clean(const Model& model, const NoiseSchedule& s, Tensor<float> z, int t, std::span<Rng> rngs,
                               SamplerOptions opt = {}) {
  if (t < 0 || t > s.num_steps()) throw std::out_of_range("denoise_to_clean: step out of range");
  for (int k = t; k >= 1; --k) {
    auto noise = randn_rows(z.shape, rngs);
    z = reverse_step(model, s, z, k, noise, opt);
  }
  return z;
}

template <NoisePredictor Model>
Tensor<float> denoise_to_clean(const Model& model, const NoiseSchedule& s, const Tensor<float>& z, int t, Rng& rng,
                               SamplerOptions opt = {}) {
  return denoise_to_clean(model, s, z, t, std::span<Rng>(&rng, 1), opt);
}

// Full unconditional generation from pure noise.
template <NoisePredictor Model>
Tensor<float> sample_unconditional(const Model& model, const NoiseSchedule& s, const Shape& shape, std::span<Rng> rngs,
                                   SamplerOptions opt = {}) {
  return denoise_to_clean(model, s, randn_rows(shape, rngs), s.num_steps(), rngs, opt);
}

// Counts denoiser evaluations (batch rows) of a wrapped model.
template <NoisePredictor Model>
class CountingModel {
 public:
  explicit CountingModel(const Model& m) : model_(m) {}
  Tensor<float> predict_noise(const Tensor<float>& z, std::span<const int> t) const {
    ++calls_;
    rows_ += z.dim(0);
    return model_.predict_noise(z, t);
  }
  long calls() const { return calls_; }
  long rows() const { return rows_; }
  void reset() { calls_ = rows_ = 0; }

 private:
  const Model& model_;
  mutable long calls_ = 0;
  mutable long rows_ = 0;
};

struct TrainingConfig {
  int epochs = 40;
  int batch_size = 32;
  double learning_rate = 2e-3;
  double ema_decay = 0.995;
  double weight_decay = 0.0;
  double label_smoothing = 0.0;  // binary targets only: y -> y (1 - e) + e / 2
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("training epochs and batch size must be positive");
    if (!(learning_rate > 0) || !(ema_decay >= 0 && ema_decay < 1) || weight_decay < 0 ||
        !(label_smoothing >= 0 && label_smoothing < 1))
      throw std::invalid_argument("training rates out of range");
  }
  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"ema_decay", ema_decay}, {"weight_decay", weight_decay}, {"label_smoothing", label_smoothing}, {"seed", seed}};
  }
  static TrainingConfig from_json(const nlohmann::json& j) { return from_json(j, TrainingConfig()); }
  static TrainingConfig from_json(const nlohmann::json& j, TrainingConfig base) {
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.learning_rate = j.value("learning_rate", base.learning_rate);
    base.ema_decay = j.value("ema_decay", base.ema_decay);
    base.weight_decay = j.value("weight_decay", base.weight_decay);
    base.label_smoothing = j.value("label_smoothing", base.label_smoothing);
    base.seed = j.value("seed", base.seed);
    return base;
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainingResult {
  std::vector<double> epoch_losses;
  nn::WeightMap ema_weights;
  nn::WeightMap raw_weights;
  double seconds = 0;
};

using ProgressFn = std::function<void(int epoch, double loss)>;

// Epsilon-matching objective with uniformly drawn timesteps; returns EMA weights.
inline TrainingResult train_denoiser(Denoiser<float>& model, const NoiseSchedule& s, const Tensor<float>& images,
                                     const TrainingConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("training set is empty");
  const auto t0 = std::chrono::steady_clock::now();
  auto params = model.parameters();
  nn::Adam<float> opt(params, {.lr = cfg.learning_rate, .weight_decay = cfg.weight_decay, .clip_norm = 1.0});
  nn::Ema<float> ema(params, cfg.ema_decay);
  Rng rng(cfg.seed);
  const int n = images.dim(0);
  const int batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_iters = static_cast<long>(batches) * cfg.epochs;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  TrainingResult result;
  long iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (int b = 0; b < batches; ++b) {
      const int lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::span<const int> rows(order.data() + lo, hi - lo);
      auto x0 = gather_rows(images, rows);
      auto eps = randn<float>(x0.shape, rng);
      std::vector<int> steps(rows.size());
      Tensor<float> z(x0.shape);
      const std::size_t ss = x0.sample_size();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const int t = uniform_int(rng, 1, s.num_steps());
        steps[i] = s.model_step(t);
        const float a = static_cast<float>(std::sqrt(s.alpha_bar(t)));
        const float c = static_cast<float>(std::sqrt(1.0 - s.alpha_bar(t)));
        for (std::size_t k = 0; k < ss; ++k) z[i * ss + k] = a * x0[i * ss + k] + c * eps[i * ss + k];
      }
      nn::zero_grads(params);
      auto loss = ag::mse(model.forward(ag::Var<float>(z), steps), eps);
      if (!std::isfinite(loss.item()))
        throw TrainingDiverged("denoiser loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b));
      ag::backward(loss);
      // cosine decay to 10% of the base rate
      const double frac = static_cast<double>(iter++) / std::max<long>(1, total_iters);
      opt.set_lr(cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1 + std::cos(3.14159265358979323846 * frac))));
      opt.step();
      ema.update(params);
      epoch_loss += loss.item() * rows.size();
    }
    result.epoch_losses.push_back(epoch_loss / n);
    if (progress) progress(epoch, result.epoch_losses.back());
  }
  result.ema_weights = ema.weights();
  result.raw_weights = nn::export_weights(params);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace dime
