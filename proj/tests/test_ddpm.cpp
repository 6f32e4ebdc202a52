#include <gtest/gtest.h>

#include "dime/ddpm.hpp"

using namespace dime;

namespace {

// Predicts a fixed tensor (or a constant) regardless of input.
struct FixedModel {
  Tensor<float> eps;
  float constant = 0;
  Tensor<float> predict_noise(const Tensor<float>& z, std::span<const int>) const {
    if (!eps.empty()) return eps;
    return Tensor<float>(z.shape, constant);
  }
};

struct NanModel {
  Tensor<float> predict_noise(const Tensor<float>& z, std::span<const int>) const {
    return Tensor<float>(z.shape, std::numeric_limits<float>::quiet_NaN());
  }
};

const NoiseSchedule& toy() {
  static const auto s = build_linear_schedule(3, 0.1, 0.5);
  return s;
}

double mean_abs(const Tensor<float>& a, float target) {
  double s = 0;
  for (float v : a.data) s += std::abs(v - target);
  return s / a.numel();
}

}  // namespace

TEST(MeanVariance, ZeroPredictionIsPureRescaling) {
  Rng rng(1);
  auto z = randn<float>({2, 3, 4, 4}, rng);
  const auto out = predict_mean_variance(FixedModel{}, toy(), z, 2, {.clip_denoised = false});
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(out.mean[i], z[i] / std::sqrt(0.7), 1e-6);
}

TEST(MeanVariance, NoiseCoefficientAtLastStep) {
  Tensor<float> z({1, 1, 2, 2});
  FixedModel m{{}, 1.f};
  const auto out = predict_mean_variance(m, toy(), z, 3, {.clip_denoised = false});
  const double coeff = 0.5 / std::sqrt(1 - 0.9 * 0.7 * 0.5);  // beta_3 / sqrt(1 - alpha_3)
  EXPECT_NEAR(coeff, 0.5 / std::sqrt(0.685), 1e-15);
  for (float v : out.mean.data) EXPECT_NEAR(v, -coeff / std::sqrt(0.5), 1e-6);
}

TEST(MeanVariance, PosteriorVarianceFormula) {
  const auto& s = toy();
  Tensor<float> z({1, 1, 1, 1});
  for (int t = 1; t <= 3; ++t) {
    const auto out = predict_mean_variance(FixedModel{}, s, z, t);
    const double a_prev = t == 1 ? 1.0 : s.alpha_bar(t - 1);
    EXPECT_NEAR(out.variance, s.beta(t) * (1 - a_prev) / (1 - s.alpha_bar(t)), 1e-15);
  }
  EXPECT_EQ(predict_mean_variance(FixedModel{}, s, z, 1).variance, 0.0);
  EXPECT_GT(predict_mean_variance(FixedModel{}, s, z, 2).variance, 0.0);
}

// An oracle denoiser that returns the injected noise inverts the corruption at t = 1.
TEST(MeanVariance, ExactDenoiserRecoversImage) {
  Rng rng(2);
  auto x = randn<float>({2, 3, 4, 4}, rng);
  for (auto& v : x.data) v = std::tanh(v);
  auto eps = randn<float>(x.shape, rng);
  const auto z = forward_sample(toy(), x, 1, eps);
  for (bool clip : {false, true}) {
    const auto out = predict_mean_variance(FixedModel{eps}, toy(), z, 1, {.clip_denoised = clip});
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(out.mean[i], x[i], 1e-5);
    const auto step = reverse_step(FixedModel{eps}, toy(), z, 1, randn<float>(x.shape, rng), {.clip_denoised = clip});
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(step[i], x[i], 1e-5);
  }
}

TEST(MeanVariance, ClippedAndUnclippedAgreeInsideRange) {
  // with a clean estimate inside [-1, 1] clamping is a no-op
  auto s = build_default_schedule(50);
  Rng rng(3);
  auto x = randn<float>({1, 3, 4, 4}, rng);
  for (auto& v : x.data) v = 0.5f * std::tanh(v);
  auto eps = randn<float>(x.shape, rng);
  for (int t : {2, 10, 50}) {
    const auto z = forward_sample(s, x, t, eps);
    const auto a = predict_mean_variance(FixedModel{eps}, s, z, t, {.clip_denoised = true});
    const auto b = predict_mean_variance(FixedModel{eps}, s, z, t, {.clip_denoised = false});
    EXPECT_LT(max_abs_diff(a.mean, b.mean), 2e-5f) << t;
  }
}

TEST(MeanVariance, Errors) {
  Tensor<float> z({1, 1, 2, 2});
  EXPECT_THROW(predict_mean_variance(NanModel{}, toy(), z, 2), std::runtime_error);
  EXPECT_THROW(predict_mean_variance(FixedModel{}, toy(), z, 0), std::out_of_range);
  EXPECT_THROW(predict_mean_variance(FixedModel{}, toy(), z, 4), std::out_of_range);
  Tensor<float> bad = z;
  bad[0] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(predict_mean_variance(FixedModel{}, toy(), bad, 2), std::runtime_error);
}

TEST(ReverseStep, NoiseHandling) {
  Rng rng(4);
  auto z = randn<float>({2, 3, 4, 4}, rng);
  FixedModel m{{}, 0.3f};
  Tensor<float> zero(z.shape);
  const auto mu = predict_mean_variance(m, toy(), z, 3).mean;
  EXPECT_EQ(reverse_step(m, toy(), z, 3, zero).data, mu.data);
  auto n1 = randn<float>(z.shape, rng), n2 = randn<float>(z.shape, rng);
  EXPECT_EQ(reverse_step(m, toy(), z, 1, n1).data, reverse_step(m, toy(), z, 1, n2).data);
  EXPECT_EQ(reverse_step(m, toy(), z, 2, n1).data, reverse_step(m, toy(), z, 2, n1).data);
  EXPECT_NE(reverse_step(m, toy(), z, 2, n1).data, reverse_step(m, toy(), z, 2, n2).data);
}

TEST(DenoiseToClean, CallCountAndIdentity) {
  Rng rng(5);
  auto z = randn<float>({2, 1, 4, 4}, rng);
  const auto z1 = gather_rows(z, std::vector<int>{0});
  FixedModel base{{}, 0.1f};
  CountingModel<FixedModel> m(base);
  EXPECT_EQ(denoise_to_clean(m, toy(), z1, 0, rng).data, z1.data);
  EXPECT_EQ(m.calls(), 0);
  denoise_to_clean(m, toy(), z1, 3, rng);
  EXPECT_EQ(m.calls(), 3);
  EXPECT_EQ(m.rows(), 3);
  m.reset();
  std::vector<Rng> rngs{Rng(1), Rng(2)};
  denoise_to_clean(m, toy(), z, 2, std::span<Rng>(rngs));
  EXPECT_EQ(m.calls(), 2);
  EXPECT_EQ(m.rows(), 4);
  EXPECT_THROW(denoise_to_clean(m, toy(), z1, 4, rng), std::out_of_range);
  EXPECT_THROW(denoise_to_clean(m, toy(), z, 2, rng), std::invalid_argument);
}

TEST(DenoiseToClean, ReproducibleAndRowIndependent) {
  auto s = build_default_schedule(30);
  Denoiser<float> net(DenoiserArch{3, 16, {4, 8, 8}, 8}, 1);
  Rng rng(6);
  auto z = randn<float>({3, 3, 16, 16}, rng);
  std::vector<Rng> a{Rng(10), Rng(11), Rng(12)}, b = a;
  const auto x1 = denoise_to_clean(net, s, z, 30, std::span<Rng>(a));
  const auto x2 = denoise_to_clean(net, s, z, 30, std::span<Rng>(b));
  EXPECT_EQ(x1.data, x2.data);
  // row 1 alone equals row 1 of the batch
  std::vector<Rng> one{Rng(11)};
  const auto solo = denoise_to_clean(net, s, gather_rows(z, std::vector<int>{1}), 30, std::span<Rng>(one));
  EXPECT_EQ(solo.data, unstack(x1, 1).data);
  for (float v : x1.data) {
    EXPECT_GE(v, -1.0f - 1e-6f);
    EXPECT_LE(v, 1.0f + 1e-6f);
  }
}

TEST(Denoiser, BatchIndependentForward) {
  Denoiser<float> net(DenoiserArch{}, 2);
  Rng rng(7);
  auto z = randn<float>({5, 3, 32, 32}, rng);
  const std::vector<int> t{1, 50, 100, 150, 200};
  const auto all = net.predict_noise(z, t);
  for (int i : {0, 3}) {
    const std::vector<int> ti{t[i]};
    EXPECT_EQ(net.predict_noise(gather_rows(z, std::vector<int>{i}), ti).data, unstack(all, i).data);
  }
}

TEST(Training, DeterministicUnderSeed) {
  auto s = build_default_schedule(20);
  Rng rng(8);
  auto data = randn<float>({24, 3, 16, 16}, rng);
  const DenoiserArch arch{3, 16, {4, 8, 8}, 8};
  TrainingConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 4;
  Denoiser<float> a(arch, 1), b(arch, 1);
  const auto ra = train_denoiser(a, s, data, cfg), rb = train_denoiser(b, s, data, cfg);
  EXPECT_EQ(ra.epoch_losses, rb.epoch_losses);
  for (const auto& [k, v] : ra.ema_weights) EXPECT_EQ(v.data, rb.ema_weights.at(k).data);
  EXPECT_NE(ra.ema_weights.begin()->second.data, ra.raw_weights.begin()->second.data);
}

TEST(Training, ConfigValidation) {
  TrainingConfig c;
  c.epochs = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.ema_decay = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(TrainingConfig::from_json(TrainingConfig{}.to_json()).to_json(), TrainingConfig{}.to_json());
  Denoiser<float> m(DenoiserArch{3, 16, {4, 8, 8}, 8}, 1);
  EXPECT_THROW(train_denoiser(m, toy(), Tensor<float>({0, 3, 16, 16}), TrainingConfig{}), std::invalid_argument);
}

TEST(Training, DivergenceIsReported) {
  auto s = build_default_schedule(10);
  Tensor<float> data({4, 3, 16, 16}, 1e30f);
  Denoiser<float> m(DenoiserArch{3, 16, {4, 8, 8}, 8}, 1);
  TrainingConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  EXPECT_THROW(train_denoiser(m, s, data, cfg), TrainingDiverged);
}

// Constant-zero and single-image datasets: samples collapse onto the data.
TEST(Training, CollapsesOntoDegenerateData) {
  auto s = build_default_schedule(50);
  const DenoiserArch arch{3, 16, {8, 8, 8}, 16};
  TrainingConfig cfg;
  cfg.epochs = 150;
  cfg.batch_size = 16;
  cfg.learning_rate = 3e-3;
  cfg.ema_decay = 0.9;

  Tensor<float> zeros({128, 3, 16, 16});
  Denoiser<float> mz(arch, 2);
  auto rz = train_denoiser(mz, s, zeros, cfg);
  EXPECT_LT(rz.epoch_losses.back(), rz.epoch_losses.front());
  nn::import_weights(mz.parameters(), rz.ema_weights);
  std::vector<Rng> rngs{Rng(1), Rng(2), Rng(3), Rng(4)};
  const auto sz = sample_unconditional(mz, s, {4, 3, 16, 16}, std::span<Rng>(rngs));
  EXPECT_LT(mean_abs(sz, 0.f), 0.1);

  // a smooth pattern the small net can memorize
  Tensor<float> one({1, 3, 16, 16});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) one[(c * 16 + y) * 16 + x] = 0.7f * std::sin(0.4f * x + c) * std::cos(0.3f * y);
  Tensor<float> copies({128, 3, 16, 16});
  for (int i = 0; i < 128; ++i) std::copy(one.data.begin(), one.data.end(), copies.sample(i).begin());
  Denoiser<float> mo(arch, 3);
  auto ro = train_denoiser(mo, s, copies, cfg);
  nn::import_weights(mo.parameters(), ro.ema_weights);
  const auto so = sample_unconditional(mo, s, {4, 3, 16, 16}, std::span<Rng>(rngs));
  double dist = 0, spread = 0;
  for (int i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < one.numel(); ++k) {
      dist += std::abs(so.sample(i)[k] - one[k]);
      spread += std::abs(one[k]);
    }
  }
  EXPECT_LT(dist / spread, 0.25);
}
