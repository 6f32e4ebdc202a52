#include <gtest/gtest.h>

#include "dime/schedule.hpp"

using namespace dime;

namespace {

// Independent running product.
std::vector<double> product_oracle(const std::vector<double>& betas) {
  std::vector<double> out;
  double a = 1;
  for (double b : betas) out.push_back(a *= 1 - b);
  return out;
}

}  // namespace

TEST(Schedule, SingleStep) {
  auto s = build_linear_schedule(1, 0.5, 0.5);
  ASSERT_EQ(s.num_steps(), 1);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, ThreeStepLinear) {
  auto s = build_linear_schedule(3, 0.1, 0.5);
  const double a1 = 1 - 0.1, a2 = a1 * (1 - 0.3), a3 = a2 * (1 - 0.5);
  EXPECT_NEAR(s.beta(1), 0.1, 1e-15);
  EXPECT_NEAR(s.beta(2), 0.3, 1e-15);
  EXPECT_NEAR(s.beta(3), 0.5, 1e-15);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-12);
  EXPECT_NEAR(s.alpha_bar(2), 0.63, 1e-12);
  EXPECT_NEAR(s.alpha_bar(3), 0.315, 1e-12);
  EXPECT_NEAR(s.alpha_bar(3), a3, 1e-15);
}

TEST(Schedule, ZeroNoiseLimit) {
  auto s = build_linear_schedule(100, 1e-12, 1e-12);
  for (int t = 1; t <= 100; ++t) EXPECT_NEAR(s.alpha_bar(t), 1.0, 1e-9);
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(build_linear_schedule(0, 0.1, 0.2), std::invalid_argument);
  EXPECT_THROW(build_linear_schedule(5, 0.0, 0.2), std::invalid_argument);
  EXPECT_THROW(build_linear_schedule(5, 0.3, 0.2), std::invalid_argument);
  EXPECT_THROW(build_linear_schedule(5, 0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule::from_betas({}), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule::from_betas({0.5, 1.5}), std::invalid_argument);
}

TEST(Schedule, InvariantsHoldForStandardSchedules) {
  for (const auto& s : {build_default_schedule(200), build_default_schedule(500), build_cosine_schedule(100)}) {
    const auto oracle = product_oracle(s.betas());
    for (int t = 1; t <= s.num_steps(); ++t) {
      EXPECT_GT(s.beta(t), 0);
      EXPECT_LT(s.beta(t), 1);
      EXPECT_NEAR(s.alpha_bar(t), oracle[t - 1], 1e-12);
      EXPECT_NEAR(s.alpha_bar(t), s.alpha_bar(t - 1) * (1 - s.beta(t)), 1e-15);
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
      EXPECT_GT(s.alpha_bar(t), 0);
      EXPECT_LE(s.posterior_variance(t), s.beta(t));
    }
    EXPECT_EQ(s.posterior_variance(1), 0.0);
  }
}

TEST(Schedule, StepIndexOutOfRange) {
  auto s = build_linear_schedule(3, 0.1, 0.5);
  EXPECT_THROW(s.beta(0), std::out_of_range);
  EXPECT_THROW(s.beta(4), std::out_of_range);
  EXPECT_THROW(s.alpha_bar(-1), std::out_of_range);
}

TEST(Respace, IdentityKeepsSchedule) {
  auto s = build_default_schedule(50);
  std::vector<int> all(50);
  std::iota(all.begin(), all.end(), 1);
  auto r = respace(s, all);
  for (int t = 1; t <= 50; ++t) {
    EXPECT_NEAR(r.beta(t), s.beta(t), 1e-12);
    EXPECT_EQ(r.alpha_bar(t), s.alpha_bar(t));
    EXPECT_EQ(r.model_step(t), t);
  }
}

TEST(Respace, KeepFirstAndLast) {
  auto s = build_linear_schedule(3, 0.1, 0.5);
  const std::vector<int> keep{1, 3};
  auto r = respace(s, keep);
  ASSERT_EQ(r.num_steps(), 2);
  EXPECT_NEAR(r.alpha_bar(1), 0.9, 1e-12);
  EXPECT_NEAR(r.alpha_bar(2), 0.315, 1e-12);
  EXPECT_NEAR(r.beta(1), 0.1, 1e-12);
  EXPECT_NEAR(r.beta(2), 1 - 0.315 / 0.9, 1e-12);
  EXPECT_NEAR(r.beta(2), 0.65, 1e-12);
  EXPECT_EQ(r.model_step(2), 3);
  EXPECT_EQ(r.respaced_from(), 3);
}

TEST(Respace, EndpointOnly) {
  auto s = build_default_schedule(40);
  const std::vector<int> keep{40};
  auto r = respace(s, keep);
  ASSERT_EQ(r.num_steps(), 1);
  EXPECT_EQ(r.alpha_bar(1), s.alpha_bar(40));
}

TEST(Respace, PreservesAlphaAtKeptIndices) {
  auto s = build_default_schedule(500);
  const auto keep = uniform_keep(500, 200);
  ASSERT_EQ(keep.size(), 200u);
  EXPECT_EQ(keep.back(), 500);
  auto r = respace(s, keep);
  for (int i = 0; i < 200; ++i) {
    EXPECT_NEAR(r.alpha_bar(i + 1), s.alpha_bar(keep[i]), 1e-12);
    const double prev = i == 0 ? 1.0 : s.alpha_bar(keep[i - 1]);
    EXPECT_NEAR(r.beta(i + 1), 1 - s.alpha_bar(keep[i]) / prev, 1e-12);
  }
}

TEST(Respace, RejectsBadKeep) {
  auto s = build_default_schedule(10);
  EXPECT_THROW(respace(s, std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(respace(s, std::vector<int>{3, 2}), std::invalid_argument);
  EXPECT_THROW(respace(s, std::vector<int>{2, 2}), std::invalid_argument);
  EXPECT_THROW(respace(s, std::vector<int>{11}), std::invalid_argument);
  EXPECT_THROW(respace(s, std::vector<int>{0, 1}), std::invalid_argument);
}

TEST(Respace, JsonRoundTrip) {
  auto s = respace(build_default_schedule(100), uniform_keep(100, 25));
  auto back = NoiseSchedule::from_json(s.to_json());
  EXPECT_EQ(back.to_json().dump(), s.to_json().dump());
  for (int t = 1; t <= 25; ++t) {
    EXPECT_EQ(back.alpha_bar(t), s.alpha_bar(t));
    EXPECT_EQ(back.model_step(t), s.model_step(t));
  }
}

TEST(Forward, StepIdentities) {
  auto s = NoiseSchedule::from_betas({1e-300, 0.25});
  Tensor<double> z({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> zero({2, 3});
  auto same = forward_step(s, z, 1, zero);
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_DOUBLE_EQ(same[i], z[i]);
  auto pure = forward_step(s, zero, 2, z);
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_DOUBLE_EQ(pure[i], 0.5 * z[i]);
  EXPECT_THROW(forward_step(s, z, 3, zero), std::out_of_range);
  EXPECT_THROW(forward_step(s, z, 1, Tensor<double>({3, 2})), std::invalid_argument);
}

TEST(Forward, SampleDeterministicPart) {
  // a schedule whose alpha at step 2 is 0.36
  auto s = NoiseSchedule::from_betas({0.1, 1 - 0.36 / 0.9});
  ASSERT_NEAR(s.alpha_bar(2), 0.36, 1e-15);
  Tensor<double> ones({1, 3, 4, 4}, 1.0), zero({1, 3, 4, 4});
  auto out = forward_sample(s, ones, 2, zero);
  for (double v : out.data) EXPECT_NEAR(v, 0.6, 1e-15);
  EXPECT_THROW(forward_sample(s, ones, 0, zero), std::out_of_range);
  EXPECT_THROW(forward_sample(s, ones, 3, zero), std::out_of_range);
}

TEST(Forward, NoiseFreeSampleIsLinear) {
  auto s = build_default_schedule(20);
  Rng rng(3);
  auto a = randn<double>({2, 5}, rng), b = randn<double>({2, 5}, rng);
  Tensor<double> zero({2, 5}), ab({2, 5});
  for (std::size_t i = 0; i < ab.numel(); ++i) ab[i] = 2 * a[i] - 3 * b[i];
  auto fa = forward_sample(s, a, 7, zero), fb = forward_sample(s, b, 7, zero), fab = forward_sample(s, ab, 7, zero);
  for (std::size_t i = 0; i < ab.numel(); ++i) EXPECT_NEAR(fab[i], 2 * fa[i] - 3 * fb[i], 1e-12);
}

// Recursive corruption vs the closed form, in mean and variance.
TEST(Forward, RecursiveMatchesDirectInDistribution) {
  auto s = build_linear_schedule(3, 0.1, 0.5);
  const int trials = 100000;
  const std::vector<double> xs{-0.8, 0.0, 0.5, 1.0};
  Tensor<double> x({1, static_cast<int>(xs.size())}, xs);
  Rng rng(11);
  std::vector<double> sum_r(xs.size()), sq_r(xs.size()), sum_d(xs.size()), sq_d(xs.size());
  for (int k = 0; k < trials; ++k) {
    auto z = x;
    for (int t = 1; t <= 3; ++t) z = forward_step(s, z, t, randn<double>(x.shape, rng));
    auto d = forward_sample(s, x, 3, randn<double>(x.shape, rng));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sum_r[i] += z[i];
      sq_r[i] += z[i] * z[i];
      sum_d[i] += d[i];
      sq_d[i] += d[i] * d[i];
    }
  }
  const double var = 1 - 0.315;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double mr = sum_r[i] / trials, md = sum_d[i] / trials;
    const double vr = sq_r[i] / trials - mr * mr, vd = sq_d[i] / trials - md * md;
    const double se_mean = std::sqrt(var / trials);
    const double se_var = var * std::sqrt(2.0 / (trials - 1));
    EXPECT_NEAR(mr, std::sqrt(0.315) * xs[i], 4 * se_mean);
    EXPECT_NEAR(mr, md, 4 * std::sqrt(2.0) * se_mean);
    EXPECT_NEAR(vr, var, 4 * se_var);
    EXPECT_NEAR(vr, vd, 4 * std::sqrt(2.0) * se_var);
  }
}

TEST(Schedule, UniformKeep) {
  EXPECT_EQ(uniform_keep(10, 5), (std::vector<int>{2, 4, 6, 8, 10}));
  EXPECT_EQ(uniform_keep(7, 7), (std::vector<int>{1, 2, 3, 4, 5, 6, 7}));
  EXPECT_THROW(uniform_keep(5, 6), std::invalid_argument);
}
