#pragma once

// Small convolutional encoder-decoder that predicts the injected noise from a
// noisy image and its timestep. Three resolution levels with additive skips;
// the timestep enters every residual block as a per-channel bias.

#include <array>

#include <nlohmann/json.hpp>

#include "dime/nn.hpp"

namespace dime {

struct DenoiserArch {
  int in_channels = 3;
  int resolution = 32;
  std::array<int, 3> widths{8, 16, 32};
  int time_dim = 32;

  nlohmann::json to_json() const {
    return {{"kind", "unet3"}, {"in_channels", in_channels}, {"resolution", resolution},
            {"widths", widths}, {"time_dim", time_dim}};
  }
  static DenoiserArch from_json(const nlohmann::json& j) {
    DenoiserArch a;
    if (j.at("kind") != "unet3") throw std::runtime_error("unsupported denoiser architecture");
    a.in_channels = j.at("in_channels");
    a.resolution = j.at("resolution");
    a.widths = j.at("widths").get<std::array<int, 3>>();
    a.time_dim = j.at("time_dim");
    return a;
  }
};

// Sinusoidal timestep features, [N, dim].
template <typename T>
Tensor<T> timestep_features(std::span<const int> steps, int dim) {
  const int half = dim / 2;
  Tensor<T> out({static_cast<int>(steps.size()), dim});
  for (std::size_t n = 0; n < steps.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out[n * dim + i] = static_cast<T>(std::sin(steps[n] * freq));
      out[n * dim + half + i] = static_cast<T>(std::cos(steps[n] * freq));
    }
  return out;
}

template <typename T>
struct ResBlock {
  nn::Conv2d<T> conv1, conv2;
  nn::Linear<T> time_proj;

  ResBlock() = default;
  ResBlock(int channels, int time_hidden, Rng& rng)
      : conv1(channels, channels, 3, 1, 1, rng),
        conv2(channels, channels, 3, 1, 1, rng, T(0.1)),
        time_proj(time_hidden, channels, rng) {}

  ag::Var<T> operator()(const ag::Var<T>& h, const ag::Var<T>& temb) const {
    auto a = conv1(ag::silu(h));
    a = ag::add_channel_bias(a, time_proj(temb));
    a = conv2(ag::silu(a));
    return ag::add(h, a);
  }
  void collect(nn::ParamList<T>& out, const std::string& p) {
    conv1.collect(out, p + ".conv1");
    conv2.collect(out, p + ".conv2");
    time_proj.collect(out, p + ".time");
  }
};

template <typename T>
class Denoiser {
 public:
  Denoiser(const DenoiserArch& arch, std::uint64_t seed) : arch_(arch) {
    if (arch.resolution % 4 != 0) throw std::invalid_argument("denoiser resolution must be divisible by 4");
    Rng rng(seed);
    const auto [c1, c2, c3] = arch.widths;
    const int th = 2 * arch.time_dim;
    time1_ = nn::Linear<T>(arch.time_dim, th, rng);
    time2_ = nn::Linear<T>(th, th, rng);
    in_ = nn::Conv2d<T>(arch.in_channels, c1, 3, 1, 1, rng);
    enc1_ = ResBlock<T>(c1, th, rng);
    down1_ = nn::Conv2d<T>(c1, c2, 3, 2, 1, rng);
    enc2_ = ResBlock<T>(c2, th, rng);
    down2_ = nn::Conv2d<T>(c2, c3, 3, 2, 1, rng);
    mid_ = ResBlock<T>(c3, th, rng);
    up2_ = nn::Conv2d<T>(c3, c2, 3, 1, 1, rng);
    dec2_ = ResBlock<T>(c2, th, rng);
    up1_ = nn::Conv2d<T>(c2, c1, 3, 1, 1, rng);
    dec1_ = ResBlock<T>(c1, th, rng);
    out_ = nn::Conv2d<T>(c1, arch.in_channels, 3, 1, 1, rng, T(0.1));
  }

  // Predicted noise for a batch of noisy images at per-sample timesteps.
  ag::Var<T> forward(const ag::Var<T>& z, std::span<const int> steps) const {
    if (z.shape().size() != 4 || z.shape()[1] != arch_.in_channels || z.shape()[2] != arch_.resolution ||
        z.shape()[3] != arch_.resolution || static_cast<std::size_t>(z.shape()[0]) != steps.size())
      throw std::invalid_argument("denoiser input shape " + shape_str(z.shape()));
    ag::Var<T> tf(timestep_features<T>(steps, arch_.time_dim));
    auto temb = ag::silu(time2_(ag::silu(time1_(tf))));
    auto h1 = enc1_(in_(z), temb);
    auto h2 = enc2_(down1_(ag::silu(h1)), temb);
    auto m = mid_(down2_(ag::silu(h2)), temb);
    auto u2 = dec2_(ag::add(up2_(ag::upsample_nearest2x(m)), h2), temb);
    auto u1 = dec1_(ag::add(up1_(ag::upsample_nearest2x(u2)), h1), temb);
    return out_(ag::silu(u1));
  }

  Tensor<T> predict_noise(const Tensor<T>& z, std::span<const int> steps) const {
    ag::NoGradGuard guard;
    return forward(ag::Var<T>(z), steps).value();
  }

  nn::ParamList<T> parameters() {
    nn::ParamList<T> p;
    time1_.collect(p, "time1");
    time2_.collect(p, "time2");
    in_.collect(p, "in");
    enc1_.collect(p, "enc1");
    down1_.collect(p, "down1");
    enc2_.collect(p, "enc2");
    down2_.collect(p, "down2");
    mid_.collect(p, "mid");
    up2_.collect(p, "up2");
    dec2_.collect(p, "dec2");
    up1_.collect(p, "up1");
    dec1_.collect(p, "dec1");
    out_.collect(p, "out");
    return p;
  }
  const DenoiserArch& arch() const { return arch_; }

 private:
  DenoiserArch arch_;
  nn::Linear<T> time1_, time2_;
  nn::Conv2d<T> in_, down1_, down2_, up2_, up1_, out_;
  ResBlock<T> enc1_, enc2_, mid_, dec2_, dec1_;
};

}  // namespace dime
