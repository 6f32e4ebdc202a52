#pragma once

// Models around the explanation loop: the classifier under scrutiny, the
// attribute oracle used only for evaluation, and the feature embedder behind
// the perceptual distance and identity metrics. All three share one small
// convolutional trunk and differ in widths, head size and seed.

#include <chrono>

#include <nlohmann/json.hpp>

#include "dime/checkpoint.hpp"
#include "dime/ddpm.hpp"
#include "dime/nn.hpp"
#include "dime/synthdata.hpp"

namespace dime {

struct ConvLayerSpec {
  int width;
  int stride;
};

struct ConvNetArch {
  int in_channels = 3;
  int resolution = 32;
  std::vector<ConvLayerSpec> layers{{16, 1}, {32, 2}, {32, 2}, {32, 1}};
  int outputs = 4;

  nlohmann::json to_json() const {
    nlohmann::json ls = nlohmann::json::array();
    for (const auto& l : layers) ls.push_back({l.width, l.stride});
    return {{"kind", "convnet"}, {"in_channels", in_channels}, {"resolution", resolution}, {"layers", ls}, {"outputs", outputs}};
  }
  static ConvNetArch from_json(const nlohmann::json& j) {
    if (j.at("kind") != "convnet") throw std::runtime_error("unsupported convnet architecture");
    ConvNetArch a;
    a.in_channels = j.at("in_channels");
    a.resolution = j.at("resolution");
    a.outputs = j.at("outputs");
    a.layers.clear();
    for (const auto& l : j.at("layers")) a.layers.push_back({l.at(0).get<int>(), l.at(1).get<int>()});
    if (a.layers.empty() || a.outputs < 1) throw std::runtime_error("convnet needs layers and outputs");
    return a;
  }
};

inline ConvNetArch default_classifier_arch(int channels, int resolution, int attributes) {
  return {channels, resolution, {{16, 1}, {32, 2}, {32, 2}, {32, 1}}, attributes};
}
inline ConvNetArch default_oracle_arch(int channels, int resolution, int attributes) {
  return {channels, resolution, {{24, 1}, {24, 2}, {48, 2}, {48, 1}}, attributes};
}
inline ConvNetArch default_embedder_arch(int channels, int resolution, int dim) {
  return {channels, resolution, {{16, 1}, {32, 2}, {32, 2}, {32, 1}}, dim};
}

// conv+SiLU stack, global average pool, linear head.
template <typename T>
class ConvNet {
 public:
  ConvNet(const ConvNetArch& arch, std::uint64_t seed) : arch_(arch) {
    Rng rng(seed);
    int c = arch.in_channels;
    for (const auto& l : arch.layers) {
      convs_.emplace_back(c, l.width, 3, l.stride, 1, rng);
      c = l.width;
    }
    head_ = nn::Linear<T>(c, arch.outputs, rng);
  }

  // Post-activation output of every conv layer.
  std::vector<ag::Var<T>> features(const ag::Var<T>& x) const {
    check_input(x.shape());
    std::vector<ag::Var<T>> out;
    ag::Var<T> h = x;
    for (const auto& conv : convs_) {
      h = ag::silu(conv(h));
      out.push_back(h);
    }
    return out;
  }

  ag::Var<T> forward(const ag::Var<T>& x) const { return head_(ag::global_avg_pool(features(x).back())); }

  Tensor<T> predict(const Tensor<T>& x) const {
    ag::NoGradGuard guard;
    return forward(ag::Var<T>(x)).value();
  }

  nn::ParamList<T> parameters() {
    nn::ParamList<T> p;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(p, "conv" + std::to_string(i));
    head_.collect(p, "head");
    return p;
  }
  const ConvNetArch& arch() const { return arch_; }

 private:
  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[1] != arch_.in_channels || s[2] != arch_.resolution || s[3] != arch_.resolution)
      throw std::invalid_argument("convnet input shape " + shape_str(s));
  }

  ConvNetArch arch_;
  std::vector<nn::Conv2d<T>> convs_;
  nn::Linear<T> head_;
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Posterior of label y for binary attribute `attr` given its logit.
inline double target_posterior(double logit, int y) { return sigmoid(y == 1 ? logit : -logit); }

inline void check_attribute(int attr, int count) {
  if (attr < 0 || attr >= count) throw std::out_of_range("attribute index " + std::to_string(attr) + " out of range");
}

// Sum over the batch of -logit_y, the logit of target value y[n] for attribute `attr`.
template <typename T>
ag::Var<T> target_logit_loss(const ag::Var<T>& logits, int attr, std::span<const int> y) {
  const int n = logits.shape().at(0), a = logits.shape().at(1);
  check_attribute(attr, a);
  if (y.size() != static_cast<std::size_t>(n)) throw std::invalid_argument("one target per batch row required");
  Tensor<T> w({n, a});
  for (int i = 0; i < n; ++i) {
    if (y[i] != 0 && y[i] != 1) throw std::invalid_argument("binary target expected");
    w[static_cast<std::size_t>(i) * a + attr] = y[i] == 1 ? T(-1) : T(1);
  }
  return ag::weighted_sum(logits, w);
}

template <typename T>
ag::Var<T> target_logit_loss(const ConvNet<T>& classifier, const ag::Var<T>& image, int attr, std::span<const int> y) {
  return target_logit_loss(classifier.forward(image), attr, y);
}

template <typename T>
std::size_t spatial_size(const Tensor<T>& f) {
  return static_cast<std::size_t>(f.dim(2)) * f.dim(3);
}

// Feature vectors are scaled to unit length per position; squared differences
// are summed over channels, averaged over positions and summed over layers.
// `reference` holds already normalized constants (see perceptual_reference).
// Summed over the batch.
template <typename T>
ag::Var<T> perceptual_loss(const std::vector<ag::Var<T>>& feats, const std::vector<Tensor<T>>& reference) {
  if (feats.size() != reference.size()) throw std::invalid_argument("feature layer count mismatch");
  std::vector<ag::Var<T>> terms;
  for (std::size_t l = 0; l < feats.size(); ++l)
    terms.push_back(
        ag::scaled_sq_error(ag::unit_channels(feats[l]), reference[l], T(1) / T(spatial_size(reference[l]))));
  return ag::sum(terms);
}

template <typename T>
std::vector<Tensor<T>> perceptual_reference(const ConvNet<T>& embedder, const Tensor<T>& x) {
  ag::NoGradGuard guard;
  std::vector<Tensor<T>> ref;
  for (auto& f : embedder.features(ag::Var<T>(x))) ref.push_back(ag::unit_channels(f.value()));
  return ref;
}

// Per-pair perceptual distance between two equally shaped batches.
template <typename T>
std::vector<double> perceptual_distance(const ConvNet<T>& embedder, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "perceptual_distance");
  ag::NoGradGuard guard;
  const auto fa = embedder.features(ag::Var<T>(a));
  const auto fb = embedder.features(ag::Var<T>(b));
  std::vector<double> d(a.dim(0), 0.0);
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const auto x = ag::unit_channels(fa[l].value());
    const auto y = ag::unit_channels(fb[l].value());
    const std::size_t ss = x.sample_size();
    for (int n = 0; n < a.dim(0); ++n) {
      double s = 0;
      for (std::size_t k = 0; k < ss; ++k) {
        const double diff = static_cast<double>(x[n * ss + k]) - y[n * ss + k];
        s += diff * diff;
      }
      d[n] += s / spatial_size(x);
    }
  }
  return d;
}

template <typename T>
Tensor<T> embed(const ConvNet<T>& embedder, const Tensor<T>& x) {
  return embedder.predict(x);
}

// Binary decisions (posterior > 0.5) for every attribute, [N][A].
template <typename T>
std::vector<std::vector<int>> decide_attributes(const ConvNet<T>& net, const Tensor<T>& x) {
  const auto logits = net.predict(x);
  const int n = logits.dim(0), a = logits.dim(1);
  std::vector<std::vector<int>> out(n, std::vector<int>(a));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < a; ++j) out[i][j] = logits[static_cast<std::size_t>(i) * a + j] > 0 ? 1 : 0;
  return out;
}

// Runs the net over a large set in chunks.
template <typename T>
Tensor<T> predict_batched(const ConvNet<T>& net, const Tensor<T>& images, int chunk = 256) {
  const int n = images.dim(0);
  Tensor<T> out;
  for (int lo = 0; lo < n; lo += chunk) {
    std::vector<int> rows(std::min(chunk, n - lo));
    std::iota(rows.begin(), rows.end(), lo);
    auto part = net.predict(gather_rows(images, rows));
    if (out.empty()) out = Tensor<T>({n, part.dim(1)});
    std::copy(part.data.begin(), part.data.end(), out.data.begin() + static_cast<std::size_t>(lo) * part.dim(1));
  }
  return out;
}

struct SupervisedReport {
  std::vector<double> epoch_losses;
  std::vector<double> heldout_accuracy;  // per attribute (classification only)
  double heldout_mse = 0;                // regression only
  double seconds = 0;
};

enum class Objective { BinaryAttributes, Regression };

// Trains a ConvNet on rows [train) of images against targets and evaluates on
// rows [test). Binary targets use BCE and report per-output accuracy.
inline SupervisedReport train_supervised(ConvNet<float>& net, const Tensor<float>& images, const Tensor<float>& targets,
                                         std::span<const int> train, std::span<const int> test, Objective objective,
                                         const TrainingConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("training split is empty");
  const auto t0 = std::chrono::steady_clock::now();
  auto params = net.parameters();
  nn::Adam<float> opt(params, {.lr = cfg.learning_rate, .weight_decay = cfg.weight_decay, .clip_norm = 5.0});
  Rng rng(cfg.seed);
  std::vector<int> order(train.begin(), train.end());
  SupervisedReport rep;
  const int batches = (static_cast<int>(order.size()) + cfg.batch_size - 1) / cfg.batch_size;
  long iter = 0;
  const long total = static_cast<long>(batches) * cfg.epochs;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double acc = 0;
    for (int b = 0; b < batches; ++b) {
      const int lo = b * cfg.batch_size, hi = std::min<int>(order.size(), lo + cfg.batch_size);
      std::span<const int> rows(order.data() + lo, hi - lo);
      nn::zero_grads(params);
      auto out = net.forward(ag::Var<float>(gather_rows(images, rows)));
      auto tgt = gather_rows(targets, rows);
      if (objective == Objective::BinaryAttributes && cfg.label_smoothing > 0)
        for (auto& v : tgt.data) v = static_cast<float>(v * (1 - cfg.label_smoothing) + cfg.label_smoothing / 2);
      auto loss = objective == Objective::BinaryAttributes ? ag::bce_with_logits(out, tgt) : ag::mse(out, tgt);
      if (!std::isfinite(loss.item()))
        throw TrainingDiverged("loss became non-finite at epoch " + std::to_string(epoch));
      ag::backward(loss);
      const double frac = static_cast<double>(iter++) / std::max<long>(1, total);
      opt.set_lr(cfg.learning_rate * 0.5 * (1 + std::cos(3.14159265358979323846 * frac)));
      opt.step();
      acc += loss.item() * rows.size();
    }
    rep.epoch_losses.push_back(acc / order.size());
    if (progress) progress(epoch, rep.epoch_losses.back());
  }
  if (!test.empty()) {
    const auto pred = predict_batched(net, gather_rows(images, test));
    const auto tgt = gather_rows(targets, test);
    const int k = pred.dim(1);
    if (objective == Objective::BinaryAttributes) {
      rep.heldout_accuracy.assign(k, 0.0);
      for (std::size_t i = 0; i < test.size(); ++i)
        for (int j = 0; j < k; ++j)
          rep.heldout_accuracy[j] += ((pred[i * k + j] > 0) == (tgt[i * k + j] > 0.5f)) ? 1.0 : 0.0;
      for (auto& a : rep.heldout_accuracy) a /= test.size();
    } else {
      double s = 0;
      for (std::size_t i = 0; i < pred.numel(); ++i) s += (pred[i] - tgt[i]) * (pred[i] - tgt[i]);
      rep.heldout_mse = s / pred.numel();
    }
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// Regression targets for the embedder: attributes as +-1 followed by render latents.
inline Tensor<float> embedder_targets(const data::Dataset& d) {
  const int n = d.size(), a = d.num_attributes();
  const int l = d.latents.empty() ? 0 : d.latents.dim(1);
  Tensor<float> t({n, a + l});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < a; ++j) t[static_cast<std::size_t>(i) * (a + l) + j] = d.labels[i][j] ? 1.f : -1.f;
    for (int j = 0; j < l; ++j) t[static_cast<std::size_t>(i) * (a + l) + a + j] = d.latents[static_cast<std::size_t>(i) * l + j];
  }
  return t;
}

}  // namespace dime
