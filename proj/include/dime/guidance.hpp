#pragma once

// Counterfactual search by guided denoising.
//
// The query x is corrupted to step tau. At every step t the current noisy state
// z_t is denoised without guidance all the way to a clean estimate x_t; the
// classifier and perceptual losses are differentiated at x_t, the gradient is
// divided by sqrt(alpha_t) and injected into the reverse transition that
// produces z_{t-1}. If z_0 does not fool the classifier, the search restarts
// with the next classifier weight of the ladder.
//
// Queries are processed in lockstep batches. Every query owns two random
// streams per ladder entry (one for the guided chain, one for the clean
// estimates) and every network op is batch independent, so a query's result
// does not depend on what else is in the batch.

#include <functional>
#include <optional>
#include <set>

#include "dime/ddpm.hpp"
#include "dime/nets.hpp"

namespace dime {

enum class Variant { Dime, Direct, Naive, EarlyStop, Unconditional };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Dime: return "dime";
    case Variant::Direct: return "direct";
    case Variant::Naive: return "naive";
    case Variant::EarlyStop: return "early_stop";
    case Variant::Unconditional: return "unconditional";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::Dime, Variant::Direct, Variant::Naive, Variant::EarlyStop, Variant::Unconditional})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown variant '" + s + "' (dime, direct, naive, early_stop, unconditional)");
}

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::Dime, Variant::Direct, Variant::Naive, Variant::EarlyStop,
                                      Variant::Unconditional};
  return v;
}

struct GuidanceConfig {
  int tau = 60;
  std::vector<double> lambda_c_ladder{8, 10, 15};
  double lambda_p = 30;
  double eta = 0.05;
  Variant variant = Variant::Dime;
  int num_diversity_runs = 5;
  int clean_realizations = 1;
  bool trace = false;
  SamplerOptions sampler;

  void validate(int num_steps) const {
    if (tau < 1 || tau > num_steps)
      throw std::invalid_argument("tau must be in 1.." + std::to_string(num_steps) + ", got " + std::to_string(tau));
    if (lambda_c_ladder.empty()) throw std::invalid_argument("lambda_c ladder is empty");
    for (std::size_t i = 0; i < lambda_c_ladder.size(); ++i) {
      if (!(lambda_c_ladder[i] >= 0)) throw std::invalid_argument("lambda_c must be >= 0");
      if (i && !(lambda_c_ladder[i] > lambda_c_ladder[i - 1]))
        throw std::invalid_argument("lambda_c ladder must be increasing");
    }
    if (!(lambda_p >= 0) || !(eta >= 0)) throw std::invalid_argument("lambda_p and eta must be >= 0");
    if (num_diversity_runs < 2) throw std::invalid_argument("diversity needs at least 2 runs");
    if (clean_realizations < 1) throw std::invalid_argument("clean_realizations must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"tau", tau},
            {"lambda_c", lambda_c_ladder},
            {"lambda_p", lambda_p},
            {"eta", eta},
            {"variant", to_string(variant)},
            {"runs", num_diversity_runs},
            {"clean_realizations", clean_realizations},
            {"trace", trace},
            {"clip_denoised", sampler.clip_denoised}};
  }
  static GuidanceConfig from_json(const nlohmann::json& j) { return from_json(j, GuidanceConfig()); }
  static GuidanceConfig from_json(const nlohmann::json& j, GuidanceConfig g) {
    static const std::set<std::string> known{"tau",  "lambda_c", "lambda_p",           "eta",   "variant",
                                             "runs", "trace",    "clean_realizations", "clip_denoised"};
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw std::invalid_argument("unknown guidance key '" + k + "'");
    g.tau = j.value("tau", g.tau);
    if (j.contains("lambda_c")) {
      const auto& l = j.at("lambda_c");
      g.lambda_c_ladder = l.is_array() ? l.get<std::vector<double>>() : std::vector<double>{l.get<double>()};
    }
    g.lambda_p = j.value("lambda_p", g.lambda_p);
    g.eta = j.value("eta", g.eta);
    if (j.contains("variant")) g.variant = variant_from_string(j.at("variant"));
    g.num_diversity_runs = j.value("runs", g.num_diversity_runs);
    g.clean_realizations = j.value("clean_realizations", g.clean_realizations);
    g.trace = j.value("trace", g.trace);
    g.sampler.clip_denoised = j.value("clip_denoised", g.sampler.clip_denoised);
    return g;
  }
};

struct TracePoint {
  int t;
  double target_posterior;  // C(y | x_t); the noisy state for variants that never form x_t
};

struct CounterfactualResult {
  Tensor<float> counterfactual;  // [C, H, W]
  bool success = false;
  std::optional<double> lambda_c_used;
  int attribute = 0;
  int target = 1;
  int query_index = 0;
  Variant variant = Variant::Dime;
  std::uint64_t seed = 0;
  double target_posterior = 0;
  long model_eval_count = 0;
  int attempts = 0;
  std::optional<int> stopped_at;  // early_stop: step whose clean estimate was returned
  std::vector<TracePoint> trace;  // last attempted ladder entry
  std::vector<std::string> errors;
};

template <typename T>
struct LossGrad {
  std::vector<double> loss;  // per row
  Tensor<T> grad;            // d(sum of losses)/d(input)
};

// lambda_c * (-logit_y(x_t)) + lambda_p * perceptual(x_t, x), per row, with the
// gradient taken with x_t as a leaf.
template <typename T>
LossGrad<T> guidance_loss(const ConvNet<T>& classifier, const ConvNet<T>* embedder, const Tensor<T>& x_t,
                          const Tensor<T>& x, int attr, std::span<const int> y, double lambda_c, double lambda_p) {
  require_same_shape(x_t, x, "guidance_loss");
  const int n = x.dim(0);
  LossGrad<T> out{std::vector<double>(n, 0.0), Tensor<T>(x.shape)};
  if (lambda_c == 0 && lambda_p == 0) return out;
  if (lambda_p != 0 && !embedder) throw std::invalid_argument("perceptual term needs an embedder");
  ag::Var<T> leaf(x_t, true);
  std::vector<ag::Var<T>> terms;
  if (lambda_c != 0) {
    auto logits = classifier.forward(leaf);
    terms.push_back(ag::scale(target_logit_loss(logits, attr, y), static_cast<T>(lambda_c)));
    const int a = logits.shape()[1];
    for (int i = 0; i < n; ++i) {
      const double l = logits.value()[static_cast<std::size_t>(i) * a + attr];
      out.loss[i] += lambda_c * (y[i] == 1 ? -l : l);
    }
  }
  if (lambda_p != 0) {
    const auto ref = perceptual_reference(*embedder, x);
    auto feats = embedder->features(leaf);
    terms.push_back(ag::scale(perceptual_loss(feats, ref), static_cast<T>(lambda_p)));
    for (std::size_t l = 0; l < feats.size(); ++l) {
      const auto f = ag::unit_channels(feats[l].value());
      const std::size_t ss = f.sample_size();
      for (int i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < ss; ++k) {
          const double d = static_cast<double>(f[i * ss + k]) - ref[l][i * ss + k];
          s += d * d;
        }
        out.loss[i] += lambda_p * s / spatial_size(f);
      }
    }
  }
  ag::backward(ag::sum(terms));
  out.grad = leaf.grad();
  return out;
}

// Gradient with respect to the noisy state from one taken at the clean estimate.
template <typename T>
Tensor<T> rescale_clean_gradient(const Tensor<T>& grad_clean, const NoiseSchedule& s, int t) {
  if (t < 1) throw std::out_of_range("rescale_clean_gradient needs t >= 1");
  const T k = static_cast<T>(1.0 / std::sqrt(s.alpha_bar(t)));
  Tensor<T> out(grad_clean.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = grad_clean[i] * k;
  return out;
}

inline float sign0(float v) { return v > 0 ? 1.f : (v < 0 ? -1.f : 0.f); }

// eta * sign(z - x), with sign(0) = 0.
inline Tensor<float> l1_subgradient(const Tensor<float>& z, const Tensor<float>& x, double eta) {
  require_same_shape(z, x, "l1_subgradient");
  Tensor<float> out(z.shape);
  if (eta == 0) return out;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(eta) * sign0(z[i] - x[i]);
  return out;
}

// Shifts an unguided transition by -sigma^2 (gradient + eta_term) and samples it.
inline Tensor<float> guided_from(DenoiserOutput out, int t, const Tensor<float>& gradient,
                                 const Tensor<float>& eta_term, const Tensor<float>& noise) {
  require_same_shape(out.mean, gradient, "guided_step gradient");
  require_same_shape(out.mean, eta_term, "guided_step eta term");
  const float v = static_cast<float>(out.variance);
  for (std::size_t i = 0; i < out.mean.numel(); ++i) out.mean[i] -= v * (gradient[i] + eta_term[i]);
  return sample_from(out, t, noise);
}

template <NoisePredictor Model>
Tensor<float> guided_step(const Model& model, const NoiseSchedule& s, const Tensor<float>& z_t, int t,
                          const Tensor<float>& gradient, const Tensor<float>& eta_term, const Tensor<float>& noise,
                          SamplerOptions opt = {}) {
  return guided_from(predict_mean_variance(model, s, z_t, t, opt), t, gradient, eta_term, noise);
}

// Classifier plus optional embedder, the differentiable side of the search.
struct GuidanceNets {
  const ConvNet<float>* classifier = nullptr;
  const ConvNet<float>* embedder = nullptr;
  int attribute = 0;

  Tensor<float> logits(const Tensor<float>& x) const { return classifier->predict(x); }
  LossGrad<float> loss(const Tensor<float>& x_t, const Tensor<float>& x, std::span<const int> y, double lc,
                       double lp) const {
    return guidance_loss(*classifier, embedder, x_t, x, attribute, y, lc, lp);
  }
};

// Anything that scores images and differentiates the guidance objective.
template <typename G>
concept GuidanceObjective = requires(const G& g, const Tensor<float>& x, std::span<const int> y, double w) {
  { g.attribute } -> std::convertible_to<int>;
  { g.logits(x) } -> std::convertible_to<Tensor<float>>;
  { g.loss(x, x, y, w, w) } -> std::convertible_to<LossGrad<float>>;
};

// Observation point for tests and traces, called once per outer step.
struct StepEvent {
  int ladder_entry;
  int t;
  std::span<const int> queries;         // query indices of the rows below
  const Tensor<float>& z_t;
  const Tensor<float>* clean = nullptr;  // x_t, when formed
  const Tensor<float>* clean_grad = nullptr;
  const Tensor<float>* injected_grad = nullptr;
};
using StepHook = std::function<void(const StepEvent&)>;

struct ExplainRequest {
  Tensor<float> queries;  // [N, C, H, W]
  std::vector<int> targets;
  std::vector<std::uint64_t> seeds;
};

namespace detail {

// Adds one evaluation per active row to that row's query.
template <NoisePredictor Model>
struct RowCountingModel {
  const Model& model;
  std::vector<long>& counts;
  const std::vector<int>& rows;
  Tensor<float> predict_noise(const Tensor<float>& z, std::span<const int> t) const {
    for (int r : rows) ++counts[r];
    return model.predict_noise(z, t);
  }
};

template <typename U>
std::vector<U> pick(const std::vector<U>& v, const std::vector<int>& keep) {
  std::vector<U> out;
  out.reserve(keep.size());
  for (int k : keep) out.push_back(v[k]);
  return out;
}

inline std::vector<double> target_posteriors(const Tensor<float>& logits, int attr, std::span<const int> y) {
  const int a = logits.dim(1);
  std::vector<double> p(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) p[i] = target_posterior(logits[i * a + attr], y[i]);
  return p;
}

}  // namespace detail

// Runs the configured variant for a batch of queries.
template <NoisePredictor Model, GuidanceObjective Nets>
std::vector<CounterfactualResult> explain_batch(const Model& model, const NoiseSchedule& s, const Nets& nets,
                                                const ExplainRequest& req, const GuidanceConfig& cfg,
                                                const StepHook& hook = {}) {
  cfg.validate(s.num_steps());
  const auto& X = req.queries;
  if (X.rank() != 4) throw std::invalid_argument("queries must be [N, C, H, W]");
  const int n = X.dim(0);
  if (n == 0) throw std::invalid_argument("no queries to explain");
  if (req.targets.size() != static_cast<std::size_t>(n) || req.seeds.size() != static_cast<std::size_t>(n))
    throw std::invalid_argument("one target and one seed per query required");
  const int attr = nets.attribute;
  {
    const auto p = detail::target_posteriors(nets.logits(X), attr, req.targets);
    for (int i = 0; i < n; ++i)
      if (p[i] > 0.5)
        throw std::invalid_argument("query " + std::to_string(i) + " is already classified as its target");
  }

  std::vector<CounterfactualResult> res(n);
  std::vector<long> evals(n, 0);
  for (int i = 0; i < n; ++i) {
    res[i].counterfactual = unstack(X, i);
    res[i].attribute = attr;
    res[i].target = req.targets[i];
    res[i].query_index = i;
    res[i].variant = cfg.variant;
    res[i].seed = req.seeds[i];
  }

  const bool guided = cfg.variant != Variant::Unconditional;
  const std::size_t entries = guided ? cfg.lambda_c_ladder.size() : 1;
  std::vector<int> pending(n);
  std::iota(pending.begin(), pending.end(), 0);

  for (std::size_t k = 0; k < entries && !pending.empty(); ++k) {
    const double lc = guided ? cfg.lambda_c_ladder[k] : 0.0;
    const double lp = guided ? cfg.lambda_p : 0.0;
    const double eta = guided ? cfg.eta : 0.0;

    // Active rows of this entry; rows leave on early stop or error.
    std::vector<int> rows = pending;
    std::vector<Rng> chain, clean;
    for (int q : rows) {
      chain.emplace_back(derive_seed(req.seeds[q], k, 0));
      clean.emplace_back(derive_seed(req.seeds[q], k, 1));
      res[q].attempts++;
      res[q].trace.clear();
      res[q].stopped_at.reset();
    }
    Tensor<float> x = gather_rows(X, rows);
    std::vector<int> y = detail::pick(req.targets, rows);
    std::vector<int> finished;  // rows that already hold their candidate for this entry

    auto drop = [&](const std::vector<int>& local) {
      std::vector<int> keep;
      for (int i = 0; i < static_cast<int>(rows.size()); ++i)
        if (std::find(local.begin(), local.end(), i) == local.end()) keep.push_back(i);
      return keep;
    };
    Tensor<float> z;
    auto compact = [&](const std::vector<int>& keep) {
      z = gather_rows(z, keep);
      x = gather_rows(x, keep);
      y = detail::pick(y, keep);
      chain = detail::pick(chain, keep);
      clean = detail::pick(clean, keep);
      rows = detail::pick(rows, keep);
    };

    z = forward_sample(s, x, cfg.tau, randn_rows(x.shape, chain));
    Tensor<float> naive_grad;
    if (cfg.variant == Variant::Naive) naive_grad = nets.loss(x, x, y, lc, lp).grad;

    detail::RowCountingModel<Model> counted{model, evals, rows};
    for (int t = cfg.tau; t >= 1 && !rows.empty(); --t) {
      Tensor<float> x_t, g_clean, g;
      bool have_clean = false;
      switch (cfg.variant) {
        case Variant::Dime:
        case Variant::EarlyStop: {
          for (int r = 0; r < cfg.clean_realizations; ++r) {
            auto est = denoise_to_clean(counted, s, z, t, std::span<Rng>(clean), cfg.sampler);
            auto lg = nets.loss(est, x, y, lc, lp);
            if (r == 0) {
              x_t = std::move(est);
              g_clean = std::move(lg.grad);
            } else {
              for (std::size_t i = 0; i < g_clean.numel(); ++i) g_clean[i] += lg.grad[i];
            }
          }
          if (cfg.clean_realizations > 1)
            for (auto& v : g_clean.data) v /= static_cast<float>(cfg.clean_realizations);
          have_clean = true;
          g = rescale_clean_gradient(g_clean, s, t);
          break;
        }
        case Variant::Direct:
          g = nets.loss(z, x, y, lc, lp).grad;
          break;
        case Variant::Naive:
          g = rescale_clean_gradient(naive_grad, s, t);
          break;
        case Variant::Unconditional:
          g = Tensor<float>(z.shape);
          break;
      }

      if (cfg.trace || cfg.variant == Variant::EarlyStop) {
        const auto p = detail::target_posteriors(nets.logits(have_clean ? x_t : z), attr, y);
        std::vector<int> stop;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (cfg.trace) res[rows[i]].trace.push_back({t, p[i]});
          if (cfg.variant == Variant::EarlyStop && p[i] > 0.5) {
            res[rows[i]].counterfactual = unstack(x_t, static_cast<int>(i));
            res[rows[i]].stopped_at = t;
            stop.push_back(static_cast<int>(i));
          }
        }
        if (!stop.empty()) {
          for (int i : stop) finished.push_back(rows[i]);
          const auto keep = drop(stop);
          if (keep.empty()) {
            rows.clear();
            break;
          }
          x_t = gather_rows(x_t, keep);
          g_clean = gather_rows(g_clean, keep);
          g = gather_rows(g, keep);
          compact(keep);
        }
      }
      if (hook) hook({static_cast<int>(k), t, rows, z, have_clean ? &x_t : nullptr, have_clean ? &g_clean : nullptr, &g});
      {
        std::vector<int> bad;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const auto gi = g.sample(static_cast<int>(i));
          if (!std::all_of(gi.begin(), gi.end(), [](float v) { return std::isfinite(v); })) {
            res[rows[i]].errors.push_back("non-finite guidance gradient at step " + std::to_string(t) +
                                          " with lambda_c " + std::to_string(lc));
            bad.push_back(static_cast<int>(i));
          }
        }
        if (!bad.empty()) {
          const auto keep = drop(bad);
          g = gather_rows(g, keep);
          compact(keep);
          if (rows.empty()) break;
        }
        auto out = predict_mean_variance(counted, s, z, t, cfg.sampler);
        const auto noise = randn_rows(z.shape, chain);
        z = guided_from(std::move(out), t, g, l1_subgradient(z, x, eta), noise);
      }
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      res[rows[i]].counterfactual = unstack(z, static_cast<int>(i));
      finished.push_back(rows[i]);
    }
    if (hook && !rows.empty()) hook({static_cast<int>(k), 0, rows, z, nullptr, nullptr, nullptr});

    // Decide success for every row that produced a candidate in this entry.
    std::sort(finished.begin(), finished.end());
    if (!finished.empty()) {
      std::vector<Tensor<float>> cands;
      std::vector<int> ys;
      for (int q : finished) {
        cands.push_back(res[q].counterfactual);
        ys.push_back(res[q].target);
      }
      const auto p = detail::target_posteriors(nets.logits(stack(cands)), attr, ys);
      for (std::size_t i = 0; i < finished.size(); ++i) {
        auto& r = res[finished[i]];
        r.target_posterior = p[i];
        r.success = p[i] > 0.5;
        if (r.success && guided) r.lambda_c_used = lc;
      }
    }
    std::vector<int> still;
    for (int q : pending)
      if (!res[q].success) still.push_back(q);
    pending = std::move(still);
  }
  for (int i = 0; i < n; ++i) res[i].model_eval_count = evals[i];
  return res;
}

// Single-query convenience wrapper.
template <NoisePredictor Model, GuidanceObjective Nets>
CounterfactualResult explain(const Model& model, const NoiseSchedule& s, const Nets& nets, const Tensor<float>& x,
                             int target, const GuidanceConfig& cfg, std::uint64_t seed, const StepHook& hook = {}) {
  ExplainRequest req{stack(std::vector<Tensor<float>>{x}), {target}, {seed}};
  return explain_batch(model, s, nets, req, cfg, hook).front();
}

// Seeds for independent diversity runs of one query.
inline std::vector<std::uint64_t> diversity_seeds(std::uint64_t seed, int runs) {
  std::vector<std::uint64_t> v(runs);
  for (int r = 0; r < runs; ++r) v[r] = derive_seed(seed, 0xd1e5, r);
  return v;
}

// runs[r][q]: result of run r for query q. run_seeds[r][q] seeds that pair.
template <NoisePredictor Model, GuidanceObjective Nets>
std::vector<std::vector<CounterfactualResult>> explain_diverse(
    const Model& model, const NoiseSchedule& s, const Nets& nets, const Tensor<float>& queries,
    const std::vector<int>& targets, const std::vector<std::vector<std::uint64_t>>& run_seeds,
    const GuidanceConfig& cfg) {
  const int runs = static_cast<int>(run_seeds.size());
  if (runs < 2) throw std::invalid_argument("explain_diverse needs at least 2 runs");
  const int n = queries.dim(0);
  ExplainRequest req;
  std::vector<Tensor<float>> all;
  for (int r = 0; r < runs; ++r) {
    if (run_seeds[r].size() != static_cast<std::size_t>(n)) throw std::invalid_argument("one seed per query per run");
    for (int q = 0; q < n; ++q) {
      all.push_back(unstack(queries, q));
      req.targets.push_back(targets.at(q));
      req.seeds.push_back(run_seeds[r][q]);
    }
  }
  req.queries = stack(all);
  auto flat = explain_batch(model, s, nets, req, cfg);
  std::vector<std::vector<CounterfactualResult>> out(runs);
  for (int r = 0; r < runs; ++r)
    for (int q = 0; q < n; ++q) {
      out[r].push_back(std::move(flat[static_cast<std::size_t>(r) * n + q]));
      out[r].back().query_index = q;
    }
  return out;
}

}  // namespace dime
