// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.
//
//   acceptance [--work DIR] [--config FILE] [--queries N] [--only 1,2,...]
//
// Criteria 1-4 take seconds. Criteria 5-9 train the desk-scale models into the
// work directory (reused on later runs) and explain N >= 64 queries.

#include <iostream>

#include <CLI11.hpp>

#include "dime/experiment.hpp"

using namespace dime;
namespace fs = std::filesystem;
using exp::json;

namespace {

class Criterion {
 public:
  explicit Criterion(int id) : id_(id) {}
  bool expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
    return ok;
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool passed() const { return failures_.empty(); }
  void print() const {
    std::cout << "CRITERION " << id_ << ": " << (passed() ? "PASS" : "FAIL");
    for (const auto& n : notes_) std::cout << " | " << n;
    for (const auto& f : failures_) std::cout << " | failed: " << f;
    std::cout << std::endl;
  }

 private:
  int id_;
  std::vector<std::string> notes_, failures_;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

void log_line(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

// ---------------------------------------------------------------------------
// 1. schedule arithmetic

void schedule_math(Criterion& c) {
  double worst = 0;
  for (const auto& s : {build_default_schedule(200), build_cosine_schedule(200), build_linear_schedule(1000, 1e-4, 0.02)}) {
    long double a = 1;
    for (int t = 1; t <= s.num_steps(); ++t) {
      a *= 1.0L - static_cast<long double>(s.beta(t));
      worst = std::max(worst, static_cast<double>(std::fabs(a - static_cast<long double>(s.alpha_bar(t)))));
    }
  }
  c.expect(worst <= 1e-12, "alpha recursion error " + fmt(worst));
  c.note("alpha recursion max error " + fmt(worst, 3));

  const auto base = build_default_schedule(1000);
  double rworst = 0;
  for (int count : {200, 50, 7}) {
    const auto keep = uniform_keep(1000, count);
    const auto r = respace(base, keep);
    double prev = 1;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      rworst = std::max(rworst, std::fabs(r.alpha_bar(static_cast<int>(i) + 1) - base.alpha_bar(keep[i])));
      rworst = std::max(rworst, std::fabs(r.beta(static_cast<int>(i) + 1) - (1 - base.alpha_bar(keep[i]) / prev)));
      prev = base.alpha_bar(keep[i]);
    }
  }
  c.expect(rworst <= 1e-12, "respacing error " + fmt(rworst));

  // recursive noising vs the closed form, 10^4 samples at several starting values
  const auto s = build_default_schedule(200);
  const int n = 10000, t = 60;
  const std::vector<double> xs{-0.9, 0.0, 0.4, 1.0};
  const Tensor<double> x({1, static_cast<int>(xs.size())}, xs);
  Rng rng(2024);
  std::vector<double> sr(xs.size()), qr(xs.size()), sd(xs.size()), qd(xs.size());
  for (int k = 0; k < n; ++k) {
    auto z = x;
    for (int j = 1; j <= t; ++j) z = forward_step(s, z, j, randn<double>(x.shape, rng));
    const auto d = forward_sample(s, x, t, randn<double>(x.shape, rng));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sr[i] += z[i], qr[i] += z[i] * z[i], sd[i] += d[i], qd[i] += d[i] * d[i];
    }
  }
  const double ab = s.alpha_bar(t), var = 1 - ab;
  const double se_m = std::sqrt(var / n), se_v = var * std::sqrt(2.0 / (n - 1));
  int bad = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double mr = sr[i] / n, md = sd[i] / n, vr = qr[i] / n - mr * mr, vd = qd[i] / n - md * md;
    bad += std::fabs(mr - std::sqrt(ab) * xs[i]) > 4 * se_m;
    bad += std::fabs(md - std::sqrt(ab) * xs[i]) > 4 * se_m;
    bad += std::fabs(vr - var) > 4 * se_v;
    bad += std::fabs(vd - var) > 4 * se_v;
  }
  c.expect(bad == 0, std::to_string(bad) + " moment checks outside 4 standard errors");
}

// ---------------------------------------------------------------------------
// 2. guidance identities

struct ShrinkModel {
  Tensor<float> predict_noise(const Tensor<float>& z, std::span<const int>) const {
    Tensor<float> out(z.shape);
    for (std::size_t i = 0; i < z.numel(); ++i) out[i] = 0.3f * z[i];
    return out;
  }
};

// logit = w * sum(x); loss lc * (-s * logit) + lp / 2 * |x_t - x|^2.
struct LinearObjective {
  int attribute = 0;
  float w = 0.1f;
  Tensor<float> logits(const Tensor<float>& x) const {
    Tensor<float> out({x.dim(0), 1});
    for (int i = 0; i < x.dim(0); ++i) {
      double s = 0;
      for (float v : x.sample(i)) s += v;
      out[i] = static_cast<float>(w * s);
    }
    return out;
  }
  LossGrad<float> loss(const Tensor<float>& x_t, const Tensor<float>& x, std::span<const int> y, double lc,
                       double lp) const {
    LossGrad<float> out{std::vector<double>(x.dim(0)), Tensor<float>(x.shape)};
    const std::size_t ss = x.sample_size();
    for (int i = 0; i < x.dim(0); ++i)
      for (std::size_t k = 0; k < ss; ++k) {
        const std::size_t j = i * ss + k;
        out.grad[j] = static_cast<float>(-lc * (y[i] == 1 ? 1 : -1) * w + lp * (x_t[j] - x[j]));
      }
    return out;
  }
};

void guidance_identities(Criterion& c) {
  const auto s = build_default_schedule(40);
  Rng rng(5);
  auto x = randn<float>({3, 1, 4, 4}, rng);
  for (auto& v : x.data) v = std::clamp(0.2f * v - 0.5f, -1.f, 1.f);
  const std::vector<int> y{1, 1, 1};
  const std::vector<std::uint64_t> seeds{11, 12, 13};

  // (a) zero guidance against the plain chain, replayed independently
  GuidanceConfig zero;
  zero.tau = 10;
  zero.lambda_c_ladder = {0};
  zero.lambda_p = 0;
  zero.eta = 0;
  const auto a = explain_batch(ShrinkModel{}, s, LinearObjective{}, {x, y, seeds}, zero);
  bool same = true;
  for (int q = 0; q < 3; ++q) {
    Rng r(derive_seed(seeds[q], 0, 0));
    const auto xq = gather_rows(x, std::vector<int>{q});
    auto z = forward_sample(s, xq, zero.tau, randn<float>(xq.shape, r));
    for (int t = zero.tau; t >= 1; --t) z = reverse_step(ShrinkModel{}, s, z, t, randn<float>(xq.shape, r));
    same = same && a[q].counterfactual.data == unstack(z, 0).data;
  }
  c.expect(same, "zero-guidance chain differs from the unconditional chain");

  // (b) injected gradient = clean gradient / sqrt(alpha_t), and the clean gradient is the analytic one
  GuidanceConfig g;
  g.tau = 10;
  g.lambda_c_ladder = {3};
  g.lambda_p = 0.5;
  g.eta = 0.05;
  int exact = 0, total = 0;
  double analytic_err = 0;
  explain_batch(ShrinkModel{}, s, LinearObjective{}, {x, y, seeds}, g, [&](const StepEvent& e) {
    if (e.t == 0 || !e.clean) return;
    const float k = static_cast<float>(1.0 / std::sqrt(s.alpha_bar(e.t)));
    const auto xa = gather_rows(x, std::vector<int>(e.queries.begin(), e.queries.end()));
    for (std::size_t i = 0; i < e.injected_grad->numel(); ++i) {
      ++total;
      exact += (*e.injected_grad)[i] == (*e.clean_grad)[i] * k;
      const double expect = -3 * 0.1 + 0.5 * ((*e.clean)[i] - xa[i]);
      analytic_err = std::max(analytic_err, std::fabs((*e.clean_grad)[i] - expect));
    }
  });
  c.expect(total > 0 && exact == total, std::to_string(total - exact) + " injected gradients differ from clean / sqrt(alpha)");
  c.expect(analytic_err < 1e-6, "clean gradient off the analytic value by " + fmt(analytic_err));

  // (c) real networks against central differences
  ConvNet<double> clf({3, 16, {{6, 1}, {8, 2}}, 2}, 2);
  ConvNet<double> emb({3, 16, {{6, 1}, {8, 2}}, 3}, 3);
  const auto xd = randn<double>({2, 3, 16, 16}, rng);
  auto xt = xd;
  const auto jitter = randn<double>(xd.shape, rng);
  for (std::size_t i = 0; i < xt.numel(); ++i) xt[i] += 0.3 * jitter[i];
  const std::vector<int> yd{1, 0};
  for (double lp : {0.0, 30.0}) {
    const auto lg = guidance_loss(clf, &emb, xt, xd, 0, yd, 10.0, lp);
    auto f = [&](const Tensor<double>& p) {
      const auto l = guidance_loss(clf, &emb, p, xd, 0, yd, 10.0, lp).loss;
      return l[0] + l[1];
    };
    std::vector<double> errs;
    auto p = xt;
    for (int k = 0; k < 80; ++k) {
      const std::size_t i = rng() % p.numel();
      const double h = 1e-5, orig = p[i];
      p[i] = orig + h;
      const double fp = f(p);
      p[i] = orig - h;
      const double fm = f(p);
      p[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      errs.push_back(std::abs(fd - lg.grad[i]) / std::max({std::abs(fd), std::abs(lg.grad[i]), 1e-8}));
    }
    std::nth_element(errs.begin(), errs.begin() + errs.size() / 2, errs.end());
    const double med = errs[errs.size() / 2];
    c.expect(med < 1e-3, "finite-difference median error " + fmt(med) + " at lambda_p " + fmt(lp));
    c.note("FD median rel. error (lambda_p=" + fmt(lp) + ") " + fmt(med, 2));
  }
}

// ---------------------------------------------------------------------------
// 3. correlation difference against a brute-force implementation

double pearson_bf(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = a.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double cab = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cab += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return cab / std::sqrt(va * vb);
}

double cd_bf(const std::vector<double>& truth, const metrics::Decisions& before, const metrics::Decisions& after, int q) {
  const std::size_t A = truth.size();
  std::vector<std::vector<double>> d(A);
  for (std::size_t i = 0; i < before.size(); ++i)
    for (std::size_t a = 0; a < A; ++a) d[a].push_back(after[i][a] - before[i][a]);
  double s = 0;
  for (std::size_t a = 0; a < A; ++a)
    if (static_cast<int>(a) != q) s += std::fabs(truth[a] - pearson_bf(d[q], d[a]));
  return s;
}

// Exact correlation of two binary attributes from the joint table, by enumeration.
double joint_corr(const data::AttributeSpec& spec, int i, int j) {
  double pi = 0, pj = 0, pij = 0;
  for (std::size_t cell = 0; cell < spec.joint.size(); ++cell) {
    const int ai = (cell >> i) & 1, aj = (cell >> j) & 1;
    pi += spec.joint[cell] * ai;
    pj += spec.joint[cell] * aj;
    pij += spec.joint[cell] * ai * aj;
  }
  return (pij - pi * pj) / std::sqrt(pi * (1 - pi) * pj * (1 - pj));
}

void cd_oracle(Criterion& c) {
  const metrics::Decisions before{{0, 0, 1, 0}, {1, 1, 0, 0}, {0, 1, 1, 1}, {1, 0, 0, 1}, {0, 0, 0, 0}, {1, 1, 1, 0}};
  const metrics::Decisions after{{1, 1, 1, 0}, {0, 0, 0, 1}, {1, 1, 0, 1}, {0, 0, 1, 1}, {1, 0, 0, 0}, {0, 1, 1, 1}};
  const std::vector<double> truth{1.0, 0.6, -0.1, 0.2};
  const auto rep = metrics::correlation_difference(std::vector<std::optional<double>>(truth.begin(), truth.end()),
                                                   metrics::delta_table(before, after), 0);
  const double oracle = cd_bf(truth, before, after, 0);
  c.expect(rep.cd_value && std::fabs(*rep.cd_value - oracle) <= 1e-10, "six-sample fixture differs from brute force");
  c.note("fixture CD " + fmt(rep.cd_value.value_or(NAN), 6));

  // synthetic labels: ground truth from the joint table, deltas from a deterministic edit rule
  data::GenerationConfig g;
  g.count = 400;
  g.resolution = 16;
  const auto d = data::generate_dataset(g);
  const auto exact = data::compute_ground_truth_correlations(g.spec);
  double worst = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (i != j) worst = std::max(worst, std::fabs(exact[i][j].value() - joint_corr(g.spec, i, j)));
  c.expect(worst <= 1e-10, "ground-truth correlations differ from enumeration by " + fmt(worst));
  Rng rng(3);
  metrics::Decisions b, a;
  for (int r = 0; r < 200; ++r) {
    b.push_back(d.labels[r]);
    auto e = d.labels[r];
    e[0] = 1 - e[0];
    for (int k = 1; k < 4; ++k)
      if (uniform01(rng) < 0.3 * k) e[k] = 1 - e[k];
    a.push_back(e);
  }
  for (int q = 0; q < 4; ++q) {
    std::vector<std::optional<double>> t_opt;
    std::vector<double> t;
    for (int k = 0; k < 4; ++k) {
      t.push_back(k == q ? 1.0 : joint_corr(g.spec, q, k));
      t_opt.push_back(t.back());
    }
    const auto r = metrics::correlation_difference(t_opt, metrics::delta_table(b, a), q);
    const double o = cd_bf(t, b, a, q);
    c.expect(r.cd_value && std::fabs(*r.cd_value - o) <= 1e-10, "synthetic CD differs from brute force for q=" + std::to_string(q));
  }

  // perfect agreement
  const std::vector<std::vector<int>> pd{{1, 1, -1, 1}, {-1, -1, 1, 1}, {1, 1, -1, -1}, {-1, -1, 1, -1}};
  const auto pr = metrics::correlation_difference({1.0, 1.0, -1.0, 0.0}, pd, 0);
  c.expect(pr.cd_value && *pr.cd_value == 0.0, "perfect agreement gives CD " + fmt(pr.cd_value.value_or(NAN)));
}

// ---------------------------------------------------------------------------
// 4. Frechet distance

void frechet(Criterion& c) {
  Rng rng(9);
  const auto a = randn<float>({300, 8}, rng);
  const double self = metrics::frechet_distance(a, a);
  c.expect(self <= 1e-6, "identical sets give " + fmt(self));
  auto stats = [](double mu, double sigma) {
    metrics::GaussianStats s;
    s.mean = Eigen::VectorXd::Constant(1, mu);
    s.cov = Eigen::MatrixXd::Constant(1, 1, sigma * sigma);
    return s;
  };
  const double d1 = metrics::frechet_distance(stats(0, 1), stats(1, 1));
  const double d4 = metrics::frechet_distance(stats(0, 1), stats(0, 3));
  c.expect(std::fabs(d1 - 1.0) <= 1e-6, "mean shift case gives " + fmt(d1, 10));
  c.expect(std::fabs(d4 - 4.0) <= 1e-6, "scale case gives " + fmt(d4, 10));
  c.note("self " + fmt(self, 2) + ", cases " + fmt(d1, 10) + " / " + fmt(d4, 10));
}

// ---------------------------------------------------------------------------
// 5-9: trained desk-scale models

struct Desk {
  exp::ExperimentConfig cfg;
  data::Dataset data;
  exp::Models models;
  exp::QuerySet queries;
  fs::path out;
  std::vector<std::string> warnings;
  json record = json::object();
  long evals = 0;
  std::map<std::string, std::vector<exp::TableRow>> tables;
};

const exp::TableRow& row(const std::vector<exp::TableRow>& rows, const std::string& label) {
  for (const auto& r : rows)
    if (r.label == label) return r;
  throw std::logic_error("missing row " + label);
}

std::vector<exp::TableRow>& table(Desk& d, const std::string& name,
                                  const std::vector<std::pair<std::string, GuidanceConfig>>& settings) {
  auto it = d.tables.find(name);
  if (it != d.tables.end()) return it->second;
  auto rows = exp::compare(d.models, d.data, d.queries, settings, d.cfg.evaluation.fid_repeats, d.cfg.queries.seed,
                           d.warnings, log_line);
  for (const auto& r : rows) d.evals += exp::total_evals(r.results);
  exp::write_table(d.out / (name + ".csv"), name == "ablation" ? "variant" : name, rows);
  d.record[name] = exp::table_json(rows);
  return d.tables[name] = std::move(rows);
}

std::string row_summary(const exp::TableRow& r) {
  const auto& e = r.eval.report;
  return r.label + " FR " + fmt(e.flip_ratio, 3) + " l1 " + fmt(e.mean_l1.value_or(NAN), 3) + " BKL " +
         fmt(e.mean_bkl.value_or(NAN), 3);
}

void end_to_end(Criterion& c, Desk& d) {
  const int n = static_cast<int>(d.queries.rows.size());
  c.expect(n >= 64, "only " + std::to_string(n) + " queries");
  c.expect(d.cfg.guidance.tau == 60 && d.cfg.guidance.lambda_c_ladder == std::vector<double>{8, 10, 15},
           "not the tau=60, {8,10,15} setting");
  const auto& rows = table(d, "ablation", exp::variant_settings(d.cfg.guidance, all_variants()));
  const auto& dime = row(rows, "dime").eval.report;
  c.expect(dime.flip_ratio >= 0.90, "flip ratio " + fmt(dime.flip_ratio));
  c.expect(dime.mean_bkl && *dime.mean_bkl <= 0.2, "mean BKL " + fmt(dime.mean_bkl.value_or(NAN)));
  c.note(std::to_string(n) + " queries, T=" + std::to_string(d.cfg.num_steps) + ", FR " + fmt(dime.flip_ratio, 3) +
         ", BKL " + fmt(dime.mean_bkl.value_or(NAN), 3));
  exp::write_explanations(d.out / "dime", d.queries, row(rows, "dime").results, d.cfg.guidance);
}

void ablation(Criterion& c, Desk& d) {
  const auto& rows = table(d, "ablation", exp::variant_settings(d.cfg.guidance, all_variants()));
  const auto& dime = row(rows, "dime").eval.report;
  const auto& naive = row(rows, "naive").eval.report;
  const auto& direct = row(rows, "direct").eval.report;
  const auto& es = row(rows, "early_stop").eval.report;
  c.expect(dime.flip_ratio > naive.flip_ratio, "FR(dime) " + fmt(dime.flip_ratio) + " <= FR(naive) " + fmt(naive.flip_ratio));
  c.expect(naive.flip_ratio > direct.flip_ratio,
           "FR(naive) " + fmt(naive.flip_ratio) + " <= FR(direct) " + fmt(direct.flip_ratio));
  c.expect(std::fabs(es.flip_ratio - dime.flip_ratio) <= 0.05,
           "FR(early_stop) " + fmt(es.flip_ratio) + " not within 5 points of " + fmt(dime.flip_ratio));
  c.expect(dime.mean_l1 && naive.mean_l1 && *dime.mean_l1 < *naive.mean_l1,
           "l1(dime) " + fmt(dime.mean_l1.value_or(NAN)) + " !< l1(naive) " + fmt(naive.mean_l1.value_or(NAN)));
  c.expect(dime.mean_bkl && es.mean_bkl && *es.mean_bkl > *dime.mean_bkl,
           "BKL(early_stop) " + fmt(es.mean_bkl.value_or(NAN)) + " !> BKL(dime) " + fmt(dime.mean_bkl.value_or(NAN)));
  for (const auto& r : rows) c.note(row_summary(r));
}

void diversity(Criterion& c, Desk& d) {
  const auto q = exp::head(d.queries, d.cfg.evaluation.diversity_queries);
  const int runs = 5;
  const auto div = exp::diversity(d.models, q, d.cfg.guidance, runs);
  const auto same = exp::diversity(d.models, q, d.cfg.guidance, runs, true);
  d.evals += div.model_evals + same.model_evals;
  c.expect(div.score > 0, "diversity " + fmt(div.score));
  c.expect(same.score == 0.0, "identical seeds give " + fmt(same.score));
  c.note(std::to_string(q.rows.size()) + " queries x " + std::to_string(runs) + " runs: " + fmt(div.score) +
         ", identical seeds " + fmt(same.score));
  d.record["diversity"] = {{"queries", q.rows.size()}, {"runs", runs}, {"score", div.score}, {"identical_seed_score", same.score}};
}

void eval_count(Criterion& c, Desk& d) {
  auto g = d.cfg.guidance;
  g.tau = 60;
  const long expected = 60L * 61 / 2 + 60;
  const auto nets = exp::guidance_nets(d.models, d.queries.attribute);
  // a single entry that cannot succeed, a full ladder, and a batch of two
  for (const auto& ladder : {std::vector<double>{0}, std::vector<double>{0, 1, 2}}) {
    g.lambda_c_ladder = ladder;
    CountingModel<Denoiser<float>> counter(*d.models.denoiser);
    const auto r = explain(counter, d.models.schedule, nets, unstack(d.queries.images, 0), d.queries.targets[0], g,
                           d.queries.seeds[0]);
    c.expect(counter.rows() == expected * r.attempts && r.model_eval_count == counter.rows(),
             std::to_string(counter.rows()) + " denoiser calls for " + std::to_string(r.attempts) + " ladder entries");
    d.evals += counter.rows();
  }
  if (d.tables.count("ablation")) {
    const auto& res = row(d.tables["ablation"], "dime").results;
    int bad = 0;
    for (const auto& r : res) bad += r.model_eval_count != expected * r.attempts;
    c.expect(bad == 0, std::to_string(bad) + " dime queries off " + std::to_string(expected) + " per entry");
  }
  c.note(std::to_string(expected) + " denoiser evaluations per ladder entry");
}

void sweeps(Criterion& c, Desk& d) {
  const auto& taus = table(d, "tau", exp::sweep_settings(d.cfg.guidance, "tau", {50, 60, 70}, d.cfg.num_steps));
  const auto& lcs = table(d, "lambda_c", exp::sweep_settings(d.cfg.guidance, "lambda_c", d.cfg.guidance.lambda_c_ladder,
                                                             d.cfg.num_steps));
  for (std::size_t i = 1; i < taus.size(); ++i) {
    const auto &a = taus[i - 1].eval.report, &b = taus[i].eval.report;
    c.expect(b.flip_ratio >= a.flip_ratio, "FR drops from tau " + taus[i - 1].label + " to " + taus[i].label);
    c.expect(a.mean_l1 && b.mean_l1 && *b.mean_l1 >= *a.mean_l1,
             "l1 drops from tau " + taus[i - 1].label + " to " + taus[i].label);
  }
  for (std::size_t i = 1; i < lcs.size(); ++i)
    c.expect(lcs[i].eval.report.flip_ratio >= lcs[i - 1].eval.report.flip_ratio,
             "FR drops from lambda_c " + lcs[i - 1].label + " to " + lcs[i].label);
  std::string t = "tau", l = "lambda_c";
  for (const auto& r : taus) t += " " + r.label + ":" + fmt(r.eval.report.flip_ratio, 3) + "/" + fmt(r.eval.report.mean_l1.value_or(NAN), 3);
  for (const auto& r : lcs) l += " " + r.label + ":" + fmt(r.eval.report.flip_ratio, 3);
  c.note(t + " (FR/l1)");
  c.note(l + " (FR)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work", config;
  int queries = 64;
  std::vector<int> only;
  app.add_option("--work", work, "work directory for data, models and reports");
  app.add_option("--config", config, "experiment config overriding the desk defaults");
  app.add_option("--queries", queries, "queries for criteria 5-9");
  app.add_option("--only", only, "run a subset of criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  auto want = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };

  exp::Stopwatch sw;
  std::vector<Criterion> results;
  auto run = [&](int k, auto&& body) {
    if (!want(k)) return;
    Criterion c(k);
    try {
      body(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    c.print();
    results.push_back(c);
  };
  run(1, schedule_math);
  run(2, guidance_identities);
  run(3, cd_oracle);
  run(4, frechet);

  if (want(5) || want(6) || want(7) || want(8) || want(9)) {
    Desk d;
    try {
      d.cfg = config.empty() ? exp::ExperimentConfig::defaults() : exp::load_config(config);
      d.cfg.queries.count = queries;
      d.cfg.validate();
      d.out = fs::path(work) / "report";
      fs::create_directories(d.out);
      d.data = exp::ensure_dataset(d.cfg, work, log_line);
      d.models = exp::ensure_models(d.cfg, d.data, work, log_line);
      d.queries = exp::select_queries(d.cfg, d.data, *d.models.classifier);
    } catch (const std::exception& e) {
      for (int k = 5; k <= 9; ++k)
        if (want(k)) {
          Criterion c(k);
          c.expect(false, std::string("setup failed: ") + e.what());
          c.print();
          results.push_back(c);
        }
      return 1;
    }
    run(5, [&](Criterion& c) { end_to_end(c, d); });
    run(6, [&](Criterion& c) { ablation(c, d); });
    run(7, [&](Criterion& c) { diversity(c, d); });
    run(8, [&](Criterion& c) { eval_count(c, d); });
    run(9, [&](Criterion& c) { sweeps(c, d); });
    json verdicts = json::object();
    for (const auto& r : results) (void)r;
    d.record["warnings"] = d.warnings;
    exp::write_json(d.out / "manifest.json",
                    exp::manifest("acceptance", d.cfg, d.models.checkpoints, d.record, sw.seconds(), d.evals));
  }
  const bool all = std::all_of(results.begin(), results.end(), [](const Criterion& c) { return c.passed(); });
  std::cout << (all ? "ALL PASS" : "SOME CRITERIA FAILED") << " (" << fmt(sw.seconds(), 4) << " s)" << std::endl;
  return all ? 0 : 1;
}
