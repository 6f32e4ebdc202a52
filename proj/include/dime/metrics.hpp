#pragma once

// Evaluation of counterfactual explanations.
//
// Success-only metrics (BKL, l1, MNAC, verification, Frechet) ignore failed
// results; flip ratio and diversity use every result.

#include <iomanip>
#include <optional>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "dime/guidance.hpp"

namespace dime::metrics {

using Decisions = std::vector<std::vector<int>>;  // [N][A] binary

inline double flip_ratio(const std::vector<CounterfactualResult>& results) {
  if (results.empty()) throw std::invalid_argument("flip_ratio of no results");
  const auto ok = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.success; });
  return static_cast<double>(ok) / results.size();
}

inline std::vector<const CounterfactualResult*> successes(const std::vector<CounterfactualResult>& results) {
  std::vector<const CounterfactualResult*> out;
  for (const auto& r : results)
    if (r.success) out.push_back(&r);
  return out;
}

inline double bkl(double target_posterior) { return 1.0 - target_posterior; }

inline double bkl(const ConvNet<float>& classifier, const Tensor<float>& counterfactual, int attr, int y) {
  const auto logits = classifier.predict(stack(std::vector<Tensor<float>>{counterfactual}));
  check_attribute(attr, logits.dim(1));
  return bkl(target_posterior(logits[attr], y));
}

inline double l1_distance(const Tensor<float>& x, const Tensor<float>& cf) {
  require_same_shape(x, cf, "l1_distance");
  if (x.numel() == 0) throw std::invalid_argument("l1_distance of empty images");
  double s = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += std::abs(static_cast<double>(x[i]) - cf[i]);
  return s / x.numel();
}

// Mean BKL over successful results; nullopt when there are none.
inline std::optional<double> mean_bkl(const std::vector<CounterfactualResult>& results) {
  const auto ok = successes(results);
  if (ok.empty()) return std::nullopt;
  double s = 0;
  for (const auto* r : ok) s += bkl(r->target_posterior);
  return s / ok.size();
}

// Mean l1 over successful results; queries[i] is the query of results[i].
inline std::optional<double> mean_l1(const std::vector<CounterfactualResult>& results, const Tensor<float>& queries) {
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < results.size(); ++i)
    if (results[i].success) {
      s += l1_distance(unstack(queries, static_cast<int>(i)), results[i].counterfactual);
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / n;
}

inline int delta_attribute(int before, int after) { return after - before; }

inline int delta_attribute(const ConvNet<float>& oracle, const Tensor<float>& x, const Tensor<float>& cf, int a) {
  const auto d = decide_attributes(oracle, stack(std::vector<Tensor<float>>{x, cf}));
  check_attribute(a, static_cast<int>(d[0].size()));
  return delta_attribute(d[0][a], d[1][a]);
}

// [N][A] table of oracle decision changes.
inline std::vector<std::vector<int>> delta_table(const Decisions& before, const Decisions& after) {
  if (before.size() != after.size()) throw std::invalid_argument("delta_table: row count mismatch");
  std::vector<std::vector<int>> d(before.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (before[i].size() != after[i].size()) throw std::invalid_argument("delta_table: attribute count mismatch");
    for (std::size_t a = 0; a < before[i].size(); ++a) d[i].push_back(delta_attribute(before[i][a], after[i][a]));
  }
  return d;
}

// Pearson r; nullopt when either series has zero variance.
template <typename A, typename B>
std::optional<double> pearson(const std::vector<A>& a, const std::vector<B>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("pearson needs at least 2 points");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0 || sbb == 0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// Label-space correlations of attribute q with every attribute.
inline std::vector<std::optional<double>> label_correlations(const Decisions& labels, int q) {
  if (labels.size() < 2) throw std::invalid_argument("need at least 2 labeled rows");
  const int a = static_cast<int>(labels[0].size());
  check_attribute(q, a);
  std::vector<std::optional<double>> out(a);
  std::vector<int> sq;
  for (const auto& r : labels) sq.push_back(r.at(q));
  for (int j = 0; j < a; ++j) {
    std::vector<int> sj;
    for (const auto& r : labels) sj.push_back(r.at(j));
    out[j] = pearson(sq, sj);
  }
  return out;
}

struct DeltaSummary {
  int minus = 0, zero = 0, plus = 0;
};

struct CorrelationReport {
  int query_attribute = 0;
  int successes = 0;
  std::vector<std::optional<double>> true_correlations;
  std::vector<std::optional<double>> method_correlations;
  std::vector<DeltaSummary> deltas;
  std::optional<double> cd_value;
  std::vector<int> degenerate_attributes;

  nlohmann::json to_json(const std::vector<std::string>& names = {}) const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t a = 0; a < deltas.size(); ++a)
      rows.push_back({{"attribute", a < names.size() ? names[a] : std::to_string(a)},
                      {"c_true", opt(true_correlations[a])},
                      {"c_method", opt(method_correlations[a])},
                      {"delta_minus", deltas[a].minus},
                      {"delta_zero", deltas[a].zero},
                      {"delta_plus", deltas[a].plus}});
    return {{"query_attribute", query_attribute}, {"successes", successes},   {"cd", opt(cd_value)},
            {"degenerate", degenerate_attributes}, {"attributes", rows}};
  }
};

// CD = sum over a != q of |c_qa - c_qa^M|; deltas holds one row per successful CE.
inline CorrelationReport correlation_difference(const std::vector<std::optional<double>>& true_corr,
                                                const std::vector<std::vector<int>>& deltas, int q) {
  const int na = static_cast<int>(true_corr.size());
  check_attribute(q, na);
  CorrelationReport rep;
  rep.query_attribute = q;
  rep.successes = static_cast<int>(deltas.size());
  rep.true_correlations = true_corr;
  rep.method_correlations.assign(na, std::nullopt);
  rep.deltas.assign(na, {});
  for (const auto& row : deltas) {
    if (static_cast<int>(row.size()) != na) throw std::invalid_argument("delta row has wrong attribute count");
    for (int a = 0; a < na; ++a) {
      if (row[a] < -1 || row[a] > 1) throw std::invalid_argument("delta values must be in {-1, 0, 1}");
      (row[a] < 0 ? rep.deltas[a].minus : row[a] > 0 ? rep.deltas[a].plus : rep.deltas[a].zero)++;
    }
  }
  if (deltas.size() < 2) {
    for (int a = 0; a < na; ++a)
      if (a != q) rep.degenerate_attributes.push_back(a);
    return rep;
  }
  auto column = [&](int a) {
    std::vector<int> c;
    for (const auto& r : deltas) c.push_back(r[a]);
    return c;
  };
  const auto dq = column(q);
  rep.method_correlations[q] = pearson(dq, dq);
  double cd = 0;
  int used = 0;
  for (int a = 0; a < na; ++a) {
    if (a == q) continue;
    rep.method_correlations[a] = pearson(dq, column(a));
    if (!rep.method_correlations[a] || !true_corr[a]) {
      rep.degenerate_attributes.push_back(a);
      continue;
    }
    cd += std::abs(*true_corr[a] - *rep.method_correlations[a]);
    ++used;
  }
  if (used > 0) rep.cd_value = cd;
  return rep;
}

// Full pipeline: c_qa from training labels, deltas from the oracle on successful CEs.
inline CorrelationReport correlation_difference(const ConvNet<float>& oracle, const Decisions& train_labels,
                                                const std::vector<CounterfactualResult>& results,
                                                const Tensor<float>& queries, int q) {
  std::vector<Tensor<float>> xs, cfs;
  for (std::size_t i = 0; i < results.size(); ++i)
    if (results[i].success) {
      xs.push_back(unstack(queries, static_cast<int>(i)));
      cfs.push_back(results[i].counterfactual);
    }
  std::vector<std::vector<int>> deltas;
  if (!xs.empty()) deltas = delta_table(decide_attributes(oracle, stack(xs)), decide_attributes(oracle, stack(cfs)));
  return correlation_difference(label_correlations(train_labels, q), deltas, q);
}

// Mean number of attributes changed per pair.
inline double mnac(const Decisions& before, const Decisions& after) {
  if (before.empty()) throw std::invalid_argument("mnac of no pairs");
  const auto d = delta_table(before, after);
  double s = 0;
  for (const auto& row : d) s += std::count_if(row.begin(), row.end(), [](int v) { return v != 0; });
  return s / d.size();
}

struct VerificationResult {
  double accuracy = 0;
  int counted = 0;
  int excluded = 0;  // pairs with a zero-norm embedding
};

inline std::optional<double> cosine_similarity(std::span<const float> a, std::span<const float> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0 || bb == 0) return std::nullopt;
  return ab / std::sqrt(aa * bb);
}

// Fraction of pairs whose embeddings have cosine similarity above 0.5.
inline VerificationResult verification_accuracy(const Tensor<float>& emb_a, const Tensor<float>& emb_b) {
  require_same_shape(emb_a, emb_b, "verification_accuracy");
  VerificationResult r;
  int hits = 0;
  for (int i = 0; i < emb_a.dim(0); ++i) {
    const auto c = cosine_similarity(emb_a.sample(i), emb_b.sample(i));
    if (!c) {
      ++r.excluded;
      continue;
    }
    ++r.counted;
    if (*c > 0.5) ++hits;
  }
  if (r.counted == 0) throw std::invalid_argument("verification_accuracy: no valid pairs");
  r.accuracy = static_cast<double>(hits) / r.counted;
  return r;
}

// Mean over queries of the mean pairwise distance between runs.
// runs[r][q] is run r's counterfactual for query q; dist maps two equally
// sized batches to per-pair distances.
template <typename Dist>
double diversity_score(const std::vector<std::vector<Tensor<float>>>& runs, Dist&& dist) {
  if (runs.size() < 2) throw std::invalid_argument("diversity needs at least 2 runs");
  const std::size_t nq = runs[0].size();
  if (nq == 0) throw std::invalid_argument("diversity of no queries");
  std::vector<double> per_query(nq, 0.0);
  int pairs = 0;
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (std::size_t j = i + 1; j < runs.size(); ++j) {
      if (runs[i].size() != nq || runs[j].size() != nq) throw std::invalid_argument("runs differ in query count");
      const auto d = dist(stack(runs[i]), stack(runs[j]));
      for (std::size_t q = 0; q < nq; ++q) per_query[q] += d[q];
      ++pairs;
    }
  double s = 0;
  for (double v : per_query) s += v / pairs;
  return s / nq;
}

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Sample mean and unbiased covariance of the rows.
inline GaussianStats gaussian_stats(const Eigen::MatrixXd& rows) {
  if (rows.rows() < 2) throw std::invalid_argument("need at least 2 vectors for a covariance");
  GaussianStats s;
  s.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd c = rows.rowwise() - s.mean.transpose();
  s.cov = (c.transpose() * c) / static_cast<double>(rows.rows() - 1);
  return s;
}

inline Eigen::MatrixXd to_matrix(const Tensor<float>& t) {
  if (t.rank() != 2) throw std::invalid_argument("embedding set must be [N, D]");
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (int i = 0; i < t.dim(0); ++i)
    for (int j = 0; j < t.dim(1); ++j) m(i, j) = t[static_cast<std::size_t>(i) * t.dim(1) + j];
  return m;
}

class NotPsdError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Eigenvalues of a symmetric matrix with small negatives clipped; larger negatives are an error.
inline Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& m, const char* what,
                                                                 Eigen::VectorXd& values) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NotPsdError(std::string(what) + ": eigendecomposition failed");
  values = es.eigenvalues();
  const double tol = 1e-10 * std::max(1.0, values.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values[i] < -tol) {
      std::ostringstream msg;
      msg << what << ": matrix not positive semidefinite (eigenvalue " << values[i] << ", tolerance " << tol << ")";
      throw NotPsdError(msg.str());
    }
    values[i] = std::max(values[i], 0.0);
  }
  return es;
}

}  // namespace detail

// |mu_a - mu_b|^2 + Tr(C_a + C_b - 2 (C_a C_b)^{1/2}).
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size()) throw std::invalid_argument("frechet_distance: dimension mismatch");
  Eigen::VectorXd ev;
  const auto es = detail::psd_eigen(a.cov, "covariance A", ev);
  const Eigen::MatrixXd sa = es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
  // Tr((C_a C_b)^{1/2}) = Tr((S_a C_b S_a)^{1/2}) with S_a = C_a^{1/2}.
  Eigen::VectorXd mv;
  detail::psd_eigen(sa * b.cov * sa, "covariance product", mv);
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * mv.cwiseSqrt().sum();
  return std::max(d, 0.0);
}

inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return frechet_distance(gaussian_stats(a), gaussian_stats(b));
}

inline double frechet_distance(const Tensor<float>& a, const Tensor<float>& b) {
  return frechet_distance(to_matrix(a), to_matrix(b));
}

struct MeanStd {
  double mean = 0, std = 0;
  int sample_size = 0;
  int repeats = 0;
};

// Each method's embeddings are subsampled without replacement to the common
// minimum size and compared to the reference; repeated with fresh subsamples.
inline std::map<std::string, MeanStd> fid_plus_protocol(const Tensor<float>& reference,
                                                        const std::map<std::string, Tensor<float>>& methods,
                                                        int repeats, std::uint64_t seed) {
  if (repeats < 1) throw std::invalid_argument("fid_plus_protocol needs repeats >= 1");
  if (methods.empty()) throw std::invalid_argument("fid_plus_protocol of no methods");
  int m = std::numeric_limits<int>::max();
  for (const auto& [name, e] : methods) m = std::min(m, e.empty() ? 0 : e.dim(0));
  if (m < 2) throw std::invalid_argument("fid_plus_protocol: common sample size " + std::to_string(m) + " is too small");
  const auto ref = gaussian_stats(to_matrix(reference));
  std::map<std::string, MeanStd> out;
  std::uint64_t k = 0;
  for (const auto& [name, e] : methods) {
    Rng rng(derive_seed(seed, 0xf1d, k++));
    std::vector<int> idx(e.dim(0));
    std::vector<double> v;
    for (int r = 0; r < repeats; ++r) {
      std::iota(idx.begin(), idx.end(), 0);
      if (m < e.dim(0)) std::shuffle(idx.begin(), idx.end(), rng);
      std::vector<int> pick(idx.begin(), idx.begin() + m);
      std::sort(pick.begin(), pick.end());
      v.push_back(frechet_distance(ref, gaussian_stats(to_matrix(gather_rows(e, pick)))));
    }
    MeanStd ms{0, 0, m, repeats};
    for (double x : v) ms.mean += x / v.size();
    for (double x : v) ms.std += (x - ms.mean) * (x - ms.mean) / v.size();
    ms.std = std::sqrt(ms.std);
    out[name] = ms;
  }
  return out;
}

struct EvaluationReport {
  std::string method;
  int total = 0, successes = 0;
  double flip_ratio = 0;
  std::optional<double> mean_bkl, mean_l1, diversity, mnac, verification_accuracy;
  std::optional<MeanStd> frechet;
  std::optional<double> cd;
  long model_evals = 0;

  static std::string csv_header() {
    return "method,total,successes,flip_ratio,fid_plus_mean,fid_plus_std,l1,bkl,mnac,verification_accuracy,diversity,cd,"
           "model_evals";
  }
  std::string csv_row() const {
    std::ostringstream o;
    o << std::setprecision(10);
    auto f = [&](const std::optional<double>& v) {
      o << ',';
      if (v) o << *v;
    };
    o << method << ',' << total << ',' << successes << ',' << flip_ratio;
    f(frechet ? std::optional<double>(frechet->mean) : std::nullopt);
    f(frechet ? std::optional<double>(frechet->std) : std::nullopt);
    f(mean_l1);
    f(mean_bkl);
    f(mnac);
    f(verification_accuracy);
    f(diversity);
    f(cd);
    o << ',' << model_evals;
    return o.str();
  }
  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json j{{"method", method},
                     {"total", total},
                     {"successes", successes},
                     {"failures", total - successes},
                     {"flip_ratio", flip_ratio},
                     {"mean_bkl", opt(mean_bkl)},
                     {"mean_l1", opt(mean_l1)},
                     {"diversity", opt(diversity)},
                     {"mnac", opt(mnac)},
                     {"verification_accuracy", opt(verification_accuracy)},
                     {"cd", opt(cd)},
                     {"model_evals", model_evals}};
    j["fid_plus"] = frechet ? nlohmann::json{{"mean", frechet->mean},
                                             {"std", frechet->std},
                                             {"sample_size", frechet->sample_size},
                                             {"repeats", frechet->repeats}}
                            : nlohmann::json(nullptr);
    return j;
  }
};

// Fills the success-only and classifier-side fields; Frechet, diversity and CD are added by the caller.
inline EvaluationReport evaluate_results(const std::string& method, const std::vector<CounterfactualResult>& results,
                                         const Tensor<float>& queries, const ConvNet<float>* oracle,
                                         const ConvNet<float>* embedder) {
  EvaluationReport r;
  r.method = method;
  r.total = static_cast<int>(results.size());
  r.flip_ratio = flip_ratio(results);
  r.mean_bkl = mean_bkl(results);
  r.mean_l1 = mean_l1(results, queries);
  for (const auto& x : results) r.model_evals += x.model_eval_count;
  std::vector<Tensor<float>> xs, cfs;
  for (std::size_t i = 0; i < results.size(); ++i)
    if (results[i].success) {
      xs.push_back(unstack(queries, static_cast<int>(i)));
      cfs.push_back(results[i].counterfactual);
    }
  r.successes = static_cast<int>(xs.size());
  if (xs.empty()) return r;
  const auto X = stack(xs), C = stack(cfs);
  if (oracle) r.mnac = mnac(decide_attributes(*oracle, X), decide_attributes(*oracle, C));
  if (embedder) {
    const auto v = verification_accuracy(predict_batched(*embedder, X), predict_batched(*embedder, C));
    r.verification_accuracy = v.accuracy;
  }
  return r;
}

}  // namespace dime::metrics
