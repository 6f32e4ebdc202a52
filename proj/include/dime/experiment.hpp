#pragma once

// Experiment orchestration shared by the command-line tool and the acceptance
// run: one JSON config, models trained once into a work directory and reused
// while their inputs hash the same, query selection, per-query output files,
// manifests and comparative tables.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>

#include <nlohmann/json.hpp>

#include "dime/checkpoint.hpp"
#include "dime/denoiser.hpp"
#include "dime/guidance.hpp"
#include "dime/metrics.hpp"
#include "dime/nets.hpp"
#include "dime/png.hpp"
#include "dime/schedule.hpp"
#include "dime/synthdata.hpp"

namespace dime::exp {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Log = std::function<void(const std::string&)>;

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* s) { return k == s; }))
      throw std::invalid_argument("unknown key '" + k + "' in " + where);
}

inline json generation_to_json(const data::GenerationConfig& g) {
  return {{"count", g.count},
          {"resolution", g.resolution},
          {"test_fraction", g.test_fraction},
          {"seed", g.seed},
          {"attributes", g.spec.to_json()}};
}

inline data::GenerationConfig generation_from_json(const json& j, data::GenerationConfig g = {}) {
  reject_unknown(j, {"count", "resolution", "test_fraction", "seed", "attributes"}, "data");
  g.count = j.value("count", g.count);
  g.resolution = j.value("resolution", g.resolution);
  g.test_fraction = j.value("test_fraction", g.test_fraction);
  g.seed = j.value("seed", g.seed);
  if (j.contains("attributes")) g.spec = data::AttributeSpec::from_json(j.at("attributes"));
  return g;
}

inline TrainingConfig training_from_json(const json& j, TrainingConfig base, const std::string& where) {
  reject_unknown(j, {"epochs", "batch_size", "learning_rate", "ema_decay", "weight_decay", "label_smoothing", "seed"},
                 where);
  return TrainingConfig::from_json(j, base);
}

struct NetConfig {
  std::optional<ConvNetArch> arch;  // default depends on the data
  TrainingConfig training;
};

struct QuerySelector {
  std::string attribute = "shape";
  int count = 64;
  std::string split = "test";
  std::uint64_t seed = 0;
};

struct EvaluationSettings {
  int fid_repeats = 10;
  int diversity_queries = 16;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  data::GenerationConfig data;
  int num_steps = 200;
  std::string schedule = "linear";
  std::optional<DenoiserArch> denoiser_arch;
  TrainingConfig denoiser_training;
  NetConfig classifier, oracle, embedder;
  GuidanceConfig guidance;
  QuerySelector queries;
  EvaluationSettings evaluation;

  static ExperimentConfig defaults() {
    ExperimentConfig c;
    c.denoiser_training.epochs = 20;
    c.denoiser_training.learning_rate = 2e-3;
    // a lower rate leaves the classifier on the color shortcut for shape
    c.classifier.training.epochs = 15;
    c.classifier.training.learning_rate = 1e-2;
    c.classifier.training.label_smoothing = 0.1;
    c.oracle.training.epochs = 15;
    c.oracle.training.learning_rate = 1e-2;
    c.embedder.training.epochs = 10;
    c.embedder.training.learning_rate = 3e-3;
    return c;
  }

  int num_attributes() const { return data.spec.num_attributes(); }
  DenoiserArch resolved_denoiser() const {
    if (denoiser_arch) return *denoiser_arch;
    DenoiserArch a;
    a.resolution = data.resolution;
    return a;
  }
  ConvNetArch resolved_classifier() const {
    return classifier.arch.value_or(default_classifier_arch(3, data.resolution, num_attributes()));
  }
  ConvNetArch resolved_oracle() const {
    return oracle.arch.value_or(default_oracle_arch(3, data.resolution, num_attributes()));
  }
  ConvNetArch resolved_embedder() const {
    return embedder.arch.value_or(
        default_embedder_arch(3, data.resolution, num_attributes() + data::RenderLatents::kDim));
  }

  NoiseSchedule build_schedule() const {
    if (schedule == "linear") return build_default_schedule(num_steps);
    if (schedule == "cosine") return build_cosine_schedule(num_steps);
    throw std::invalid_argument("schedule must be linear or cosine, got '" + schedule + "'");
  }

  int attribute_index() const {
    const auto& n = data.spec.names;
    const auto it = std::find(n.begin(), n.end(), queries.attribute);
    if (it == n.end()) throw std::invalid_argument("unknown query attribute '" + queries.attribute + "'");
    return static_cast<int>(it - n.begin());
  }

  void validate() const {
    data.validate();
    if (num_steps < 1) throw std::invalid_argument("num_steps must be positive");
    build_schedule();
    guidance.validate(num_steps);
    denoiser_training.validate();
    classifier.training.validate();
    oracle.training.validate();
    embedder.training.validate();
    const auto d = resolved_denoiser();
    if (d.resolution != data.resolution || d.in_channels != 3)
      throw std::invalid_argument("denoiser architecture does not match the data");
    if (d.resolution % 4) throw std::invalid_argument("resolution must be divisible by 4");
    for (const auto& a : {resolved_classifier(), resolved_oracle()})
      if (a.resolution != data.resolution || a.outputs != num_attributes())
        throw std::invalid_argument("classifier/oracle architecture does not match the data");
    if (resolved_embedder().resolution != data.resolution)
      throw std::invalid_argument("embedder architecture does not match the data");
    if (queries.count < 1) throw std::invalid_argument("query selector is empty: queries.count must be >= 1");
    if (queries.split != "test" && queries.split != "train")
      throw std::invalid_argument("queries.split must be test or train");
    attribute_index();
    if (evaluation.fid_repeats < 1) throw std::invalid_argument("evaluation.fid_repeats must be >= 1");
    if (evaluation.diversity_queries < 1) throw std::invalid_argument("evaluation.diversity_queries must be >= 1");
  }

  // Fully resolved: every default is written out.
  json to_json() const {
    auto net = [](const ConvNetArch& a, const TrainingConfig& t) { return json{{"arch", a.to_json()}, {"training", t.to_json()}}; };
    return {{"seed", seed},
            {"data", generation_to_json(data)},
            {"num_steps", num_steps},
            {"schedule", schedule},
            {"denoiser", {{"arch", resolved_denoiser().to_json()}, {"training", denoiser_training.to_json()}}},
            {"classifier", net(resolved_classifier(), classifier.training)},
            {"oracle", net(resolved_oracle(), oracle.training)},
            {"embedder", net(resolved_embedder(), embedder.training)},
            {"guidance", guidance.to_json()},
            {"queries",
             {{"attribute", queries.attribute}, {"count", queries.count}, {"split", queries.split}, {"seed", queries.seed}}},
            {"evaluation",
             {{"fid_repeats", evaluation.fid_repeats}, {"diversity_queries", evaluation.diversity_queries}}}};
  }

  static ExperimentConfig from_json(const json& j) {
    reject_unknown(j, {"seed", "data", "num_steps", "schedule", "denoiser", "classifier", "oracle", "embedder",
                       "guidance", "queries", "evaluation"},
                   "config");
    auto c = defaults();
    c.seed = j.value("seed", c.seed);
    if (j.contains("data")) c.data = generation_from_json(j.at("data"), c.data);
    c.num_steps = j.value("num_steps", c.num_steps);
    c.schedule = j.value("schedule", c.schedule);
    if (j.contains("denoiser")) {
      const auto& d = j.at("denoiser");
      reject_unknown(d, {"arch", "training"}, "denoiser");
      if (d.contains("arch")) c.denoiser_arch = DenoiserArch::from_json(d.at("arch"));
      if (d.contains("training")) c.denoiser_training = training_from_json(d.at("training"), c.denoiser_training, "denoiser.training");
    }
    for (auto [key, nc] : {std::pair<const char*, NetConfig*>{"classifier", &c.classifier},
                           {"oracle", &c.oracle},
                           {"embedder", &c.embedder}}) {
      if (!j.contains(key)) continue;
      const auto& n = j.at(key);
      reject_unknown(n, {"arch", "training"}, key);
      if (n.contains("arch")) nc->arch = ConvNetArch::from_json(n.at("arch"));
      if (n.contains("training"))
        nc->training = training_from_json(n.at("training"), nc->training, std::string(key) + ".training");
    }
    if (j.contains("guidance")) c.guidance = GuidanceConfig::from_json(j.at("guidance"), c.guidance);
    if (j.contains("queries")) {
      const auto& q = j.at("queries");
      reject_unknown(q, {"attribute", "count", "split", "seed"}, "queries");
      c.queries.attribute = q.value("attribute", c.queries.attribute);
      c.queries.count = q.value("count", c.queries.count);
      c.queries.split = q.value("split", c.queries.split);
      c.queries.seed = q.value("seed", c.queries.seed);
    }
    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      reject_unknown(e, {"fid_repeats", "diversity_queries"}, "evaluation");
      c.evaluation.fid_repeats = e.value("fid_repeats", c.evaluation.fid_repeats);
      c.evaluation.diversity_queries = e.value("diversity_queries", c.evaluation.diversity_queries);
    }
    return c;
  }
};

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

inline void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

inline std::string file_hash(const fs::path& path) {
  const auto bytes = data::read_file_bytes(path);
  return hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
}

// ---------------------------------------------------------------------------
// Work directory: data/ and models/<role>.ckpt, rebuilt when their inputs change.

enum : std::uint64_t { kDenoiserStream = 1, kClassifierStream, kOracleStream, kEmbedderStream };

inline std::string data_key(const ExperimentConfig& c) { return hex64(fnv1a64(generation_to_json(c.data).dump())); }

inline data::Dataset ensure_dataset(const ExperimentConfig& cfg, const fs::path& work, const Log& log) {
  const auto dir = work / "data";
  const auto key = data_key(cfg);
  if (fs::exists(dir / "manifest.json")) {
    auto d = data::load_dataset(dir);
    if (d.manifest.value("config_hash", "") == key) return d;
    log("data config changed, regenerating");
  }
  log("generating " + std::to_string(cfg.data.count) + " images");
  auto d = data::generate_dataset(cfg.data);
  d.manifest["config_hash"] = key;
  data::save_dataset(d, dir);
  return d;
}

struct Models {
  NoiseSchedule schedule;
  std::unique_ptr<Denoiser<float>> denoiser;
  std::unique_ptr<ConvNet<float>> classifier, oracle, embedder;
  json checkpoints = json::object();  // role -> path, hashes, training report
};

namespace detail {

inline json role_inputs(const ExperimentConfig& c, ModelRole role) {
  json j{{"data", generation_to_json(c.data)}, {"seed", c.seed}, {"role", to_string(role)}};
  const auto full = c.to_json();
  switch (role) {
    case ModelRole::Denoiser:
      j["model"] = full.at("denoiser");
      j["num_steps"] = c.num_steps;
      j["schedule"] = c.schedule;
      break;
    case ModelRole::Classifier: j["model"] = full.at("classifier"); break;
    case ModelRole::Oracle: j["model"] = full.at("oracle"); break;
    case ModelRole::Embedder: j["model"] = full.at("embedder"); break;
  }
  return j;
}

inline std::uint64_t stream_of(ModelRole r) {
  switch (r) {
    case ModelRole::Denoiser: return kDenoiserStream;
    case ModelRole::Classifier: return kClassifierStream;
    case ModelRole::Oracle: return kOracleStream;
    case ModelRole::Embedder: return kEmbedderStream;
  }
  return 0;
}

// The config's training seed acts as a salt on the experiment seed.
inline TrainingConfig seeded(TrainingConfig t, const ExperimentConfig& c, ModelRole r) {
  t.seed = derive_seed(c.seed, stream_of(r), 1 + t.seed);
  return t;
}
inline std::uint64_t init_seed(const ExperimentConfig& c, ModelRole r) { return derive_seed(c.seed, stream_of(r), 0); }

inline std::vector<int> all_rows(const data::Dataset& d) {
  std::vector<int> v(d.size());
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace detail

inline fs::path checkpoint_path(const fs::path& work, ModelRole role) { return work / "models" / (to_string(role) + ".ckpt"); }

// Loads the role's checkpoint if its recorded inputs match, else trains and saves it.
inline void ensure_model(const ExperimentConfig& cfg, const data::Dataset& d, const fs::path& work, ModelRole role,
                         Models& m, const Log& log) {
  const auto inputs = detail::role_inputs(cfg, role);
  const auto key = hex64(fnv1a64(inputs.dump()));
  const auto path = checkpoint_path(work, role);
  std::optional<Checkpoint> ck;
  if (fs::exists(path)) {
    try {
      auto c = load_checkpoint(path, role);
      if (c.extra.value("config_hash", "") == key) ck = std::move(c);
    } catch (const CheckpointError& e) {
      log("discarding unreadable " + path.string() + ": " + e.what());
    }
  }
  const auto name = to_string(role);
  auto progress = [&](int epoch, double loss) {
    log(name + " epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(loss));
  };
  const auto seed = detail::init_seed(cfg, role);
  if (m.schedule.num_steps() == 0) m.schedule = cfg.build_schedule();
  if (role == ModelRole::Denoiser) {
    m.denoiser = std::make_unique<Denoiser<float>>(cfg.resolved_denoiser(), seed);
  } else {
    const auto arch = role == ModelRole::Classifier ? cfg.resolved_classifier()
                      : role == ModelRole::Oracle   ? cfg.resolved_oracle()
                                                    : cfg.resolved_embedder();
    auto net = std::make_unique<ConvNet<float>>(arch, seed);
    (role == ModelRole::Classifier ? m.classifier : role == ModelRole::Oracle ? m.oracle : m.embedder) = std::move(net);
  }
  auto params = role == ModelRole::Denoiser ? m.denoiser->parameters()
                : role == ModelRole::Classifier ? m.classifier->parameters()
                : role == ModelRole::Oracle     ? m.oracle->parameters()
                                                : m.embedder->parameters();
  if (!ck) {
    log("training " + name);
    Checkpoint c;
    c.role = role;
    c.extra["config_hash"] = key;
    c.extra["inputs"] = inputs;
    const auto rows = detail::all_rows(d);
    const auto train = d.train_indices(), test = d.test_indices();
    if (role == ModelRole::Denoiser) {
      c.arch = m.denoiser->arch().to_json();
      const auto tc = detail::seeded(cfg.denoiser_training, cfg, role);
      auto r = train_denoiser(*m.denoiser, m.schedule, gather_rows(d.images, train), tc, progress);
      c.weights = r.ema_weights;
      c.extra["schedule"] = m.schedule.to_json();
      c.extra["report"] = {{"epoch_losses", r.epoch_losses}, {"seconds", r.seconds}};
    } else {
      ConvNet<float>& net = role == ModelRole::Classifier ? *m.classifier : role == ModelRole::Oracle ? *m.oracle : *m.embedder;
      c.arch = net.arch().to_json();
      const auto& base = role == ModelRole::Classifier ? cfg.classifier.training
                         : role == ModelRole::Oracle   ? cfg.oracle.training
                                                       : cfg.embedder.training;
      const auto tc = detail::seeded(base, cfg, role);
      const bool reg = role == ModelRole::Embedder;
      auto r = train_supervised(net, d.images, reg ? embedder_targets(d) : d.label_tensor(rows), train, test,
                                reg ? Objective::Regression : Objective::BinaryAttributes, tc, progress);
      c.weights = nn::export_weights(net.parameters());
      c.extra["report"] = {{"epoch_losses", r.epoch_losses}, {"seconds", r.seconds}};
      if (reg)
        c.extra["report"]["heldout_mse"] = r.heldout_mse;
      else
        c.extra["report"]["heldout_accuracy"] = r.heldout_accuracy;
    }
    save_checkpoint(c, path);
    ck = std::move(c);
  }
  nn::import_weights(params, ck->weights);
  m.checkpoints[name] = {{"path", path.string()},
                         {"config_hash", key},
                         {"arch_hash", arch_hash(ck->arch)},
                         {"file_hash", file_hash(path)},
                         {"report", ck->extra.value("report", json::object())}};
}

inline Models ensure_models(const ExperimentConfig& cfg, const data::Dataset& d, const fs::path& work, const Log& log,
                            std::initializer_list<ModelRole> roles = {ModelRole::Denoiser, ModelRole::Classifier,
                                                                      ModelRole::Oracle, ModelRole::Embedder}) {
  Models m;
  m.schedule = cfg.build_schedule();
  for (auto r : roles) ensure_model(cfg, d, work, r, m, log);
  return m;
}

// ---------------------------------------------------------------------------
// Queries

struct QuerySet {
  int attribute = 0;
  std::vector<int> rows;  // dataset rows
  Tensor<float> images;
  std::vector<int> targets;  // flipped classifier decision
  std::vector<std::uint64_t> seeds;
};

inline QuerySet select_queries(const ExperimentConfig& cfg, const data::Dataset& d, const ConvNet<float>& classifier) {
  if (cfg.queries.count < 1) throw std::invalid_argument("query selector is empty");
  auto pool = cfg.queries.split == "train" ? d.train_indices() : d.test_indices();
  if (static_cast<int>(pool.size()) < cfg.queries.count)
    throw std::invalid_argument("query selector asks for " + std::to_string(cfg.queries.count) + " images, split has " +
                                std::to_string(pool.size()));
  Rng rng(derive_seed(cfg.queries.seed, 0x9e));
  std::shuffle(pool.begin(), pool.end(), rng);
  QuerySet q;
  q.attribute = cfg.attribute_index();
  q.rows.assign(pool.begin(), pool.begin() + cfg.queries.count);
  std::sort(q.rows.begin(), q.rows.end());
  q.images = gather_rows(d.images, q.rows);
  const auto dec = decide_attributes(classifier, q.images);
  for (std::size_t i = 0; i < q.rows.size(); ++i) {
    q.targets.push_back(1 - dec[i][q.attribute]);
    q.seeds.push_back(derive_seed(cfg.queries.seed, 0x5eed, q.rows[i]));
  }
  return q;
}

inline QuerySet head(const QuerySet& q, int n) {
  n = std::min<int>(n, q.rows.size());
  QuerySet h;
  h.attribute = q.attribute;
  h.rows.assign(q.rows.begin(), q.rows.begin() + n);
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  h.images = gather_rows(q.images, idx);
  h.targets.assign(q.targets.begin(), q.targets.begin() + n);
  h.seeds.assign(q.seeds.begin(), q.seeds.begin() + n);
  return h;
}

inline GuidanceNets guidance_nets(const Models& m, int attribute) { return {m.classifier.get(), m.embedder.get(), attribute}; }

constexpr int kChunk = 64;

// Explains every query, chunked; result i belongs to query i.
inline std::vector<CounterfactualResult> run_queries(const Models& m, const QuerySet& q, const GuidanceConfig& g,
                                                     const Log& log = {}) {
  const auto nets = guidance_nets(m, q.attribute);
  std::vector<CounterfactualResult> out;
  const int n = static_cast<int>(q.rows.size());
  for (int lo = 0; lo < n; lo += kChunk) {
    const int hi = std::min(n, lo + kChunk);
    std::vector<int> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    ExplainRequest req{gather_rows(q.images, idx), {q.targets.begin() + lo, q.targets.begin() + hi},
                       {q.seeds.begin() + lo, q.seeds.begin() + hi}};
    auto part = explain_batch(*m.denoiser, m.schedule, nets, req, g);
    for (auto& r : part) {
      r.query_index += lo;
      out.push_back(std::move(r));
    }
    if (log) log(to_string(g.variant) + ": " + std::to_string(hi) + "/" + std::to_string(n) + " queries");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline metrics::Decisions train_labels(const data::Dataset& d) {
  metrics::Decisions out;
  for (int r : d.train_indices()) out.push_back(d.labels[r]);
  return out;
}

inline Tensor<float> success_embeddings(const Models& m, const std::vector<CounterfactualResult>& res) {
  std::vector<Tensor<float>> cfs;
  for (const auto& r : res)
    if (r.success) cfs.push_back(r.counterfactual);
  if (cfs.empty()) return {};
  return predict_batched(*m.embedder, stack(cfs));
}

struct Evaluated {
  metrics::EvaluationReport report;
  std::optional<metrics::CorrelationReport> correlation;
};

// Everything except the Frechet protocol, which compares methods jointly.
inline Evaluated evaluate_method(const std::string& name, const Models& m, const data::Dataset& d, const QuerySet& q,
                                 const std::vector<CounterfactualResult>& res) {
  Evaluated e{metrics::evaluate_results(name, res, q.images, m.oracle.get(), m.embedder.get()), std::nullopt};
  if (m.oracle) {
    e.correlation = metrics::correlation_difference(*m.oracle, train_labels(d), res, q.images, q.attribute);
    e.report.cd = e.correlation->cd_value;
  }
  return e;
}

// FID+ over methods sharing one reference: embeddings of the real test images.
inline void attach_frechet(std::map<std::string, Evaluated*> methods, const Models& m, const data::Dataset& d,
                           const std::map<std::string, const std::vector<CounterfactualResult>*>& results, int repeats,
                           std::uint64_t seed, std::vector<std::string>& warnings) {
  std::map<std::string, Tensor<float>> emb;
  for (const auto& [name, res] : results) {
    auto e = success_embeddings(m, *res);
    if (e.empty() || e.dim(0) < 2) {
      warnings.push_back(name + ": fewer than 2 successes, no Frechet distance");
      continue;
    }
    emb[name] = std::move(e);
  }
  if (emb.empty()) return;
  const auto ref = predict_batched(*m.embedder, gather_rows(d.images, d.test_indices()));
  try {
    for (const auto& [name, ms] : metrics::fid_plus_protocol(ref, emb, repeats, seed)) methods.at(name)->report.frechet = ms;
  } catch (const std::exception& ex) {
    warnings.push_back(std::string("Frechet protocol failed: ") + ex.what());
  }
}

struct DiversityResult {
  double score = 0;
  long model_evals = 0;
};

// Mean pairwise perceptual distance between runs with independent seeds.
inline DiversityResult diversity(const Models& m, const QuerySet& q, GuidanceConfig g, int runs, bool identical_seeds = false) {
  g.trace = false;
  std::vector<std::vector<std::uint64_t>> seeds(runs);
  for (std::size_t i = 0; i < q.rows.size(); ++i) {
    const auto s = diversity_seeds(q.seeds[i], runs);
    for (int r = 0; r < runs; ++r) seeds[r].push_back(identical_seeds ? s[0] : s[r]);
  }
  const auto out = explain_diverse(*m.denoiser, m.schedule, guidance_nets(m, q.attribute), q.images, q.targets, seeds, g);
  DiversityResult d;
  std::vector<std::vector<Tensor<float>>> cfs(runs);
  for (int r = 0; r < runs; ++r)
    for (const auto& x : out[r]) {
      cfs[r].push_back(x.counterfactual);
      d.model_evals += x.model_eval_count;
    }
  d.score = metrics::diversity_score(
      cfs, [&](const Tensor<float>& a, const Tensor<float>& b) { return perceptual_distance(*m.embedder, a, b); });
  return d;
}

// ---------------------------------------------------------------------------
// Output

inline json result_json(const CounterfactualResult& r, const QuerySet& q, const GuidanceConfig& g, double l1) {
  auto opt = [](const auto& v) { return v ? json(*v) : json(nullptr); };
  return {{"query", r.query_index},
          {"dataset_row", q.rows.at(r.query_index)},
          {"success", r.success},
          {"variant", to_string(r.variant)},
          {"lambda_c_used", opt(r.lambda_c_used)},
          {"tau", g.tau},
          {"attribute", r.attribute},
          {"target", r.target},
          {"target_posterior", r.target_posterior},
          {"bkl", metrics::bkl(r.target_posterior)},
          {"l1", l1},
          {"model_eval_count", r.model_eval_count},
          {"attempts", r.attempts},
          {"stopped_at", opt(r.stopped_at)},
          {"seed", r.seed},
          {"errors", r.errors}};
}

// Per query: NNNN.png (query | counterfactual | difference), NNNN.json and,
// when traced, NNNN_trace.csv. Plus grid.png, counterfactuals.idx and results.json.
inline void write_explanations(const fs::path& dir, const QuerySet& q, const std::vector<CounterfactualResult>& res,
                               const GuidanceConfig& g) {
  fs::create_directories(dir / "queries");
  json all = json::array();
  std::vector<Tensor<float>> xs, cfs;
  for (const auto& r : res) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%04d", r.query_index);
    const auto x = unstack(q.images, r.query_index);
    const double l1 = metrics::l1_distance(x, r.counterfactual);
    const auto j = result_json(r, q, g, l1);
    write_json(dir / "queries" / (std::string(stem) + ".json"), j);
    write_png(dir / "queries" / (std::string(stem) + ".png"), counterfactual_grid({x}, {r.counterfactual}, 4));
    if (!r.trace.empty()) {
      std::ofstream t(dir / "queries" / (std::string(stem) + "_trace.csv"));
      t << "t,target_posterior\n";
      t.precision(10);
      for (const auto& p : r.trace) t << p.t << ',' << p.target_posterior << '\n';
    }
    all.push_back(j);
    xs.push_back(x);
    cfs.push_back(r.counterfactual);
  }
  write_json(dir / "results.json", all);
  std::vector<Tensor<float>> gx(xs.begin(), xs.begin() + std::min<std::size_t>(xs.size(), 16));
  std::vector<Tensor<float>> gc(cfs.begin(), cfs.begin() + std::min<std::size_t>(cfs.size(), 16));
  if (!gx.empty()) write_png(dir / "grid.png", counterfactual_grid(gx, gc, 2));
  const auto c = stack(cfs);
  data::IdxArray a;
  a.type = data::IdxType::Float;
  a.dims = c.shape;
  a.floats.assign(c.data.begin(), c.data.end());
  data::write_idx(dir / "counterfactuals.idx", a);
}

// Rebuilds results from an explanation directory (traces are not reloaded).
inline std::vector<CounterfactualResult> read_explanations(const fs::path& dir) {
  const auto a = data::read_idx(dir / "counterfactuals.idx");
  if (a.type != data::IdxType::Float || a.dims.size() != 4) throw std::runtime_error("counterfactuals.idx must be 4-d float");
  const Tensor<float> c(a.dims, a.floats);
  const auto rows = read_json(dir / "results.json");
  if (static_cast<int>(rows.size()) != c.dim(0)) throw std::runtime_error("results.json does not match counterfactuals.idx");
  std::vector<CounterfactualResult> out;
  for (int i = 0; i < c.dim(0); ++i) {
    const auto& j = rows.at(i);
    CounterfactualResult r;
    r.counterfactual = unstack(c, i);
    r.success = j.at("success");
    if (!j.at("lambda_c_used").is_null()) r.lambda_c_used = j.at("lambda_c_used").get<double>();
    r.attribute = j.at("attribute");
    r.target = j.at("target");
    r.query_index = j.at("query");
    r.variant = variant_from_string(j.at("variant"));
    r.seed = j.at("seed");
    r.target_posterior = j.at("target_posterior");
    r.model_eval_count = j.at("model_eval_count");
    r.attempts = j.at("attempts");
    if (!j.at("stopped_at").is_null()) r.stopped_at = j.at("stopped_at").get<int>();
    r.errors = j.at("errors").get<std::vector<std::string>>();
    out.push_back(std::move(r));
  }
  return out;
}

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline json seeds_json(const ExperimentConfig& c) {
  return {{"experiment", c.seed},
          {"data", c.data.seed},
          {"queries", c.queries.seed},
          {"denoiser_init", detail::init_seed(c, ModelRole::Denoiser)},
          {"classifier_init", detail::init_seed(c, ModelRole::Classifier)},
          {"oracle_init", detail::init_seed(c, ModelRole::Oracle)},
          {"embedder_init", detail::init_seed(c, ModelRole::Embedder)}};
}

constexpr const char* kPerceptualNote =
    "perceptual loss and distance use the trained embedder's convolutional activations in place of a pretrained VGG19";

// Enough to replay the run: the command, the resolved config and what it produced.
inline json manifest(const std::string& command, const ExperimentConfig& c, const json& checkpoints, const json& metrics,
                     double seconds, long model_evals, const json& extra = json::object()) {
  json m{{"command", command},
         {"config", c.to_json()},
         {"seeds", seeds_json(c)},
         {"checkpoints", checkpoints},
         {"perceptual_model", kPerceptualNote},
         {"metrics", metrics},
         {"wall_clock_seconds", seconds},
         {"model_evals", model_evals}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  return m;
}

inline long total_evals(const std::vector<CounterfactualResult>& res) {
  long s = 0;
  for (const auto& r : res) s += r.model_eval_count;
  return s;
}

inline std::vector<std::string> result_errors(const std::vector<CounterfactualResult>& res) {
  std::vector<std::string> out;
  for (const auto& r : res)
    for (const auto& e : r.errors) out.push_back("query " + std::to_string(r.query_index) + ": " + e);
  return out;
}

// ---------------------------------------------------------------------------
// Comparative tables

struct TableRow {
  std::string label;  // variant name or swept value
  Evaluated eval;
  std::vector<CounterfactualResult> results;
};

inline void write_table(const fs::path& path, const std::string& key, const std::vector<TableRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << key << ',' << metrics::EvaluationReport::csv_header() << '\n';
  for (const auto& r : rows) out << r.label << ',' << r.eval.report.csv_row() << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline json table_json(const std::vector<TableRow>& rows) {
  json j = json::array();
  for (const auto& r : rows) {
    auto e = r.eval.report.to_json();
    e["label"] = r.label;
    if (r.eval.correlation) e["correlation"] = r.eval.correlation->to_json();
    j.push_back(e);
  }
  return j;
}

// Runs each labelled guidance setting on the same queries and scores them jointly.
inline std::vector<TableRow> compare(const Models& m, const data::Dataset& d, const QuerySet& q,
                                     const std::vector<std::pair<std::string, GuidanceConfig>>& settings, int fid_repeats,
                                     std::uint64_t seed, std::vector<std::string>& warnings, const Log& log = {}) {
  std::vector<TableRow> rows;
  for (const auto& [label, g] : settings) {
    auto res = run_queries(m, q, g, log);
    for (const auto& e : result_errors(res)) warnings.push_back(label + ": " + e);
    rows.push_back({label, evaluate_method(label, m, d, q, res), std::move(res)});
    if (log) {
      const auto& r = rows.back().eval.report;
      log(label + ": FR " + std::to_string(r.flip_ratio) + " l1 " + std::to_string(r.mean_l1.value_or(NAN)) + " BKL " +
          std::to_string(r.mean_bkl.value_or(NAN)));
    }
  }
  std::map<std::string, Evaluated*> ev;
  std::map<std::string, const std::vector<CounterfactualResult>*> rs;
  for (auto& r : rows) {
    ev[r.label] = &r.eval;
    rs[r.label] = &r.results;
  }
  attach_frechet(ev, m, d, rs, fid_repeats, seed, warnings);
  return rows;
}

inline std::vector<std::pair<std::string, GuidanceConfig>> variant_settings(const GuidanceConfig& base,
                                                                            const std::vector<Variant>& variants) {
  std::vector<std::pair<std::string, GuidanceConfig>> out;
  for (auto v : variants) {
    auto g = base;
    g.variant = v;
    out.emplace_back(to_string(v), g);
  }
  return out;
}

inline std::string format_value(double v) {
  std::ostringstream o;
  o << v;
  return o.str();
}

// "tau" values replace the start depth; "lambda_c" values become single-entry ladders.
inline std::vector<std::pair<std::string, GuidanceConfig>> sweep_settings(const GuidanceConfig& base, const std::string& param,
                                                                          const std::vector<double>& values, int num_steps) {
  if (values.empty()) throw std::invalid_argument("sweep needs at least one value");
  std::vector<std::pair<std::string, GuidanceConfig>> out;
  for (double v : values) {
    auto g = base;
    if (param == "tau") {
      if (v != std::floor(v)) throw std::invalid_argument("tau values must be integers");
      g.tau = static_cast<int>(v);
    } else if (param == "lambda_c") {
      g.lambda_c_ladder = {v};
    } else {
      throw std::invalid_argument("sweep parameter must be tau or lambda_c, got '" + param + "'");
    }
    g.validate(num_steps);
    out.emplace_back(format_value(v), g);
  }
  return out;
}

}  // namespace dime::exp
