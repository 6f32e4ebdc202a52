// dime: data generation, training, explanation, evaluation, ablation and sweeps.

#include <iostream>

#include <CLI11.hpp>

#include "dime/experiment.hpp"

using namespace dime;
namespace fs = std::filesystem;
using exp::json;

namespace {

struct Common {
  std::string config, work = "work", out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<int> tau;
  std::vector<double> lambda_c;
  std::optional<int> runs;
  bool trace = false;
};

void log_line(const std::string& s) { std::cerr << "[dime] " << s << std::endl; }

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

enum class SeedTarget { Data, Experiment, Queries };

// Config file first, then flags. Validated before anything is computed.
exp::ExperimentConfig resolve(const Common& c, SeedTarget target) {
  auto cfg = c.config.empty() ? exp::ExperimentConfig::defaults() : exp::load_config(c.config);
  if (c.seed) {
    switch (target) {
      case SeedTarget::Data: cfg.data.seed = *c.seed; break;
      case SeedTarget::Experiment: cfg.seed = *c.seed; break;
      case SeedTarget::Queries: cfg.queries.seed = *c.seed; break;
    }
  }
  if (c.variant) cfg.guidance.variant = variant_from_string(*c.variant);
  if (c.tau) cfg.guidance.tau = *c.tau;
  if (!c.lambda_c.empty()) cfg.guidance.lambda_c_ladder = c.lambda_c;
  if (c.runs) cfg.guidance.num_diversity_runs = *c.runs;
  if (c.trace) cfg.guidance.trace = true;
  cfg.validate();
  return cfg;
}

fs::path require_out(const Common& c) {
  if (c.out.empty()) throw std::invalid_argument("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

void add_common(CLI::App* app, Common& c, bool guidance) {
  app->add_option("--config", c.config, "experiment config (JSON)");
  app->add_option("--work", c.work, "work directory holding data/ and models/")->capture_default_str();
  app->add_option("--out", c.out, "output directory");
  app->add_option("--seed", c.seed, "seed override");
  if (!guidance) return;
  app->add_option("--variant", c.variant, "dime | direct | naive | early_stop | unconditional");
  app->add_option("--tau", c.tau, "start depth");
  app->add_option("--lambda-c", c.lambda_c, "classifier weight ladder")->delimiter(',');
  app->add_option("--runs", c.runs, "independent runs for diversity");
  app->add_flag("--trace", c.trace, "record (t, posterior) per step");
}

int cmd_gen_data(const Common& c, const std::string& cmd) {
  exp::Stopwatch sw;
  const auto cfg = resolve(c, SeedTarget::Data);
  const fs::path dir = c.out.empty() ? fs::path(c.work) : fs::path(c.out);
  const auto d = exp::ensure_dataset(cfg, dir, log_line);
  exp::write_json(dir / "data" / "run_manifest.json",
                  exp::manifest(cmd, cfg, json::object(), {{"images", d.size()}, {"train", d.train_count}}, sw.seconds(), 0));
  log_line("dataset in " + (dir / "data").string());
  return 0;
}

int cmd_train(const Common& c, const std::string& role, const std::string& cmd) {
  exp::Stopwatch sw;
  const auto cfg = resolve(c, SeedTarget::Experiment);
  const auto d = exp::ensure_dataset(cfg, c.work, log_line);
  exp::Models m;
  std::vector<ModelRole> roles;
  if (role == "all")
    roles = {ModelRole::Denoiser, ModelRole::Classifier, ModelRole::Oracle, ModelRole::Embedder};
  else
    roles = {role_from_string(role)};
  for (auto r : roles) exp::ensure_model(cfg, d, c.work, r, m, log_line);
  const fs::path out = c.out.empty() ? fs::path(c.work) / "models" : fs::path(c.out);
  exp::write_json(out / ("train_" + role + "_manifest.json"), exp::manifest(cmd, cfg, m.checkpoints, json::object(), sw.seconds(), 0));
  std::cout << m.checkpoints.dump(2) << '\n';
  return 0;
}

struct Prepared {
  exp::ExperimentConfig cfg;
  data::Dataset data;
  exp::Models models;
  exp::QuerySet queries;
};

Prepared prepare(const exp::ExperimentConfig& cfg, const fs::path& work) {
  Prepared p{cfg, exp::ensure_dataset(cfg, work, log_line), {}, {}};
  p.models = exp::ensure_models(cfg, p.data, work, log_line);
  p.queries = exp::select_queries(cfg, p.data, *p.models.classifier);
  return p;
}

int cmd_explain(const Common& c, const std::string& cmd) {
  exp::Stopwatch sw;
  const auto cfg = resolve(c, SeedTarget::Queries);
  const auto out = require_out(c);
  auto p = prepare(cfg, c.work);
  const auto res = exp::run_queries(p.models, p.queries, cfg.guidance, log_line);
  exp::write_explanations(out, p.queries, res, cfg.guidance);
  const auto errors = exp::result_errors(res);
  const json summary{{"flip_ratio", metrics::flip_ratio(res)},
                     {"successes", metrics::successes(res).size()},
                     {"queries", res.size()},
                     {"errors", errors}};
  exp::write_json(out / "manifest.json",
                  exp::manifest(cmd, cfg, p.models.checkpoints, summary, sw.seconds(), exp::total_evals(res),
                                {{"work", fs::absolute(c.work).string()}}));
  log_line("flip ratio " + std::to_string(metrics::flip_ratio(res)) + " over " + std::to_string(res.size()) + " queries");
  for (const auto& e : errors) log_line(e);
  return 0;
}

int cmd_evaluate(const std::string& dir, const std::vector<std::string>& selected, std::optional<int> runs,
                 const std::string& cmd) {
  exp::Stopwatch sw;
  const auto prior = exp::read_json(fs::path(dir) / "manifest.json");
  auto cfg = exp::ExperimentConfig::from_json(prior.at("config"));
  if (runs) cfg.guidance.num_diversity_runs = *runs;
  cfg.validate();
  const std::set<std::string> known{"fr", "bkl", "l1", "mnac", "fva", "cd", "fid", "diversity"};
  std::set<std::string> want(selected.begin(), selected.end());
  for (const auto& s : want)
    if (!known.count(s)) throw std::invalid_argument("unknown metric '" + s + "' (fr, bkl, l1, mnac, fva, cd, fid, diversity)");
  if (want.empty()) want = {"fr", "bkl", "l1", "mnac", "fva", "cd", "fid"};
  const auto res = exp::read_explanations(dir);
  auto p = prepare(cfg, prior.at("work").get<std::string>());
  if (res.size() != p.queries.rows.size()) throw std::runtime_error("explanations do not match the query selector");
  const auto name = to_string(cfg.guidance.variant);
  auto ev = exp::evaluate_method(name, p.models, p.data, p.queries, res);
  std::vector<std::string> warnings;
  if (want.count("fid"))
    exp::attach_frechet({{name, &ev}}, p.models, p.data, {{name, &res}}, cfg.evaluation.fid_repeats, cfg.queries.seed,
                        warnings);
  long evals = 0;
  if (want.count("diversity")) {
    const auto sub = exp::head(p.queries, cfg.evaluation.diversity_queries);
    const auto d = exp::diversity(p.models, sub, cfg.guidance, cfg.guidance.num_diversity_runs);
    ev.report.diversity = d.score;
    evals += d.model_evals;
  }
  auto& r = ev.report;
  if (!want.count("bkl")) r.mean_bkl.reset();
  if (!want.count("l1")) r.mean_l1.reset();
  if (!want.count("mnac")) r.mnac.reset();
  if (!want.count("fva")) r.verification_accuracy.reset();
  if (!want.count("cd")) r.cd.reset();
  auto j = r.to_json();
  if (want.count("cd") && ev.correlation) j["correlation"] = ev.correlation->to_json(p.data.attribute_names);
  j["warnings"] = warnings;
  exp::write_json(fs::path(dir) / "evaluation.json", j);
  {
    std::ofstream csv(fs::path(dir) / "evaluation.csv");
    csv << metrics::EvaluationReport::csv_header() << '\n' << r.csv_row() << '\n';
  }
  exp::write_json(fs::path(dir) / "evaluate_manifest.json",
                  exp::manifest(cmd, cfg, p.models.checkpoints, j, sw.seconds(), evals));
  for (const auto& w : warnings) log_line(w);
  std::cout << j.dump(2) << '\n';
  return 0;
}

int write_comparison(const fs::path& out, const std::string& key, const std::string& cmd, const exp::ExperimentConfig& cfg,
                     const exp::Models& m, const std::vector<exp::TableRow>& rows, std::vector<std::string>& warnings,
                     double seconds, const json& extra) {
  exp::write_table(out / "table.csv", key, rows);
  long evals = 0;
  for (const auto& r : rows) evals += exp::total_evals(r.results);
  auto metrics_json = exp::table_json(rows);
  exp::write_json(out / "table.json", metrics_json);
  auto x = extra;
  x["warnings"] = warnings;
  exp::write_json(out / "manifest.json", exp::manifest(cmd, cfg, m.checkpoints, metrics_json, seconds, evals, x));
  std::ifstream t(out / "table.csv");
  std::cout << t.rdbuf();
  for (const auto& w : warnings) log_line(w);
  return 0;
}

int cmd_ablate(const Common& c, const std::vector<std::string>& names, const std::string& cmd) {
  exp::Stopwatch sw;
  const auto cfg = resolve(c, SeedTarget::Queries);
  std::vector<Variant> variants;
  for (const auto& n : names) variants.push_back(variant_from_string(n));
  if (variants.empty()) variants = all_variants();
  const auto out = require_out(c);
  auto p = prepare(cfg, c.work);
  std::vector<std::string> warnings;
  const auto rows = exp::compare(p.models, p.data, p.queries, exp::variant_settings(cfg.guidance, variants),
                                 cfg.evaluation.fid_repeats, cfg.queries.seed, warnings, log_line);
  const auto settings = exp::variant_settings(cfg.guidance, variants);
  for (std::size_t i = 0; i < rows.size(); ++i) exp::write_explanations(out / rows[i].label, p.queries, rows[i].results, settings[i].second);
  return write_comparison(out, "variant", cmd, cfg, p.models, rows, warnings, sw.seconds(), {{"variants", names}});
}

int cmd_sweep(const Common& c, const std::string& param, const std::vector<double>& values, const std::string& cmd) {
  exp::Stopwatch sw;
  const auto cfg = resolve(c, SeedTarget::Queries);
  const auto settings = exp::sweep_settings(cfg.guidance, param, values, cfg.num_steps);
  const auto out = require_out(c);
  auto p = prepare(cfg, c.work);
  std::vector<std::string> warnings;
  const auto rows = exp::compare(p.models, p.data, p.queries, settings, cfg.evaluation.fid_repeats, cfg.queries.seed,
                                 warnings, log_line);
  for (std::size_t i = 0; i < rows.size(); ++i)
    exp::write_explanations(out / (param + "_" + rows[i].label), p.queries, rows[i].results, settings[i].second);
  return write_comparison(out, param, cmd, cfg, p.models, rows, warnings, sw.seconds(), {{"parameter", param}, {"values", values}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual explanations with guided diffusion"};
  app.require_subcommand(1);
  Common c;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, c, false);

  std::string role = "all";
  auto* train = app.add_subcommand("train", "train (or reuse) models");
  train->add_option("role", role, "ddpm | classifier | oracle | embedder | all")
      ->check(CLI::IsMember({"ddpm", "classifier", "oracle", "embedder", "all"}));
  add_common(train, c, false);

  auto* explain = app.add_subcommand("explain", "explain the selected queries");
  add_common(explain, c, true);

  std::string dir;
  std::vector<std::string> selected;
  std::optional<int> eval_runs;
  auto* evaluate = app.add_subcommand("evaluate", "score an explanation directory");
  evaluate->add_option("dir", dir, "output of explain")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--metrics", selected, "fr,bkl,l1,mnac,fva,cd,fid,diversity")->delimiter(',');
  evaluate->add_option("--runs", eval_runs, "independent runs for diversity");

  std::vector<std::string> variants;
  auto* ablate = app.add_subcommand("ablate", "compare guidance variants on the same queries");
  ablate->add_option("--variants", variants, "default: all five")->delimiter(',');
  add_common(ablate, c, true);

  std::string param;
  std::vector<double> values;
  auto* sweep = app.add_subcommand("sweep", "vary tau or lambda_c");
  sweep->add_option("param", param, "tau | lambda_c")->required()->check(CLI::IsMember({"tau", "lambda_c"}));
  sweep->add_option("values", values, "comma separated")->required()->delimiter(',');
  add_common(sweep, c, true);

  CLI11_PARSE(app, argc, argv);
  const auto cmd = command_line(argc, argv);
  try {
    if (*gen) return cmd_gen_data(c, cmd);
    if (*train) return cmd_train(c, role, cmd);
    if (*explain) return cmd_explain(c, cmd);
    if (*evaluate) return cmd_evaluate(dir, selected, eval_runs, cmd);
    if (*ablate) return cmd_ablate(c, variants, cmd);
    if (*sweep) return cmd_sweep(c, param, values, cmd);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
