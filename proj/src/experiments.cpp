#include "dynconn/experiments.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "dynconn/error.hpp"
#include "dynconn/sliding_window.hpp"
#include "dynconn/surrogate.hpp"

namespace dynconn {

using nlohmann::json;

std::string to_string(Framework f) { return f == Framework::frequentist ? "frequentist" : "bayesian"; }

Framework framework_from_string(const std::string& s) {
  if (s == "frequentist") return Framework::frequentist;
  if (s == "bayesian") return Framework::bayesian;
  throw ConfigError("unknown framework '" + s + "'");
}

ExperimentPlan ExperimentPlan::desk() { return {}; }

ExperimentPlan ExperimentPlan::paper() {
  ExperimentPlan p;
  p.name = "paper";
  p.replicates = 40;
  p.surrogates = 1000;
  p.smc = SmcConfig::paper_scale();
  return p;
}

void ExperimentPlan::validate() const {
  if (scenarios.empty() || sizes.empty()) throw ConfigError("plan grid is empty");
  const bool periodic = std::find(scenarios.begin(), scenarios.end(), Scenario::periodic) != scenarios.end();
  if (periodic && (amplitudes.empty() || frequencies.empty())) {
    throw ConfigError("periodic scenario needs amplitudes and frequencies");
  }
  if (replicates < 1) throw ConfigError("replicates must be at least 1");
  if (frameworks.empty()) throw ConfigError("plan lists no framework");
  if (statistics.empty()) throw ConfigError("plan lists no statistic");
  for (auto f : frameworks) {
    if (f == Framework::frequentist && window_fractions.empty()) throw ConfigError("frequentist runs need windows");
    if (f == Framework::bayesian && kernels.empty()) throw ConfigError("Bayesian runs need kernels");
  }
  for (const auto& k : kernels) (void)kernel_preset(k);
  for (auto n : sizes) {
    if (n < 4) throw ConfigError("series length must be at least 4");
  }
  for (double a : amplitudes) {
    if (!(a >= 0.0 && a < 1.0)) throw ConfigError("amplitudes must lie in [0, 1)");
  }
  for (double w : window_fractions) {
    if (!(w > 0.0 && w <= 1.0)) throw ConfigError("window fractions must lie in (0, 1]");
  }
  SurrogateConfig{surrogates, alpha, statistics, options}.validate();
  bands.validate();
  smc.validate();
  if (std::find(frameworks.begin(), frameworks.end(), Framework::bayesian) != frameworks.end()) {
    BayesConfig{prior_draws, posterior_draws, statistics, options, bands, smc, false}.validate();
  }
}

// ---- JSON ----

namespace {

template <class T, class F>
std::vector<std::string> names(const std::vector<T>& xs, F fn) {
  std::vector<std::string> out;
  for (const auto& x : xs) out.push_back(fn(x));
  return out;
}

json smc_to_json(const SmcConfig& c) {
  return {{"particles", c.particles},
          {"chains", c.chains},
          {"ess_threshold", c.ess_threshold},
          {"mutation_steps_per_round", c.mutation_steps_per_round},
          {"rhat_target", c.rhat_target},
          {"max_extra_rounds", c.max_extra_rounds},
          {"latent_batches", c.latent_batches},
          {"scale_moves", c.scale_moves}};
}

void smc_from_json(const json& j, SmcConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "particles") c.particles = value.get<int>();
    else if (key == "chains") c.chains = value.get<int>();
    else if (key == "ess_threshold") c.ess_threshold = value.get<double>();
    else if (key == "mutation_steps_per_round") c.mutation_steps_per_round = value.get<int>();
    else if (key == "rhat_target") c.rhat_target = value.get<double>();
    else if (key == "max_extra_rounds") c.max_extra_rounds = value.get<int>();
    else if (key == "latent_batches") c.latent_batches = value.get<int>();
    else if (key == "scale_moves") c.scale_moves = value.get<int>();
    else throw ConfigError("unknown smc key '" + key + "'");
  }
}

}  // namespace

void to_json(json& j, const ExperimentPlan& p) {
  j = json{{"schema_version", kPlanSchemaVersion},
           {"name", p.name},
           {"seed", p.seed},
           {"scenarios", names(p.scenarios, [](Scenario s) { return to_string(s); })},
           {"n", p.sizes},
           {"amplitudes", p.amplitudes},
           {"frequencies", p.frequencies},
           {"replicates", p.replicates},
           {"window_fractions", p.window_fractions},
           {"kernels", p.kernels},
           {"statistics", names(p.statistics, [](StatisticKind s) { return to_string(s); })},
           {"frameworks", names(p.frameworks, [](Framework f) { return to_string(f); })},
           {"surrogates", p.surrogates},
           {"alpha", p.alpha},
           {"prior_draws", p.prior_draws},
           {"posterior_draws", p.posterior_draws},
           {"bands", {{"dynamic_above", p.bands.dynamic_above}, {"static_below", p.bands.static_below}}},
           {"smc", smc_to_json(p.smc)},
           {"options",
            {{"median_crossing", {{"gamma", p.options.median_crossing.gamma}, {"beta", p.options.median_crossing.beta}}},
             {"include_dc", p.options.include_dc}}}};
}

void from_json(const json& j, ExperimentPlan& p) {
  if (!j.is_object()) throw ConfigError("plan must be a JSON object");
  p = ExperimentPlan::desk();
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "paper") p = ExperimentPlan::paper();
    else if (preset != "desk") throw ConfigError("unknown preset '" + preset + "'");
  }
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "schema_version") {
        if (v.get<int>() != kPlanSchemaVersion) throw ConfigError("unsupported plan schema version");
      } else if (key == "preset") {
      } else if (key == "name") p.name = v.get<std::string>();
      else if (key == "seed") p.seed = v.get<std::uint64_t>();
      else if (key == "scenarios") {
        p.scenarios.clear();
        for (const auto& s : v) p.scenarios.push_back(scenario_from_string(s.get<std::string>()));
      } else if (key == "n") p.sizes = v.get<std::vector<Index>>();
      else if (key == "amplitudes") p.amplitudes = v.get<std::vector<double>>();
      else if (key == "frequencies") p.frequencies = v.get<std::vector<int>>();
      else if (key == "replicates") p.replicates = v.get<int>();
      else if (key == "window_fractions") p.window_fractions = v.get<std::vector<double>>();
      else if (key == "kernels") p.kernels = v.get<std::vector<std::string>>();
      else if (key == "statistics") {
        p.statistics.clear();
        for (const auto& s : v) p.statistics.push_back(statistic_from_string(s.get<std::string>()));
      } else if (key == "frameworks") {
        p.frameworks.clear();
        for (const auto& s : v) p.frameworks.push_back(framework_from_string(s.get<std::string>()));
      } else if (key == "surrogates") p.surrogates = v.get<int>();
      else if (key == "alpha") p.alpha = v.get<double>();
      else if (key == "prior_draws") p.prior_draws = v.get<int>();
      else if (key == "posterior_draws") p.posterior_draws = v.get<int>();
      else if (key == "bands") {
        p.bands.dynamic_above = v.value("dynamic_above", p.bands.dynamic_above);
        p.bands.static_below = v.value("static_below", p.bands.static_below);
      } else if (key == "smc") smc_from_json(v, p.smc);
      else if (key == "options") {
        if (v.contains("median_crossing")) {
          p.options.median_crossing.gamma = v["median_crossing"].value("gamma", p.options.median_crossing.gamma);
          p.options.median_crossing.beta = v["median_crossing"].value("beta", p.options.median_crossing.beta);
        }
        p.options.include_dc = v.value("include_dc", p.options.include_dc);
      } else {
        throw ConfigError("unknown plan key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed plan: ") + e.what());
  }
}

// ---- cells and seeds ----

namespace {

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string window_name(double fraction) { return "window_" + format_number(100.0 * fraction); }

double window_from_name(const std::string& name) {
  if (name.rfind("window_", 0) != 0) throw ConfigError("not a window estimator: " + name);
  return std::stod(name.substr(7)) / 100.0;
}

}  // namespace

std::string Cell::key() const {
  std::string k = to_string(scenario) + "/n=" + std::to_string(n);
  if (scenario == Scenario::periodic) k += "/A=" + format_number(amplitude) + "/w=" + std::to_string(frequency);
  return k;
}

std::vector<Cell> expand_cells(const ExperimentPlan& plan) {
  std::vector<Cell> out;
  for (auto s : plan.scenarios) {
    for (auto n : plan.sizes) {
      if (s == Scenario::periodic) {
        for (double a : plan.amplitudes) {
          for (int w : plan.frequencies) out.push_back({s, n, a, w});
        }
      } else {
        out.push_back({s, n, 0.0, 0});
      }
    }
  }
  return out;
}

std::uint64_t replicate_seed(std::uint64_t root, const Cell& cell, int replicate) {
  return rng::derive(root, {rng::tag(rng::Purpose::experiment), rng::hash_string(cell.key()),
                            static_cast<std::uint64_t>(replicate)});
}

std::string job_id(const Cell& cell, int replicate, Framework framework, const std::string& estimator) {
  return cell.key() + "/r=" + std::to_string(replicate) + "/" + to_string(framework) + "/" + estimator;
}

// ---- metrics ----

MseResult mse(const CovarianceTrajectory& truth, std::span<const CovarianceTrajectory> draws) {
  if (draws.empty()) throw SizeError("MSE needs at least one draw");
  const Index n = truth.n(), d = truth.d();
  if (d < 2) throw ShapeError("MSE is defined on off-diagonal entries; d must be at least 2");
  for (const auto& t : draws) {
    if (t.n() != n || t.d() != d) throw ShapeError("estimate and truth differ in shape");
  }
  const double entries = static_cast<double>(n * d * (d - 1) / 2);
  MseResult out;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) {
      for (Index k = j + 1; k < d; ++k) {
        double mean = 0.0;
        for (const auto& t : draws) {
          const double e = t(i, j, k) - truth(i, j, k);
          out.per_sample += e * e;
          mean += t(i, j, k);
        }
        mean /= static_cast<double>(draws.size());
        const double e = mean - truth(i, j, k);
        out.of_mean += e * e;
      }
    }
  }
  out.per_sample /= entries * static_cast<double>(draws.size());
  out.of_mean /= entries;
  return out;
}

MseResult mse(const CovarianceTrajectory& truth, const CovarianceTrajectory& estimate) {
  return mse(truth, std::span<const CovarianceTrajectory>(&estimate, 1));
}

Classification classification_metrics(std::span<const Outcome> outcomes) {
  if (outcomes.empty()) throw SizeError("no outcomes to classify");
  Classification c;
  for (const auto& o : outcomes) {
    const bool called = o.label == Label::dynamic;
    if (o.label == Label::inconclusive) ++c.inconclusive;
    if (o.truth_dynamic) (called ? c.tp : c.fn)++;
    else (called ? c.fp : c.tn)++;
  }
  const double total = static_cast<double>(outcomes.size());
  c.accuracy = (c.tp + c.tn) / total;
  if (c.tp + c.fn > 0) c.recall = static_cast<double>(c.tp) / (c.tp + c.fn);
  if (c.fp + c.tn > 0) c.false_positive_rate = static_cast<double>(c.fp) / (c.fp + c.tn);
  c.inconclusive_fraction = c.inconclusive / total;
  return c;
}

// ---- records ----

void to_json(json& j, const JobRecord& r) {
  json outcomes = json::array();
  for (const auto& o : r.outcomes) {
    outcomes.push_back({{"statistic", to_string(o.statistic)}, {"value", o.value}, {"label", to_string(o.label)}});
  }
  j = json{{"job_id", r.job_id},
           {"scenario", to_string(r.cell.scenario)},
           {"n", r.cell.n},
           {"amplitude", r.cell.amplitude},
           {"frequency", r.cell.frequency},
           {"replicate", r.replicate},
           {"framework", to_string(r.framework)},
           {"estimator", r.estimator},
           {"ok", r.ok},
           {"error", r.error},
           {"runtime_seconds", r.runtime_seconds},
           {"mse_per_sample", r.mse.per_sample},
           {"mse_of_mean", r.mse.of_mean},
           {"converged", r.converged},
           {"max_rhat", std::isfinite(r.max_rhat) ? json(r.max_rhat) : json(nullptr)},
           {"outcomes", outcomes}};
}

void from_json(const json& j, JobRecord& r) {
  r.job_id = j.at("job_id").get<std::string>();
  r.cell.scenario = scenario_from_string(j.at("scenario").get<std::string>());
  r.cell.n = j.at("n").get<Index>();
  r.cell.amplitude = j.at("amplitude").get<double>();
  r.cell.frequency = j.at("frequency").get<int>();
  r.replicate = j.at("replicate").get<int>();
  r.framework = framework_from_string(j.at("framework").get<std::string>());
  r.estimator = j.at("estimator").get<std::string>();
  r.ok = j.at("ok").get<bool>();
  r.error = j.at("error").get<std::string>();
  r.runtime_seconds = j.at("runtime_seconds").get<double>();
  r.mse.per_sample = j.at("mse_per_sample").get<double>();
  r.mse.of_mean = j.at("mse_of_mean").get<double>();
  r.converged = j.at("converged").get<bool>();
  r.max_rhat = j.at("max_rhat").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("max_rhat").get<double>();
  r.outcomes.clear();
  for (const auto& o : j.at("outcomes")) {
    r.outcomes.push_back({statistic_from_string(o.at("statistic").get<std::string>()), o.at("value").get<double>(),
                          label_from_string(o.at("label").get<std::string>())});
  }
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

void to_json(json& j, const MetricTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"scenario", r.scenario},
                    {"n", r.n},
                    {"amplitude", r.amplitude},
                    {"frequency", r.frequency},
                    {"framework", r.framework},
                    {"estimator", r.estimator},
                    {"statistic", r.statistic},
                    {"replicates", r.replicates},
                    {"failures", r.failures},
                    {"nonconverged", r.nonconverged},
                    {"mse_per_sample", r.mse_per_sample},
                    {"mse_posterior_mean", r.mse_posterior_mean},
                    {"accuracy", r.counts.accuracy},
                    {"recall", optional_json(r.counts.recall)},
                    {"false_positive_rate", optional_json(r.counts.false_positive_rate)},
                    {"inconclusive_fraction", r.counts.inconclusive_fraction},
                    {"tp", r.counts.tp},
                    {"fn", r.counts.fn},
                    {"fp", r.counts.fp},
                    {"tn", r.counts.tn},
                    {"inconclusive", r.counts.inconclusive},
                    {"runtime_seconds", r.runtime_seconds}});
  }
  j = json{{"schema_version", t.schema_version}, {"rows", rows}};
}

void from_json(const json& j, MetricTable& t) {
  t.schema_version = j.at("schema_version").get<int>();
  if (t.schema_version != kMetricSchemaVersion) throw ParseError("unsupported metric table schema version");
  t.rows.clear();
  for (const auto& o : j.at("rows")) {
    MetricRow r;
    r.scenario = o.at("scenario").get<std::string>();
    r.n = o.at("n").get<Index>();
    r.amplitude = o.at("amplitude").get<double>();
    r.frequency = o.at("frequency").get<int>();
    r.framework = o.at("framework").get<std::string>();
    r.estimator = o.at("estimator").get<std::string>();
    r.statistic = o.at("statistic").get<std::string>();
    r.replicates = o.at("replicates").get<int>();
    r.failures = o.at("failures").get<int>();
    r.nonconverged = o.at("nonconverged").get<int>();
    r.mse_per_sample = o.at("mse_per_sample").get<double>();
    r.mse_posterior_mean = o.at("mse_posterior_mean").get<double>();
    r.counts.accuracy = o.at("accuracy").get<double>();
    r.counts.recall = optional_from(o.at("recall"));
    r.counts.false_positive_rate = optional_from(o.at("false_positive_rate"));
    r.counts.inconclusive_fraction = o.at("inconclusive_fraction").get<double>();
    r.counts.tp = o.at("tp").get<int>();
    r.counts.fn = o.at("fn").get<int>();
    r.counts.fp = o.at("fp").get<int>();
    r.counts.tn = o.at("tn").get<int>();
    r.counts.inconclusive = o.at("inconclusive").get<int>();
    r.runtime_seconds = o.at("runtime_seconds").get<double>();
    t.rows.push_back(std::move(r));
  }
}

MetricTable aggregate(std::span<const JobRecord> records) {
  using Key = std::tuple<std::string, Index, double, int, std::string, std::string, std::string>;
  struct Acc {
    std::vector<Outcome> outcomes;
    int failures = 0, nonconverged = 0, ok = 0;
    double mse_ps = 0.0, mse_pm = 0.0, runtime = 0.0;
  };
  // Failed jobs carry no outcomes, so they are attributed to every statistic of their estimator.
  std::set<std::string> statistics;
  for (const auto& r : records) {
    for (const auto& o : r.outcomes) statistics.insert(to_string(o.statistic));
  }
  // Sums run in job id order so the result does not depend on completion order.
  std::vector<const JobRecord*> ordered;
  ordered.reserve(records.size());
  for (const auto& r : records) ordered.push_back(&r);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const JobRecord* a, const JobRecord* b) { return a->job_id < b->job_id; });
  std::map<Key, Acc> groups;
  for (const JobRecord* rp : ordered) {
    const auto& r = *rp;
    const auto base = [&](const std::string& stat) {
      return Key{to_string(r.cell.scenario), r.cell.n, r.cell.amplitude, r.cell.frequency,
                 to_string(r.framework), r.estimator, stat};
    };
    if (!r.ok) {
      for (const auto& s : statistics) ++groups[base(s)].failures;
      continue;
    }
    for (const auto& o : r.outcomes) {
      auto& acc = groups[base(to_string(o.statistic))];
      acc.outcomes.push_back({r.cell.truth_dynamic(), o.label});
      acc.mse_ps += r.mse.per_sample;
      acc.mse_pm += r.mse.of_mean;
      acc.runtime += r.runtime_seconds;
      acc.nonconverged += r.converged ? 0 : 1;
      ++acc.ok;
    }
  }
  MetricTable table;
  for (const auto& [key, acc] : groups) {
    MetricRow row;
    std::tie(row.scenario, row.n, row.amplitude, row.frequency, row.framework, row.estimator, row.statistic) = key;
    row.replicates = acc.ok;
    row.failures = acc.failures;
    row.nonconverged = acc.nonconverged;
    if (acc.ok > 0) {
      row.mse_per_sample = acc.mse_ps / acc.ok;
      row.mse_posterior_mean = acc.mse_pm / acc.ok;
      row.runtime_seconds = acc.runtime / acc.ok;
      row.counts = classification_metrics(acc.outcomes);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---- running ----

namespace {

std::vector<StatDistribution> kernel_prior(const ExperimentPlan& plan, const std::string& kernel, Index n) {
  WishartModel model;
  model.kernel = kernel_preset(kernel);
  const auto seed = rng::derive(plan.seed, {rng::tag(rng::Purpose::prior), rng::hash_string(kernel),
                                            static_cast<std::uint64_t>(n)});
  return prior_distributions(model, unit_grid(n), plan.prior_draws, seed, plan.statistics, plan.options);
}

}  // namespace

JobRecord run_job(const ExperimentPlan& plan, const Cell& cell, int replicate, Framework framework,
                  const std::string& estimator, std::span<const StatDistribution> prior) {
  JobRecord rec;
  rec.job_id = job_id(cell, replicate, framework, estimator);
  rec.cell = cell;
  rec.replicate = replicate;
  rec.framework = framework;
  rec.estimator = estimator;
  const auto start = std::chrono::steady_clock::now();
  try {
    SimSpec spec;
    spec.scenario = cell.scenario;
    spec.n = cell.n;
    spec.amplitude = cell.amplitude;
    spec.frequency = cell.frequency;
    spec.replicate_seed = replicate_seed(plan.seed, cell, replicate);
    const auto sim = simulate(spec);
    const auto test_seed = rng::derive(spec.replicate_seed, {rng::hash_string(estimator)});

    if (framework == Framework::frequentist) {
      const auto window = WindowConfig::fraction(window_from_name(estimator));
      const SurrogateConfig cfg{plan.surrogates, plan.alpha, plan.statistics, plan.options};
      const auto res = frequentist_test(sim.series, window, cfg, test_seed);
      rec.mse = mse(sim.truth, res.observed_estimate);
      for (auto s : plan.statistics) {
        const auto& e = res.find(0, 1, s);
        rec.outcomes.push_back({s, e.p_value, e.is_dynamic ? Label::dynamic : Label::static_});
      }
    } else {
      WishartModel model;
      model.kernel = kernel_preset(estimator);
      BayesConfig cfg{plan.prior_draws, plan.posterior_draws, plan.statistics, plan.options, plan.bands, plan.smc,
                      true};
      std::vector<StatDistribution> own;
      if (prior.empty()) {
        own = kernel_prior(plan, estimator, cell.n);
        prior = own;
      }
      const auto res = bayesian_test_with_prior(model, sim.series, cfg, test_seed, prior);
      rec.mse = mse(sim.truth, res.posterior_draws);
      rec.converged = res.converged;
      rec.max_rhat = res.max_rhat;
      for (auto s : plan.statistics) {
        const auto& e = res.find(0, 1, s);
        rec.outcomes.push_back({s, e.log_bf10, e.label});
      }
    }
  } catch (const std::exception& e) {
    rec.ok = false;
    rec.error = e.what();
    rec.outcomes.clear();
  }
  rec.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

std::vector<JobRecord> load_records(const std::filesystem::path& archive) {
  std::vector<JobRecord> out;
  std::ifstream in(archive);
  if (!in) return out;
  std::map<std::string, std::size_t> latest;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    JobRecord r;
    try {
      r = json::parse(line).get<JobRecord>();
    } catch (const std::exception&) {
      continue;  // partial line from an interrupted write
    }
    const auto it = latest.find(r.job_id);
    if (it == latest.end()) {
      latest.emplace(r.job_id, out.size());
      out.push_back(std::move(r));
    } else {
      out[it->second] = std::move(r);
    }
  }
  return out;
}

RunSummary run_plan(const ExperimentPlan& plan, const std::filesystem::path& dir, const RunOptions& opts) {
  plan.validate();
  std::filesystem::create_directories(dir);
  const auto plan_path = dir / "plan.json";
  const json plan_json = plan;
  if (std::filesystem::exists(plan_path)) {
    std::ifstream in(plan_path);
    const auto stored = json::parse(in);
    if (stored != plan_json) throw ConfigError(plan_path.string() + " holds a different plan");
  } else {
    std::ofstream(plan_path) << plan_json.dump(2) << '\n';
  }

  struct Job {
    Cell cell;
    int replicate;
    Framework framework;
    std::string estimator;
  };
  std::vector<Job> jobs;
  for (const auto& cell : expand_cells(plan)) {
    for (int r = 0; r < plan.replicates; ++r) {
      for (auto f : plan.frameworks) {
        if (f == Framework::frequentist) {
          for (double w : plan.window_fractions) jobs.push_back({cell, r, f, window_name(w)});
        } else {
          for (const auto& k : plan.kernels) jobs.push_back({cell, r, f, k});
        }
      }
    }
  }

  const auto archive = dir / "results.jsonl";
  std::set<std::string> done;
  for (const auto& r : load_records(archive)) {
    if (r.ok) done.insert(r.job_id);
  }
  std::vector<Job> pending;
  for (const auto& j : jobs) {
    if (!done.count(job_id(j.cell, j.replicate, j.framework, j.estimator))) pending.push_back(j);
  }
  if (opts.max_jobs >= 0 && static_cast<int>(pending.size()) > opts.max_jobs) pending.resize(opts.max_jobs);

  RunSummary summary;
  summary.jobs_total = static_cast<int>(jobs.size());
  summary.jobs_skipped = static_cast<int>(jobs.size() - pending.size());

  // Prior ensembles depend only on (kernel, n); built once up front.
  std::map<std::pair<std::string, Index>, std::vector<StatDistribution>> priors;
  for (const auto& j : pending) {
    if (j.framework != Framework::bayesian) continue;
    const auto key = std::make_pair(j.estimator, j.cell.n);
    if (!priors.count(key)) priors.emplace(key, kernel_prior(plan, j.estimator, j.cell.n));
  }

  int workers = opts.workers;
  if (workers <= 0) {
    const char* env = std::getenv("DYNCONN_THREADS");
    workers = env ? std::max(1, std::atoi(env)) : 1;
  }
  std::mutex io;
  const bool needs_newline = [&] {
    std::ifstream in(archive, std::ios::binary | std::ios::ate);
    if (!in || in.tellg() <= 0) return false;
    in.seekg(-1, std::ios::end);
    return in.get() != '\n';
  }();
  std::ofstream out(archive, std::ios::app);
  if (needs_newline) out << '\n';  // terminate a line cut short by an interrupted run
  if (!out) throw std::runtime_error("cannot append to " + archive.string());
  std::atomic<std::size_t> next{0};
  std::atomic<int> failed{0};
  const auto work = [&]() {
    if (workers > 1) omp_set_num_threads(1);
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      const auto& j = pending[i];
      std::span<const StatDistribution> prior;
      if (j.framework == Framework::bayesian) prior = priors.at({j.estimator, j.cell.n});
      const auto rec = run_job(plan, j.cell, j.replicate, j.framework, j.estimator, prior);
      if (!rec.ok) ++failed;
      std::lock_guard lock(io);
      out << json(rec).dump() << '\n' << std::flush;
      if (opts.verbose) {
        std::cerr << "[" << (i + 1) << "/" << pending.size() << "] " << rec.job_id
                  << (rec.ok ? "" : " FAILED: " + rec.error) << '\n';
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  out.close();

  summary.jobs_run = static_cast<int>(pending.size());
  summary.jobs_failed = failed.load();
  const auto records = load_records(archive);
  summary.table = aggregate(records);
  write_csv(summary.table, dir / "metrics.csv");
  write_json(summary.table, dir / "metrics.json");
  return summary;
}

// ---- reports ----

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_csv(const MetricTable& table, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "schema_version,scenario,n,amplitude,frequency,framework,estimator,statistic,replicates,failures,"
         "nonconverged,mse_per_sample,mse_posterior_mean,accuracy,recall,false_positive_rate,"
         "inconclusive_fraction,tp,fn,fp,tn,inconclusive,runtime_seconds\n";
  if (table.rows.empty()) std::cerr << "warning: metric table is empty; wrote header only\n";
  for (const auto& r : table.rows) {
    out << table.schema_version << ',' << r.scenario << ',' << r.n << ',' << fmt(r.amplitude) << ',' << r.frequency
        << ',' << r.framework << ',' << r.estimator << ',' << r.statistic << ',' << r.replicates << ','
        << r.failures << ',' << r.nonconverged << ',' << fmt(r.mse_per_sample) << ','
        << fmt(r.mse_posterior_mean) << ',' << fmt(r.counts.accuracy) << ',' << fmt(r.counts.recall) << ','
        << fmt(r.counts.false_positive_rate) << ',' << fmt(r.counts.inconclusive_fraction) << ',' << r.counts.tp
        << ',' << r.counts.fn << ',' << r.counts.fp << ',' << r.counts.tn << ',' << r.counts.inconclusive << ','
        << fmt(r.runtime_seconds) << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_json(const MetricTable& table, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << json(table).dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

MetricTable read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  try {
    return json::parse(in).get<MetricTable>();
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_long_csv(const MetricTable& table, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "metric,value,scenario,n,amplitude,frequency,framework,estimator,statistic\n";
  for (const auto& r : table.rows) {
    const std::string tail = "," + r.scenario + "," + std::to_string(r.n) + "," + fmt(r.amplitude) + "," +
                             std::to_string(r.frequency) + "," + r.framework + "," + r.estimator + "," +
                             r.statistic + "\n";
    out << "mse_per_sample," << fmt(r.mse_per_sample) << tail;
    out << "mse_posterior_mean," << fmt(r.mse_posterior_mean) << tail;
    out << "accuracy," << fmt(r.counts.accuracy) << tail;
    if (r.counts.recall) out << "recall," << fmt(r.counts.recall) << tail;
    if (r.counts.false_positive_rate) out << "false_positive_rate," << fmt(r.counts.false_positive_rate) << tail;
    out << "inconclusive_fraction," << fmt(r.counts.inconclusive_fraction) << tail;
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace dynconn
