#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dynconn/bayes.hpp"
#include "dynconn/error.hpp"
#include "dynconn/experiments.hpp"
#include "dynconn/sliding_window.hpp"
#include "dynconn/surrogate.hpp"
#include "dynconn/timeseries.hpp"
#include "dynconn/wishart.hpp"

using namespace dynconn;
using nlohmann::json;

namespace {

struct InputArgs {
  std::vector<std::string> paths;
  bool no_header = false;
};

void add_input(CLI::App* cmd, InputArgs& in) {
  cmd->add_option("-i,--input", in.paths, "CSV file (repeat for several subjects)")->required();
  cmd->add_flag("--no-header", in.no_header, "First row holds data, not column names");
}

MultiSubjectSeries load_inputs(const InputArgs& in) {
  MultiSubjectSeries ms;
  for (const auto& p : in.paths) ms.subjects.push_back(load_csv(p, !in.no_header));
  ms.validate();
  return ms;
}

void emit(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::string indexed_path(const std::string& path, std::size_t s) {
  const std::filesystem::path p(path);
  return (p.parent_path() / (p.stem().string() + "_" + std::to_string(s) + p.extension().string())).string();
}

struct SmcArgs {
  std::string kernel = "periodic";
  int particles = 200;
  int chains = 3;
  int sweeps = SmcConfig{}.mutation_steps_per_round;
  std::string checkpoint;
  std::uint64_t seed = 0;
};

void add_smc(CLI::App* cmd, SmcArgs& a) {
  cmd->add_option("--kernel", a.kernel, "Kernel preset")
      ->check(CLI::IsMember(kernel_preset_names()))
      ->capture_default_str();
  cmd->add_option("--particles", a.particles, "Particles per chain")->capture_default_str();
  cmd->add_option("--chains", a.chains, "Independent SMC chains")->capture_default_str();
  cmd->add_option("--sweeps", a.sweeps, "Mutation sweeps per tempering stage")->capture_default_str();
  cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint file; an existing one is resumed");
}

SmcConfig smc_config(const SmcArgs& a) {
  SmcConfig c;
  c.particles = a.particles;
  c.chains = a.chains;
  c.mutation_steps_per_round = a.sweeps;
  c.checkpoint = a.checkpoint;
  return c;
}

WishartModel wishart_model(const SmcArgs& a, Index d) {
  WishartModel m;
  m.d = d;
  m.kernel = kernel_preset(a.kernel);
  return m;
}

WindowConfig window_config(std::optional<double> frac, std::optional<Index> points, Index stride, bool no_center) {
  WindowConfig w;
  if (points) w.window_points = *points;
  else w.window_fraction = frac.value_or(0.1);
  w.stride = stride;
  w.center = !no_center;
  return w;
}

int run_experiment(const std::string& mode, const std::string& plan_path, const std::string& preset,
                   const std::string& dir, int workers, int max_jobs, bool long_csv, bool verbose) {
  if (mode == "report") {
    const auto records = load_records(std::filesystem::path(dir) / "results.jsonl");
    const auto table = aggregate(records);
    write_csv(table, std::filesystem::path(dir) / "metrics.csv");
    write_json(table, std::filesystem::path(dir) / "metrics.json");
    if (long_csv) write_long_csv(table, std::filesystem::path(dir) / "metrics_long.csv");
    int failed = 0;
    for (const auto& r : records) failed += r.ok ? 0 : 1;
    std::cerr << table.rows.size() << " rows from " << records.size() << " jobs, " << failed << " failed\n";
    return failed == 0 ? 0 : 1;
  }
  ExperimentPlan plan;
  if (mode == "resume" || plan_path.empty()) {
    const auto stored = std::filesystem::path(dir) / "plan.json";
    if (mode == "resume" || std::filesystem::exists(stored)) {
      std::ifstream in(stored);
      if (!in) throw ConfigError("no plan.json in " + dir);
      plan = json::parse(in).get<ExperimentPlan>();
    } else {
      plan = preset == "paper" ? ExperimentPlan::paper() : ExperimentPlan::desk();
    }
  } else {
    std::ifstream in(plan_path);
    if (!in) throw ConfigError("cannot open plan " + plan_path);
    plan = json::parse(in).get<ExperimentPlan>();
  }
  RunOptions opts;
  opts.workers = workers;
  opts.max_jobs = max_jobs;
  opts.verbose = verbose;
  const auto summary = run_plan(plan, dir, opts);
  if (long_csv) write_long_csv(summary.table, std::filesystem::path(dir) / "metrics_long.csv");
  std::cerr << summary.jobs_run << " jobs run, " << summary.jobs_skipped << " already done, " << summary.jobs_failed
            << " failed\n";
  int failed = 0;
  for (const auto& r : load_records(std::filesystem::path(dir) / "results.jsonl")) failed += r.ok ? 0 : 1;
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic connectivity estimation and testing"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Simulate a bivariate series with known connectivity");
  SimSpec spec;
  std::string scenario = "periodic";
  std::string sim_out, truth_out;
  int subjects = 1;
  std::optional<double> phase, static_value;
  sim->add_option("--scenario", scenario, "periodic, state_switching or static")->capture_default_str();
  sim->add_option("-n,--n", spec.n, "Number of time points")->capture_default_str();
  sim->add_option("--amplitude", spec.amplitude, "Sine amplitude in [0, 1)")->capture_default_str();
  sim->add_option("--frequency", spec.frequency, "Sine cycles over the series")->capture_default_str();
  sim->add_option("--phase", phase, "Sine phase (drawn when absent)");
  sim->add_option("--static-value", static_value, "Static correlation (drawn when absent)");
  sim->add_option("--seed", spec.replicate_seed, "Replicate seed")->capture_default_str();
  sim->add_option("--subjects", subjects, "Independent subjects sharing the trajectory")->capture_default_str();
  sim->add_option("-o,--out", sim_out, "Observation CSV")->required();
  sim->add_option("--truth", truth_out, "Ground-truth trajectory CSV");

  // estimate
  auto* est = app.add_subcommand("estimate", "Estimate the covariance trajectory");
  InputArgs est_in;
  add_input(est, est_in);
  std::string method = "sliding";
  std::optional<double> est_frac;
  std::optional<Index> est_points;
  Index est_stride = 1;
  bool est_no_center = false;
  SmcArgs est_smc;
  std::string est_out, ensemble_out;
  est->add_option("--method", method, "sliding or wishart")
      ->check(CLI::IsMember({"sliding", "wishart"}))
      ->capture_default_str();
  est->add_option("--window-frac", est_frac, "Window length as a fraction of n (default 0.1)");
  est->add_option("--window-points", est_points, "Window length in samples");
  est->add_option("--stride", est_stride, "Window step")->capture_default_str();
  est->add_flag("--no-center", est_no_center, "Skip per-window mean removal");
  add_smc(est, est_smc);
  est->add_option("--seed", est_smc.seed, "Root seed")->capture_default_str();
  est->add_option("--ensemble", ensemble_out, "Write the posterior ensemble (CBOR)");
  est->add_option("-o,--out", est_out, "Trajectory CSV (posterior mean for wishart)")->required();

  // test
  auto* tst = app.add_subcommand("test", "Test every edge for dynamic connectivity");
  InputArgs tst_in;
  add_input(tst, tst_in);
  std::string framework = "frequentist";
  std::vector<std::string> stat_names{"variance"};
  int surrogates = 199;
  double alpha = 0.05;
  std::optional<double> tst_frac;
  std::optional<Index> tst_points;
  Index tst_stride = 1;
  SmcArgs tst_smc;
  int prior_draws = 1000, posterior_draws = 1000;
  double static_band = -3.0;
  std::string tst_out;
  tst->add_option("--framework", framework, "frequentist or bayesian")
      ->check(CLI::IsMember({"frequentist", "bayesian"}))
      ->capture_default_str();
  tst->add_option("--stat", stat_names, "variance, max_power or median_crossing (repeatable)")
      ->check(CLI::IsMember({"variance", "max_power", "median_crossing"}));
  tst->add_option("--surrogates", surrogates, "Phase-randomized surrogates")->capture_default_str();
  tst->add_option("--alpha", alpha, "Significance level")->capture_default_str();
  tst->add_option("--window-frac", tst_frac, "Window length as a fraction of n (default 0.1)");
  tst->add_option("--window-points", tst_points, "Window length in samples");
  tst->add_option("--stride", tst_stride, "Window step")->capture_default_str();
  add_smc(tst, tst_smc);
  tst->add_option("--seed", tst_smc.seed, "Root seed")->capture_default_str();
  tst->add_option("--prior-draws", prior_draws, "Prior trajectories (>= 1000)")->capture_default_str();
  tst->add_option("--posterior-draws", posterior_draws, "Posterior trajectories (>= 1000)")->capture_default_str();
  tst->add_option("--static-band", static_band, "log BF10 below which an edge is static")->capture_default_str();
  tst->add_option("-o,--out", tst_out, "Results JSON (stdout when absent)");

  // experiment
  auto* exp = app.add_subcommand("experiment", "Simulation study sweeps");
  exp->require_subcommand(1);
  std::string plan_path, preset = "desk", dir;
  int workers = 0, max_jobs = -1;
  bool long_csv = false, verbose = false;
  for (const char* mode : {"run", "resume", "report"}) {
    auto* sub = exp->add_subcommand(mode, std::string(mode) + " a sweep");
    sub->add_option("-d,--dir", dir, "Output directory")->required();
    sub->add_flag("--long", long_csv, "Also write the long-format plotting CSV");
    if (std::string(mode) != "report") {
      sub->add_option("--workers", workers, "Parallel jobs (default: DYNCONN_THREADS or 1)");
      sub->add_option("--max-jobs", max_jobs, "Stop after this many new jobs");
      sub->add_flag("-v,--verbose", verbose, "Log each finished job");
    }
    if (std::string(mode) == "run") {
      sub->add_option("--plan", plan_path, "ExperimentPlan JSON");
      sub->add_option("--preset", preset, "Built-in plan when --plan is absent")
          ->check(CLI::IsMember({"desk", "paper"}))
          ->capture_default_str();
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*sim) {
      spec.scenario = scenario_from_string(scenario);
      spec.phase = phase;
      spec.static_value = static_value;
      if (subjects < 1) throw ConfigError("subjects must be at least 1");
      const auto result = simulate(spec);
      if (subjects == 1) {
        write_csv(result.series, sim_out);
      } else {
        auto rng = rng::make_engine(spec.replicate_seed, {rng::tag(rng::Purpose::simulation), 1u});
        const auto ms = sample_subjects(result.truth, subjects, rng);
        for (std::size_t s = 0; s < ms.subjects.size(); ++s) write_csv(ms.subjects[s], indexed_path(sim_out, s));
      }
      if (!truth_out.empty()) write_trajectory_csv(result.truth, truth_out);
      return 0;
    }

    if (*est) {
      const auto data = load_inputs(est_in);
      if (method == "sliding") {
        const auto w = window_config(est_frac, est_points, est_stride, est_no_center);
        if (data.subjects.size() == 1) {
          write_trajectory_csv(estimate(data.subjects.front(), w), est_out);
        } else {
          std::vector<CovarianceTrajectory> each;
          for (const auto& s : data.subjects) each.push_back(estimate(s, w));
          write_trajectory_csv(group_average(each), est_out);
        }
        return 0;
      }
      const auto model = wishart_model(est_smc, data.d());
      const auto ens = data.subjects.size() == 1
                           ? smc_infer(model, data.subjects.front(), smc_config(est_smc), est_smc.seed)
                           : smc_infer(model, data, smc_config(est_smc), est_smc.seed);
      for (const auto& line : ens.log) std::cerr << "note: " << line << '\n';
      write_trajectory_csv(posterior_mean(ens), est_out);
      if (!ensemble_out.empty()) save_ensemble(ens, ensemble_out);
      return 0;
    }

    if (*tst) {
      const auto data = load_inputs(tst_in);
      std::vector<StatisticKind> stats;
      for (const auto& s : stat_names) stats.push_back(statistic_from_string(s));
      json out;
      out["framework"] = framework;
      auto& edges = out["edges"] = json::array();
      if (framework == "frequentist") {
        if (data.subjects.size() != 1) throw ConfigError("the frequentist test takes a single series");
        const SurrogateConfig cfg{surrogates, alpha, stats, {}};
        const auto res = frequentist_test(data.subjects.front(), window_config(tst_frac, tst_points, tst_stride, false),
                                          cfg, tst_smc.seed);
        for (const auto& e : res.edges) {
          edges.push_back({{"j", e.j},
                           {"k", e.k},
                           {"stat", to_string(e.statistic)},
                           {"observed", e.observed},
                           {"p", e.p_value},
                           {"dynamic", e.is_dynamic}});
        }
        out["surrogates"] = surrogates;
        out["alpha"] = alpha;
      } else {
        BayesConfig cfg;
        cfg.prior_draws = prior_draws;
        cfg.posterior_draws = posterior_draws;
        cfg.statistics = stats;
        cfg.bands.static_below = static_band;
        cfg.smc = smc_config(tst_smc);
        const auto model = wishart_model(tst_smc, data.d());
        const auto res = data.subjects.size() == 1 ? bayesian_test(model, data.subjects.front(), cfg, tst_smc.seed)
                                                   : bayesian_test(model, data, cfg, tst_smc.seed);
        for (const auto& e : res.edges) {
          edges.push_back({{"j", e.j},
                           {"k", e.k},
                           {"stat", to_string(e.statistic)},
                           {"log_bf10", e.log_bf10},
                           {"label", to_string(e.label)},
                           {"prior_density_at_0", e.prior_density_at_0},
                           {"posterior_density_at_0", e.posterior_density_at_0},
                           {"warnings", e.warnings}});
        }
        out["kernel"] = tst_smc.kernel;
        out["converged"] = res.converged;
        out["max_rhat"] = res.max_rhat;
        out["warnings"] = res.warnings;
      }
      emit(out, tst_out);
      return 0;
    }

    for (const char* mode : {"run", "resume", "report"}) {
      if (*exp->get_subcommand(mode)) {
        return run_experiment(mode, plan_path, preset, dir, workers, max_jobs, long_csv, verbose);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
