#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dynconn/bayes.hpp"
#include "dynconn/statistics.hpp"
#include "dynconn/timeseries.hpp"
#include "dynconn/wishart.hpp"

namespace dynconn {

inline constexpr int kPlanSchemaVersion = 1;
inline constexpr int kMetricSchemaVersion = 1;

enum class Framework { frequentist, bayesian };

[[nodiscard]] std::string to_string(Framework f);
[[nodiscard]] Framework framework_from_string(const std::string& s);

/// Simulation grid and estimator bank of one sweep. Periodic cells span
/// n x amplitudes x frequencies; static and state-switching cells span n only.
struct ExperimentPlan {
  std::string name = "desk";
  std::uint64_t seed = 1;
  std::vector<Scenario> scenarios{Scenario::periodic, Scenario::state_switching, Scenario::static_connectivity};
  std::vector<Index> sizes{150, 300, 600};
  std::vector<double> amplitudes{0.2, 0.4, 0.6, 0.8};
  std::vector<int> frequencies{1, 2, 3, 4, 5};
  int replicates = 10;
  std::vector<double> window_fractions{0.05, 0.10, 0.20};
  std::vector<std::string> kernels{"exponential", "periodic", "periodic_exponential", "rq1", "rq2"};
  std::vector<StatisticKind> statistics{StatisticKind::variance, StatisticKind::max_power,
                                        StatisticKind::median_crossing};
  std::vector<Framework> frameworks{Framework::frequentist, Framework::bayesian};

  int surrogates = 199;
  double alpha = 0.05;
  int prior_draws = 1000;
  int posterior_draws = 1000;
  EvidenceBands bands;
  SmcConfig smc;
  StatisticOptions options;

  /// Reduced replicates (10), particles (200) and surrogates (199).
  static ExperimentPlan desk();
  /// Published settings: 40 replicates, 1000 particles, 1000 surrogates.
  static ExperimentPlan paper();
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentPlan& p);
void from_json(const nlohmann::json& j, ExperimentPlan& p);

/// One grid cell: a fully specified simulation design without the replicate index.
struct Cell {
  Scenario scenario = Scenario::periodic;
  Index n = 300;
  double amplitude = 0.0;  // periodic only
  int frequency = 0;       // periodic only

  [[nodiscard]] std::string key() const;
  [[nodiscard]] bool truth_dynamic() const { return scenario != Scenario::static_connectivity; }
};

[[nodiscard]] std::vector<Cell> expand_cells(const ExperimentPlan& plan);

/// Replicate r of a cell. Every estimator sees the same simulated series.
[[nodiscard]] std::uint64_t replicate_seed(std::uint64_t root, const Cell& cell, int replicate);

struct MseResult {
  double per_sample = 0.0;
  double of_mean = 0.0;
};

/// Mean squared error over off-diagonal entries (j < k) and grid points,
/// averaged over draws (per_sample) and for the draw average (of_mean).
[[nodiscard]] MseResult mse(const CovarianceTrajectory& truth, std::span<const CovarianceTrajectory> draws);
[[nodiscard]] MseResult mse(const CovarianceTrajectory& truth, const CovarianceTrajectory& estimate);

struct Outcome {
  bool truth_dynamic = false;
  Label label = Label::inconclusive;
};

struct Classification {
  int tp = 0;
  int fn = 0;
  int fp = 0;
  int tn = 0;
  int inconclusive = 0;
  double accuracy = 0.0;
  std::optional<double> recall;               // no dynamic truths: undefined
  std::optional<double> false_positive_rate;  // no static truths: undefined
  double inconclusive_fraction = 0.0;

  friend bool operator==(const Classification&, const Classification&) = default;
};

/// Inconclusive labels count as not dynamic; they are also tallied separately.
[[nodiscard]] Classification classification_metrics(std::span<const Outcome> outcomes);

/// One archived result: one (cell, replicate, estimator) job. Frequentist jobs
/// use a window estimator; Bayesian jobs a kernel preset.
struct JobRecord {
  std::string job_id;
  Cell cell;
  int replicate = 0;
  Framework framework = Framework::frequentist;
  std::string estimator;
  bool ok = true;
  std::string error;
  double runtime_seconds = 0.0;
  MseResult mse;
  bool converged = true;
  double max_rhat = 1.0;
  struct StatOutcome {
    StatisticKind statistic = StatisticKind::variance;
    double value = 0.0;  // p-value or log BF10
    Label label = Label::inconclusive;
  };
  std::vector<StatOutcome> outcomes;  // one per statistic (d = 2: one edge)
};

void to_json(nlohmann::json& j, const JobRecord& r);
void from_json(const nlohmann::json& j, JobRecord& r);

struct MetricRow {
  std::string scenario;
  Index n = 0;
  double amplitude = 0.0;
  int frequency = 0;
  std::string framework;
  std::string estimator;
  std::string statistic;
  int replicates = 0;
  int failures = 0;
  int nonconverged = 0;
  double mse_per_sample = 0.0;
  double mse_posterior_mean = 0.0;
  Classification counts;
  double runtime_seconds = 0.0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

struct MetricTable {
  int schema_version = kMetricSchemaVersion;
  std::vector<MetricRow> rows;

  friend bool operator==(const MetricTable&, const MetricTable&) = default;
};

void to_json(nlohmann::json& j, const MetricTable& t);
void from_json(const nlohmann::json& j, MetricTable& t);

/// Rows sorted by key; the result does not depend on record order.
[[nodiscard]] MetricTable aggregate(std::span<const JobRecord> records);

struct RunSummary {
  int jobs_total = 0;
  int jobs_run = 0;
  int jobs_skipped = 0;
  int jobs_failed = 0;
  MetricTable table;
};

struct RunOptions {
  int workers = 1;       // 0: read DYNCONN_THREADS, defaulting to 1
  int max_jobs = -1;     // stop after this many new jobs; -1 runs everything
  bool verbose = false;
};

/// Runs every job of the plan not already completed in `dir`/results.jsonl,
/// appending one JSON line per job, then aggregates the archive.
RunSummary run_plan(const ExperimentPlan& plan, const std::filesystem::path& dir, const RunOptions& opts = {});

/// Latest record per job id, failed ones included; truncated lines are ignored.
[[nodiscard]] std::vector<JobRecord> load_records(const std::filesystem::path& archive);

void write_csv(const MetricTable& table, const std::filesystem::path& path);
void write_json(const MetricTable& table, const std::filesystem::path& path);
[[nodiscard]] MetricTable read_json(const std::filesystem::path& path);
/// One row per (metric, cell, estimator, statistic) for plotting.
void write_long_csv(const MetricTable& table, const std::filesystem::path& path);

/// Runs a single job; exceptions are captured into the record.
[[nodiscard]] JobRecord run_job(const ExperimentPlan& plan, const Cell& cell, int replicate, Framework framework,
                                const std::string& estimator, std::span<const StatDistribution> prior = {});

[[nodiscard]] std::string job_id(const Cell& cell, int replicate, Framework framework, const std::string& estimator);

}  // namespace dynconn
