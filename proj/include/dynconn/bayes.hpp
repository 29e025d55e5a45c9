#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dynconn/statistics.hpp"
#include "dynconn/timeseries.hpp"
#include "dynconn/wishart.hpp"

namespace dynconn {

enum class SampleSource { prior, posterior };

/// Three-way outcome of a test for one edge.
enum class Label { dynamic, static_, inconclusive };

[[nodiscard]] std::string to_string(SampleSource s);
[[nodiscard]] std::string to_string(Label l);
[[nodiscard]] Label label_from_string(const std::string& s);

/// Draws of one statistic for one edge (j, k).
struct StatDistribution {
  std::vector<double> samples;
  SampleSource source = SampleSource::prior;
  StatisticKind statistic = StatisticKind::variance;
  Index j = 0;
  Index k = 1;

  /// Throws SizeError below 100 samples and DomainError on negative or non-finite values.
  void validate() const;
};

/// 0.9 min(sd, IQR / 1.34) N^(-1/5); falls back to sd when the IQR is 0.
[[nodiscard]] double silverman_bandwidth(std::span<const double> samples);

struct DensityAtZero {
  double density = 0.0;
  double bandwidth = 0.0;
  std::string warning;  // empty unless degenerate
};

inline constexpr double kDensityFloor = 1e-300;
inline constexpr double kDensityCap = 1e300;

/// Gaussian KDE at 0 reflected about 0, i.e. 2 / (N h) sum phi(x_i / h), floored
/// at kDensityFloor. All-zero samples return kDensityCap; identical positive
/// samples return the floor; both with a warning.
[[nodiscard]] DensityAtZero density_at_zero(const StatDistribution& dist);

/// Log Bayes factor cutoffs: dynamic above `dynamic_above`, static below `static_below`.
struct EvidenceBands {
  double dynamic_above = 3.0;
  double static_below = -3.0;

  /// Static band read as BF10 < 1/3.
  static EvidenceBands one_third();
  void validate() const;
};

[[nodiscard]] Label classify(double log_bf10, const EvidenceBands& bands = {});

struct EdgeBayes {
  Index j = 0;
  Index k = 1;
  StatisticKind statistic = StatisticKind::variance;
  double log_bf10 = 0.0;
  Label label = Label::inconclusive;
  double prior_density_at_0 = 0.0;
  double posterior_density_at_0 = 0.0;
  std::vector<std::string> warnings;
};

/// log BF10 = log p(eta = 0) - log p(eta = 0 | Y), classified by the bands.
[[nodiscard]] EdgeBayes savage_dickey(const StatDistribution& prior, const StatDistribution& posterior,
                                      const EvidenceBands& bands = {});

struct BayesConfig {
  int prior_draws = 1000;
  int posterior_draws = 1000;
  std::vector<StatisticKind> statistics{StatisticKind::variance};
  StatisticOptions options;
  EvidenceBands bands;
  SmcConfig smc;
  /// Keep the posterior trajectory draws in the result (needed for MSE).
  bool keep_draws = false;

  /// Both draw counts must be at least 1000.
  void validate() const;
};

struct BayesResult {
  std::vector<EdgeBayes> edges;
  bool converged = true;
  double max_rhat = 1.0;
  std::vector<std::string> warnings;
  std::vector<CovarianceTrajectory> posterior_draws;

  [[nodiscard]] const EdgeBayes& find(Index j, Index k, StatisticKind s) const;
};

/// Per-edge, per-statistic distributions over a set of trajectory draws,
/// ordered by statistic then edge (j < k, row-major).
[[nodiscard]] std::vector<StatDistribution> distributions_from(std::span<const CovarianceTrajectory> draws,
                                                               SampleSource source,
                                                               std::span<const StatisticKind> statistics,
                                                               const StatisticOptions& options = {});

/// Prior statistic distributions from `draws` independent prior trajectories on
/// the grid. Draw i uses the stream derived from (seed, prior, i).
[[nodiscard]] std::vector<StatDistribution> prior_distributions(const WishartModel& model,
                                                                std::span<const double> x, int draws,
                                                                std::uint64_t seed,
                                                                std::span<const StatisticKind> statistics,
                                                                const StatisticOptions& options = {});

/// Prior draws, SMC posterior, per-edge Savage-Dickey. Non-convergence is
/// flagged on the result rather than thrown.
[[nodiscard]] BayesResult bayesian_test(const WishartModel& model, const TimeSeries& data, const BayesConfig& cfg,
                                        std::uint64_t seed);
[[nodiscard]] BayesResult bayesian_test(const WishartModel& model, const MultiSubjectSeries& data,
                                        const BayesConfig& cfg, std::uint64_t seed);

/// As bayesian_test with prior distributions supplied (e.g. cached across replicates
/// sharing a grid and kernel).
[[nodiscard]] BayesResult bayesian_test_with_prior(const WishartModel& model, const TimeSeries& data,
                                                   const BayesConfig& cfg, std::uint64_t seed,
                                                   std::span<const StatDistribution> prior);

}  // namespace dynconn
