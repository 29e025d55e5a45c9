#pragma once

#include <span>
#include <string>
#include <vector>

#include "dynconn/timeseries.hpp"

namespace dynconn {

/// The three scalar summaries of one edge's connectivity series.
enum class StatisticKind { variance, max_power, median_crossing };

[[nodiscard]] std::string to_string(StatisticKind k);
[[nodiscard]] StatisticKind statistic_from_string(const std::string& s);
[[nodiscard]] std::vector<StatisticKind> all_statistics();

/// Weights of excursion lengths (gamma) and heights (beta).
struct MedianCrossingConfig {
  double gamma = 0.9;
  double beta = 1.0;
};

struct StatisticOptions {
  MedianCrossingConfig median_crossing;
  /// Keep the DC bin in max_power (no demeaning), for literal replication.
  bool include_dc = false;
};

/// Sample variance with the n - 1 denominator.
[[nodiscard]] double variance_stat(std::span<const double> edge);

/// Largest periodogram value |X_q|^2 of the unnormalized DFT over q != 0,
/// after demeaning. With include_dc the raw series is used and q = 0 counts.
[[nodiscard]] double max_power_stat(std::span<const double> edge, bool include_dc = false);

/// Median with the midpoint convention for even lengths.
[[nodiscard]] double median(std::span<const double> values);

/// Indices where the series crosses `level`: i >= 1 with a different side than
/// i - 1, or lying exactly on the level. The index is the first sample on the new side.
[[nodiscard]] std::vector<std::size_t> level_crossings(std::span<const double> edge, double level);

/// Weighted excursion statistic sum_q |I_q^gamma H_q^beta|.
///
/// Excursions are delimited by the series start and the median crossings; each
/// completed excursion [c_q, c_{q+1}) has length I_q (samples) and height H_q,
/// the largest |v_i - m| inside it. The trailing excursion that never returns
/// across the median is not counted. Returns 0 with fewer than two crossings.
[[nodiscard]] double median_crossing_stat(std::span<const double> edge,
                                          const MedianCrossingConfig& cfg = {});

[[nodiscard]] double compute_statistic(StatisticKind kind, std::span<const double> edge,
                                       const StatisticOptions& opts = {});

struct EdgeStatistics {
  Index j = 0;
  Index k = 0;
  double variance = 0.0;
  double max_power = 0.0;
  double median_crossing = 0.0;

  [[nodiscard]] double get(StatisticKind kind) const;
};

/// All three statistics for every off-diagonal edge j < k.
[[nodiscard]] std::vector<EdgeStatistics> stats_over_trajectory(const CovarianceTrajectory& t,
                                                                const StatisticOptions& opts = {});

}  // namespace dynconn
