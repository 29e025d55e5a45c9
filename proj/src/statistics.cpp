#include "dynconn/statistics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dynconn/error.hpp"
#include "dynconn/fft.hpp"

namespace dynconn {

std::string to_string(StatisticKind k) {
  switch (k) {
    case StatisticKind::variance: return "variance";
    case StatisticKind::max_power: return "max_power";
    case StatisticKind::median_crossing: return "median_crossing";
  }
  return "unknown";
}

StatisticKind statistic_from_string(const std::string& s) {
  if (s == "variance" || s == "var") return StatisticKind::variance;
  if (s == "max_power" || s == "max-power" || s == "mp") return StatisticKind::max_power;
  if (s == "median_crossing" || s == "median-crossing" || s == "mc") return StatisticKind::median_crossing;
  throw ConfigError("unknown statistic '" + s + "'");
}

std::vector<StatisticKind> all_statistics() {
  return {StatisticKind::variance, StatisticKind::max_power, StatisticKind::median_crossing};
}

double variance_stat(std::span<const double> v) {
  if (v.size() < 2) throw SizeError("variance needs at least two values");
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

double max_power_stat(std::span<const double> v, bool include_dc) {
  if (v.size() < 2) throw SizeError("max power needs at least two values");
  std::vector<double> centered(v.begin(), v.end());
  if (!include_dc) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double& x : centered) x -= mean;
  }
  const auto power = fft::power_spectrum(centered);
  // The remaining bins mirror q = 1..n/2 for a real signal.
  const auto first = include_dc ? power.begin() : power.begin() + 1;
  return *std::max_element(first, power.end());
}

double median(std::span<const double> values) {
  if (values.empty()) throw SizeError("median of an empty series");
  std::vector<double> s(values.begin(), values.end());
  const std::size_t mid = s.size() / 2;
  std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(mid), s.end());
  const double upper = s[mid];
  if (s.size() % 2 == 1) return upper;
  const double lower = *std::max_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

std::vector<std::size_t> level_crossings(std::span<const double> v, double level) {
  auto side = [level](double x) { return (x > level) - (x < level); };
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i < v.size(); ++i) {
    const int s = side(v[i]);
    if (s == 0 || s != side(v[i - 1])) out.push_back(i);
  }
  return out;
}

double median_crossing_stat(std::span<const double> v, const MedianCrossingConfig& cfg) {
  if (v.size() < 3) throw SizeError("median crossing needs at least three values");
  const double m = median(v);
  double largest = 0.0;
  for (double x : v) largest = std::max(largest, std::abs(x - m));
  if (largest == 0.0) return 0.0;

  const auto crossings = level_crossings(v, m);
  if (crossings.size() < 2) return 0.0;

  double zeta = 0.0;
  std::size_t start = 0;
  for (std::size_t end : crossings) {
    double height = 0.0;
    for (std::size_t i = start; i < end; ++i) height = std::max(height, std::abs(v[i] - m));
    const auto length = static_cast<double>(end - start);
    zeta += std::abs(std::pow(length, cfg.gamma) * std::pow(height, cfg.beta));
    start = end;
  }
  return zeta;
}

double compute_statistic(StatisticKind kind, std::span<const double> edge, const StatisticOptions& opts) {
  switch (kind) {
    case StatisticKind::variance: return variance_stat(edge);
    case StatisticKind::max_power: return max_power_stat(edge, opts.include_dc);
    case StatisticKind::median_crossing: return median_crossing_stat(edge, opts.median_crossing);
  }
  return 0.0;
}

double EdgeStatistics::get(StatisticKind kind) const {
  switch (kind) {
    case StatisticKind::variance: return variance;
    case StatisticKind::max_power: return max_power;
    case StatisticKind::median_crossing: return median_crossing;
  }
  return 0.0;
}

std::vector<EdgeStatistics> stats_over_trajectory(const CovarianceTrajectory& t, const StatisticOptions& opts) {
  std::vector<EdgeStatistics> out;
  for (Index j = 0; j < t.d(); ++j) {
    for (Index k = j + 1; k < t.d(); ++k) {
      const auto e = t.edge(j, k);
      out.push_back({j, k, variance_stat(e), max_power_stat(e, opts.include_dc),
                     median_crossing_stat(e, opts.median_crossing)});
    }
  }
  return out;
}

}  // namespace dynconn
