#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dynconn/rng.hpp"
#include "dynconn/sliding_window.hpp"
#include "dynconn/statistics.hpp"
#include "dynconn/timeseries.hpp"

namespace dynconn {

struct SurrogateConfig {
  int num_surrogates = 199;
  double alpha = 0.05;
  std::vector<StatisticKind> statistics{StatisticKind::variance};
  StatisticOptions options;

  void validate() const;
};

/// Test outcome for one edge and one statistic.
struct EdgeTest {
  Index j = 0;
  Index k = 0;
  StatisticKind statistic = StatisticKind::variance;
  double observed = 0.0;
  std::vector<double> null;  // one value per surrogate, in surrogate order
  double p_value = 1.0;
  bool is_dynamic = false;
};

struct FrequentistResult {
  std::vector<EdgeTest> edges;
  CovarianceTrajectory observed_estimate;

  [[nodiscard]] const EdgeTest& find(Index j, Index k, StatisticKind s) const;
};

/// Random phases shared by all channels: one per frequency bin 1 <= q < n/2,
/// plus a random sign for the Nyquist bin when n is even.
struct PhaseDraw {
  std::vector<double> phases;  // phases[q - 1] for bin q
  double nyquist_sign = 1.0;
};

[[nodiscard]] PhaseDraw draw_phases(Index n, rng::Engine& rng);

/// Adds the drawn phases to every channel's spectrum and transforms back.
[[nodiscard]] TimeSeries apply_phases(const TimeSeries& ts, const PhaseDraw& draw);

/// Phase-randomized surrogate: amplitude spectra and the DC bin are preserved
/// exactly per channel, and the shared phases keep the static cross-covariance.
[[nodiscard]] TimeSeries phase_randomize(const TimeSeries& ts, rng::Engine& rng);

/// Add-one estimator (1 + #{null >= observed}) / (1 + B).
[[nodiscard]] double add_one_p_value(double observed, std::span<const double> null);

/// Sliding-window surrogate test. Surrogate b uses the stream derived from
/// (seed, surrogates, b), so the outcome is independent of the thread count.
[[nodiscard]] FrequentistResult frequentist_test(const TimeSeries& ts, const WindowConfig& window,
                                                 const SurrogateConfig& cfg, std::uint64_t seed);

/// One set of surrogates evaluated under several window configurations.
[[nodiscard]] std::vector<FrequentistResult> frequentist_test(const TimeSeries& ts,
                                                              std::span<const WindowConfig> windows,
                                                              const SurrogateConfig& cfg,
                                                              std::uint64_t seed);

namespace reference {

/// apply_phases computed with explicit O(n^2) DFT sums.
[[nodiscard]] TimeSeries apply_phases_dft(const TimeSeries& ts, const PhaseDraw& draw);

}  // namespace reference

}  // namespace dynconn
