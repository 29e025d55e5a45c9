#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dynconn/timeseries.hpp"

namespace dynconn {

/// Window size as a fraction of n (rounded) or as an explicit point count.
struct WindowConfig {
  std::optional<double> window_fraction;
  std::optional<Index> window_points;
  Index stride = 1;
  /// Subtract the per-window channel mean before the outer product. Off gives
  /// the literal S^T S / (lambda - 1).
  bool center = true;

  static WindowConfig fraction(double f, Index stride = 1) { return {f, std::nullopt, stride, true}; }
  static WindowConfig points(Index p, Index stride = 1) { return {std::nullopt, p, stride, true}; }

  /// Window length for a series of n points; throws ConfigError when it is
  /// below 2, above n, or the stride is not positive.
  [[nodiscard]] Index resolve(Index n) const;
};

/// Window start (0-based) for each output location. With stride 1 there is one
/// centered window per time point, clamped to stay inside the series; with a
/// larger stride windows start at 0, stride, 2*stride, ... ((n - lambda)/stride + 1 windows).
[[nodiscard]] std::vector<Index> window_starts(Index n, Index window, Index stride);

/// Windowed sample covariance. Parallel over output locations; each window is
/// summed in a fixed order so the result does not depend on the thread count.
[[nodiscard]] CovarianceTrajectory estimate(const TimeSeries& ts, const WindowConfig& cfg);

/// Pointwise mean of trajectories on a common grid.
[[nodiscard]] CovarianceTrajectory group_average(std::span<const CovarianceTrajectory> estimates);

namespace reference {

/// Serial estimator written directly with Eigen block expressions.
[[nodiscard]] CovarianceTrajectory estimate_serial(const TimeSeries& ts, const WindowConfig& cfg);

}  // namespace reference

}  // namespace dynconn
