#include "dynconn/sliding_window.hpp"

#include <algorithm>
#include <cmath>

#include "dynconn/error.hpp"

namespace dynconn {

namespace {

std::vector<double> output_grid(const std::vector<double>& x, std::span<const Index> starts, Index window,
                                Index stride) {
  if (stride == 1) return x;
  std::vector<double> out;
  out.reserve(starts.size());
  for (Index l : starts) {
    // midpoint of the window's centre sample(s)
    const Index a = l + (window - 1) / 2;
    const Index b = l + window / 2;
    out.push_back(0.5 * (x[static_cast<std::size_t>(a)] + x[static_cast<std::size_t>(b)]));
  }
  return out;
}

}  // namespace

Index WindowConfig::resolve(Index n) const {
  if (stride < 1) throw ConfigError("stride must be at least 1");
  Index window = 0;
  if (window_points) {
    window = *window_points;
  } else if (window_fraction) {
    if (!(*window_fraction > 0.0 && *window_fraction <= 1.0)) {
      throw ConfigError("window fraction must lie in (0, 1]");
    }
    window = static_cast<Index>(std::lround(*window_fraction * static_cast<double>(n)));
  } else {
    throw ConfigError("window size not configured");
  }
  if (window < 2) throw ConfigError("window must contain at least 2 points, got " + std::to_string(window));
  if (window > n) {
    throw ConfigError("window of " + std::to_string(window) + " points exceeds series length " + std::to_string(n));
  }
  return window;
}

std::vector<Index> window_starts(Index n, Index window, Index stride) {
  std::vector<Index> starts;
  if (stride == 1) {
    starts.resize(static_cast<std::size_t>(n));
    const Index half = (window - 1) / 2;
    for (Index i = 0; i < n; ++i) starts[static_cast<std::size_t>(i)] = std::clamp<Index>(i - half, 0, n - window);
    return starts;
  }
  const Index count = (n - window) / stride + 1;
  for (Index w = 0; w < count; ++w) starts.push_back(w * stride);
  return starts;
}

CovarianceTrajectory estimate(const TimeSeries& ts, const WindowConfig& cfg) {
  ts.validate();
  const Index n = ts.n();
  const Index d = ts.d();
  const Index window = cfg.resolve(n);
  const auto starts = window_starts(n, window, cfg.stride);
  CovarianceTrajectory out(output_grid(ts.x, starts, window, cfg.stride), d);
  const auto count = static_cast<Index>(starts.size());
  const double denom = static_cast<double>(window - 1);
  const Eigen::MatrixXd& y = ts.values;

#pragma omp parallel
  {
    std::vector<double> mean(static_cast<std::size_t>(d));
#pragma omp for schedule(static)
    for (Index o = 0; o < count; ++o) {
      const Index l = starts[static_cast<std::size_t>(o)];
      for (Index j = 0; j < d; ++j) {
        double s = 0.0;
        if (cfg.center) {
          for (Index r = l; r < l + window; ++r) s += y(r, j);
          s /= static_cast<double>(window);
        }
        mean[static_cast<std::size_t>(j)] = s;
      }
      for (Index j = 0; j < d; ++j) {
        for (Index k = j; k < d; ++k) {
          const double mj = mean[static_cast<std::size_t>(j)];
          const double mk = mean[static_cast<std::size_t>(k)];
          double acc = 0.0;
          for (Index r = l; r < l + window; ++r) acc += (y(r, j) - mj) * (y(r, k) - mk);
          out(o, j, k) = out(o, k, j) = acc / denom;
        }
      }
    }
  }
  return out;
}

CovarianceTrajectory group_average(std::span<const CovarianceTrajectory> estimates) {
  if (estimates.empty()) throw ShapeError("group average of zero trajectories");
  const auto& first = estimates.front();
  CovarianceTrajectory out(first.x(), first.d());
  for (const auto& e : estimates) {
    if (e.d() != first.d() || e.x() != first.x()) throw ShapeError("trajectories differ in grid or dimension");
    const auto src = e.raw();
    auto dst = out.raw();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  const double scale = 1.0 / static_cast<double>(estimates.size());
  for (double& v : out.raw()) v *= scale;
  return out;
}

namespace reference {

CovarianceTrajectory estimate_serial(const TimeSeries& ts, const WindowConfig& cfg) {
  ts.validate();
  const Index n = ts.n();
  const Index window = cfg.resolve(n);
  const auto starts = window_starts(n, window, cfg.stride);
  CovarianceTrajectory out(output_grid(ts.x, starts, window, cfg.stride), ts.d());
  for (std::size_t o = 0; o < starts.size(); ++o) {
    Eigen::MatrixXd s = ts.values.middleRows(starts[o], window);
    if (cfg.center) s.rowwise() -= s.colwise().mean();
    out.slice(static_cast<Index>(o)) = s.transpose() * s / static_cast<double>(window - 1);
  }
  return out;
}

}  // namespace reference

}  // namespace dynconn
