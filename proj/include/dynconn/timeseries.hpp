#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dynconn/rng.hpp"

namespace dynconn {

using Index = Eigen::Index;

/// n x d observation matrix on a grid of input locations.
struct TimeSeries {
  std::vector<double> x;                   // strictly increasing, rescaled to [0, 1]
  Eigen::MatrixXd values;                  // row i = observation y_i
  std::vector<std::string> channel_names;  // one per column
  std::vector<double> raw_x;               // original locations before rescaling; may be empty

  [[nodiscard]] Index n() const { return values.rows(); }
  [[nodiscard]] Index d() const { return values.cols(); }

  /// Throws SizeError / ShapeError / DomainError when an invariant is broken.
  void validate() const;
};

/// Several subjects observed on the same grid; they share one covariance trajectory.
struct MultiSubjectSeries {
  std::vector<TimeSeries> subjects;

  [[nodiscard]] Index n() const { return subjects.empty() ? 0 : subjects.front().n(); }
  [[nodiscard]] Index d() const { return subjects.empty() ? 0 : subjects.front().d(); }
  [[nodiscard]] const std::vector<double>& x() const { return subjects.front().x; }
  void validate() const;
};

/// Sequence of n symmetric d x d matrices, stored contiguously slice by slice.
class CovarianceTrajectory {
public:
  CovarianceTrajectory() = default;
  CovarianceTrajectory(std::vector<double> x, Index d);

  [[nodiscard]] Index n() const { return static_cast<Index>(x_.size()); }
  [[nodiscard]] Index d() const { return d_; }
  [[nodiscard]] const std::vector<double>& x() const { return x_; }

  double& operator()(Index i, Index j, Index k) { return data_[offset(i) + j * d_ + k]; }
  double operator()(Index i, Index j, Index k) const { return data_[offset(i) + j * d_ + k]; }

  [[nodiscard]] Eigen::Map<Eigen::MatrixXd> slice(Index i) {
    return {data_.data() + offset(i), d_, d_};
  }
  [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> slice(Index i) const {
    return {data_.data() + offset(i), d_, d_};
  }

  /// Series of entry (j, k) over the grid.
  [[nodiscard]] std::vector<double> edge(Index j, Index k) const;

  [[nodiscard]] std::span<double> raw() { return data_; }
  [[nodiscard]] std::span<const double> raw() const { return data_; }

  /// Symmetry to 1e-10 and min eigenvalue above -min_eigenvalue_tol per slice.
  void validate(double min_eigenvalue_tol = 1e-8) const;

  /// Smallest eigenvalue over all slices (after symmetrization).
  [[nodiscard]] double min_eigenvalue() const;

  friend bool operator==(const CovarianceTrajectory&, const CovarianceTrajectory&) = default;

private:
  [[nodiscard]] std::size_t offset(Index i) const {
    return static_cast<std::size_t>(i * d_ * d_);
  }

  std::vector<double> x_;
  Index d_ = 0;
  std::vector<double> data_;
};

enum class Scenario { periodic, state_switching, static_connectivity };

[[nodiscard]] std::string to_string(Scenario s);
[[nodiscard]] Scenario scenario_from_string(const std::string& s);

/// Parameters of one simulated replicate. Optional fields left empty are drawn
/// from the rng and written back into the resolved spec returned by the generators.
struct SimSpec {
  Scenario scenario = Scenario::periodic;
  Index n = 300;
  double amplitude = 0.0;
  int frequency = 1;
  std::optional<double> phase;
  std::optional<double> static_value;
  std::pair<double, double> state_values{0.1, 0.8};
  std::vector<int> duration_pool{20, 30, 40, 50, 60};
  std::uint64_t replicate_seed = 0;
};

struct Simulation {
  CovarianceTrajectory truth;
  TimeSeries series;
  SimSpec resolved;
};

/// n points uniformly spaced on [0, 1].
[[nodiscard]] std::vector<double> unit_grid(Index n);

/// Correlation trajectory with unit diagonal and the given 2x2 off-diagonal series.
[[nodiscard]] CovarianceTrajectory correlation_trajectory(std::vector<double> x,
                                                          std::span<const double> off_diagonal);

/// Piecewise-constant off-diagonal: segments of the given durations alternate
/// between the two state values, starting with `first_high ? high : low`.
/// The final segment is clipped at n.
[[nodiscard]] std::vector<double> state_switching_series(Index n, std::span<const int> durations,
                                                         bool first_high,
                                                         std::pair<double, double> values);

/// y_i ~ MVN(0, Sigma(x_i)) for each grid point.
[[nodiscard]] TimeSeries sample_observations(const CovarianceTrajectory& truth, rng::Engine& rng);

/// s independent subjects sharing the trajectory.
[[nodiscard]] MultiSubjectSeries sample_subjects(const CovarianceTrajectory& truth, int subjects,
                                                 rng::Engine& rng);

Simulation generate_periodic(const SimSpec& spec, rng::Engine& rng);
Simulation generate_state_switching(const SimSpec& spec, rng::Engine& rng);
Simulation generate_static(const SimSpec& spec, rng::Engine& rng);

/// Dispatches on spec.scenario using a stream derived from spec.replicate_seed.
Simulation simulate(const SimSpec& spec);

/// Reads a rectangular numeric CSV. A header whose first column is "x" marks an
/// input-location column; otherwise a uniform [0, 1] grid is used. x is always
/// rescaled to [0, 1] and the original values kept in raw_x.
[[nodiscard]] TimeSeries load_csv(const std::filesystem::path& path, bool has_header);

void write_csv(const TimeSeries& ts, const std::filesystem::path& path);

/// Columns: x, then the upper triangle (row-major, diagonal included) as cov_j_k.
void write_trajectory_csv(const CovarianceTrajectory& t, const std::filesystem::path& path);
[[nodiscard]] CovarianceTrajectory load_trajectory_csv(const std::filesystem::path& path);

}  // namespace dynconn
