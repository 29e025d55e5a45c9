#include "dynconn/timeseries.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dynconn/error.hpp"

namespace dynconn {

namespace {

void check_grid(const std::vector<double>& x, Index n) {
  if (static_cast<Index>(x.size()) != n) {
    throw ShapeError("grid has " + std::to_string(x.size()) + " points but series has " +
                     std::to_string(n) + " rows");
  }
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (!(x[i] > x[i - 1])) {
      throw DomainError("input locations must be strictly increasing (index " +
                        std::to_string(i) + ")");
    }
  }
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\"");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\"");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw ParseError("non-numeric value '" + cell + "' at row " + std::to_string(row) +
                     ", column " + std::to_string(col));
  }
  return v;
}

std::vector<double> rescale_unit(const std::vector<double>& raw) {
  std::vector<double> x(raw.size());
  const double lo = raw.front();
  const double span = raw.back() - raw.front();
  for (std::size_t i = 0; i < raw.size(); ++i) x[i] = (raw[i] - lo) / span;
  x.back() = 1.0;
  return x;
}

}  // namespace

void TimeSeries::validate() const {
  if (n() < 2) throw SizeError("time series needs at least 2 observations, got " + std::to_string(n()));
  if (d() < 1) throw SizeError("time series needs at least one channel");
  check_grid(x, n());
  if (!channel_names.empty() && static_cast<Index>(channel_names.size()) != d()) {
    throw ShapeError("channel name count does not match channel count");
  }
  if (!values.allFinite()) throw DomainError("time series contains non-finite values");
}

void MultiSubjectSeries::validate() const {
  if (subjects.empty()) throw SizeError("multi-subject series needs at least one subject");
  for (const auto& s : subjects) {
    s.validate();
    if (s.n() != n() || s.d() != d() || s.x != subjects.front().x) {
      throw ShapeError("all subjects must share the grid and channel count");
    }
  }
}

CovarianceTrajectory::CovarianceTrajectory(std::vector<double> x, Index d)
    : x_(std::move(x)), d_(d), data_(x_.size() * static_cast<std::size_t>(d * d), 0.0) {}

std::vector<double> CovarianceTrajectory::edge(Index j, Index k) const {
  std::vector<double> out(static_cast<std::size_t>(n()));
  for (Index i = 0; i < n(); ++i) out[static_cast<std::size_t>(i)] = (*this)(i, j, k);
  return out;
}

double CovarianceTrajectory::min_eigenvalue() const {
  double lowest = std::numeric_limits<double>::infinity();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  for (Index i = 0; i < n(); ++i) {
    const Eigen::MatrixXd s = 0.5 * (slice(i) + slice(i).transpose());
    solver.compute(s, Eigen::EigenvaluesOnly);
    lowest = std::min(lowest, solver.eigenvalues().minCoeff());
  }
  return lowest;
}

void CovarianceTrajectory::validate(double min_eigenvalue_tol) const {
  for (Index i = 0; i < n(); ++i) {
    const auto s = slice(i);
    if ((s - s.transpose()).cwiseAbs().maxCoeff() >= 1e-10) {
      throw NumericalError("covariance slice " + std::to_string(i) + " is not symmetric");
    }
  }
  if (n() > 0 && min_eigenvalue() <= -min_eigenvalue_tol) {
    throw NumericalError("covariance trajectory has a slice that is not positive semi-definite");
  }
}

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::periodic: return "periodic";
    case Scenario::state_switching: return "state_switching";
    case Scenario::static_connectivity: return "static";
  }
  return "unknown";
}

Scenario scenario_from_string(const std::string& s) {
  if (s == "periodic") return Scenario::periodic;
  if (s == "state_switching") return Scenario::state_switching;
  if (s == "static") return Scenario::static_connectivity;
  throw ConfigError("unknown scenario '" + s + "'");
}

std::vector<double> unit_grid(Index n) {
  if (n < 1) throw SizeError("grid needs at least one point");
  std::vector<double> x(static_cast<std::size_t>(n), 0.0);
  if (n == 1) return x;
  for (Index i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = static_cast<double>(i) / static_cast<double>(n - 1);
  return x;
}

CovarianceTrajectory correlation_trajectory(std::vector<double> x,
                                            std::span<const double> off_diagonal) {
  if (x.size() != off_diagonal.size()) throw ShapeError("grid and off-diagonal lengths differ");
  CovarianceTrajectory t(std::move(x), 2);
  for (Index i = 0; i < t.n(); ++i) {
    t(i, 0, 0) = 1.0;
    t(i, 1, 1) = 1.0;
    t(i, 0, 1) = t(i, 1, 0) = off_diagonal[static_cast<std::size_t>(i)];
  }
  return t;
}

std::vector<double> state_switching_series(Index n, std::span<const int> durations, bool first_high,
                                           std::pair<double, double> values) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n));
  bool high = first_high;
  for (int len : durations) {
    if (len <= 0) throw ConfigError("state durations must be positive");
    for (int t = 0; t < len && static_cast<Index>(out.size()) < n; ++t) {
      out.push_back(high ? values.second : values.first);
    }
    if (static_cast<Index>(out.size()) == n) return out;
    high = !high;
  }
  throw ConfigError("durations do not cover the series length");
}

TimeSeries sample_observations(const CovarianceTrajectory& truth, rng::Engine& rng) {
  const Index n = truth.n();
  const Index d = truth.d();
  TimeSeries ts;
  ts.x = truth.x();
  ts.values.resize(n, d);
  for (Index j = 0; j < d; ++j) ts.channel_names.push_back("ch" + std::to_string(j));
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(d);
  for (Index i = 0; i < n; ++i) {
    Eigen::LLT<Eigen::MatrixXd> llt(truth.slice(i));
    if (llt.info() != Eigen::Success) {
      throw NumericalError("covariance slice " + std::to_string(i) + " is not positive definite");
    }
    for (Index j = 0; j < d; ++j) z(j) = normal(rng);
    ts.values.row(i) = (llt.matrixL() * z).transpose();
  }
  return ts;
}

MultiSubjectSeries sample_subjects(const CovarianceTrajectory& truth, int subjects, rng::Engine& rng) {
  if (subjects < 1) throw ConfigError("need at least one subject");
  MultiSubjectSeries out;
  out.subjects.reserve(static_cast<std::size_t>(subjects));
  for (int m = 0; m < subjects; ++m) out.subjects.push_back(sample_observations(truth, rng));
  return out;
}

Simulation generate_periodic(const SimSpec& spec, rng::Engine& rng) {
  if (spec.scenario != Scenario::periodic) throw ConfigError("spec is not a periodic scenario");
  if (!(spec.amplitude >= 0.0 && spec.amplitude < 1.0)) {
    throw DomainError("amplitude must lie in [0, 1) to keep correlation matrices positive definite");
  }
  if (spec.frequency < 1) throw ConfigError("frequency must be a positive integer");
  if (spec.n < 2) throw SizeError("simulation needs n >= 2");

  Simulation sim;
  sim.resolved = spec;
  if (!sim.resolved.phase) {
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    sim.resolved.phase = u(rng);
  }
  const double phase = *sim.resolved.phase;
  auto x = unit_grid(spec.n);
  std::vector<double> sigma(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sigma[i] = spec.amplitude *
               std::sin(static_cast<double>(spec.frequency) * 2.0 * std::numbers::pi * x[i] + phase);
  }
  sim.truth = correlation_trajectory(std::move(x), sigma);
  sim.series = sample_observations(sim.truth, rng);
  return sim;
}

Simulation generate_state_switching(const SimSpec& spec, rng::Engine& rng) {
  if (spec.scenario != Scenario::state_switching) {
    throw ConfigError("spec is not a state-switching scenario");
  }
  if (spec.duration_pool.empty()) throw ConfigError("duration pool is empty");
  if (spec.n < 2) throw SizeError("simulation needs n >= 2");
  for (double v : {spec.state_values.first, spec.state_values.second}) {
    if (!(std::abs(v) < 1.0)) throw DomainError("state values must lie in (-1, 1)");
  }

  Simulation sim;
  sim.resolved = spec;
  std::bernoulli_distribution coin(0.5);
  const bool first_high = coin(rng);
  std::uniform_int_distribution<std::size_t> pick(0, spec.duration_pool.size() - 1);
  std::vector<int> durations;
  Index covered = 0;
  while (covered < spec.n) {
    durations.push_back(spec.duration_pool[pick(rng)]);
    covered += durations.back();
  }
  auto sigma = state_switching_series(spec.n, durations, first_high, spec.state_values);
  sim.truth = correlation_trajectory(unit_grid(spec.n), sigma);
  sim.series = sample_observations(sim.truth, rng);
  return sim;
}

Simulation generate_static(const SimSpec& spec, rng::Engine& rng) {
  if (spec.scenario != Scenario::static_connectivity) throw ConfigError("spec is not a static scenario");
  if (spec.n < 2) throw SizeError("simulation needs n >= 2");
  Simulation sim;
  sim.resolved = spec;
  if (!sim.resolved.static_value) {
    std::uniform_real_distribution<double> u(-0.4, 0.4);
    sim.resolved.static_value = u(rng);
  }
  if (!(std::abs(*sim.resolved.static_value) < 1.0)) {
    throw DomainError("static value must lie in (-1, 1)");
  }
  std::vector<double> sigma(static_cast<std::size_t>(spec.n), *sim.resolved.static_value);
  sim.truth = correlation_trajectory(unit_grid(spec.n), sigma);
  sim.series = sample_observations(sim.truth, rng);
  return sim;
}

Simulation simulate(const SimSpec& spec) {
  auto rng = rng::make_engine(spec.replicate_seed, {rng::tag(rng::Purpose::simulation)});
  switch (spec.scenario) {
    case Scenario::periodic: return generate_periodic(spec, rng);
    case Scenario::state_switching: return generate_state_switching(spec, rng);
    case Scenario::static_connectivity: return generate_static(spec, rng);
  }
  throw ConfigError("unknown scenario");
}

TimeSeries load_csv(const std::filesystem::path& path, bool has_header) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());

  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_row(line);
    if (has_header && header.empty()) {
      header = std::move(cells);
      width = header.size();
      continue;
    }
    if (width == 0) width = cells.size();
    if (cells.size() != width) {
      throw ParseError("ragged row " + std::to_string(line_no) + ": expected " +
                       std::to_string(width) + " columns, found " + std::to_string(cells.size()));
    }
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) row[c] = parse_cell(cells[c], line_no, c + 1);
    rows.push_back(std::move(row));
  }
  if (rows.size() < 2) {
    throw SizeError("time series needs at least 2 rows, found " + std::to_string(rows.size()));
  }

  std::string first = header.empty() ? std::string{} : header.front();
  std::transform(first.begin(), first.end(), first.begin(), [](unsigned char c) { return std::tolower(c); });
  const bool x_column = first == "x";
  const std::size_t offset = x_column ? 1 : 0;
  if (width <= offset) throw ParseError("file has no data channels");

  TimeSeries ts;
  const auto n = static_cast<Index>(rows.size());
  const auto d = static_cast<Index>(width - offset);
  ts.values.resize(n, d);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) ts.values(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j) + offset];
  }
  if (x_column) {
    ts.raw_x.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) ts.raw_x[i] = rows[i][0];
    check_grid(ts.raw_x, n);
    ts.x = rescale_unit(ts.raw_x);
  } else {
    ts.x = unit_grid(n);
  }
  for (Index j = 0; j < d; ++j) {
    if (!header.empty() && !header[static_cast<std::size_t>(j) + offset].empty()) {
      ts.channel_names.push_back(header[static_cast<std::size_t>(j) + offset]);
    } else {
      ts.channel_names.push_back("ch" + std::to_string(j));
    }
  }
  ts.validate();
  return ts;
}

void write_csv(const TimeSeries& ts, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "x";
  for (Index j = 0; j < ts.d(); ++j) {
    out << ',' << (static_cast<Index>(ts.channel_names.size()) > j ? ts.channel_names[static_cast<std::size_t>(j)] : "ch" + std::to_string(j));
  }
  out << '\n';
  const auto& xs = ts.raw_x.empty() ? ts.x : ts.raw_x;
  for (Index i = 0; i < ts.n(); ++i) {
    out << xs[static_cast<std::size_t>(i)];
    for (Index j = 0; j < ts.d(); ++j) out << ',' << ts.values(i, j);
    out << '\n';
  }
}

void write_trajectory_csv(const CovarianceTrajectory& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "x";
  for (Index j = 0; j < t.d(); ++j) {
    for (Index k = j; k < t.d(); ++k) out << ",cov_" << j << '_' << k;
  }
  out << '\n';
  for (Index i = 0; i < t.n(); ++i) {
    out << t.x()[static_cast<std::size_t>(i)];
    for (Index j = 0; j < t.d(); ++j) {
      for (Index k = j; k < t.d(); ++k) out << ',' << t(i, j, k);
    }
    out << '\n';
  }
}

CovarianceTrajectory load_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty trajectory file");
  const auto header = split_row(line);
  const auto entries = header.size() - 1;
  Index d = 0;
  while (static_cast<std::size_t>(d * (d + 1) / 2) < entries) ++d;
  if (header.empty() || header.front() != "x" || static_cast<std::size_t>(d * (d + 1) / 2) != entries) {
    throw ParseError("trajectory header must be x followed by upper-triangle cov_j_k columns");
  }
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_row(line);
    if (cells.size() != header.size()) throw ParseError("ragged row " + std::to_string(line_no));
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) row[c] = parse_cell(cells[c], line_no, c + 1);
    rows.push_back(std::move(row));
  }
  std::vector<double> x;
  for (const auto& r : rows) x.push_back(r[0]);
  CovarianceTrajectory t(std::move(x), d);
  for (Index i = 0; i < t.n(); ++i) {
    std::size_t c = 1;
    for (Index j = 0; j < d; ++j) {
      for (Index k = j; k < d; ++k) t(i, j, k) = t(i, k, j) = rows[static_cast<std::size_t>(i)][c++];
    }
  }
  return t;
}

}  // namespace dynconn
