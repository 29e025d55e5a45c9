#include "dynconn/wishart.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "dynconn/error.hpp"
#include "wishart_detail.hpp"

namespace dynconn {

void WishartModel::validate() const {
  if (d < 1) throw ConfigError("Wishart model needs d >= 1");
  if (degrees_of_freedom() < d) {
    throw ConfigError("degrees of freedom " + std::to_string(degrees_of_freedom()) + " must be at least d = " +
                      std::to_string(d));
  }
  jitter.validate();
  if (kernel.priors.size() != KernelSpec::param_names(kernel.family).size()) {
    throw ConfigError("kernel needs one prior per hyperparameter");
  }
}

Eigen::MatrixXd unpack_scale(std::span<const double> l_params, Index d) {
  if (static_cast<Index>(l_params.size()) != d * (d + 1) / 2) throw ShapeError("packed scale has the wrong length");
  Eigen::MatrixXd lower = Eigen::MatrixXd::Zero(d, d);
  std::size_t p = 0;
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c <= r; ++c) lower(r, c) = r == c ? std::exp(l_params[p++]) : l_params[p++];
  }
  return lower;
}

std::vector<double> pack_scale(const Eigen::MatrixXd& lower) {
  const Index d = lower.rows();
  if (lower.cols() != d) throw ShapeError("scale matrix must be square");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(d * (d + 1) / 2));
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c <= r; ++c) {
      if (r == c) {
        if (!(lower(r, r) > 0.0)) throw DomainError("scale matrix needs a positive diagonal");
        out.push_back(std::log(lower(r, r)));
      } else {
        out.push_back(lower(r, c));
      }
    }
  }
  return out;
}

double log_prior_theta(const KernelSpec& kernel, std::span<const double> log_theta) {
  if (log_theta.size() != kernel.priors.size()) throw ShapeError("hyperparameter count does not match the kernel");
  double lp = 0.0;
  for (std::size_t p = 0; p < log_theta.size(); ++p) lp += kernel.priors[p].log_density_of_log(log_theta[p]);
  return lp;
}

double log_prior_scale(std::span<const double> l_params, Index d) {
  if (static_cast<Index>(l_params.size()) != d * (d + 1) / 2) throw ShapeError("packed scale has the wrong length");
  // Off-diagonal N(0, 1); diagonal half-normal in L, u = log L carries the Jacobian e^u.
  constexpr double half_log_2pi = 0.5 * detail::kLog2Pi;
  constexpr double log_half_normal_norm = -0.22579135264472744;  // log(sqrt(2 / pi))
  double lp = 0.0;
  std::size_t p = 0;
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c <= r; ++c) {
      const double u = l_params[p++];
      if (r == c) {
        lp += log_half_normal_norm - 0.5 * std::exp(2.0 * u) + u;
      } else {
        lp += -half_log_2pi - 0.5 * u * u;
      }
    }
  }
  return lp;
}

namespace {

std::vector<double> natural_params(std::span<const double> log_theta) {
  std::vector<double> out(log_theta.size());
  std::transform(log_theta.begin(), log_theta.end(), out.begin(), [](double u) { return std::exp(u); });
  return out;
}

bool factor_kernel(const WishartModel& model, std::span<const double> x, std::span<const double> log_theta,
                   Eigen::MatrixXd& lower) {
  std::vector<double> scratch;
  const auto params = natural_params(log_theta);
  return kernel_cholesky_into(model.kernel.family, params, x, is_uniform_grid(x), lower, scratch, model.jitter) >= 0.0;
}

void check_state(const WishartModel& model, std::span<const double> x, const ParticleState& state) {
  const Index cols = model.degrees_of_freedom() * model.d;
  if (state.z.rows() != static_cast<Index>(x.size()) || state.z.cols() != cols) {
    throw ShapeError("latent matrix must be n x (v d) = " + std::to_string(x.size()) + " x " + std::to_string(cols));
  }
  if (state.log_theta.size() != model.kernel.priors.size()) {
    throw ShapeError("hyperparameter count does not match the kernel");
  }
}

}  // namespace

Eigen::MatrixXd latent_functions(const WishartModel& model, std::span<const double> x, const ParticleState& state) {
  check_state(model, x, state);
  Eigen::MatrixXd lower;
  if (!factor_kernel(model, x, state.log_theta, lower)) {
    throw NumericalError("kernel Cholesky failed after jitter escalation");
  }
  return lower.triangularView<Eigen::Lower>() * state.z;
}

CovarianceTrajectory assemble_trajectory(const Eigen::MatrixXd& f, const Eigen::MatrixXd& scale, std::vector<double> x,
                                         Index dof) {
  const Index d = scale.rows();
  const Index n = f.rows();
  if (static_cast<Index>(x.size()) != n || f.cols() != dof * d) throw ShapeError("latents do not match the grid");
  CovarianceTrajectory out(std::move(x), d);
  std::vector<double> g(static_cast<std::size_t>(d));
  for (Index i = 0; i < n; ++i) {
    // Slices are symmetric, so row-major output matches the column-major map.
    detail::slice_sigma(f.data(), n, i, scale, d, dof, out.slice(i).data(), g.data());
  }
  return out;
}

CovarianceTrajectory reconstruct(const WishartModel& model, std::span<const double> x, const ParticleState& state) {
  const Eigen::MatrixXd f = latent_functions(model, x, state);
  return assemble_trajectory(f, unpack_scale(state.l_params, model.d), {x.begin(), x.end()},
                             model.degrees_of_freedom());
}

namespace {

PriorDraw draw_with_scale(const WishartModel& model, std::span<const double> x, std::vector<double> l_params,
                          rng::Engine& rng) {
  std::normal_distribution<double> normal;
  PriorDraw out;
  out.state.l_params = std::move(l_params);
  Eigen::MatrixXd lower;
  constexpr int max_attempts = 100;
  bool ok = false;
  for (int attempt = 0; attempt < max_attempts && !ok; ++attempt) {
    out.state.log_theta.clear();
    for (const auto& prior : model.kernel.priors) out.state.log_theta.push_back(prior.mean + prior.sd * normal(rng));
    ok = factor_kernel(model, x, out.state.log_theta, lower);
  }
  if (!ok) throw NumericalError("no factorizable kernel among prior hyperparameter draws");
  const auto n = static_cast<Index>(x.size());
  out.state.z.resize(n, model.degrees_of_freedom() * model.d);
  for (Index c = 0; c < out.state.z.cols(); ++c) {
    for (Index i = 0; i < n; ++i) out.state.z(i, c) = normal(rng);
  }
  const Eigen::MatrixXd f = lower.triangularView<Eigen::Lower>() * out.state.z;
  out.trajectory = assemble_trajectory(f, unpack_scale(out.state.l_params, model.d), {x.begin(), x.end()},
                                       model.degrees_of_freedom());
  return out;
}

}  // namespace

PriorDraw sample_prior(const WishartModel& model, std::span<const double> x, rng::Engine& rng) {
  model.validate();
  std::normal_distribution<double> normal;
  std::vector<double> l_params;
  for (Index r = 0; r < model.d; ++r) {
    for (Index c = 0; c <= r; ++c) {
      const double u = normal(rng);
      l_params.push_back(r == c ? std::log(std::abs(u)) : u);
    }
  }
  return draw_with_scale(model, x, std::move(l_params), rng);
}

PriorDraw sample_prior_with_scale(const WishartModel& model, std::span<const double> x, const Eigen::MatrixXd& scale,
                                  rng::Engine& rng) {
  model.validate();
  if (scale.rows() != model.d || scale.cols() != model.d) throw ShapeError("scale matrix must be d x d");
  if (!scale.isLowerTriangular()) throw DomainError("scale matrix must be lower triangular");
  return draw_with_scale(model, x, pack_scale(scale), rng);
}

ScatterData ScatterData::from(const TimeSeries& ts) {
  MultiSubjectSeries ms;
  ms.subjects.push_back(ts);
  return from(ms);
}

ScatterData ScatterData::from(const MultiSubjectSeries& ms) {
  ms.validate();
  ScatterData out;
  out.x = ms.x();
  out.n = ms.n();
  out.d = ms.d();
  out.subjects = static_cast<int>(ms.subjects.size());
  const auto dd = static_cast<std::size_t>(out.d * out.d);
  out.scatter.assign(static_cast<std::size_t>(out.n) * dd, 0.0);
  for (const auto& subject : ms.subjects) {
    for (Index i = 0; i < out.n; ++i) {
      double* s = out.scatter.data() + static_cast<std::size_t>(i) * dd;
      for (Index a = 0; a < out.d; ++a) {
        for (Index b = 0; b < out.d; ++b) s[a * out.d + b] += subject.values(i, a) * subject.values(i, b);
      }
    }
  }
  return out;
}

double log_likelihood(const CovarianceTrajectory& sigma, const ScatterData& data) {
  if (sigma.n() != data.n || sigma.d() != data.d) throw ShapeError("trajectory and data differ in shape");
  const Index d = data.d;
  std::vector<double> work(static_cast<std::size_t>(3 * d * d));
  std::vector<double> row_major(static_cast<std::size_t>(d * d));
  double total = 0.0;
  for (Index i = 0; i < data.n; ++i) {
    const auto s = sigma.slice(i);
    for (Index a = 0; a < d; ++a) {
      for (Index b = 0; b < d; ++b) row_major[a * d + b] = 0.5 * (s(a, b) + s(b, a));
    }
    const double term = detail::slice_log_density(row_major.data(), data.scatter.data() + i * d * d, d,
                                                  data.subjects, work.data());
    if (std::isinf(term)) throw NumericalError("covariance slice " + std::to_string(i) + " is not positive definite");
    total += term;
  }
  return total;
}

double log_likelihood(const WishartModel& model, const ParticleState& state, const TimeSeries& data) {
  return log_likelihood(reconstruct(model, data.x, state), ScatterData::from(data));
}

double log_likelihood(const WishartModel& model, const ParticleState& state, const MultiSubjectSeries& data) {
  return log_likelihood(reconstruct(model, data.x(), state), ScatterData::from(data));
}

double rhat(std::span<const std::vector<double>> chains) {
  const std::size_t m = chains.size();
  if (m < 2) throw UsageError("R-hat needs at least two chains");
  const std::size_t len = chains.front().size();
  if (len < 2) throw UsageError("R-hat needs at least two draws per chain");
  for (const auto& c : chains) {
    if (c.size() != len) throw UsageError("R-hat needs chains of equal length");
  }
  std::vector<double> means(m);
  double within = 0.0;
  for (std::size_t c = 0; c < m; ++c) {
    const double mean = std::accumulate(chains[c].begin(), chains[c].end(), 0.0) / static_cast<double>(len);
    double ss = 0.0;
    for (double v : chains[c]) ss += (v - mean) * (v - mean);
    means[c] = mean;
    within += ss / static_cast<double>(len - 1);
  }
  within /= static_cast<double>(m);
  const double grand = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(m);
  double between = 0.0;
  for (double mu : means) between += (mu - grand) * (mu - grand);
  between *= static_cast<double>(len) / static_cast<double>(m - 1);
  if (within <= 0.0) return between <= 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  const double nl = static_cast<double>(len);
  return std::sqrt(((nl - 1.0) / nl * within + between / nl) / within);
}

std::vector<CovarianceTrajectory> posterior_trajectories(const PosteriorEnsemble& ens, int num_draws,
                                                         rng::Engine& rng) {
  if (num_draws < 1) throw ConfigError("number of posterior draws must be positive");
  if (ens.particles.empty()) throw UsageError("posterior ensemble is empty");
  std::discrete_distribution<std::size_t> pick(ens.weights.begin(), ens.weights.end());
  std::vector<std::size_t> idx(static_cast<std::size_t>(num_draws));
  for (auto& i : idx) i = pick(rng);

  std::vector<std::size_t> unique = idx;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::vector<CovarianceTrajectory> cache(unique.size());
  const auto count = static_cast<long>(unique.size());
#pragma omp parallel for schedule(dynamic)
  for (long u = 0; u < count; ++u) {
    cache[static_cast<std::size_t>(u)] = reconstruct(ens.model, ens.x, ens.particles[unique[static_cast<std::size_t>(u)]]);
  }
  std::vector<CovarianceTrajectory> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) {
    const auto pos = std::lower_bound(unique.begin(), unique.end(), i) - unique.begin();
    out.push_back(cache[static_cast<std::size_t>(pos)]);
  }
  return out;
}

CovarianceTrajectory posterior_mean(const PosteriorEnsemble& ens) {
  if (ens.particles.empty()) throw UsageError("posterior ensemble is empty");
  CovarianceTrajectory mean(ens.x, ens.model.d);
  auto acc = mean.raw();
  for (std::size_t p = 0; p < ens.particles.size(); ++p) {
    if (ens.weights[p] <= 0.0) continue;
    const auto t = reconstruct(ens.model, ens.x, ens.particles[p]);
    const auto src = t.raw();
    for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += ens.weights[p] * src[q];
  }
  return mean;
}

}  // namespace dynconn
