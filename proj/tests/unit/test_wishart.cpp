#include "doctest.h"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "dynconn/error.hpp"
#include "dynconn/statistics.hpp"
#include "dynconn/wishart.hpp"

using namespace dynconn;

namespace {

TimeSeries noise_series(Index n, Index d, std::uint64_t seed) {
  auto rng = rng::make_engine(seed, {});
  std::normal_distribution<double> normal;
  TimeSeries ts;
  ts.x = unit_grid(n);
  ts.values.resize(n, d);
  for (auto& v : ts.values.reshaped()) v = normal(rng);
  for (Index j = 0; j < d; ++j) ts.channel_names.push_back("c" + std::to_string(j));
  return ts;
}

CovarianceTrajectory random_trajectory(Index n, Index d, rng::Engine& rng) {
  std::normal_distribution<double> normal;
  CovarianceTrajectory t(unit_grid(n), d);
  for (Index i = 0; i < n; ++i) {
    Eigen::MatrixXd a(d, d + 2);
    for (auto& v : a.reshaped()) v = normal(rng);
    t.slice(i) = a * a.transpose() / static_cast<double>(d + 2);
  }
  return t;
}

double brute_2x2(const CovarianceTrajectory& sigma, const TimeSeries& ts) {
  double total = 0.0;
  for (Index i = 0; i < ts.n(); ++i) {
    const double a = sigma(i, 0, 0), b = sigma(i, 0, 1), c = sigma(i, 1, 1);
    const double det = a * c - b * b;
    const double y0 = ts.values(i, 0), y1 = ts.values(i, 1);
    const double quad = (c * y0 * y0 - 2.0 * b * y0 * y1 + a * y1 * y1) / det;
    total += -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(det) - 0.5 * quad;
  }
  return total;
}

// Asymptotic two-sample Kolmogorov-Smirnov p-value.
double ks_p_value(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double dmax = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= v) ++i;
    while (j < b.size() && b[j] <= v) ++j;
    dmax = std::max(dmax, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = std::sqrt(na * nb / (na + nb));
  const double lambda = (ne + 0.12 + 0.11 / ne) * dmax;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) p += 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

SmcConfig small_config() {
  SmcConfig cfg;
  cfg.particles = 60;
  cfg.chains = 2;
  cfg.max_extra_rounds = 3;
  return cfg;
}

}  // namespace

TEST_CASE("scale packing") {
  Eigen::Matrix3d l;
  l << 1.5, 0, 0, -0.3, 0.2, 0, 2.0, 0.7, 3.0;
  const auto packed = pack_scale(l);
  REQUIRE(packed.size() == 6);
  CHECK(packed[0] == doctest::Approx(std::log(1.5)));
  CHECK(packed[1] == -0.3);
  CHECK(unpack_scale(packed, 3).isApprox(l, 1e-14));
  l(1, 1) = -0.2;
  CHECK_THROWS_AS((void)pack_scale(l), DomainError);
}

TEST_CASE("prior density of the scale in unconstrained coordinates") {
  // Off-diagonal N(0,1); diagonal half-normal pushed through log: log(2 phi(e^u)) + u.
  const std::vector<double> packed{0.3, -1.2, -0.4};
  const double half = std::log(2.0) - 0.5 * std::log(2.0 * std::numbers::pi);
  double expected = 0.0;
  for (double u : {0.3, -0.4}) expected += half - 0.5 * std::exp(2.0 * u) + u;
  expected += -0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * 1.44;
  CHECK(log_prior_scale(packed, 2) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("prior draws with a fixed scale have mean v L L^T") {
  WishartModel model;
  const auto x = unit_grid(6);
  Eigen::Matrix2d l;
  l << 1.0, 0.0, 0.9, 0.5;
  auto rng = rng::make_engine(3, {});
  Eigen::Matrix2d mean = Eigen::Matrix2d::Zero();
  constexpr int draws = 20000;
  for (int m = 0; m < draws; ++m) mean += sample_prior_with_scale(model, x, l, rng).trajectory.slice(2) / draws;
  const Eigen::Matrix2d expected = 3.0 * l * l.transpose();
  for (Index a = 0; a < 2; ++a) {
    for (Index b = 0; b < 2; ++b) CHECK(std::abs(mean(a, b) / expected(a, b) - 1.0) < 0.02);
  }
}

TEST_CASE("latent functions have unit marginal variance") {
  WishartModel model;
  model.kernel = kernel_preset("exponential");
  const auto x = unit_grid(8);
  auto rng = rng::make_engine(4, {});
  Eigen::VectorXd second = Eigen::VectorXd::Zero(8);
  constexpr int draws = 5000;
  for (int m = 0; m < draws; ++m) {
    const auto draw = sample_prior(model, x, rng);
    const auto f = latent_functions(model, x, draw.state);
    second += f.col(0).cwiseAbs2() / draws;
  }
  for (Index i = 0; i < 8; ++i) CHECK(std::abs(second(i) - 1.0) < 0.06);
}

TEST_CASE("one channel, one degree of freedom, unit scale is a squared GP") {
  WishartModel model;
  model.d = 1;
  model.dof = 1;
  const auto x = unit_grid(30);
  auto rng = rng::make_engine(5, {});
  const auto draw = sample_prior_with_scale(model, x, Eigen::MatrixXd::Ones(1, 1), rng);
  const auto f = latent_functions(model, x, draw.state);
  for (Index i = 0; i < 30; ++i) {
    CHECK(draw.trajectory(i, 0, 0) == doctest::Approx(f(i, 0) * f(i, 0)).epsilon(1e-14));
    CHECK(draw.trajectory(i, 0, 0) >= 0.0);
  }
}

TEST_CASE("prior slices are positive definite") {
  WishartModel model;
  model.d = 3;
  const auto x = unit_grid(25);
  for (const auto& name : kernel_preset_names()) {
    model.kernel = kernel_preset(name);
    for (std::uint64_t m = 0; m < 200; ++m) {
      auto rng = rng::make_engine(6, {m});
      CHECK(sample_prior(model, x, rng).trajectory.min_eigenvalue() > 0.0);
    }
  }
}

TEST_CASE("model validation") {
  WishartModel model;
  model.dof = 1;
  CHECK_THROWS_AS(model.validate(), ConfigError);
  model.dof = 0;
  CHECK(model.degrees_of_freedom() == 3);
}

TEST_CASE("likelihood") {
  auto rng = rng::make_engine(7, {});

  SUBCASE("unit variance in one channel") {
    const auto ts = noise_series(9, 1, 1);
    CovarianceTrajectory ones(ts.x, 1);
    for (Index i = 0; i < 9; ++i) ones(i, 0, 0) = 1.0;
    const double expected = -4.5 * std::log(2.0 * std::numbers::pi) - 0.5 * ts.values.squaredNorm();
    CHECK(log_likelihood(ones, ScatterData::from(ts)) == doctest::Approx(expected).epsilon(1e-13));
  }

  SUBCASE("brute-force 2x2 oracle") {
    for (std::uint64_t c = 0; c < 50; ++c) {
      const auto sigma = random_trajectory(5, 2, rng);
      const auto ts = noise_series(5, 2, 100 + c);
      const double oracle = brute_2x2(sigma, ts);
      CHECK(std::abs(log_likelihood(sigma, ScatterData::from(ts)) - oracle) <= 1e-9 * std::abs(oracle));
    }
  }

  SUBCASE("general dimension against an Eigen factorization") {
    const auto sigma = random_trajectory(12, 4, rng);
    const auto ts = noise_series(12, 4, 2);
    double oracle = 0.0;
    for (Index i = 0; i < 12; ++i) {
      Eigen::LLT<Eigen::MatrixXd> llt(sigma.slice(i));
      const Eigen::VectorXd y = ts.values.row(i).transpose();
      const Eigen::VectorXd w = llt.matrixL().solve(y);
      oracle += -2.0 * std::log(2.0 * std::numbers::pi) -
                llt.matrixLLT().diagonal().array().log().sum() - 0.5 * w.squaredNorm();
    }
    CHECK(log_likelihood(sigma, ScatterData::from(ts)) == doctest::Approx(oracle).epsilon(1e-12));
  }

  SUBCASE("subjects add up") {
    WishartModel model;
    const auto x = unit_grid(40);
    const auto draw = sample_prior(model, x, rng);
    MultiSubjectSeries ms;
    double sum = 0.0;
    for (std::uint64_t m = 0; m < 4; ++m) {
      ms.subjects.push_back(noise_series(40, 2, 20 + m));
      sum += log_likelihood(model, draw.state, ms.subjects.back());
    }
    CHECK(std::abs(log_likelihood(model, draw.state, ms) - sum) < 1e-10 * std::abs(sum));
    MultiSubjectSeries one{{ms.subjects[0]}};
    CHECK(log_likelihood(model, draw.state, one) == log_likelihood(model, draw.state, ms.subjects[0]));
  }

  SUBCASE("indefinite slice is reported") {
    auto sigma = random_trajectory(6, 2, rng);
    sigma(3, 0, 1) = sigma(3, 1, 0) = 10.0;
    const auto ts = noise_series(6, 2, 3);
    CHECK_THROWS_WITH_AS((void)log_likelihood(sigma, ScatterData::from(ts)),
                         doctest::Contains("slice 3"), NumericalError);
  }
}

TEST_CASE("rhat") {
  // Identical chains have B = 0, leaving sqrt((n - 1) / n), which tends to 1.
  std::vector<std::vector<double>> same(3, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  CHECK(rhat(same) == doctest::Approx(std::sqrt(0.75)).epsilon(1e-12));
  std::vector<double> ramp(1000);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = std::sin(static_cast<double>(i));
  std::vector<std::vector<double>> long_same(3, ramp);
  CHECK(std::abs(rhat(long_same) - 1.0) < 1e-3);

  std::vector<std::vector<double>> apart{{0.0, 1.0, 0.0, 1.0}, {100.0, 101.0, 100.0, 101.0}};
  CHECK(rhat(apart) > 10.0);

  auto rng = rng::make_engine(8, {});
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> iid(3, std::vector<double>(1000));
  for (auto& c : iid) {
    for (auto& v : c) v = normal(rng);
  }
  CHECK(rhat(iid) < 1.05);

  // W = 0.5, B = 2 var{2, 3} = 1, n = 2: sqrt((0.25 + 0.5) / 0.5).
  std::vector<std::vector<double>> tiny{{1.5, 2.5}, {2.5, 3.5}};
  CHECK(rhat(tiny) == doctest::Approx(std::sqrt(1.5)).epsilon(1e-12));

  std::vector<std::vector<double>> flat{{1.0, 1.0}, {2.0, 2.0}};
  CHECK(std::isinf(rhat(flat)));
  std::vector<std::vector<double>> constant{{1.0, 1.0}, {1.0, 1.0}};
  CHECK(rhat(constant) == 1.0);

  std::vector<std::vector<double>> single{{1.0, 2.0}};
  CHECK_THROWS_AS((void)rhat(single), UsageError);
  std::vector<std::vector<double>> ragged{{1.0, 2.0}, {1.0}};
  CHECK_THROWS_AS((void)rhat(ragged), UsageError);
}

TEST_CASE("smc recovers a conjugate Gaussian posterior") {
  // Prior N(0, 1) on the off-diagonal entry of L; unit-information likelihood at y = 1.
  WishartModel model;
  const auto ts = noise_series(10, 2, 9);
  SmcConfig cfg;
  cfg.particles = 400;
  cfg.chains = 3;
  cfg.pseudo_log_likelihood = [](const ParticleState& s) { return -0.5 * (s.l_params[1] - 1.0) * (s.l_params[1] - 1.0); };
  const auto ens = smc_infer(model, ts, cfg, 10);
  REQUIRE(ens.size() == 1200);
  double total = 0.0, mean = 0.0, second = 0.0;
  for (std::size_t p = 0; p < ens.size(); ++p) {
    total += ens.weights[p];
    mean += ens.weights[p] * ens.particles[p].l_params[1];
    second += ens.weights[p] * ens.particles[p].l_params[1] * ens.particles[p].l_params[1];
  }
  CHECK(std::abs(total - 1.0) < 1e-12);
  const double var = second - mean * mean;
  const double n = static_cast<double>(ens.size());
  CHECK(std::abs(mean - 0.5) < 3.0 * std::sqrt(0.5 / n));
  CHECK(std::abs(var - 0.5) < 3.0 * 0.5 * std::sqrt(2.0 / (n - 1.0)));
}

TEST_CASE("smc at temperature zero reproduces the prior") {
  WishartModel model;
  const auto ts = noise_series(30, 2, 11);
  SmcConfig cfg;
  cfg.particles = 300;
  cfg.chains = 2;
  cfg.target_temperature = 0.0;
  const auto ens = smc_infer(model, ts, cfg, 12);
  rng::Engine rng(13);
  const auto draws = posterior_trajectories(ens, 600, rng);
  std::vector<double> posterior, prior;
  for (const auto& t : draws) posterior.push_back(variance_stat(t.edge(0, 1)));
  for (std::uint64_t m = 0; m < 600; ++m) {
    auto r = rng::make_engine(14, {m});
    prior.push_back(variance_stat(sample_prior(model, ts.x, r).trajectory.edge(0, 1)));
  }
  CHECK(ks_p_value(posterior, prior) > 0.01);
}

TEST_CASE("smc bookkeeping") {
  WishartModel model;
  SimSpec spec;
  spec.n = 40;
  spec.amplitude = 0.6;
  spec.replicate_seed = 15;
  const auto sim = simulate(spec);
  const auto cfg = small_config();
  const auto ens = smc_infer(model, sim.series, cfg, 16);

  CHECK(ens.complete);
  CHECK(ens.size() == 120);
  CHECK(ens.chains.size() == 2);
  for (const auto& ch : ens.chains) {
    REQUIRE_FALSE(ch.temperatures.empty());
    CHECK(ch.temperatures.back() == 1.0);
    CHECK(std::is_sorted(ch.temperatures.begin(), ch.temperatures.end()));
    CHECK_FALSE(ch.theta_acceptance.empty());
  }
  double total = 0.0;
  for (double w : ens.weights) total += w;
  CHECK(std::abs(total - 1.0) < 1e-12);
  CHECK(std::isfinite(ens.max_rhat));
  CHECK(ens.converged == (ens.max_rhat < cfg.rhat_target));

  SUBCASE("posterior draws are PD and resampled from particles") {
    rng::Engine rng(17);
    const auto draws = posterior_trajectories(ens, 50, rng);
    REQUIRE(draws.size() == 50);
    for (const auto& t : draws) CHECK(t.min_eigenvalue() > 0.0);
    const auto mean = posterior_mean(ens);
    CHECK(mean.n() == 40);
  }

  SUBCASE("single particle ensemble gives identical draws") {
    PosteriorEnsemble one = ens;
    one.particles.resize(1);
    one.weights = {1.0};
    one.chain_of = {0};
    rng::Engine rng(18);
    const auto draws = posterior_trajectories(one, 5, rng);
    for (const auto& t : draws) CHECK(t == draws.front());
  }

  SUBCASE("deterministic regardless of thread count") {
    const int before = omp_get_max_threads();
    omp_set_num_threads(4);
    const auto again = smc_infer(model, sim.series, cfg, 16);
    omp_set_num_threads(before);
    REQUIRE(again.size() == ens.size());
    for (std::size_t p = 0; p < ens.size(); ++p) {
      CHECK(again.particles[p].z == ens.particles[p].z);
      CHECK(again.particles[p].l_params == ens.particles[p].l_params);
    }
    CHECK(again.weights == ens.weights);
  }

  SUBCASE("ensemble file round trip") {
    const auto path = std::filesystem::temp_directory_path() / "dynconn_ens.cbor";
    save_ensemble(ens, path);
    const auto back = load_ensemble(path);
    REQUIRE(back.size() == ens.size());
    CHECK(back.weights == ens.weights);
    CHECK(back.x == ens.x);
    CHECK(back.particles[7].z == ens.particles[7].z);
    CHECK(back.particles[7].log_theta == ens.particles[7].log_theta);
    CHECK(posterior_mean(back) == posterior_mean(ens));
  }
}

TEST_CASE("checkpoint resume is bit-identical") {
  WishartModel model;
  SimSpec spec;
  spec.scenario = Scenario::static_connectivity;
  spec.n = 30;
  spec.replicate_seed = 19;
  const auto sim = simulate(spec);
  const auto full = smc_infer(model, sim.series, small_config(), 20);

  const auto path = std::filesystem::temp_directory_path() / "dynconn_ckpt.cbor";
  std::filesystem::remove(path);
  auto cfg = small_config();
  cfg.checkpoint = path;
  cfg.stop_after_stages = 2;
  const auto partial = smc_infer(model, sim.series, cfg, 20);
  CHECK_FALSE(partial.complete);
  REQUIRE(std::filesystem::exists(path));

  cfg.stop_after_stages = -1;
  const auto resumed = smc_infer(model, sim.series, cfg, 20);
  CHECK(resumed.complete);
  REQUIRE(resumed.size() == full.size());
  for (std::size_t p = 0; p < full.size(); ++p) CHECK(resumed.particles[p].z == full.particles[p].z);
  CHECK(resumed.weights == full.weights);
  CHECK(resumed.max_rhat == full.max_rhat);

  CHECK_THROWS_AS((void)smc_infer(model, sim.series, cfg, 21), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("smc configuration errors") {
  WishartModel model;
  const auto ts = noise_series(20, 3, 22);
  CHECK_THROWS_AS((void)smc_infer(model, ts, small_config(), 1), ShapeError);
  SmcConfig cfg = small_config();
  cfg.particles = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.stop_after_stages = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
