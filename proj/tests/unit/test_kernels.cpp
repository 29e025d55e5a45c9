#include "doctest.h"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <random>

#include "dynconn/error.hpp"
#include "dynconn/kernels.hpp"
#include "dynconn/timeseries.hpp"

using namespace dynconn;

namespace {

KernelSpec random_spec(KernelFamily family, rng::Engine& rng) {
  auto spec = KernelSpec::with_defaults(family);
  std::lognormal_distribution<double> draw(0.0, 0.7);
  for (auto& p : spec.params) p = draw(rng);
  return spec;
}

Eigen::MatrixXd raw_matrix(const KernelSpec& spec, const std::vector<double>& x) {
  const auto n = static_cast<Index>(x.size());
  Eigen::MatrixXd k(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) k(i, j) = evaluate(spec, x[i], x[j]);
  }
  return k;
}

double median_of(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("closed-form values") {
  const auto expo = KernelSpec::with_defaults(KernelFamily::exponential);
  CHECK(evaluate(expo, 0.4, 0.4) == 1.0);
  CHECK(evaluate(expo, 0.0, 2.0) == doctest::Approx(0.36787944117144233).epsilon(1e-14));

  auto per = KernelSpec::with_defaults(KernelFamily::periodic);
  per.set_param("period", 0.5);
  CHECK(evaluate(per, 0.1, 0.6) == doctest::Approx(1.0).epsilon(1e-14));

  auto pe = KernelSpec::with_defaults(KernelFamily::periodic_exponential);
  pe.set_param("period", 0.5);
  pe.set_param("lengthscale", 2.0);
  CHECK(evaluate(pe, 0.0, 0.5) == doctest::Approx(std::exp(-0.5 / 8.0)).epsilon(1e-14));

  auto rq = KernelSpec::with_defaults(KernelFamily::rational_quadratic);
  rq.set_param("alpha", 2.0);
  CHECK(evaluate(rq, 0.0, 0.5) == doctest::Approx(std::pow(1.0 + 0.5 / 4.0, -2.0)).epsilon(1e-14));
}

TEST_CASE("invalid parameters") {
  auto spec = KernelSpec::with_defaults(KernelFamily::periodic);
  CHECK_THROWS_AS(spec.set_param("nope", 1.0), ConfigError);
  spec.params[0] = -1.0;
  CHECK_THROWS_AS((void)evaluate(spec, 0.0, 1.0), DomainError);
  spec.params[0] = std::nan("");
  CHECK_THROWS_AS(spec.validate(), DomainError);
  CHECK_THROWS_AS((void)kernel_preset("matern"), ConfigError);
}

TEST_CASE("single point matrix is 1 plus jitter") {
  for (auto f : {KernelFamily::exponential, KernelFamily::periodic, KernelFamily::periodic_exponential,
                 KernelFamily::rational_quadratic}) {
    const std::vector<double> x{0.3};
    const auto km = build_matrix(KernelSpec::with_defaults(f), x);
    REQUIRE(km.values.rows() == 1);
    CHECK(km.values(0, 0) == 1.0 + km.jitter);
    CHECK(km.jitter == 1e-8);
  }
}

TEST_CASE("rational quadratic approaches its large-alpha limit") {
  auto rq = KernelSpec::with_defaults(KernelFamily::rational_quadratic);
  rq.set_param("alpha", 1e6);
  rq.set_param("lengthscale", 0.3);
  const auto x = unit_grid(50);
  double worst = 0.0;
  for (double a : x) {
    for (double b : x) {
      const double limit = std::exp(-std::abs(a - b) / (2.0 * 0.3 * 0.3));
      worst = std::max(worst, std::abs(evaluate(rq, a, b) - limit));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("random kernels are stationary, symmetric, unit-diagonal and PSD") {
  auto rng = rng::make_engine(21, {});
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  const auto x = unit_grid(60);
  for (auto f : {KernelFamily::exponential, KernelFamily::periodic, KernelFamily::periodic_exponential,
                 KernelFamily::rational_quadratic}) {
    for (int rep = 0; rep < 10; ++rep) {
      const auto spec = random_spec(f, rng);
      for (int t = 0; t < 20; ++t) {
        const double a = u(rng), b = u(rng), c = u(rng);
        CHECK(std::abs(evaluate(spec, a, b) - evaluate(spec, a + c, b + c)) < 1e-12);
      }
      const auto k = raw_matrix(spec, x);
      CHECK((k - k.transpose()).cwiseAbs().maxCoeff() == 0.0);
      CHECK((k.diagonal().array() == 1.0).all());
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k);
      CHECK(es.eigenvalues()(0) > -1e-8);
    }
  }
}

TEST_CASE("periodic kernel repeats over two periods") {
  auto per = KernelSpec::with_defaults(KernelFamily::periodic);
  per.set_param("period", 0.5);
  per.set_param("periodic_lengthscale", 0.8);
  const auto x = unit_grid(41);  // x[i + 20] = x[i] + 0.5
  const auto k = raw_matrix(per, x);
  for (Index i = 0; i + 20 < 41; ++i) {
    for (Index j = 0; j < 41; ++j) CHECK(std::abs(k(i + 20, j) - k(i, j)) < 1e-12);
  }

  // A square root without jitter keeps grid points one period apart identical.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k);
  const Eigen::MatrixXd root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  auto rng = rng::make_engine(4, {});
  std::normal_distribution<double> normal;
  for (int draw = 0; draw < 20; ++draw) {
    Eigen::VectorXd z(41);
    for (auto& v : z) v = normal(rng);
    const Eigen::VectorXd f = root * z;
    for (Index i = 0; i + 20 < 41; ++i) CHECK(std::abs(f(i + 20) - f(i)) < 1e-6);
  }
}

TEST_CASE("jitter escalates on near-singular matrices") {
  auto per = KernelSpec::with_defaults(KernelFamily::periodic);
  per.set_param("period", 0.25);
  const auto x = unit_grid(200);  // rank-deficient: many points share a phase
  const auto f = kernel_cholesky(per, x);
  CHECK(f.jitter >= 1e-8);
  CHECK(f.jitter <= 1e-4);
  const Eigen::MatrixXd k = raw_matrix(per, x) + f.jitter * Eigen::MatrixXd::Identity(200, 200);
  CHECK((f.lower * f.lower.transpose() - k).cwiseAbs().maxCoeff() < 1e-8);

  const JitterPolicy none{1e-300, 10.0, 1e-300};
  auto flat = KernelSpec::with_defaults(KernelFamily::periodic);
  flat.set_param("periodic_lengthscale", 50.0);  // entries all near 1
  CHECK_THROWS_AS((void)kernel_cholesky(flat, x, none), NumericalError);
  CHECK_THROWS_AS((void)reference::kernel_cholesky_dense(flat, x, none), NumericalError);
  CHECK_THROWS_AS((void)kernel_cholesky(flat, x, JitterPolicy{0.0, 10.0, 1e-4}), ConfigError);
  CHECK_THROWS_AS((void)build_matrix(flat, x, JitterPolicy{1e-8, 1.0, 1e-4}), ConfigError);
}

TEST_CASE("toeplitz cholesky matches the dense reference") {
  auto rng = rng::make_engine(9, {});
  for (auto f : {KernelFamily::exponential, KernelFamily::periodic, KernelFamily::periodic_exponential,
                 KernelFamily::rational_quadratic}) {
    for (Index n : {2, 17, 150}) {
      const auto spec = random_spec(f, rng);
      const auto x = unit_grid(n);
      REQUIRE(is_uniform_grid(x));
      const auto fast = kernel_cholesky(spec, x);
      const auto dense = reference::kernel_cholesky_dense(spec, x);
      CHECK(fast.jitter == dense.jitter);
      CHECK((fast.lower - dense.lower).cwiseAbs().maxCoeff() < 1e-6);
      const Eigen::MatrixXd k = raw_matrix(spec, x) + fast.jitter * Eigen::MatrixXd::Identity(n, n);
      CHECK((fast.lower * fast.lower.transpose() - k).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
  const std::vector<double> uneven{0.0, 0.1, 0.5, 1.0};
  CHECK_FALSE(is_uniform_grid(uneven));
  const auto spec = KernelSpec::with_defaults(KernelFamily::exponential);
  CHECK(kernel_cholesky(spec, uneven).lower.isApprox(reference::kernel_cholesky_dense(spec, uneven).lower));
}

TEST_CASE("hyperparameter priors") {
  const auto rq2 = kernel_preset("rq2");
  CHECK(rq2.param("alpha") == doctest::Approx(0.049787068367863944));
  CHECK(std::exp(rq2.priors[0].mean) == doctest::Approx(std::exp(-3.0)));

  auto rng = rng::make_engine(12, {});
  std::vector<double> ell, alpha;
  const auto expo = kernel_preset("exponential");
  for (int i = 0; i < 100000; ++i) {
    ell.push_back(sample_hyperparams(expo, rng).param("lengthscale"));
    alpha.push_back(sample_hyperparams(rq2, rng).param("alpha"));
  }
  CHECK(std::abs(median_of(ell) - 1.0) < 0.02);
  CHECK(std::abs(median_of(alpha) / std::exp(-3.0) - 1.0) < 0.02);

  auto a = rng::make_engine(77, {});
  auto b = rng::make_engine(77, {});
  CHECK(sample_hyperparams(kernel_preset("periodic"), a) == sample_hyperparams(kernel_preset("periodic"), b));
}

TEST_CASE("kernel spec json") {
  auto spec = kernel_preset("rq2");
  spec.set_param("lengthscale", 0.25);
  const nlohmann::json j = spec;
  CHECK(j.get<KernelSpec>() == spec);
  CHECK(nlohmann::json("periodic").get<KernelSpec>() == kernel_preset("periodic"));
}
