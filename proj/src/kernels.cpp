#include "dynconn/kernels.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dynconn/error.hpp"

namespace dynconn {

namespace {

constexpr std::array<std::string_view, 1> kExponentialNames{"lengthscale"};
constexpr std::array<std::string_view, 2> kPeriodicNames{"period", "periodic_lengthscale"};
constexpr std::array<std::string_view, 3> kPeriodicExponentialNames{"period", "periodic_lengthscale",
                                                                    "lengthscale"};
constexpr std::array<std::string_view, 2> kRationalQuadraticNames{"alpha", "lengthscale"};

std::size_t index_of(KernelFamily family, std::string_view name) {
  const auto names = KernelSpec::param_names(family);
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) {
    throw ConfigError("kernel " + to_string(family) + " has no parameter '" + std::string(name) + "'");
  }
  return static_cast<std::size_t>(it - names.begin());
}

std::string describe(KernelFamily family, std::span<const double> params) {
  std::ostringstream os;
  os << to_string(family) << '(';
  const auto names = KernelSpec::param_names(family);
  for (std::size_t i = 0; i < params.size(); ++i) {
    os << (i ? ", " : "") << names[i] << '=' << params[i];
  }
  os << ')';
  return os.str();
}

void fill_dense(KernelFamily family, std::span<const double> params, std::span<const double> x,
                Eigen::MatrixXd& k) {
  const auto n = static_cast<Index>(x.size());
  k.resize(n, n);
  for (Index j = 0; j < n; ++j) {
    k(j, j) = 1.0;
    for (Index i = j + 1; i < n; ++i) {
      const double v = kernel_at_distance(family, params, std::abs(x[static_cast<std::size_t>(i)] - x[static_cast<std::size_t>(j)]));
      k(i, j) = v;
      k(j, i) = v;
    }
  }
}

}  // namespace

std::string to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::exponential: return "exponential";
    case KernelFamily::periodic: return "periodic";
    case KernelFamily::periodic_exponential: return "periodic_exponential";
    case KernelFamily::rational_quadratic: return "rational_quadratic";
  }
  return "unknown";
}

KernelFamily kernel_family_from_string(std::string_view s) {
  if (s == "exponential") return KernelFamily::exponential;
  if (s == "periodic") return KernelFamily::periodic;
  if (s == "periodic_exponential" || s == "periodic-exponential" || s == "locally_periodic") {
    return KernelFamily::periodic_exponential;
  }
  if (s == "rational_quadratic" || s == "rq") return KernelFamily::rational_quadratic;
  throw ConfigError("unknown kernel family '" + std::string(s) + "'");
}

double LogNormalPrior::log_density_of_log(double log_value) const {
  const double z = (log_value - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

std::span<const std::string_view> KernelSpec::param_names(KernelFamily family) {
  switch (family) {
    case KernelFamily::exponential: return kExponentialNames;
    case KernelFamily::periodic: return kPeriodicNames;
    case KernelFamily::periodic_exponential: return kPeriodicExponentialNames;
    case KernelFamily::rational_quadratic: return kRationalQuadraticNames;
  }
  return {};
}

KernelSpec KernelSpec::with_defaults(KernelFamily family) {
  KernelSpec spec;
  spec.family = family;
  const auto count = param_names(family).size();
  spec.params.assign(count, 1.0);
  spec.priors.assign(count, LogNormalPrior{});
  return spec;
}

double KernelSpec::param(std::string_view name) const { return params.at(index_of(family, name)); }

void KernelSpec::set_param(std::string_view name, double value) {
  params.at(index_of(family, name)) = value;
}

void KernelSpec::set_prior(std::string_view name, LogNormalPrior prior) {
  priors.at(index_of(family, name)) = prior;
}

void KernelSpec::validate() const {
  const auto names = param_names(family);
  if (params.size() != names.size() || priors.size() != names.size()) {
    throw ConfigError("kernel " + to_string(family) + " expects " + std::to_string(names.size()) +
                      " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(params[i] > 0.0) || !std::isfinite(params[i])) {
      throw DomainError("kernel parameter " + std::string(names[i]) + " must be positive, got " +
                        std::to_string(params[i]));
    }
    if (!(priors[i].sd > 0.0)) throw DomainError("prior sd must be positive");
  }
}

KernelSpec kernel_preset(std::string_view name) {
  if (name == "exponential") return KernelSpec::with_defaults(KernelFamily::exponential);
  if (name == "periodic") return KernelSpec::with_defaults(KernelFamily::periodic);
  if (name == "periodic_exponential") return KernelSpec::with_defaults(KernelFamily::periodic_exponential);
  if (name == "rq1" || name == "rational_quadratic") {
    return KernelSpec::with_defaults(KernelFamily::rational_quadratic);
  }
  if (name == "rq2") {
    auto spec = KernelSpec::with_defaults(KernelFamily::rational_quadratic);
    spec.set_prior("alpha", {-3.0, 1.0});
    spec.set_param("alpha", std::exp(-3.0));
    return spec;
  }
  throw ConfigError("unknown kernel preset '" + std::string(name) + "'");
}

std::vector<std::string> kernel_preset_names() {
  return {"exponential", "periodic", "periodic_exponential", "rq1", "rq2"};
}

double kernel_at_distance(KernelFamily family, std::span<const double> p, double r) {
  switch (family) {
    case KernelFamily::exponential: return std::exp(-r / (2.0 * p[0] * p[0]));
    case KernelFamily::periodic: {
      const double s = std::sin(std::numbers::pi * r / p[0]);
      return std::exp(-2.0 * s * s / (p[1] * p[1]));
    }
    case KernelFamily::periodic_exponential: {
      const double s = std::sin(std::numbers::pi * r / p[0]);
      return std::exp(-2.0 * s * s / (p[1] * p[1]) - r / (2.0 * p[2] * p[2]));
    }
    case KernelFamily::rational_quadratic:
      return std::pow(1.0 + r / (2.0 * p[0] * p[1] * p[1]), -p[0]);
  }
  return 0.0;
}

double evaluate(const KernelSpec& spec, double xi, double xj) {
  spec.validate();
  return kernel_at_distance(spec.family, spec.params, std::abs(xi - xj));
}

void JitterPolicy::validate() const {
  if (!(initial > 0.0 && maximum >= initial && factor > 1.0)) {
    throw ConfigError("jitter policy needs 0 < initial <= maximum and factor > 1");
  }
}

KernelMatrix build_matrix(const KernelSpec& spec, std::span<const double> x, const JitterPolicy& policy) {
  spec.validate();
  policy.validate();
  KernelMatrix out;
  Eigen::MatrixXd k;
  fill_dense(spec.family, spec.params, x, k);
  Eigen::LLT<Eigen::MatrixXd> llt;
  for (double jitter = policy.initial; jitter <= policy.maximum * (1.0 + 1e-9); jitter *= policy.factor) {
    out.values = k;
    out.values.diagonal().array() += jitter;
    llt.compute(out.values);
    if (llt.info() == Eigen::Success) {
      out.jitter = jitter;
      return out;
    }
  }
  throw NumericalError("kernel matrix not factorizable for " + describe(spec.family, spec.params));
}

bool is_uniform_grid(std::span<const double> x) {
  if (x.size() < 3) return true;
  const double h = x[1] - x[0];
  for (std::size_t i = 2; i < x.size(); ++i) {
    if (std::abs((x[i] - x[i - 1]) - h) > 1e-9 * std::abs(h)) return false;
  }
  return true;
}

bool toeplitz_cholesky(std::span<const double> t, Eigen::MatrixXd& lower, std::vector<double>& w) {
  const auto n = static_cast<Index>(t.size());
  lower.setZero(n, n);
  if (n == 0) return true;
  if (!(t[0] > 0.0)) return false;
  const double s0 = std::sqrt(t[0]);
  w.assign(t.size(), 0.0);
  for (Index i = 0; i < n; ++i) {
    lower(i, 0) = t[static_cast<std::size_t>(i)] / s0;
    if (i > 0) w[static_cast<std::size_t>(i)] = lower(i, 0);
  }
  // Generator form of the Schur algorithm: column k of the factor is the
  // previous column shifted down by one, rotated hyperbolically against w so
  // that w[k] vanishes.
  for (Index k = 1; k < n; ++k) {
    const double pivot = lower(k - 1, k - 1);
    const double rho = w[static_cast<std::size_t>(k)] / pivot;
    if (!(std::abs(rho) < 1.0)) return false;
    const double s = std::sqrt((1.0 - rho) * (1.0 + rho));
    const double inv_s = 1.0 / s;
    const double* prev = lower.col(k - 1).data();
    double* cur = lower.col(k).data();
    double* wp = w.data();
    for (Index i = k; i < n; ++i) {
      const double u = (prev[i - 1] - rho * wp[i]) * inv_s;
      wp[i] = -rho * u + s * wp[i];
      cur[i] = u;
    }
    if (!(cur[k] > 0.0) || !std::isfinite(cur[k])) return false;
  }
  return true;
}

double kernel_cholesky_into(KernelFamily family, std::span<const double> params, std::span<const double> x,
                            bool uniform, Eigen::MatrixXd& lower, std::vector<double>& scratch,
                            const JitterPolicy& policy) {
  const auto n = static_cast<Index>(x.size());
  if (uniform) {
    std::vector<double> column(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) column[i] = kernel_at_distance(family, params, x[i] - x[0]);
    column[0] = 1.0;
    const double base = column[0];
    for (double jitter = policy.initial; jitter <= policy.maximum * (1.0 + 1e-9); jitter *= policy.factor) {
      column[0] = base + jitter;
      if (toeplitz_cholesky(column, lower, scratch)) return jitter;
    }
    return -1.0;
  }
  Eigen::MatrixXd k;
  fill_dense(family, params, x, k);
  Eigen::LLT<Eigen::MatrixXd> llt(n);
  for (double jitter = policy.initial; jitter <= policy.maximum * (1.0 + 1e-9); jitter *= policy.factor) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter;
    llt.compute(kj);
    if (llt.info() == Eigen::Success) {
      lower = llt.matrixL();
      return jitter;
    }
  }
  return -1.0;
}

KernelFactor kernel_cholesky(const KernelSpec& spec, std::span<const double> x, const JitterPolicy& policy) {
  spec.validate();
  policy.validate();
  KernelFactor out;
  std::vector<double> scratch;
  out.jitter = kernel_cholesky_into(spec.family, spec.params, x, is_uniform_grid(x), out.lower, scratch, policy);
  if (out.jitter < 0.0) {
    throw NumericalError("kernel Cholesky failed after jitter escalation for " +
                         describe(spec.family, spec.params));
  }
  return out;
}

KernelSpec sample_hyperparams(const KernelSpec& tmpl, rng::Engine& rng) {
  KernelSpec out = tmpl;
  const auto count = KernelSpec::param_names(tmpl.family).size();
  if (out.priors.size() != count) throw ConfigError("kernel template has the wrong number of priors");
  out.params.resize(count);
  std::normal_distribution<double> normal;
  for (std::size_t i = 0; i < count; ++i) {
    out.params[i] = std::exp(out.priors[i].mean + out.priors[i].sd * normal(rng));
  }
  return out;
}

void to_json(nlohmann::json& j, const KernelSpec& spec) {
  j = nlohmann::json::object();
  j["family"] = to_string(spec.family);
  const auto names = KernelSpec::param_names(spec.family);
  auto& params = j["params"] = nlohmann::json::object();
  auto& priors = j["priors"] = nlohmann::json::object();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string key(names[i]);
    if (i < spec.params.size()) params[key] = spec.params[i];
    if (i < spec.priors.size()) priors[key] = {{"mean", spec.priors[i].mean}, {"sd", spec.priors[i].sd}};
  }
}

void from_json(const nlohmann::json& j, KernelSpec& spec) {
  if (j.is_string()) {
    spec = kernel_preset(j.get<std::string>());
    return;
  }
  spec = KernelSpec::with_defaults(kernel_family_from_string(j.at("family").get<std::string>()));
  const auto names = KernelSpec::param_names(spec.family);
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string key(names[i]);
    if (j.contains("params") && j["params"].contains(key)) spec.params[i] = j["params"][key].get<double>();
    if (j.contains("priors") && j["priors"].contains(key)) {
      const auto& p = j["priors"][key];
      spec.priors[i] = {p.value("mean", 0.0), p.value("sd", 1.0)};
    }
  }
  spec.validate();
}

namespace reference {

KernelFactor kernel_cholesky_dense(const KernelSpec& spec, std::span<const double> x, const JitterPolicy& policy) {
  spec.validate();
  policy.validate();
  KernelFactor out;
  std::vector<double> scratch;
  out.jitter = kernel_cholesky_into(spec.family, spec.params, x, false, out.lower, scratch, policy);
  if (out.jitter < 0.0) throw NumericalError("dense kernel Cholesky failed for " + describe(spec.family, spec.params));
  return out;
}

}  // namespace reference

}  // namespace dynconn
