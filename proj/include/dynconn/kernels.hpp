#pragma once

#include <Eigen/Core>

#include "json.hpp"

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dynconn/rng.hpp"

namespace dynconn {

using Index = Eigen::Index;

enum class KernelFamily { exponential, periodic, periodic_exponential, rational_quadratic };

[[nodiscard]] std::string to_string(KernelFamily f);
[[nodiscard]] KernelFamily kernel_family_from_string(std::string_view s);

/// Log-normal prior: log(value) ~ N(mean, sd).
struct LogNormalPrior {
  double mean = 0.0;
  double sd = 1.0;

  [[nodiscard]] double log_density_of_log(double log_value) const;
  friend bool operator==(const LogNormalPrior&, const LogNormalPrior&) = default;
};

/// Kernel family with its positive hyperparameters and their priors.
///
/// Parameter order per family:
///   exponential          : lengthscale
///   periodic             : period, periodic_lengthscale
///   periodic_exponential : period, periodic_lengthscale, lengthscale
///   rational_quadratic   : alpha, lengthscale
struct KernelSpec {
  KernelFamily family = KernelFamily::exponential;
  std::vector<double> params;
  std::vector<LogNormalPrior> priors;

  /// All parameters set to 1 with log N(0, 1) priors.
  static KernelSpec with_defaults(KernelFamily family);

  [[nodiscard]] static std::span<const std::string_view> param_names(KernelFamily family);
  [[nodiscard]] std::size_t param_count() const { return params.size(); }
  [[nodiscard]] double param(std::string_view name) const;
  void set_param(std::string_view name, double value);
  void set_prior(std::string_view name, LogNormalPrior prior);

  /// Throws DomainError on a non-positive or non-finite parameter.
  void validate() const;

  friend bool operator==(const KernelSpec&, const KernelSpec&) = default;
};

/// Named presets: exponential, periodic, periodic_exponential, rq1 (all log N(0,1)),
/// rq2 (alpha ~ log N(-3, 1), lengthscale ~ log N(0, 1)).
[[nodiscard]] KernelSpec kernel_preset(std::string_view name);
[[nodiscard]] std::vector<std::string> kernel_preset_names();

/// Kernel value as a function of the distance r = |xi - xj|; no validation.
[[nodiscard]] double kernel_at_distance(KernelFamily family, std::span<const double> params, double r);

/// Closed-form kernel value; throws DomainError for invalid parameters.
[[nodiscard]] double evaluate(const KernelSpec& spec, double xi, double xj);

/// Jitter escalation: start at 1e-8 and multiply by 10 up to 1e-4.
struct JitterPolicy {
  double initial = 1e-8;
  double factor = 10.0;
  double maximum = 1e-4;

  /// Throws ConfigError unless 0 < initial <= maximum and factor > 1.
  void validate() const;
};

struct KernelMatrix {
  Eigen::MatrixXd values;  // K + jitter * I
  double jitter = 0.0;
};

/// Dense kernel matrix over the grid, with the smallest jitter of the policy
/// that makes it Cholesky-factorizable. Throws NumericalError otherwise.
[[nodiscard]] KernelMatrix build_matrix(const KernelSpec& spec, std::span<const double> x,
                                        const JitterPolicy& policy = {});

/// Lower Cholesky factor of K + jitter * I.
struct KernelFactor {
  Eigen::MatrixXd lower;
  double jitter = 0.0;
};

/// True when consecutive grid spacings agree to 1e-9 relative, so stationary
/// kernels give a symmetric Toeplitz matrix.
[[nodiscard]] bool is_uniform_grid(std::span<const double> x);

/// Cholesky factor of the kernel matrix. Uniform grids use the O(n^2)
/// generalized Schur algorithm on the Toeplitz structure; other grids use a
/// dense factorization. Throws NumericalError after the jitter policy is exhausted.
[[nodiscard]] KernelFactor kernel_cholesky(const KernelSpec& spec, std::span<const double> x,
                                           const JitterPolicy& policy = {});

/// Same contract as kernel_cholesky with the family and raw parameters passed
/// directly; writes into `lower` (resized as needed). Returns the jitter used or
/// a negative value on failure instead of throwing. Used in sampler hot loops.
double kernel_cholesky_into(KernelFamily family, std::span<const double> params,
                            std::span<const double> x, bool uniform, Eigen::MatrixXd& lower,
                            std::vector<double>& scratch, const JitterPolicy& policy = {});

/// Cholesky of the symmetric Toeplitz matrix with first column `column`.
/// Returns false when the matrix is not numerically positive definite.
bool toeplitz_cholesky(std::span<const double> column, Eigen::MatrixXd& lower,
                       std::vector<double>& scratch);

/// Independent draw of every parameter from its log-normal prior.
[[nodiscard]] KernelSpec sample_hyperparams(const KernelSpec& tmpl, rng::Engine& rng);

void to_json(nlohmann::json& j, const KernelSpec& spec);
void from_json(const nlohmann::json& j, KernelSpec& spec);

namespace reference {

/// Dense Eigen LLT with the same jitter policy; kept for testing the Toeplitz path.
[[nodiscard]] KernelFactor kernel_cholesky_dense(const KernelSpec& spec, std::span<const double> x,
                                                 const JitterPolicy& policy = {});

}  // namespace reference

}  // namespace dynconn
