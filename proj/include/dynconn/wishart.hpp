#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dynconn/kernels.hpp"
#include "dynconn/rng.hpp"
#include "dynconn/timeseries.hpp"

namespace dynconn {

/// Wishart process: Sigma(x) = sum_k L f_k(x) f_k(x)^T L^T with v independent
/// d-variate GP latents f_k sharing the kernel, zero mean function, and
/// N(0, 1) priors on the entries of the lower-triangular L.
struct WishartModel {
  Index d = 2;
  Index dof = 0;  // 0 selects d + 1
  KernelSpec kernel = KernelSpec::with_defaults(KernelFamily::periodic);
  JitterPolicy jitter;

  [[nodiscard]] Index degrees_of_freedom() const { return dof > 0 ? dof : d + 1; }
  void validate() const;
};

/// Unconstrained parameterization of one model state.
struct ParticleState {
  std::vector<double> log_theta;  // kernel hyperparameters, log scale
  std::vector<double> l_params;   // packed L, row-major lower triangle; diagonal entries are logs
  Eigen::MatrixXd z;              // n x (v * d) whitened latents; column k * d + j holds f_kj
  double log_weight = 0.0;
};

[[nodiscard]] Eigen::MatrixXd unpack_scale(std::span<const double> l_params, Index d);
[[nodiscard]] std::vector<double> pack_scale(const Eigen::MatrixXd& lower);

/// Log prior density of (log_theta, l_params) in the unconstrained coordinates.
/// The diagonal of L is half-normal, mapped through its log.
[[nodiscard]] double log_prior_theta(const KernelSpec& kernel, std::span<const double> log_theta);
[[nodiscard]] double log_prior_scale(std::span<const double> l_params, Index d);

/// f = chol(K_theta) Z, one column per (k, j).
[[nodiscard]] Eigen::MatrixXd latent_functions(const WishartModel& model, std::span<const double> x,
                                               const ParticleState& state);

/// Sigma(x_i) = sum_k L f_k(x_i) f_k(x_i)^T L^T from precomputed latents.
[[nodiscard]] CovarianceTrajectory assemble_trajectory(const Eigen::MatrixXd& f, const Eigen::MatrixXd& scale,
                                                       std::vector<double> x, Index dof);

[[nodiscard]] CovarianceTrajectory reconstruct(const WishartModel& model, std::span<const double> x,
                                               const ParticleState& state);

struct PriorDraw {
  ParticleState state;
  CovarianceTrajectory trajectory;
};

/// theta and L from their priors, Z standard normal.
[[nodiscard]] PriorDraw sample_prior(const WishartModel& model, std::span<const double> x, rng::Engine& rng);

/// As sample_prior with L held fixed.
[[nodiscard]] PriorDraw sample_prior_with_scale(const WishartModel& model, std::span<const double> x,
                                                const Eigen::MatrixXd& scale, rng::Engine& rng);

/// Observations reduced to per-time scatter matrices S_i = sum_m y_im y_im^T.
struct ScatterData {
  std::vector<double> x;
  Index n = 0;
  Index d = 0;
  int subjects = 0;
  std::vector<double> scatter;  // n * d * d

  static ScatterData from(const TimeSeries& ts);
  static ScatterData from(const MultiSubjectSeries& ms);
};

/// sum_i sum_m log MVN(y_im; 0, Sigma(x_i)). Throws NumericalError naming the
/// first slice that is not positive definite.
[[nodiscard]] double log_likelihood(const CovarianceTrajectory& sigma, const ScatterData& data);
[[nodiscard]] double log_likelihood(const WishartModel& model, const ParticleState& state, const TimeSeries& data);
[[nodiscard]] double log_likelihood(const WishartModel& model, const ParticleState& state,
                                    const MultiSubjectSeries& data);

struct SmcConfig {
  int particles = 200;
  int chains = 3;
  /// Next temperature is chosen so the relative ESS of the reweighted ensemble hits this.
  double ess_threshold = 0.5;
  int mutation_steps_per_round = 3;
  double rhat_target = 1.1;
  /// Mutation rounds at the final temperature spent on the R-hat gate.
  int max_extra_rounds = 30;
  /// Whitened latents of each (k, j) series are proposed in this many time batches.
  int latent_batches = 4;
  int scale_moves = 2;
  double target_temperature = 1.0;

  std::filesystem::path checkpoint;  // empty: no checkpointing
  int checkpoint_every = 5;
  /// Stop (and checkpoint) after this many tempering stages in this call; -1 runs to completion.
  int stop_after_stages = -1;

  /// Replaces the Wishart likelihood; used to check the sampler on tractable targets.
  std::function<double(const ParticleState&)> pseudo_log_likelihood;

  static SmcConfig desk() { return {}; }
  static SmcConfig paper_scale() {
    SmcConfig c;
    c.particles = 1000;
    return c;
  }
  void validate() const;
};

struct ChainDiagnostics {
  std::vector<double> temperatures;
  std::vector<double> ess;  // relative ESS after each reweighting
  std::vector<double> theta_acceptance;
  std::vector<double> scale_acceptance;
  std::vector<double> latent_acceptance;
  int resamples = 0;
  int degenerate_events = 0;
};

struct PosteriorEnsemble {
  WishartModel model;
  std::vector<double> x;
  std::vector<ParticleState> particles;
  std::vector<double> weights;  // normalized
  std::vector<int> chain_of;
  std::vector<ChainDiagnostics> chains;
  bool complete = true;
  bool converged = true;
  double max_rhat = 1.0;
  std::vector<double> hyper_rhat;  // per log_theta then l_params entry; diagnostics only
  int extra_rounds = 0;
  std::vector<std::string> log;

  [[nodiscard]] std::size_t size() const { return particles.size(); }
};

/// Likelihood-tempered SMC run independently in each chain, merged with equal
/// chain weight once every Sigma(x_i)_jk has R-hat below the target (or the
/// mutation budget is spent, leaving converged = false).
[[nodiscard]] PosteriorEnsemble smc_infer(const WishartModel& model, const TimeSeries& data, const SmcConfig& cfg,
                                          std::uint64_t seed);
[[nodiscard]] PosteriorEnsemble smc_infer(const WishartModel& model, const MultiSubjectSeries& data,
                                          const SmcConfig& cfg, std::uint64_t seed);

/// Weight-proportional draws (with replacement) reconstructed into trajectories.
[[nodiscard]] std::vector<CovarianceTrajectory> posterior_trajectories(const PosteriorEnsemble& ens, int num_draws,
                                                                       rng::Engine& rng);

/// Weighted mean trajectory of the ensemble.
[[nodiscard]] CovarianceTrajectory posterior_mean(const PosteriorEnsemble& ens);

/// Gelman-Rubin potential scale reduction for equal-length chains.
[[nodiscard]] double rhat(std::span<const std::vector<double>> chains);

void save_ensemble(const PosteriorEnsemble& ens, const std::filesystem::path& path);
[[nodiscard]] PosteriorEnsemble load_ensemble(const std::filesystem::path& path);

}  // namespace dynconn
