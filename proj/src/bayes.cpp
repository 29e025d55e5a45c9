#include "dynconn/bayes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dynconn/error.hpp"

namespace dynconn {

std::string to_string(SampleSource s) { return s == SampleSource::prior ? "prior" : "posterior"; }

std::string to_string(Label l) {
  switch (l) {
    case Label::dynamic: return "dynamic";
    case Label::static_: return "static";
    case Label::inconclusive: return "inconclusive";
  }
  return "inconclusive";
}

Label label_from_string(const std::string& s) {
  if (s == "dynamic") return Label::dynamic;
  if (s == "static") return Label::static_;
  if (s == "inconclusive") return Label::inconclusive;
  throw ConfigError("unknown label '" + s + "'");
}

void StatDistribution::validate() const {
  if (samples.size() < 100) {
    throw SizeError("density estimation needs at least 100 samples, got " + std::to_string(samples.size()));
  }
  for (double v : samples) {
    if (!std::isfinite(v) || v < 0.0) throw DomainError("statistic samples must be finite and nonnegative");
  }
}

namespace {

double quantile(std::vector<double> sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

double silverman_bandwidth(std::span<const double> samples) {
  const auto n = static_cast<double>(samples.size());
  if (samples.size() < 2) throw SizeError("bandwidth needs at least 2 samples");
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : samples) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
  const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  return 0.9 * spread * std::pow(n, -0.2);
}

DensityAtZero density_at_zero(const StatDistribution& dist) {
  dist.validate();
  DensityAtZero out;
  const auto& xs = dist.samples;
  if (std::all_of(xs.begin(), xs.end(), [](double v) { return v == 0.0; })) {
    out.density = kDensityCap;
    out.warning = "all " + to_string(dist.source) + " samples are exactly 0; density capped";
    return out;
  }
  out.bandwidth = silverman_bandwidth(xs);
  if (!(out.bandwidth > 0.0)) {
    out.density = kDensityFloor;
    out.warning = "all " + to_string(dist.source) + " samples are identical; bandwidth is 0";
    return out;
  }
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  double sum = 0.0;
  for (double v : xs) {
    const double u = v / out.bandwidth;
    sum += std::exp(-0.5 * u * u);
  }
  const double density = 2.0 * inv_sqrt_2pi * sum / (static_cast<double>(xs.size()) * out.bandwidth);
  out.density = std::max(density, kDensityFloor);
  return out;
}

EvidenceBands EvidenceBands::one_third() { return {3.0, std::log(1.0 / 3.0)}; }

void EvidenceBands::validate() const {
  if (!(static_below <= dynamic_above)) throw ConfigError("static band must lie below the dynamic band");
}

Label classify(double log_bf10, const EvidenceBands& bands) {
  if (log_bf10 > bands.dynamic_above) return Label::dynamic;
  if (log_bf10 < bands.static_below) return Label::static_;
  return Label::inconclusive;
}

EdgeBayes savage_dickey(const StatDistribution& prior, const StatDistribution& posterior, const EvidenceBands& bands) {
  if (prior.statistic != posterior.statistic) throw UsageError("prior and posterior hold different statistics");
  if (prior.j != posterior.j || prior.k != posterior.k) throw UsageError("prior and posterior describe different edges");
  if (prior.source != SampleSource::prior || posterior.source != SampleSource::posterior) {
    throw UsageError("savage_dickey expects a prior then a posterior distribution");
  }
  bands.validate();
  const auto p0 = density_at_zero(prior);
  const auto q0 = density_at_zero(posterior);
  EdgeBayes out;
  out.j = prior.j;
  out.k = prior.k;
  out.statistic = prior.statistic;
  out.prior_density_at_0 = p0.density;
  out.posterior_density_at_0 = q0.density;
  out.log_bf10 = std::log(p0.density) - std::log(q0.density);
  out.label = classify(out.log_bf10, bands);
  for (const auto* w : {&p0.warning, &q0.warning}) {
    if (!w->empty()) out.warnings.push_back(*w);
  }
  return out;
}

void BayesConfig::validate() const {
  if (prior_draws < 1000) throw ConfigError("prior draw count must be at least 1000");
  if (posterior_draws < 1000) throw ConfigError("posterior draw count must be at least 1000");
  if (statistics.empty()) throw ConfigError("at least one statistic is required");
  bands.validate();
  smc.validate();
}

const EdgeBayes& BayesResult::find(Index j, Index k, StatisticKind s) const {
  for (const auto& e : edges) {
    if (e.j == j && e.k == k && e.statistic == s) return e;
  }
  throw UsageError("no Bayes result for edge (" + std::to_string(j) + ", " + std::to_string(k) + ") and " +
                   to_string(s));
}

std::vector<StatDistribution> distributions_from(std::span<const CovarianceTrajectory> draws, SampleSource source,
                                                 std::span<const StatisticKind> statistics,
                                                 const StatisticOptions& options) {
  if (draws.empty()) throw SizeError("no trajectory draws");
  const Index d = draws.front().d();
  std::vector<StatDistribution> out;
  for (auto s : statistics) {
    for (Index j = 0; j < d; ++j) {
      for (Index k = j + 1; k < d; ++k) {
        StatDistribution dist;
        dist.source = source;
        dist.statistic = s;
        dist.j = j;
        dist.k = k;
        dist.samples.resize(draws.size());
        out.push_back(std::move(dist));
      }
    }
  }
  const auto count = static_cast<long>(draws.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < count; ++i) {
    const auto& t = draws[static_cast<std::size_t>(i)];
    for (auto& dist : out) {
      const auto edge = t.edge(dist.j, dist.k);
      dist.samples[static_cast<std::size_t>(i)] = compute_statistic(dist.statistic, edge, options);
    }
  }
  return out;
}

std::vector<StatDistribution> prior_distributions(const WishartModel& model, std::span<const double> x, int draws,
                                                  std::uint64_t seed, std::span<const StatisticKind> statistics,
                                                  const StatisticOptions& options) {
  if (draws < 1) throw ConfigError("prior draw count must be positive");
  std::vector<CovarianceTrajectory> trajectories(static_cast<std::size_t>(draws));
  std::string failure;
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < draws; ++i) {
    auto rng = rng::make_engine(seed, {rng::tag(rng::Purpose::prior), static_cast<std::uint64_t>(i)});
    try {
      trajectories[static_cast<std::size_t>(i)] = sample_prior(model, x, rng).trajectory;
    } catch (const std::exception& e) {
#pragma omp critical
      failure = e.what();
    }
  }
  if (!failure.empty()) throw NumericalError(failure);
  return distributions_from(trajectories, SampleSource::prior, statistics, options);
}

namespace {

template <class Data>
BayesResult run_test(const WishartModel& model, const Data& data, const BayesConfig& cfg, std::uint64_t seed,
                     std::span<const StatDistribution> prior) {
  BayesResult out;
  if (model.d > 2) {
    out.warnings.push_back("Savage-Dickey ratios for d > 2 ignore the joint positive-definiteness constraint");
  }
  const auto ens = smc_infer(model, data, cfg.smc, rng::derive(seed, {rng::tag(rng::Purpose::smc)}));
  out.converged = ens.converged;
  out.max_rhat = ens.max_rhat;
  if (!ens.converged) out.warnings.push_back("SMC did not converge");
  for (const auto& line : ens.log) out.warnings.push_back(line);

  auto draw_rng = rng::make_engine(seed, {rng::tag(rng::Purpose::posterior_draws)});
  auto draws = posterior_trajectories(ens, cfg.posterior_draws, draw_rng);
  const auto posterior = distributions_from(draws, SampleSource::posterior, cfg.statistics, cfg.options);
  for (const auto& post : posterior) {
    const auto it = std::find_if(prior.begin(), prior.end(), [&](const StatDistribution& p) {
      return p.statistic == post.statistic && p.j == post.j && p.k == post.k;
    });
    if (it == prior.end()) throw UsageError("no prior distribution for " + to_string(post.statistic));
    out.edges.push_back(savage_dickey(*it, post, cfg.bands));
  }
  if (cfg.keep_draws) out.posterior_draws = std::move(draws);
  return out;
}

std::uint64_t prior_seed(std::uint64_t seed) { return rng::derive(seed, {rng::tag(rng::Purpose::prior)}); }

}  // namespace

BayesResult bayesian_test(const WishartModel& model, const TimeSeries& data, const BayesConfig& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  model.validate();
  const auto prior =
      prior_distributions(model, data.x, cfg.prior_draws, prior_seed(seed), cfg.statistics, cfg.options);
  return run_test(model, data, cfg, seed, prior);
}

BayesResult bayesian_test(const WishartModel& model, const MultiSubjectSeries& data, const BayesConfig& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  model.validate();
  data.validate();
  const auto prior =
      prior_distributions(model, data.x(), cfg.prior_draws, prior_seed(seed), cfg.statistics, cfg.options);
  return run_test(model, data, cfg, seed, prior);
}

BayesResult bayesian_test_with_prior(const WishartModel& model, const TimeSeries& data, const BayesConfig& cfg,
                                     std::uint64_t seed, std::span<const StatDistribution> prior) {
  cfg.validate();
  model.validate();
  return run_test(model, data, cfg, seed, prior);
}

}  // namespace dynconn
