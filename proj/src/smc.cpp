#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "dynconn/error.hpp"
#include "dynconn/wishart.hpp"
#include "json.hpp"
#include "wishart_detail.hpp"

namespace dynconn {

void SmcConfig::validate() const {
  if (particles < 2) throw ConfigError("SMC needs at least 2 particles");
  if (chains < 1) throw ConfigError("SMC needs at least 1 chain");
  if (!(ess_threshold > 0.0 && ess_threshold < 1.0)) throw ConfigError("ESS threshold must lie in (0, 1)");
  if (mutation_steps_per_round < 1) throw ConfigError("mutation steps per round must be positive");
  if (!(rhat_target > 1.0)) throw ConfigError("R-hat target must exceed 1");
  if (max_extra_rounds < 0) throw ConfigError("extra mutation rounds cannot be negative");
  if (latent_batches < 1) throw ConfigError("latent batches must be positive");
  if (scale_moves < 0) throw ConfigError("scale moves cannot be negative");
  if (!(target_temperature >= 0.0 && target_temperature <= 1.0)) {
    throw ConfigError("target temperature must lie in [0, 1]");
  }
  if (checkpoint_every < 1) throw ConfigError("checkpoint interval must be positive");
  if (stop_after_stages >= 0 && checkpoint.empty()) {
    throw ConfigError("stopping early requires a checkpoint path");
  }
}

namespace {

using nlohmann::json;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr int kFormatVersion = 1;
constexpr std::uint64_t kResampleStream = 0x5E5A;
constexpr std::uint64_t kGateStageOffset = 1u << 20;

struct Particle {
  ParticleState s;
  Eigen::MatrixXd f;  // chol(K_theta) z, updated incrementally
  double loglik = 0.0;
};

struct Chain {
  int index = 0;
  std::vector<Particle> particles;
  std::vector<double> log_weights;
  double temperature = 0.0;
  int stage = 0;
  bool tempered = false;
  double theta_step = 0.5;
  double scale_step = 0.5;
  std::vector<double> beta;
  ChainDiagnostics diag;
};

struct Problem {
  const WishartModel* model = nullptr;
  const SmcConfig* cfg = nullptr;
  ScatterData data;
  bool uniform = true;
  Index n = 0;
  Index d = 0;
  Index v = 0;
  Index cols = 0;
  std::uint64_t seed = 0;

  [[nodiscard]] bool pseudo() const { return static_cast<bool>(cfg->pseudo_log_likelihood); }
};

struct Workspace {
  Eigen::MatrixXd chol;
  Eigen::MatrixXd chol_prop;
  Eigen::MatrixXd f_prop;
  Eigen::MatrixXd scale;
  Eigen::MatrixXd scale_prop;
  std::vector<double> chol_scratch;
  std::vector<double> params;
  std::vector<double> slices;
  std::vector<double> slices_prop;
  std::vector<double> sigma;
  std::vector<double> g;
  std::vector<double> work;
  Eigen::VectorXd backup_f;
  Eigen::VectorXd backup_z;
  Eigen::VectorXd delta;

  explicit Workspace(const Problem& p)
      : slices(static_cast<std::size_t>(p.n)),
        slices_prop(static_cast<std::size_t>(p.n)),
        sigma(static_cast<std::size_t>(p.d * p.d)),
        g(static_cast<std::size_t>(p.d)),
        work(static_cast<std::size_t>(3 * p.d * p.d)) {}
};

struct Counts {
  int theta_tries = 0, theta_accepts = 0;
  int scale_tries = 0, scale_accepts = 0;
  std::vector<int> latent_tries, latent_accepts;
};

bool factor(const Problem& p, std::span<const double> log_theta, Eigen::MatrixXd& lower, Workspace& ws) {
  ws.params.resize(log_theta.size());
  for (std::size_t i = 0; i < log_theta.size(); ++i) ws.params[i] = std::exp(log_theta[i]);
  return kernel_cholesky_into(p.model->kernel.family, ws.params, p.data.x, p.uniform, lower, ws.chol_scratch,
                              p.model->jitter) >= 0.0;
}

/// Per-slice log densities for rows from..n-1.
void compute_slices(const Problem& p, const Eigen::MatrixXd& f, const Eigen::MatrixXd& scale, Index from,
                    std::vector<double>& out, Workspace& ws) {
  const auto dd = p.d * p.d;
  for (Index i = from; i < p.n; ++i) {
    detail::slice_sigma(f.data(), p.n, i, scale, p.d, p.v, ws.sigma.data(), ws.g.data());
    out[static_cast<std::size_t>(i)] = detail::slice_log_density(
        ws.sigma.data(), p.data.scatter.data() + i * dd, p.d, p.data.subjects, ws.work.data());
  }
}

double sum_slices(const std::vector<double>& head, const std::vector<double>& tail, Index split) {
  double total = 0.0;
  for (Index i = 0; i < static_cast<Index>(head.size()); ++i) {
    total += i < split ? head[static_cast<std::size_t>(i)] : tail[static_cast<std::size_t>(i)];
  }
  return total;
}

/// Log likelihood of a particle from scratch; also refreshes ws.slices.
double full_loglik(const Problem& p, Particle& q, Workspace& ws) {
  if (p.pseudo()) return p.cfg->pseudo_log_likelihood(q.s);
  ws.scale = unpack_scale(q.s.l_params, p.d);
  compute_slices(p, q.f, ws.scale, 0, ws.slices, ws);
  return sum_slices(ws.slices, ws.slices, p.n);
}

bool accept(double log_alpha, rng::Engine& rng) {
  if (std::isnan(log_alpha)) return false;
  if (log_alpha >= 0.0) return true;
  std::uniform_real_distribution<double> unif;
  return std::log(unif(rng)) < log_alpha;
}

double tempered(double t, double delta_ll) {
  if (delta_ll == kNegInf) return kNegInf;
  return t * delta_ll;
}

struct Steps {
  std::vector<double> theta;
  std::vector<double> scale;
  std::vector<double> beta;
};

void batch_bounds(Index n, int batches, int b, Index& begin, Index& end) {
  begin = n * b / batches;
  end = n * (b + 1) / batches;
}

/// One round of mutation_steps_per_round sweeps over the blocks of one particle
/// targeting prior x likelihood^t.
void mutate(const Problem& p, Particle& q, double t, const Steps& steps, rng::Engine& rng, Workspace& ws,
            Counts& counts) {
  const auto& cfg = *p.cfg;
  const auto& kernel = p.model->kernel;
  std::normal_distribution<double> normal;
  const bool pseudo = p.pseudo();

  if (!pseudo) {
    if (!factor(p, q.s.log_theta, ws.chol, ws)) throw NumericalError("kernel Cholesky failed for an accepted state");
  }
  q.loglik = full_loglik(p, q, ws);

  for (int sweep = 0; sweep < cfg.mutation_steps_per_round; ++sweep) {
    // Hyperparameters, random walk in log space.
    {
      std::vector<double> proposal = q.s.log_theta;
      for (std::size_t i = 0; i < proposal.size(); ++i) proposal[i] += steps.theta[i] * normal(rng);
      const double prior_diff = log_prior_theta(kernel, proposal) - log_prior_theta(kernel, q.s.log_theta);
      ++counts.theta_tries;
      if (pseudo) {
        ParticleState trial = q.s;
        trial.log_theta = proposal;
        const double ll = cfg.pseudo_log_likelihood(trial);
        if (accept(prior_diff + tempered(t, ll - q.loglik), rng)) {
          q.s.log_theta = std::move(proposal);
          q.loglik = ll;
          ++counts.theta_accepts;
        }
      } else if (factor(p, proposal, ws.chol_prop, ws)) {
        ws.f_prop.noalias() = ws.chol_prop.triangularView<Eigen::Lower>() * q.s.z;
        compute_slices(p, ws.f_prop, ws.scale, 0, ws.slices_prop, ws);
        const double ll = sum_slices(ws.slices_prop, ws.slices_prop, p.n);
        if (accept(prior_diff + tempered(t, ll - q.loglik), rng)) {
          q.s.log_theta = std::move(proposal);
          std::swap(ws.chol, ws.chol_prop);
          std::swap(q.f, ws.f_prop);
          std::swap(ws.slices, ws.slices_prop);
          q.loglik = ll;
          ++counts.theta_accepts;
        }
      }
    }

    // Scale factor entries.
    for (int m = 0; m < cfg.scale_moves; ++m) {
      std::vector<double> proposal = q.s.l_params;
      for (std::size_t i = 0; i < proposal.size(); ++i) proposal[i] += steps.scale[i] * normal(rng);
      const double prior_diff = log_prior_scale(proposal, p.d) - log_prior_scale(q.s.l_params, p.d);
      ++counts.scale_tries;
      double ll;
      if (pseudo) {
        ParticleState trial = q.s;
        trial.l_params = proposal;
        ll = cfg.pseudo_log_likelihood(trial);
      } else {
        ws.scale_prop = unpack_scale(proposal, p.d);
        compute_slices(p, q.f, ws.scale_prop, 0, ws.slices_prop, ws);
        ll = sum_slices(ws.slices_prop, ws.slices_prop, p.n);
      }
      if (accept(prior_diff + tempered(t, ll - q.loglik), rng)) {
        q.s.l_params = std::move(proposal);
        if (!pseudo) {
          std::swap(ws.scale, ws.scale_prop);
          std::swap(ws.slices, ws.slices_prop);
        }
        q.loglik = ll;
        ++counts.scale_accepts;
      }
    }

    // Whitened latents: preconditioned Crank-Nicolson per (series, time batch),
    // which leaves the N(0, I) prior invariant so only the likelihood enters.
    for (Index c = 0; c < p.cols; ++c) {
      for (int b = 0; b < cfg.latent_batches; ++b) {
        Index begin = 0, end = 0;
        batch_bounds(p.n, cfg.latent_batches, b, begin, end);
        const Index len = end - begin;
        if (len == 0) continue;
        const double beta = steps.beta[static_cast<std::size_t>(b)];
        const double rho = std::sqrt(1.0 - beta * beta);
        ws.delta.resize(len);
        for (Index r = 0; r < len; ++r) ws.delta[r] = (rho - 1.0) * q.s.z(begin + r, c) + beta * normal(rng);

        ws.backup_z = q.s.z.col(c).segment(begin, len);
        q.s.z.col(c).segment(begin, len) += ws.delta;
        ++counts.latent_tries[static_cast<std::size_t>(b)];
        double ll;
        if (pseudo) {
          ll = cfg.pseudo_log_likelihood(q.s);
        } else {
          ws.backup_f = q.f.col(c).tail(p.n - begin);
          q.f.col(c).tail(p.n - begin).noalias() +=
              ws.chol.block(begin, begin, p.n - begin, len) * ws.delta;
          compute_slices(p, q.f, ws.scale, begin, ws.slices_prop, ws);
          ll = sum_slices(ws.slices, ws.slices_prop, begin);
        }
        if (accept(tempered(t, ll - q.loglik), rng)) {
          q.loglik = ll;
          if (!pseudo) {
            std::copy(ws.slices_prop.begin() + begin, ws.slices_prop.end(), ws.slices.begin() + begin);
          }
          ++counts.latent_accepts[static_cast<std::size_t>(b)];
        } else {
          q.s.z.col(c).segment(begin, len) = ws.backup_z;
          if (!pseudo) q.f.col(c).tail(p.n - begin) = ws.backup_f;
        }
      }
    }
  }
}

/// Population standard deviation per coordinate, floored.
std::vector<double> spread(const std::vector<Particle>& ps, const std::vector<double>& w, bool theta) {
  const auto& first = theta ? ps.front().s.log_theta : ps.front().s.l_params;
  std::vector<double> mean(first.size(), 0.0), sq(first.size(), 0.0);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& v = theta ? ps[i].s.log_theta : ps[i].s.l_params;
    for (std::size_t k = 0; k < v.size(); ++k) mean[k] += w[i] * v[k];
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& v = theta ? ps[i].s.log_theta : ps[i].s.l_params;
    for (std::size_t k = 0; k < v.size(); ++k) sq[k] += w[i] * (v[k] - mean[k]) * (v[k] - mean[k]);
  }
  for (auto& s : sq) s = std::max(std::sqrt(s), 1e-3);
  return sq;
}

std::vector<double> normalized(const std::vector<double>& log_w) {
  const double mx = *std::max_element(log_w.begin(), log_w.end());
  std::vector<double> w(log_w.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = mx == kNegInf ? 1.0 : std::exp(log_w[i] - mx);
    total += w[i];
  }
  for (auto& x : w) x /= total;
  return w;
}

double relative_ess(const std::vector<double>& log_w) {
  const auto w = normalized(log_w);
  double sq = 0.0;
  for (double x : w) sq += x * x;
  return 1.0 / (sq * static_cast<double>(w.size()));
}

std::vector<double> reweighted(const Chain& ch, double dt) {
  std::vector<double> out(ch.log_weights.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double ll = ch.particles[i].loglik;
    out[i] = ll == kNegInf ? kNegInf : ch.log_weights[i] + dt * ll;
  }
  return out;
}

/// Largest increment (up to the remaining distance) whose reweighted ESS stays at the threshold.
double next_increment(const Chain& ch, double remaining, double threshold) {
  if (relative_ess(reweighted(ch, remaining)) >= threshold) return remaining;
  double lo = 0.0, hi = remaining;
  for (int it = 0; it < 100 && hi - lo > 1e-14 * remaining; ++it) {
    const double mid = 0.5 * (lo + hi);
    (relative_ess(reweighted(ch, mid)) >= threshold ? lo : hi) = mid;
  }
  return std::max(lo, 1e-12 * remaining);
}

void systematic_resample(Chain& ch, rng::Engine& rng) {
  const auto w = normalized(ch.log_weights);
  const std::size_t count = w.size();
  std::uniform_real_distribution<double> unif;
  const double u0 = unif(rng) / static_cast<double>(count);
  std::vector<Particle> out;
  out.reserve(count);
  double cum = w[0];
  std::size_t j = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const double u = u0 + static_cast<double>(i) / static_cast<double>(count);
    while (u > cum && j + 1 < count) cum += w[++j];
    out.push_back(ch.particles[j]);
  }
  ch.particles = std::move(out);
  std::fill(ch.log_weights.begin(), ch.log_weights.end(), 0.0);
  ++ch.diag.resamples;
}

double adapt(double step, double rate, double lo, double hi) {
  return std::clamp(step * std::exp(2.0 * (rate - 0.3)), lo, hi);
}

/// Mutates every particle of the chain at its current temperature and adapts the step sizes.
void mutation_round(const Problem& p, Chain& ch, int stage_id) {
  const auto& cfg = *p.cfg;
  const auto w = normalized(ch.log_weights);
  Steps steps;
  steps.theta = spread(ch.particles, w, true);
  for (auto& s : steps.theta) s *= ch.theta_step;
  steps.scale = spread(ch.particles, w, false);
  for (auto& s : steps.scale) s *= ch.scale_step;
  steps.beta = ch.beta;

  const auto count = static_cast<long>(ch.particles.size());
  std::vector<Counts> counts(ch.particles.size());
  for (auto& c : counts) {
    c.latent_tries.assign(static_cast<std::size_t>(cfg.latent_batches), 0);
    c.latent_accepts.assign(static_cast<std::size_t>(cfg.latent_batches), 0);
  }
  std::string failure;
#pragma omp parallel
  {
    Workspace ws(p);
#pragma omp for schedule(dynamic)
    for (long i = 0; i < count; ++i) {
      auto rng = rng::make_engine(p.seed, {rng::tag(rng::Purpose::chains), static_cast<std::uint64_t>(ch.index),
                                           static_cast<std::uint64_t>(stage_id), static_cast<std::uint64_t>(i)});
      try {
        mutate(p, ch.particles[static_cast<std::size_t>(i)], ch.temperature, steps, rng, ws,
               counts[static_cast<std::size_t>(i)]);
      } catch (const std::exception& e) {
#pragma omp critical
        failure = e.what();
      }
    }
  }
  if (!failure.empty()) throw NumericalError(failure);

  Counts total;
  total.latent_tries.assign(static_cast<std::size_t>(cfg.latent_batches), 0);
  total.latent_accepts.assign(static_cast<std::size_t>(cfg.latent_batches), 0);
  for (const auto& c : counts) {
    total.theta_tries += c.theta_tries;
    total.theta_accepts += c.theta_accepts;
    total.scale_tries += c.scale_tries;
    total.scale_accepts += c.scale_accepts;
    for (std::size_t b = 0; b < c.latent_tries.size(); ++b) {
      total.latent_tries[b] += c.latent_tries[b];
      total.latent_accepts[b] += c.latent_accepts[b];
    }
  }
  const auto rate = [](int acc, int tries) { return tries > 0 ? static_cast<double>(acc) / tries : 0.3; };
  const double theta_rate = rate(total.theta_accepts, total.theta_tries);
  const double scale_rate = rate(total.scale_accepts, total.scale_tries);
  ch.theta_step = adapt(ch.theta_step, theta_rate, 1e-3, 5.0);
  ch.scale_step = adapt(ch.scale_step, scale_rate, 1e-3, 5.0);
  int lat_acc = 0, lat_tries = 0;
  for (std::size_t b = 0; b < ch.beta.size(); ++b) {
    ch.beta[b] = adapt(ch.beta[b], rate(total.latent_accepts[b], total.latent_tries[b]), 1e-4, 1.0);
    lat_acc += total.latent_accepts[b];
    lat_tries += total.latent_tries[b];
  }
  ch.diag.theta_acceptance.push_back(theta_rate);
  ch.diag.scale_acceptance.push_back(scale_rate);
  ch.diag.latent_acceptance.push_back(rate(lat_acc, lat_tries));
}

void initialize(const Problem& p, Chain& ch) {
  const auto count = static_cast<long>(p.cfg->particles);
  ch.particles.assign(static_cast<std::size_t>(count), {});
  ch.log_weights.assign(static_cast<std::size_t>(count), 0.0);
  ch.beta.assign(static_cast<std::size_t>(p.cfg->latent_batches), 0.5);
  std::string failure;
#pragma omp parallel
  {
    Workspace ws(p);
#pragma omp for schedule(dynamic)
    for (long i = 0; i < count; ++i) {
      auto rng = rng::make_engine(p.seed, {rng::tag(rng::Purpose::chains), static_cast<std::uint64_t>(ch.index), 0u,
                                           static_cast<std::uint64_t>(i)});
      try {
        auto draw = sample_prior(*p.model, p.data.x, rng);
        auto& q = ch.particles[static_cast<std::size_t>(i)];
        q.s = std::move(draw.state);
        if (!factor(p, q.s.log_theta, ws.chol, ws)) throw NumericalError("kernel Cholesky failed for a prior draw");
        q.f.noalias() = ws.chol.triangularView<Eigen::Lower>() * q.s.z;
        q.loglik = full_loglik(p, q, ws);
      } catch (const std::exception& e) {
#pragma omp critical
        failure = e.what();
      }
    }
  }
  if (!failure.empty()) throw NumericalError(failure);
}

/// Reweight to the next temperature, resample when the ESS falls to the
/// threshold (and always on reaching the target), then mutate.
void advance(const Problem& p, Chain& ch) {
  const auto& cfg = *p.cfg;
  const double remaining = cfg.target_temperature - ch.temperature;
  const double dt = next_increment(ch, remaining, cfg.ess_threshold);
  ch.log_weights = reweighted(ch, dt);
  ch.temperature = dt >= remaining ? cfg.target_temperature : ch.temperature + dt;
  ++ch.stage;
  const double ess = relative_ess(ch.log_weights);
  ch.diag.temperatures.push_back(ch.temperature);
  ch.diag.ess.push_back(ess);
  if (ess * static_cast<double>(ch.particles.size()) < 2.0) ++ch.diag.degenerate_events;
  const bool reached = ch.temperature >= cfg.target_temperature;
  if (ess <= cfg.ess_threshold * (1.0 + 1e-9) || reached) {
    auto rng = rng::make_engine(p.seed, {rng::tag(rng::Purpose::chains), static_cast<std::uint64_t>(ch.index),
                                         static_cast<std::uint64_t>(ch.stage), kResampleStream});
    systematic_resample(ch, rng);
  }
  mutation_round(p, ch, ch.stage);
  if (reached) ch.tempered = true;
}

// ---- serialization ----

json::binary_t to_binary(const Eigen::MatrixXd& m) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(m.size()) * sizeof(double));
  if (!bytes.empty()) std::memcpy(bytes.data(), m.data(), bytes.size());
  return json::binary_t(std::move(bytes));
}

Eigen::MatrixXd from_binary(const json& j, Index rows, Index cols) {
  const auto& bytes = j.get_binary();
  if (bytes.size() != static_cast<std::size_t>(rows * cols) * sizeof(double)) {
    throw ParseError("matrix payload has the wrong size");
  }
  Eigen::MatrixXd m(rows, cols);
  if (!bytes.empty()) std::memcpy(m.data(), bytes.data(), bytes.size());
  return m;
}

json state_to_json(const ParticleState& s) {
  return {{"log_theta", s.log_theta},
          {"l_params", s.l_params},
          {"rows", s.z.rows()},
          {"cols", s.z.cols()},
          {"z", to_binary(s.z)},
          {"log_weight", s.log_weight}};
}

ParticleState state_from_json(const json& j) {
  ParticleState s;
  s.log_theta = j.at("log_theta").get<std::vector<double>>();
  s.l_params = j.at("l_params").get<std::vector<double>>();
  s.z = from_binary(j.at("z"), j.at("rows").get<Index>(), j.at("cols").get<Index>());
  s.log_weight = j.at("log_weight").get<double>();
  return s;
}

json model_to_json(const WishartModel& m) {
  return {{"d", m.d},
          {"dof", m.dof},
          {"kernel", m.kernel},
          {"jitter", {{"initial", m.jitter.initial}, {"factor", m.jitter.factor}, {"maximum", m.jitter.maximum}}}};
}

WishartModel model_from_json(const json& j) {
  WishartModel m;
  m.d = j.at("d").get<Index>();
  m.dof = j.at("dof").get<Index>();
  m.kernel = j.at("kernel").get<KernelSpec>();
  m.jitter.initial = j.at("jitter").at("initial").get<double>();
  m.jitter.factor = j.at("jitter").at("factor").get<double>();
  m.jitter.maximum = j.at("jitter").at("maximum").get<double>();
  return m;
}

json diag_to_json(const ChainDiagnostics& d) {
  return {{"temperatures", d.temperatures},         {"ess", d.ess},
          {"theta_acceptance", d.theta_acceptance}, {"scale_acceptance", d.scale_acceptance},
          {"latent_acceptance", d.latent_acceptance}, {"resamples", d.resamples},
          {"degenerate_events", d.degenerate_events}};
}

ChainDiagnostics diag_from_json(const json& j) {
  ChainDiagnostics d;
  d.temperatures = j.at("temperatures").get<std::vector<double>>();
  d.ess = j.at("ess").get<std::vector<double>>();
  d.theta_acceptance = j.at("theta_acceptance").get<std::vector<double>>();
  d.scale_acceptance = j.at("scale_acceptance").get<std::vector<double>>();
  d.latent_acceptance = j.at("latent_acceptance").get<std::vector<double>>();
  d.resamples = j.at("resamples").get<int>();
  d.degenerate_events = j.at("degenerate_events").get<int>();
  return d;
}

json signature(const Problem& p) {
  const auto& c = *p.cfg;
  return {{"version", kFormatVersion},
          {"seed", p.seed},
          {"particles", c.particles},
          {"chains", c.chains},
          {"n", p.n},
          {"d", p.d},
          {"dof", p.v},
          {"subjects", p.data.subjects},
          {"kernel", p.model->kernel},
          {"target_temperature", c.target_temperature},
          {"ess_threshold", c.ess_threshold},
          {"mutation_steps_per_round", c.mutation_steps_per_round},
          {"latent_batches", c.latent_batches},
          {"scale_moves", c.scale_moves}};
}

void write_cbor(const json& j, const std::filesystem::path& path) {
  const auto bytes = json::to_cbor(j);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

json read_cbor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return json::from_cbor(bytes);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_checkpoint(const Problem& p, const std::vector<Chain>& chains, int extra_rounds) {
  json j;
  j["signature"] = signature(p);
  j["extra_rounds"] = extra_rounds;
  auto& arr = j["chains"] = json::array();
  for (const auto& ch : chains) {
    json c;
    c["index"] = ch.index;
    c["temperature"] = ch.temperature;
    c["stage"] = ch.stage;
    c["tempered"] = ch.tempered;
    c["theta_step"] = ch.theta_step;
    c["scale_step"] = ch.scale_step;
    c["beta"] = ch.beta;
    c["log_weights"] = ch.log_weights;
    c["diagnostics"] = diag_to_json(ch.diag);
    auto& ps = c["particles"] = json::array();
    for (const auto& q : ch.particles) {
      json pj = state_to_json(q.s);
      pj["f"] = to_binary(q.f);
      pj["loglik"] = q.loglik;
      ps.push_back(std::move(pj));
    }
    arr.push_back(std::move(c));
  }
  write_cbor(j, p.cfg->checkpoint);
}

bool load_checkpoint(const Problem& p, std::vector<Chain>& chains, int& extra_rounds) {
  if (p.cfg->checkpoint.empty() || !std::filesystem::exists(p.cfg->checkpoint)) return false;
  const json j = read_cbor(p.cfg->checkpoint);
  if (j.at("signature") != signature(p)) {
    throw ConfigError("checkpoint " + p.cfg->checkpoint.string() + " was written for a different run");
  }
  extra_rounds = j.at("extra_rounds").get<int>();
  chains.clear();
  for (const auto& c : j.at("chains")) {
    Chain ch;
    ch.index = c.at("index").get<int>();
    ch.temperature = c.at("temperature").get<double>();
    ch.stage = c.at("stage").get<int>();
    ch.tempered = c.at("tempered").get<bool>();
    ch.theta_step = c.at("theta_step").get<double>();
    ch.scale_step = c.at("scale_step").get<double>();
    ch.beta = c.at("beta").get<std::vector<double>>();
    ch.log_weights = c.at("log_weights").get<std::vector<double>>();
    ch.diag = diag_from_json(c.at("diagnostics"));
    for (const auto& pj : c.at("particles")) {
      Particle q;
      q.s = state_from_json(pj);
      q.f = from_binary(pj.at("f"), q.s.z.rows(), q.s.z.cols());
      q.loglik = pj.at("loglik").get<double>();
      ch.particles.push_back(std::move(q));
    }
    chains.push_back(std::move(ch));
  }
  return true;
}

// ---- convergence ----

/// Max R-hat over every upper-triangle entry of every slice, particles as draws.
double trajectory_rhat(const Problem& p, const std::vector<Chain>& chains) {
  const std::size_t count = chains.front().particles.size();
  const Index entries = p.d * (p.d + 1) / 2;
  // values[chain][entry * n + i][particle]
  std::vector<std::vector<std::vector<double>>> values(
      chains.size(), std::vector<std::vector<double>>(static_cast<std::size_t>(entries * p.n), std::vector<double>(count)));
  std::vector<double> sigma(static_cast<std::size_t>(p.d * p.d)), g(static_cast<std::size_t>(p.d));
  for (std::size_t c = 0; c < chains.size(); ++c) {
    for (std::size_t q = 0; q < count; ++q) {
      const auto& part = chains[c].particles[q];
      const Eigen::MatrixXd scale = unpack_scale(part.s.l_params, p.d);
      for (Index i = 0; i < p.n; ++i) {
        detail::slice_sigma(part.f.data(), p.n, i, scale, p.d, p.v, sigma.data(), g.data());
        Index e = 0;
        for (Index a = 0; a < p.d; ++a) {
          for (Index b = a; b < p.d; ++b, ++e) values[c][static_cast<std::size_t>(e * p.n + i)][q] = sigma[a * p.d + b];
        }
      }
    }
  }
  double worst = 1.0;
  std::vector<std::vector<double>> per_chain(chains.size());
  for (std::size_t k = 0; k < static_cast<std::size_t>(entries * p.n); ++k) {
    for (std::size_t c = 0; c < chains.size(); ++c) per_chain[c] = values[c][k];
    const double r = rhat(per_chain);
    if (std::isnan(r) || r > worst) worst = std::isnan(r) ? std::numeric_limits<double>::infinity() : r;
  }
  return worst;
}

std::vector<double> hyper_rhat(const std::vector<Chain>& chains) {
  std::vector<double> out;
  const auto& first = chains.front().particles.front().s;
  const std::size_t dims = first.log_theta.size() + first.l_params.size();
  std::vector<std::vector<double>> per_chain(chains.size());
  for (std::size_t k = 0; k < dims; ++k) {
    for (std::size_t c = 0; c < chains.size(); ++c) {
      per_chain[c].clear();
      for (const auto& q : chains[c].particles) {
        per_chain[c].push_back(k < first.log_theta.size() ? q.s.log_theta[k]
                                                          : q.s.l_params[k - first.log_theta.size()]);
      }
    }
    out.push_back(rhat(per_chain));
  }
  return out;
}

PosteriorEnsemble run(const WishartModel& model, ScatterData data, const SmcConfig& cfg, std::uint64_t seed) {
  model.validate();
  cfg.validate();
  if (data.d != model.d) {
    throw ShapeError("data have " + std::to_string(data.d) + " channels but the model expects " +
                     std::to_string(model.d));
  }
  Problem p;
  p.model = &model;
  p.cfg = &cfg;
  p.data = std::move(data);
  p.uniform = is_uniform_grid(p.data.x);
  p.n = p.data.n;
  p.d = model.d;
  p.v = model.degrees_of_freedom();
  p.cols = p.v * p.d;
  p.seed = rng::derive(seed, {rng::tag(rng::Purpose::smc)});

  PosteriorEnsemble ens;
  ens.model = model;
  ens.x = p.data.x;

  std::vector<Chain> chains;
  int extra_rounds = 0;
  if (load_checkpoint(p, chains, extra_rounds)) {
    ens.log.push_back("resumed from checkpoint " + cfg.checkpoint.string());
  } else {
    chains.resize(static_cast<std::size_t>(cfg.chains));
    for (int c = 0; c < cfg.chains; ++c) {
      chains[static_cast<std::size_t>(c)].index = c;
      initialize(p, chains[static_cast<std::size_t>(c)]);
      if (cfg.target_temperature <= 0.0) chains[static_cast<std::size_t>(c)].tempered = true;
    }
  }

  int stages_this_call = 0;
  int since_checkpoint = 0;
  const auto maybe_stop = [&]() {
    ++stages_this_call;
    ++since_checkpoint;
    const bool stop = cfg.stop_after_stages >= 0 && stages_this_call >= cfg.stop_after_stages;
    if (!cfg.checkpoint.empty() && (stop || since_checkpoint >= cfg.checkpoint_every)) {
      save_checkpoint(p, chains, extra_rounds);
      since_checkpoint = 0;
    }
    return stop;
  };

  for (auto& ch : chains) {
    while (!ch.tempered) {
      advance(p, ch);
      if (maybe_stop()) {
        ens.complete = false;
        ens.log.push_back("stopped after " + std::to_string(stages_this_call) + " stages");
        return ens;
      }
    }
  }

  if (chains.size() >= 2) {
    double worst = trajectory_rhat(p, chains);
    while (!(worst < cfg.rhat_target) && extra_rounds < cfg.max_extra_rounds) {
      ++extra_rounds;
      for (auto& ch : chains) mutation_round(p, ch, static_cast<int>(kGateStageOffset) + extra_rounds);
      worst = trajectory_rhat(p, chains);
      if (maybe_stop()) {
        ens.complete = false;
        return ens;
      }
    }
    ens.max_rhat = worst;
    ens.converged = worst < cfg.rhat_target;
    ens.hyper_rhat = hyper_rhat(chains);
    if (!ens.converged) {
      ens.log.push_back("R-hat " + std::to_string(worst) + " still above " + std::to_string(cfg.rhat_target) +
                        " after " + std::to_string(extra_rounds) + " extra mutation rounds");
    }
  } else {
    ens.max_rhat = std::numeric_limits<double>::quiet_NaN();
    ens.converged = true;
    ens.log.push_back("single chain: R-hat gate skipped");
  }
  ens.extra_rounds = extra_rounds;

  for (const auto& ch : chains) {
    const auto w = normalized(ch.log_weights);
    for (std::size_t q = 0; q < ch.particles.size(); ++q) {
      ParticleState s = ch.particles[q].s;
      s.log_weight = std::log(w[q]) - std::log(static_cast<double>(chains.size()));
      ens.particles.push_back(std::move(s));
      ens.weights.push_back(w[q] / static_cast<double>(chains.size()));
      ens.chain_of.push_back(ch.index);
    }
    ens.chains.push_back(ch.diag);
    if (ch.diag.degenerate_events > 0) {
      ens.log.push_back("chain " + std::to_string(ch.index) + ": " + std::to_string(ch.diag.degenerate_events) +
                        " degenerate reweighting steps");
    }
  }
  if (!cfg.checkpoint.empty()) save_checkpoint(p, chains, extra_rounds);
  return ens;
}

}  // namespace

PosteriorEnsemble smc_infer(const WishartModel& model, const TimeSeries& data, const SmcConfig& cfg,
                            std::uint64_t seed) {
  return run(model, ScatterData::from(data), cfg, seed);
}

PosteriorEnsemble smc_infer(const WishartModel& model, const MultiSubjectSeries& data, const SmcConfig& cfg,
                            std::uint64_t seed) {
  return run(model, ScatterData::from(data), cfg, seed);
}

void save_ensemble(const PosteriorEnsemble& ens, const std::filesystem::path& path) {
  json j;
  j["version"] = kFormatVersion;
  j["model"] = model_to_json(ens.model);
  j["x"] = ens.x;
  j["weights"] = ens.weights;
  j["chain_of"] = ens.chain_of;
  j["complete"] = ens.complete;
  j["converged"] = ens.converged;
  j["max_rhat"] = ens.max_rhat;
  j["hyper_rhat"] = ens.hyper_rhat;
  j["extra_rounds"] = ens.extra_rounds;
  j["log"] = ens.log;
  auto& ps = j["particles"] = json::array();
  for (const auto& s : ens.particles) ps.push_back(state_to_json(s));
  auto& cs = j["chains"] = json::array();
  for (const auto& c : ens.chains) cs.push_back(diag_to_json(c));
  write_cbor(j, path);
}

PosteriorEnsemble load_ensemble(const std::filesystem::path& path) {
  const json j = read_cbor(path);
  try {
    if (j.at("version").get<int>() != kFormatVersion) throw ParseError("unsupported ensemble version");
    PosteriorEnsemble ens;
    ens.model = model_from_json(j.at("model"));
    ens.x = j.at("x").get<std::vector<double>>();
    ens.weights = j.at("weights").get<std::vector<double>>();
    ens.chain_of = j.at("chain_of").get<std::vector<int>>();
    ens.complete = j.at("complete").get<bool>();
    ens.converged = j.at("converged").get<bool>();
    ens.max_rhat = j.at("max_rhat").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("max_rhat").get<double>();
    ens.hyper_rhat = j.at("hyper_rhat").get<std::vector<double>>();
    ens.extra_rounds = j.at("extra_rounds").get<int>();
    ens.log = j.at("log").get<std::vector<std::string>>();
    for (const auto& pj : j.at("particles")) ens.particles.push_back(state_from_json(pj));
    for (const auto& cj : j.at("chains")) ens.chains.push_back(diag_from_json(cj));
    return ens;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace dynconn
