#include "dynconn/surrogate.hpp"

#include <cmath>
#include <complex>
#include <numbers>

#include "dynconn/error.hpp"
#include "dynconn/fft.hpp"

namespace dynconn {

void SurrogateConfig::validate() const {
  if (num_surrogates < 1) throw ConfigError("need at least one surrogate");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (statistics.empty()) throw ConfigError("no test statistic configured");
}

const EdgeTest& FrequentistResult::find(Index j, Index k, StatisticKind s) const {
  for (const auto& e : edges) {
    if (e.j == j && e.k == k && e.statistic == s) return e;
  }
  throw UsageError("no test result for the requested edge and statistic");
}

PhaseDraw draw_phases(Index n, rng::Engine& rng) {
  PhaseDraw draw;
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  const Index bins = (n - 1) / 2;  // q with 1 <= q < n/2
  draw.phases.resize(static_cast<std::size_t>(std::max<Index>(bins, 0)));
  for (double& p : draw.phases) p = angle(rng);
  if (n % 2 == 0) {
    std::bernoulli_distribution coin(0.5);
    draw.nyquist_sign = coin(rng) ? 1.0 : -1.0;
  }
  return draw;
}

TimeSeries apply_phases(const TimeSeries& ts, const PhaseDraw& draw) {
  const auto n = static_cast<std::size_t>(ts.n());
  TimeSeries out = ts;
  std::vector<double> column(n);
  for (Index j = 0; j < ts.d(); ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = ts.values(static_cast<Index>(i), j);
    auto spec = fft::forward(column);
    for (std::size_t q = 1; q <= draw.phases.size(); ++q) spec[q] *= std::polar(1.0, draw.phases[q - 1]);
    if (n % 2 == 0) spec[n / 2] *= draw.nyquist_sign;
    const auto back = fft::inverse(spec, n);
    for (std::size_t i = 0; i < n; ++i) out.values(static_cast<Index>(i), j) = back[i];
  }
  return out;
}

TimeSeries phase_randomize(const TimeSeries& ts, rng::Engine& rng) {
  return apply_phases(ts, draw_phases(ts.n(), rng));
}

double add_one_p_value(double observed, std::span<const double> null) {
  std::size_t exceed = 0;
  for (double v : null) exceed += v >= observed ? 1 : 0;
  return static_cast<double>(1 + exceed) / static_cast<double>(1 + null.size());
}

std::vector<FrequentistResult> frequentist_test(const TimeSeries& ts, std::span<const WindowConfig> windows,
                                                const SurrogateConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ts.validate();
  if (windows.empty()) throw ConfigError("no window configuration given");
  for (const auto& w : windows) (void)w.resolve(ts.n());

  const Index d = ts.d();
  const std::size_t edges = static_cast<std::size_t>(d * (d - 1) / 2);
  const std::size_t stats = cfg.statistics.size();
  const std::size_t per_window = edges * stats;
  const std::size_t per_surrogate = per_window * windows.size();

  auto summarize = [&](const CovarianceTrajectory& t, double* dst) {
    std::size_t e = 0;
    for (Index j = 0; j < d; ++j) {
      for (Index k = j + 1; k < d; ++k, ++e) {
        const auto series = t.edge(j, k);
        for (std::size_t s = 0; s < stats; ++s) {
          dst[e * stats + s] = compute_statistic(cfg.statistics[s], series, cfg.options);
        }
      }
    }
  };

  std::vector<FrequentistResult> results(windows.size());
  std::vector<double> observed(per_surrogate);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    results[w].observed_estimate = estimate(ts, windows[w]);
    summarize(results[w].observed_estimate, observed.data() + w * per_window);
  }

  const int count = cfg.num_surrogates;
  std::vector<double> null(per_surrogate * static_cast<std::size_t>(count));
#pragma omp parallel for schedule(dynamic)
  for (int b = 0; b < count; ++b) {
    auto rng = rng::make_engine(seed, {rng::tag(rng::Purpose::surrogates), static_cast<std::uint64_t>(b)});
    const auto surrogate = phase_randomize(ts, rng);
    for (std::size_t w = 0; w < windows.size(); ++w) {
      summarize(estimate(surrogate, windows[w]), null.data() + static_cast<std::size_t>(b) * per_surrogate + w * per_window);
    }
  }

  for (std::size_t w = 0; w < windows.size(); ++w) {
    std::size_t e = 0;
    for (Index j = 0; j < d; ++j) {
      for (Index k = j + 1; k < d; ++k, ++e) {
        for (std::size_t s = 0; s < stats; ++s) {
          EdgeTest t;
          t.j = j;
          t.k = k;
          t.statistic = cfg.statistics[s];
          const std::size_t slot = w * per_window + e * stats + s;
          t.observed = observed[slot];
          t.null.resize(static_cast<std::size_t>(count));
          for (int b = 0; b < count; ++b) t.null[static_cast<std::size_t>(b)] = null[static_cast<std::size_t>(b) * per_surrogate + slot];
          t.p_value = add_one_p_value(t.observed, t.null);
          t.is_dynamic = t.p_value < cfg.alpha;
          results[w].edges.push_back(std::move(t));
        }
      }
    }
  }
  return results;
}

FrequentistResult frequentist_test(const TimeSeries& ts, const WindowConfig& window, const SurrogateConfig& cfg,
                                   std::uint64_t seed) {
  return std::move(frequentist_test(ts, std::span(&window, 1), cfg, seed).front());
}

namespace reference {

TimeSeries apply_phases_dft(const TimeSeries& ts, const PhaseDraw& draw) {
  using C = std::complex<double>;
  const Index n = ts.n();
  TimeSeries out = ts;
  const double w0 = -2.0 * std::numbers::pi / static_cast<double>(n);
  for (Index j = 0; j < ts.d(); ++j) {
    std::vector<C> spec(static_cast<std::size_t>(n));
    for (Index q = 0; q < n; ++q) {
      C acc = 0.0;
      for (Index t = 0; t < n; ++t) acc += ts.values(t, j) * std::polar(1.0, w0 * static_cast<double>(q * t % n));
      spec[static_cast<std::size_t>(q)] = acc;
    }
    for (Index q = 1; q < n; ++q) {
      const Index mirror = n - q;
      if (2 * q == n) {
        spec[static_cast<std::size_t>(q)] *= draw.nyquist_sign;
      } else if (2 * q < n) {
        spec[static_cast<std::size_t>(q)] *= std::polar(1.0, draw.phases[static_cast<std::size_t>(q - 1)]);
      } else {
        spec[static_cast<std::size_t>(q)] *= std::polar(1.0, -draw.phases[static_cast<std::size_t>(mirror - 1)]);
      }
    }
    for (Index t = 0; t < n; ++t) {
      C acc = 0.0;
      for (Index q = 0; q < n; ++q) acc += spec[static_cast<std::size_t>(q)] * std::polar(1.0, -w0 * static_cast<double>(q * t % n));
      out.values(t, j) = acc.real() / static_cast<double>(n);
    }
  }
  return out;
}

}  // namespace reference

}  // namespace dynconn
