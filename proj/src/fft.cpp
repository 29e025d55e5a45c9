#include "dynconn/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <utility>

namespace dynconn::fft {

namespace {

// FFTW's planner is not thread-safe; plans are created once per size under a
// lock and afterwards executed concurrently through the new-array interface.
struct Plans {
  fftw_plan r2c = nullptr;
  fftw_plan c2r = nullptr;
};

class PlanCache {
public:
  ~PlanCache() {
    for (auto& [n, p] : plans_) {
      fftw_destroy_plan(p.r2c);
      fftw_destroy_plan(p.c2r);
    }
  }

  Plans get(std::size_t n) {
    std::lock_guard lock(mutex_);
    if (auto it = plans_.find(n); it != plans_.end()) return it->second;
    std::vector<double> real(n);
    std::vector<Complex> spec(n / 2 + 1);
    auto* c = reinterpret_cast<fftw_complex*>(spec.data());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    Plans p;
    p.r2c = fftw_plan_dft_r2c_1d(static_cast<int>(n), real.data(), c, flags);
    p.c2r = fftw_plan_dft_c2r_1d(static_cast<int>(n), c, real.data(), flags | FFTW_DESTROY_INPUT);
    plans_.emplace(n, p);
    return p;
  }

private:
  std::mutex mutex_;
  std::map<std::size_t, Plans> plans_;
};

PlanCache& cache() {
  static PlanCache c;
  return c;
}

}  // namespace

std::vector<Complex> forward(std::span<const double> signal) {
  const std::size_t n = signal.size();
  std::vector<Complex> out(n / 2 + 1);
  if (n == 0) return out;
  std::vector<double> in(signal.begin(), signal.end());
  fftw_execute_dft_r2c(cache().get(n).r2c, in.data(), reinterpret_cast<fftw_complex*>(out.data()));
  return out;
}

std::vector<double> inverse(std::span<const Complex> half_spectrum, std::size_t n) {
  std::vector<double> out(n);
  if (n == 0) return out;
  std::vector<Complex> in(half_spectrum.begin(), half_spectrum.end());
  in.resize(n / 2 + 1);
  fftw_execute_dft_c2r(cache().get(n).c2r, reinterpret_cast<fftw_complex*>(in.data()), out.data());
  const double scale = 1.0 / static_cast<double>(n);
  for (double& v : out) v *= scale;
  return out;
}

std::vector<double> power_spectrum(std::span<const double> signal) {
  const auto spec = forward(signal);
  std::vector<double> power(spec.size());
  for (std::size_t q = 0; q < spec.size(); ++q) power[q] = std::norm(spec[q]);
  return power;
}

}  // namespace dynconn::fft
