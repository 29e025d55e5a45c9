#pragma once

#include <complex>
#include <span>
#include <vector>

namespace dynconn::fft {

using Complex = std::complex<double>;

/// Half spectrum X_q = sum_t x_t exp(-2 pi i q t / n), q = 0..n/2 (unnormalized).
[[nodiscard]] std::vector<Complex> forward(std::span<const double> signal);

/// Inverse of `forward` for a length-n real signal (includes the 1/n factor).
[[nodiscard]] std::vector<double> inverse(std::span<const Complex> half_spectrum, std::size_t n);

/// |X_q|^2 for q = 0..n/2.
[[nodiscard]] std::vector<double> power_spectrum(std::span<const double> signal);

}  // namespace dynconn::fft
