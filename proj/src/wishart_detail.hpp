#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>

namespace dynconn::detail {

inline constexpr double kLog2Pi = 1.8378770664093453;

/// Sum over `subjects` observations of log MVN(y; 0, sigma) written through the
/// scatter matrix S = sum y y^T. Both matrices are d x d, symmetric, any storage
/// order. `work` holds 3 d^2 doubles. Returns -inf when sigma is not positive definite.
inline double slice_log_density(const double* sigma, const double* scatter, Eigen::Index d, int subjects,
                                double* work) {
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  if (d == 2) {
    const double a = sigma[0], b = sigma[1], c = sigma[3];
    const double det = a * c - b * b;
    if (!(a > 0.0) || !(det > 0.0)) return neg_inf;
    const double quad = (c * scatter[0] - 2.0 * b * scatter[1] + a * scatter[3]) / det;
    return -0.5 * (subjects * (2.0 * kLog2Pi + std::log(det)) + quad);
  }
  double* l = work;
  double* bmat = work + d * d;
  double* cmat = work + 2 * d * d;
  for (Eigen::Index i = 0; i < d * d; ++i) l[i] = sigma[i];
  double logdet = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    double s = l[j * d + j];
    for (Eigen::Index k = 0; k < j; ++k) s -= l[j * d + k] * l[j * d + k];
    if (!(s > 0.0)) return neg_inf;
    const double root = std::sqrt(s);
    l[j * d + j] = root;
    logdet += 2.0 * std::log(root);
    for (Eigen::Index i = j + 1; i < d; ++i) {
      double t = l[i * d + j];
      for (Eigen::Index k = 0; k < j; ++k) t -= l[i * d + k] * l[j * d + k];
      l[i * d + j] = t / root;
    }
  }
  // B = L^-1 S, then C = L^-1 B^T; tr(Sigma^-1 S) = tr(C).
  for (Eigen::Index col = 0; col < d; ++col) {
    for (Eigen::Index i = 0; i < d; ++i) {
      double t = scatter[i * d + col];
      for (Eigen::Index k = 0; k < i; ++k) t -= l[i * d + k] * bmat[k * d + col];
      bmat[i * d + col] = t / l[i * d + i];
    }
  }
  double trace = 0.0;
  for (Eigen::Index col = 0; col < d; ++col) {
    for (Eigen::Index i = 0; i < d; ++i) {
      double t = bmat[col * d + i];
      for (Eigen::Index k = 0; k < i; ++k) t -= l[i * d + k] * cmat[k * d + col];
      cmat[i * d + col] = t / l[i * d + i];
    }
    trace += cmat[col * d + col];
  }
  return -0.5 * (subjects * (static_cast<double>(d) * kLog2Pi + logdet) + trace);
}

/// Sigma_i = sum_k (L f_k(x_i)) (L f_k(x_i))^T, written row-major into `out`.
/// f is n x (v d) column-major with column k d + j holding f_kj; `g` holds d doubles.
inline void slice_sigma(const double* f, Eigen::Index n, Eigen::Index i, const Eigen::MatrixXd& scale,
                        Eigen::Index d, Eigen::Index v, double* out, double* g) {
  if (d == 2) {
    // L F L^T with F = sum_k f_k f_k^T.
    double f00 = 0.0, f01 = 0.0, f11 = 0.0;
    for (Eigen::Index k = 0; k < v; ++k) {
      const double u = f[2 * k * n + i];
      const double w = f[(2 * k + 1) * n + i];
      f00 += u * u;
      f01 += u * w;
      f11 += w * w;
    }
    const double l00 = scale(0, 0), l10 = scale(1, 0), l11 = scale(1, 1);
    out[0] = l00 * l00 * f00;
    out[1] = out[2] = l00 * (l10 * f00 + l11 * f01);
    out[3] = l10 * l10 * f00 + 2.0 * l10 * l11 * f01 + l11 * l11 * f11;
    return;
  }
  for (Eigen::Index a = 0; a < d * d; ++a) out[a] = 0.0;
  for (Eigen::Index k = 0; k < v; ++k) {
    const double* fk = f + k * d * n + i;
    for (Eigen::Index a = 0; a < d; ++a) {
      double t = 0.0;
      for (Eigen::Index b = 0; b <= a; ++b) t += scale(a, b) * fk[b * n];
      g[a] = t;
    }
    for (Eigen::Index a = 0; a < d; ++a) {
      for (Eigen::Index b = 0; b <= a; ++b) out[a * d + b] += g[a] * g[b];
    }
  }
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = a + 1; b < d; ++b) out[a * d + b] = out[b * d + a];
  }
}

}  // namespace dynconn::detail
