#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include <Eigen/Core>

namespace cola::detail {

inline bool is_power_of_two(Eigen::Index n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 Cooley-Tukey. Length must be a power of two.
inline void fft_radix2(Eigen::VectorXcd& a, bool inverse) {
  const Eigen::Index n = a.size();
  for (Eigen::Index i = 1, j = 0; i < n; ++i) {
    Eigen::Index bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (Eigen::Index len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (Eigen::Index i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (Eigen::Index k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) a /= static_cast<double>(n);
}

// Direct O(N^2) DFT for lengths that are not powers of two.
inline Eigen::VectorXcd dft_direct(const Eigen::VectorXcd& a, bool inverse) {
  const Eigen::Index n = a.size();
  Eigen::VectorXcd out = Eigen::VectorXcd::Zero(n);
  const double sgn = inverse ? 1.0 : -1.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double ang = sgn * 2.0 * std::numbers::pi * static_cast<double>((k * j) % n) / static_cast<double>(n);
      acc += a[j] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = inverse ? acc / static_cast<double>(n) : acc;
  }
  return out;
}

/// Forward (or inverse, normalized by 1/N) discrete Fourier transform.
inline Eigen::VectorXcd dft(Eigen::VectorXcd a, bool inverse = false) {
  if (is_power_of_two(a.size())) {
    fft_radix2(a, inverse);
    return a;
  }
  return dft_direct(a, inverse);
}

}  // namespace cola::detail
