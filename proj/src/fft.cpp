#include "kroncast/fft.hpp"

#include <cmath>
#include <stdexcept>

namespace kroncast {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

bool is_pow2(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Iterative radix-2 Cooley-Tukey; n must be a power of two.
void fft_pow2(std::vector<std::complex<double>>& a, bool inverse) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? kTwoPi : -kTwoPi) / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    for (auto& z : a) z /= static_cast<double>(n);
  }
}

// Bluestein's algorithm: DFT of arbitrary length via a power-of-two convolution.
std::vector<std::complex<double>> fft_bluestein(const std::vector<std::complex<double>>& x) {
  const size_t n = x.size();
  const size_t m = next_pow2(2 * n + 1);
  std::vector<std::complex<double>> chirp(n);
  for (size_t k = 0; k < n; ++k) {
    // angle = pi * k^2 / n, reduced mod 2n to keep the argument small
    const size_t k2 = (k * k) % (2 * n);
    const double ang = -kTwoPi * static_cast<double>(k2) / (2.0 * static_cast<double>(n));
    chirp[k] = std::complex<double>(std::cos(ang), std::sin(ang));
  }
  std::vector<std::complex<double>> a(m, {0.0, 0.0}), b(m, {0.0, 0.0});
  for (size_t k = 0; k < n; ++k) a[k] = x[k] * chirp[k];
  b[0] = std::conj(chirp[0]);
  for (size_t k = 1; k < n; ++k) b[k] = b[m - k] = std::conj(chirp[k]);
  fft_pow2(a, false);
  fft_pow2(b, false);
  for (size_t k = 0; k < m; ++k) a[k] *= b[k];
  fft_pow2(a, true);
  std::vector<std::complex<double>> out(n);
  for (size_t k = 0; k < n; ++k) out[k] = a[k] * chirp[k];
  return out;
}

}  // namespace

std::vector<std::complex<double>> fft(std::vector<std::complex<double>> x) {
  if (x.empty()) return x;
  if (is_pow2(x.size())) {
    fft_pow2(x, false);
    return x;
  }
  return fft_bluestein(x);
}

std::vector<double> rfft_magnitudes(const std::vector<double>& x) {
  const size_t L = x.size();
  if (L % 2 != 0) {
    throw std::invalid_argument(
        "rfft_magnitudes: length " + std::to_string(L) +
        " is odd; truncate the series by one sample before calling");
  }
  if (L < 4) throw std::invalid_argument("rfft_magnitudes: length must be >= 4");
  std::vector<std::complex<double>> c(L);
  for (size_t i = 0; i < L; ++i) c[i] = {x[i], 0.0};
  auto spec = fft(std::move(c));
  std::vector<double> mags(L / 2);
  for (size_t k = 1; k <= L / 2; ++k) mags[k - 1] = std::abs(spec[k]);
  return mags;
}

}  // namespace kroncast
