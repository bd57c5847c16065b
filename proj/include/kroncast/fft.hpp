#pragma once

#include <complex>
#include <vector>

namespace kroncast {

// In-place complex FFT building blocks. Radix-2 for power-of-two lengths,
// Bluestein's chirp-z for everything else, so any even window length works.
std::vector<std::complex<double>> fft(std::vector<std::complex<double>> x);

// Magnitudes of the real DFT at bins 1..L/2 (DC bin dropped: it carries the
// series mean, which would swamp amplitude comparisons). L must be even and
// >= 4; odd L is rejected with a hint to truncate one sample.
std::vector<double> rfft_magnitudes(const std::vector<double>& x);

}  // namespace kroncast
