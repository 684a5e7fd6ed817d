#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace dema {

// Half spectrum of a real series: coefficients 0..floor(T/2).
struct ComplexSpectrum {
  std::size_t length = 0;  // T of the time-domain series
  std::vector<std::complex<double>> coeffs;
};

// Unnormalized forward transform.
ComplexSpectrum rfft(std::span<const double> series);
// Inverse transform scaled by 1/T, so irfft(rfft(x), T) == x.
std::vector<double> irfft(const ComplexSpectrum& spectrum);

}  // namespace dema
