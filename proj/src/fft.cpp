#include "dema/fft.hpp"

#include <fftw3.h>

#include <algorithm>
#include <map>
#include <memory>
#include <mutex>

#include "dema/errors.hpp"

namespace dema {
namespace {

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

template <class T>
std::unique_ptr<T[], FftwFree> fftw_buffer(std::size_t n) {
  return std::unique_ptr<T[], FftwFree>(static_cast<T*>(fftw_malloc(sizeof(T) * std::max<std::size_t>(n, 1))));
}

// FFTW planning is not thread-safe; executing a cached plan on fresh
// fftw_malloc'd buffers is.
struct PlanCache {
  std::mutex mutex;
  std::map<std::size_t, fftw_plan> forward;
  std::map<std::size_t, fftw_plan> inverse;

  ~PlanCache() {
    for (auto& [n, p] : forward) fftw_destroy_plan(p);
    for (auto& [n, p] : inverse) fftw_destroy_plan(p);
  }

  fftw_plan get(std::size_t n, bool is_forward) {
    std::lock_guard lock(mutex);
    auto& table = is_forward ? forward : inverse;
    if (auto it = table.find(n); it != table.end()) return it->second;
    auto real = fftw_buffer<double>(n);
    auto cplx = fftw_buffer<fftw_complex>(n / 2 + 1);
    const int len = static_cast<int>(n);
    fftw_plan plan = is_forward
                         ? fftw_plan_dft_r2c_1d(len, real.get(), cplx.get(), FFTW_ESTIMATE)
                         : fftw_plan_dft_c2r_1d(len, cplx.get(), real.get(), FFTW_ESTIMATE);
    table.emplace(n, plan);
    return plan;
  }
};

PlanCache& plans() {
  static PlanCache cache;
  return cache;
}

}  // namespace

ComplexSpectrum rfft(std::span<const double> series) {
  const std::size_t n = series.size();
  expect(n > 0, ErrorKind::EmptyInput, "rfft: empty series");
  ComplexSpectrum out;
  out.length = n;
  out.coeffs.resize(n / 2 + 1);
  if (n == 1) {
    out.coeffs[0] = series[0];
    return out;
  }
  auto real = fftw_buffer<double>(n);
  auto cplx = fftw_buffer<fftw_complex>(n / 2 + 1);
  std::copy(series.begin(), series.end(), real.get());
  fftw_execute_dft_r2c(plans().get(n, true), real.get(), cplx.get());
  for (std::size_t k = 0; k < out.coeffs.size(); ++k) out.coeffs[k] = {cplx[k][0], cplx[k][1]};
  return out;
}

std::vector<double> irfft(const ComplexSpectrum& spectrum) {
  const std::size_t n = spectrum.length;
  expect(n > 0, ErrorKind::EmptyInput, "irfft: empty spectrum");
  expect(spectrum.coeffs.size() == n / 2 + 1, ErrorKind::Dimension,
         "irfft: spectrum holds the wrong number of coefficients");
  if (n == 1) return {spectrum.coeffs[0].real()};
  auto real = fftw_buffer<double>(n);
  auto cplx = fftw_buffer<fftw_complex>(n / 2 + 1);
  for (std::size_t k = 0; k < spectrum.coeffs.size(); ++k) {
    cplx[k][0] = spectrum.coeffs[k].real();
    cplx[k][1] = spectrum.coeffs[k].imag();
  }
  fftw_execute_dft_c2r(plans().get(n, false), cplx.get(), real.get());
  std::vector<double> out(n);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t t = 0; t < n; ++t) out[t] = real[t] * inv;
  return out;
}

}  // namespace dema
