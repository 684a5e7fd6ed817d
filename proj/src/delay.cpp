#include "dema/delay.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <vector>

#include "dema/errors.hpp"
#include "dema/fft.hpp"

namespace dema::delay {

double lagged_corr(std::span<const double> a, std::span<const double> b, int shift) {
  const std::size_t len = std::min(a.size(), b.size());
  const std::size_t mag = static_cast<std::size_t>(std::abs(shift));
  if (mag >= len || len - mag < kMinOverlap) return 0.0;
  const std::size_t overlap = len - mag;
  const std::size_t a0 = shift >= 0 ? 0 : mag;
  const std::size_t b0 = shift >= 0 ? mag : 0;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < overlap; ++i) {
    ma += a[a0 + i];
    mb += b[b0 + i];
  }
  ma /= static_cast<double>(overlap);
  mb /= static_cast<double>(overlap);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < overlap; ++i) {
    const double da = a[a0 + i] - ma;
    const double db = b[b0 + i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

namespace {

// Pearson correlation at every shift in [-max_lag, max_lag] from FFT cross
// products and prefix sums, indexed by shift + max_lag. Shifts whose overlap
// variance is too small for the fast estimate to be trusted are NaN.
std::vector<double> fast_lag_corr(std::span<const double> a, std::span<const double> b,
                                  std::size_t max_lag) {
  const std::size_t n = a.size(), m = 2 * n;
  double mean_a = 0, mean_b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_a += a[i];
    mean_b += b[i];
  }
  mean_a /= static_cast<double>(n);
  mean_b /= static_cast<double>(n);
  std::vector<double> ca(m, 0.0), cb(m, 0.0);
  std::vector<double> pa(n + 1, 0.0), pa2(n + 1, 0.0), pb(n + 1, 0.0), pb2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    ca[i] = a[i] - mean_a;
    cb[i] = b[i] - mean_b;
    pa[i + 1] = pa[i] + ca[i];
    pa2[i + 1] = pa2[i] + ca[i] * ca[i];
    pb[i + 1] = pb[i] + cb[i];
    pb2[i + 1] = pb2[i] + cb[i] * cb[i];
  }
  auto fa = rfft(ca);
  const auto fb = rfft(cb);
  for (std::size_t k = 0; k < fa.coeffs.size(); ++k) fa.coeffs[k] = std::conj(fa.coeffs[k]) * fb.coeffs[k];
  const auto cross = irfft(fa);  // cross[t mod m] = sum_i ca[i] cb[i + t]

  const double trust_a = 1e-6 * pa2[n], trust_b = 1e-6 * pb2[n];
  const int lim = static_cast<int>(max_lag);
  std::vector<double> out(2 * max_lag + 1, 0.0);
  for (int t = -lim; t <= lim; ++t) {
    const std::size_t mag = static_cast<std::size_t>(std::abs(t));
    if (mag >= n || n - mag < kMinOverlap) continue;
    const std::size_t len = n - mag;
    const std::size_t a0 = t >= 0 ? 0 : mag, b0 = t >= 0 ? mag : 0;
    const double ov = static_cast<double>(len);
    const double sa = pa[a0 + len] - pa[a0], sb = pb[b0 + len] - pb[b0];
    const double saa = pa2[a0 + len] - pa2[a0] - sa * sa / ov;
    const double sbb = pb2[b0 + len] - pb2[b0] - sb * sb / ov;
    double& slot = out[static_cast<std::size_t>(t + lim)];
    if (saa <= trust_a || sbb <= trust_b) {
      slot = (pa2[a0 + len] - pa2[a0] == 0.0 || pb2[b0 + len] - pb2[b0] == 0.0) ? 0.0 : NAN;
      continue;
    }
    const double sab = cross[t >= 0 ? mag : m - mag] - sa * sb / ov;
    slot = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
  }
  return out;
}

}  // namespace

XcorrResult xcorr_delay(std::span<const double> a, std::span<const double> b, std::size_t max_lag) {
  expect(a.size() == b.size(), ErrorKind::Dimension, "xcorr_delay: series lengths differ");
  expect(a.size() >= kMinOverlap, ErrorKind::Config, "xcorr_delay: series shorter than 4 steps");
  expect(max_lag < a.size(), ErrorKind::Config, "xcorr_delay: max_lag must be below the length");
  const int lim = static_cast<int>(max_lag);

  // Screen every shift with the fast estimate, then score the near-best ones
  // (and any the estimate could not resolve) exactly.
  const auto fast = fast_lag_corr(a, b, max_lag);
  double top = 0;
  for (double c : fast)
    if (!std::isnan(c)) top = std::max(top, std::abs(c));
  auto exact_needed = [&](int t) {
    const double c = fast[static_cast<std::size_t>(t + lim)];
    return std::isnan(c) || std::abs(c) >= top - 1e-7;
  };

  XcorrResult best{0, 0.0, true};
  double best_mag = -1.0;
  // Visit 0, -1, +1, -2, +2, ... so strict improvement keeps the tie order.
  for (int m = 0; m <= lim; ++m) {
    for (int t : {-m, m}) {
      if (m == 0 && t != 0) continue;
      const double c = exact_needed(t) ? lagged_corr(a, b, t) : fast[static_cast<std::size_t>(t + lim)];
      if (c != 0.0) best.degenerate = false;
      if (std::abs(c) > best_mag) {
        best_mag = std::abs(c);
        best.tau = t;
        best.rho = c;
      }
      if (m == 0) break;
    }
  }
  if (best.degenerate) return {0, 0.0, true};
  return best;
}

int token_shift(int tau, std::size_t patch_len) {
  expect(patch_len >= 1, ErrorKind::Config, "token_shift: patch length must be >= 1");
  const long p = static_cast<long>(patch_len);
  const long mag = (2L * std::labs(tau) + p) / (2L * p);
  return static_cast<int>(tau < 0 ? -mag : mag);
}

DelayPriors DelayPriors::identity(std::size_t n_vars, std::size_t patch_len) {
  DelayPriors p;
  p.n_vars = n_vars;
  p.patch_len = patch_len;
  p.tau.assign(n_vars * n_vars, 0);
  p.delta_tok.assign(n_vars * n_vars, 0);
  p.rho.assign(n_vars * n_vars, 0.0);
  for (std::size_t a = 0; a < n_vars; ++a) p.rho[a * n_vars + a] = 1.0;
  return p;
}

DelayPriors delay_matrix(const SeriesWindow& window, std::size_t max_lag, std::size_t patch_len) {
  expect(window.n_vars >= 1, ErrorKind::Config, "delay_matrix: window has no variates");
  if (max_lag == 0) max_lag = std::max<std::size_t>(window.length / 4, 1);
  max_lag = std::min(max_lag, window.length - 1);
  auto priors = DelayPriors::identity(window.n_vars, patch_len);
  priors.max_lag = max_lag;
  const std::size_t n = window.n_vars;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) continue;
      const auto r = xcorr_delay(window.row(a), window.row(b), max_lag);
      priors.tau[a * n + b] = r.tau;
      priors.rho[a * n + b] = r.rho;
      priors.delta_tok[a * n + b] = token_shift(r.tau, patch_len);
    }
  return priors;
}

DelayPriors attention_priors(const DelayPriors& priors, bool zero_cross) {
  DelayPriors out = priors;
  for (std::size_t a = 0; a < out.n_vars; ++a)
    for (std::size_t b = 0; b < out.n_vars; ++b) {
      double& r = out.rho[a * out.n_vars + b];
      r = std::clamp(r, 0.0, 1.0);
      if (zero_cross && a != b) r = 0.0;
    }
  return out;
}

}  // namespace dema::delay
