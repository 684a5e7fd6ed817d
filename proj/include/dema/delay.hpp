#pragma once

// Global lag priors between variates from lagged Pearson correlation.
//
// Shift convention: xcorr_delay(a, b) compares a[i] with b[i + t]; a positive
// tau means a's pattern shows up in b tau steps later.

#include <cstddef>
#include <span>
#include <vector>

#include "dema/series.hpp"

namespace dema::delay {

struct XcorrResult {
  int tau = 0;
  double rho = 0.0;
  bool degenerate = false;  // no lag had a usable overlap
};

// Overlaps shorter than this score 0.
inline constexpr std::size_t kMinOverlap = 4;

// Pearson correlation of a[i] and b[i + shift] over their overlap.
double lagged_corr(std::span<const double> a, std::span<const double> b, int shift);

// Lag in [-max_lag, max_lag] with the largest |corr|; rho keeps its sign. Ties
// go to the smallest |t|, then to the negative t.
XcorrResult xcorr_delay(std::span<const double> a, std::span<const double> b, std::size_t max_lag);

// Round-half-away-from-zero of tau / patch_len.
int token_shift(int tau, std::size_t patch_len);

struct DelayPriors {
  std::size_t n_vars = 0;
  std::size_t max_lag = 0;
  std::size_t patch_len = 1;
  std::vector<int> tau;        // [a * N + b]
  std::vector<double> rho;     // [a * N + b], in [-1, 1]
  std::vector<int> delta_tok;  // token_shift(tau, patch_len)

  int tau_at(std::size_t a, std::size_t b) const { return tau[a * n_vars + b]; }
  double rho_at(std::size_t a, std::size_t b) const { return rho[a * n_vars + b]; }
  int delta_at(std::size_t a, std::size_t b) const { return delta_tok[a * n_vars + b]; }

  // Identity priors: no lag, unit strength on the diagonal, zero elsewhere.
  static DelayPriors identity(std::size_t n_vars, std::size_t patch_len);
};

// max_lag == 0 selects the default T / 4. Pairs with a degenerate overlap get
// tau 0 and rho 0.
DelayPriors delay_matrix(const SeriesWindow& window, std::size_t max_lag, std::size_t patch_len);

// Attention-ready copy: rho clamped to [0, 1]; with `zero_cross` set every
// off-diagonal strength is zeroed (delay ablation).
DelayPriors attention_priors(const DelayPriors& priors, bool zero_cross = false);

}  // namespace dema::delay
