#pragma once

// Adaptive Fourier filtering: split a window into the component carried by its
// dominant frequencies (cross-time) and the residual band (cross-variate).

#include <cstddef>
#include <span>
#include <vector>

#include "dema/series.hpp"

namespace dema::spectral {

struct SpectralSplit {
  SeriesWindow cross_time;
  SeriesWindow cross_variate;
  std::vector<std::size_t> selected;  // ascending
  double theta = 0.0;
};

// Number of kept frequencies: ceil(theta * (floor(T/2) + 1)), at least one.
std::size_t selected_count(std::size_t length, double theta);

// Top-theta frequency indices by variate-averaged amplitude, ties to the lower
// index. Returned ascending.
std::vector<std::size_t> amplitude_rank(const SeriesWindow& window, double theta);

SpectralSplit decompose(const SeriesWindow& window, double theta);

// True iff the coefficient supports of u and v on `basis` intersect. Basis
// vectors must be nonzero and pairwise orthogonal (within `tol`, relative).
bool support_overlap(std::span<const double> u, std::span<const double> v,
                     const std::vector<std::vector<double>>& basis, double tol = 1e-10);

}  // namespace dema::spectral
