#include "dema/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dema/fft.hpp"

namespace dema::spectral {
namespace {

void check_window(const SeriesWindow& window, double theta) {
  expect(theta > 0.0 && theta <= 1.0, ErrorKind::Config,
         "theta must lie in (0, 1], got " + std::to_string(theta));
  expect(window.n_vars >= 1, ErrorKind::Config, "window needs at least one variate");
  expect(window.length >= 2, ErrorKind::Config, "window needs at least two steps");
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

std::vector<std::size_t> rank_from_spectra(const std::vector<ComplexSpectrum>& spectra,
                                           std::size_t length, double theta) {
  const std::size_t bins = length / 2 + 1;
  std::vector<double> amplitude(bins, 0.0);
  for (const auto& s : spectra)
    for (std::size_t k = 0; k < bins; ++k) amplitude[k] += std::abs(s.coeffs[k]);
  for (auto& a : amplitude) a /= static_cast<double>(spectra.size());

  std::vector<std::size_t> order(bins);
  std::iota(order.begin(), order.end(), 0);
  // stable_sort on descending amplitude keeps lower indices first among ties.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return amplitude[a] > amplitude[b]; });
  order.resize(selected_count(length, theta));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

std::size_t selected_count(std::size_t length, double theta) {
  const std::size_t bins = length / 2 + 1;
  const auto k = static_cast<std::size_t>(std::ceil(theta * static_cast<double>(bins) - 1e-12));
  return std::clamp<std::size_t>(k, 1, bins);
}

std::vector<std::size_t> amplitude_rank(const SeriesWindow& window, double theta) {
  check_window(window, theta);
  std::vector<ComplexSpectrum> spectra;
  spectra.reserve(window.n_vars);
  for (std::size_t n = 0; n < window.n_vars; ++n) spectra.push_back(rfft(window.row(n)));
  return rank_from_spectra(spectra, window.length, theta);
}

SpectralSplit decompose(const SeriesWindow& window, double theta) {
  check_window(window, theta);
  std::vector<ComplexSpectrum> spectra;
  spectra.reserve(window.n_vars);
  for (std::size_t n = 0; n < window.n_vars; ++n) spectra.push_back(rfft(window.row(n)));

  SpectralSplit split;
  split.theta = theta;
  split.selected = rank_from_spectra(spectra, window.length, theta);
  split.cross_time = SeriesWindow(window.n_vars, window.length);
  split.cross_variate = SeriesWindow(window.n_vars, window.length);

  std::vector<bool> keep(window.length / 2 + 1, false);
  for (auto k : split.selected) keep[k] = true;

  for (std::size_t n = 0; n < window.n_vars; ++n) {
    ComplexSpectrum kept = spectra[n];
    ComplexSpectrum rest = spectra[n];
    for (std::size_t k = 0; k < keep.size(); ++k) (keep[k] ? rest : kept).coeffs[k] = 0.0;
    const auto low = irfft(kept);
    const auto high = irfft(rest);
    std::copy(low.begin(), low.end(), split.cross_time.row(n).begin());
    std::copy(high.begin(), high.end(), split.cross_variate.row(n).begin());
  }
  return split;
}

bool support_overlap(std::span<const double> u, std::span<const double> v,
                     const std::vector<std::vector<double>>& basis, double tol) {
  const std::size_t dim = u.size();
  expect(v.size() == dim, ErrorKind::Dimension, "support_overlap: u and v differ in length");
  std::vector<double> norms;
  norms.reserve(basis.size());
  for (const auto& e : basis) {
    expect(e.size() == dim, ErrorKind::Dimension, "support_overlap: basis vector length mismatch");
    const double nn = dot(e, e);
    expect(nn > 0.0, ErrorKind::Contract, "support_overlap: zero basis vector");
    norms.push_back(std::sqrt(nn));
  }
  for (std::size_t i = 0; i < basis.size(); ++i)
    for (std::size_t j = i + 1; j < basis.size(); ++j)
      expect(std::abs(dot(basis[i], basis[j])) <= tol * norms[i] * norms[j] * 1e3,
             ErrorKind::Contract, "support_overlap: basis is not orthogonal");

  const double nu = std::sqrt(dot(u, u)), nv = std::sqrt(dot(v, v));
  for (std::size_t i = 0; i < basis.size(); ++i) {
    // Coefficient magnitude along the unit direction e_i / |e_i|.
    const double cu = std::abs(dot(u, basis[i])) / norms[i];
    const double cv = std::abs(dot(v, basis[i])) / norms[i];
    if (cu > tol * std::max(nu, 1e-300) && cv > tol * std::max(nv, 1e-300)) return true;
  }
  return false;
}

}  // namespace dema::spectral
