#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dema/spectral.hpp"
#include "oracles.hpp"

using namespace dema;
using namespace dema::spectral;

namespace {

SeriesWindow sinusoid(std::size_t n, std::size_t T, double period) {
  SeriesWindow w(n, T);
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t t = 0; t < T; ++t) w.at(v, t) = std::sin(2 * M_PI * t / period + 0.3 * v);
  return w;
}

}  // namespace

TEST_CASE("amplitude_rank: DC window, sinusoid, full selection, bad theta") {
  const SeriesWindow dc(2, 16, 4.0);
  CHECK(amplitude_rank(dc, 0.05) == std::vector<std::size_t>{0});

  const auto top = amplitude_rank(sinusoid(1, 16, 8.0), 1.0 / 9.0);
  REQUIRE(top.size() == 1);
  // Oracle: index of the largest direct-DFT amplitude.
  std::vector<double> x(16);
  for (std::size_t t = 0; t < 16; ++t) x[t] = std::sin(2 * M_PI * t / 8.0);
  const auto ref = oracle::dft_half(x);
  const auto best = std::max_element(ref.begin(), ref.end(), [](auto p, auto q) { return std::abs(p) < std::abs(q); });
  CHECK(top[0] == static_cast<std::size_t>(best - ref.begin()));
  CHECK(top[0] == 2);

  CHECK(amplitude_rank(sinusoid(2, 16, 8.0), 1.0).size() == 9);
  CHECK_THROWS_AS(amplitude_rank(dc, 0.0), Error);
  CHECK(selected_count(96, 0.4) == 20);  // ceil(0.4 * 49)
  CHECK(selected_count(96, 1e-6) == 1);
}

TEST_CASE("amplitude_rank ties go to the lower frequency") {
  // Equal amplitude at bins 1 and 3: the single kept index is 1.
  SeriesWindow w(1, 16);
  for (std::size_t t = 0; t < 16; ++t)
    w.at(0, t) = std::cos(2 * M_PI * t / 16.0) + std::cos(2 * M_PI * 3 * t / 16.0);
  CHECK(amplitude_rank(w, 1.0 / 9.0) == std::vector<std::size_t>{1});
}

TEST_CASE("decompose: full band, in-band sinusoid, partition identity, oracle split") {
  oracle::Rng rng(5);
  const auto x = oracle::random_window(3, 40, rng);
  const auto full = decompose(x, 1.0);
  CHECK(oracle::max_abs_diff(full.cross_time.values, x.values) <= 1e-9);
  for (double v : full.cross_variate.values) CHECK(std::abs(v) <= 1e-12);

  const auto s = decompose(sinusoid(2, 32, 8.0), 0.1);
  CHECK(std::find(s.selected.begin(), s.selected.end(), 4u) != s.selected.end());
  for (double v : s.cross_variate.values) CHECK(std::abs(v) <= 1e-9);

  for (double theta = 0.1; theta <= 1.0 + 1e-12; theta += 0.1) {
    const auto split = decompose(x, theta);
    std::vector<double> sum(x.values.size());
    for (std::size_t i = 0; i < sum.size(); ++i)
      sum[i] = split.cross_time.values[i] + split.cross_variate.values[i];
    CHECK(oracle::max_abs_diff(sum, x.values) <= 1e-9);

    // Selected and complement partition the half spectrum.
    std::vector<bool> keep(21, false);
    for (auto k : split.selected) keep[k] = true;
    CHECK(split.selected.size() == selected_count(40, theta));

    // Oracle: cross-time component by direct inverse DFT of the kept bins.
    for (std::size_t v = 0; v < 3; ++v) {
      const std::vector<double> row(x.row(v).begin(), x.row(v).end());
      const auto ref = oracle::idft_subset(oracle::dft_half(row), 40, keep);
      CHECK(oracle::max_abs_diff(split.cross_time.row(v), ref) <= 1e-9);
    }
  }
}

TEST_CASE("selection is monotone in theta") {
  oracle::Rng rng(6);
  const auto x = oracle::random_window(2, 64, rng);
  auto prev = amplitude_rank(x, 0.05);
  for (double theta = 0.1; theta <= 1.0; theta += 0.05) {
    const auto cur = amplitude_rank(x, theta);
    CHECK(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
    prev = cur;
  }
}

TEST_CASE("support_overlap: examples and basis validation") {
  std::vector<std::vector<double>> basis(3, std::vector<double>(3, 0.0));
  for (std::size_t i = 0; i < 3; ++i) basis[i][i] = 1.0;
  const std::vector<double> e1{1, 0, 0}, e2{0, 1, 0}, e12{1, 1, 0};
  CHECK_FALSE(support_overlap(e1, e2, basis));
  CHECK(support_overlap(e12, e2, basis));

  auto bad = basis;
  bad[1] = {1, 1, 0};
  CHECK_THROWS_AS(support_overlap(e1, e2, bad), Error);
  bad = basis;
  bad[2] = {0, 0, 0};
  CHECK_THROWS_AS(support_overlap(e1, e2, bad), Error);
}
