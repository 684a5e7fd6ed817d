#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dema/errors.hpp"

namespace dema {

// N variates x T steps, row-major by variate.
struct SeriesWindow {
  std::size_t n_vars = 0;
  std::size_t length = 0;
  std::vector<double> values;

  SeriesWindow() = default;
  SeriesWindow(std::size_t n, std::size_t t, double fill = 0.0)
      : n_vars(n), length(t), values(n * t, fill) {}
  SeriesWindow(std::size_t n, std::size_t t, std::vector<double> v)
      : n_vars(n), length(t), values(std::move(v)) {
    expect(values.size() == n * t, ErrorKind::Dimension, "SeriesWindow: size does not match N*T");
  }

  double& at(std::size_t n, std::size_t t) { return values[n * length + t]; }
  double at(std::size_t n, std::size_t t) const { return values[n * length + t]; }
  std::span<double> row(std::size_t n) { return {values.data() + n * length, length}; }
  std::span<const double> row(std::size_t n) const { return {values.data() + n * length, length}; }
};

}  // namespace dema
