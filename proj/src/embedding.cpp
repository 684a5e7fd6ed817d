#include "dema/embedding.hpp"

#include <algorithm>
#include <cmath>

namespace dema::embedding {

Normalized revin_normalize(const SeriesWindow& window, double eps,
                           std::span<const double> observed) {
  expect(window.length >= 2, ErrorKind::Config, "revin_normalize: window shorter than 2 steps");
  expect(eps > 0, ErrorKind::Config, "revin_normalize: eps must be positive");
  expect(observed.empty() || observed.size() == window.values.size(), ErrorKind::Dimension,
         "revin_normalize: mask size mismatch");
  Normalized out{SeriesWindow(window.n_vars, window.length), {}};
  out.stats.eps = eps;
  for (std::size_t n = 0; n < window.n_vars; ++n) {
    const auto row = window.row(n);
    double count = 0, mu = 0;
    for (std::size_t t = 0; t < row.size(); ++t) {
      const double w = observed.empty() ? 1.0 : observed[n * window.length + t];
      mu += w * row[t];
      count += w;
    }
    mu = count > 0 ? mu / count : 0.0;
    double var = 0;
    for (std::size_t t = 0; t < row.size(); ++t) {
      const double w = observed.empty() ? 1.0 : observed[n * window.length + t];
      var += w * (row[t] - mu) * (row[t] - mu);
    }
    var = count > 0 ? var / count : 0.0;
    const double sd = std::max(std::sqrt(var), eps);
    out.stats.mean.push_back(mu);
    out.stats.stdev.push_back(sd);
    for (std::size_t t = 0; t < row.size(); ++t) {
      const double w = observed.empty() ? 1.0 : observed[n * window.length + t];
      out.window.at(n, t) = w != 0.0 ? (row[t] - mu) / sd : 0.0;
    }
  }
  return out;
}

Tensor revin_denormalize(const Tensor& y, const InstanceStats& stats) {
  const std::size_t n_vars = stats.mean.size();
  expect(y.rank() >= 1 && y.dim(0) == n_vars, ErrorKind::Dimension,
         "revin_denormalize: leading axis must equal the variate count");
  const std::size_t per = y.numel() / n_vars;
  Buffer out(y.numel());
  for (std::size_t n = 0; n < n_vars; ++n)
    for (std::size_t i = 0; i < per; ++i)
      out[n * per + i] = y.data()[n * per + i] * stats.stdev[n] + stats.mean[n];
  std::vector<double> sd = stats.stdev;
  return make_result(y.shape(), std::move(out), {y}, [per, sd = std::move(sd)](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sd[i / per];
  });
}

std::size_t patch_count(std::size_t length, std::size_t patch_len, std::size_t stride) {
  expect(patch_len >= 1 && stride >= 1, ErrorKind::Config, "patch length and stride must be >= 1");
  expect(patch_len <= length, ErrorKind::Config,
         "patch length " + std::to_string(patch_len) + " exceeds window length " +
             std::to_string(length));
  const std::size_t span = length - patch_len;
  return (span + stride - 1) / stride + 1;
}

Tensor patchify(const SeriesWindow& window, std::size_t patch_len, std::size_t stride) {
  const std::size_t count = patch_count(window.length, patch_len, stride);
  Buffer out(window.n_vars * count * patch_len);
  for (std::size_t n = 0; n < window.n_vars; ++n) {
    const auto row = window.row(n);
    for (std::size_t l = 0; l < count; ++l)
      for (std::size_t p = 0; p < patch_len; ++p) {
        const std::size_t t = std::min(l * stride + p, window.length - 1);
        out[(n * count + l) * patch_len + p] = row[t];
      }
  }
  return make_result({window.n_vars, count, patch_len}, std::move(out), {}, nullptr);
}

TokenGrid to_variate_major(const TokenGrid& grid) {
  if (grid.layout == Layout::VariateMajor) return grid;
  return {Layout::VariateMajor, swap_leading(grid.tokens), grid.patch_len, grid.stride};
}

TokenGrid to_time_major(const TokenGrid& grid) {
  if (grid.layout == Layout::TimeMajor) return grid;
  return {Layout::TimeMajor, swap_leading(grid.tokens), grid.patch_len, grid.stride};
}

TokenGrid PatchEncoder::operator()(const Tensor& patches, std::size_t patch_len,
                                   std::size_t stride) const {
  expect(patches.rank() == 3, ErrorKind::Dimension, "PatchEncoder expects [N, L, P] patches");
  return {Layout::TimeMajor, proj(patches), patch_len, stride};
}

}  // namespace dema::embedding
