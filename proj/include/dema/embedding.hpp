#pragma once

// Instance normalization, patch tokenization and the two token layouts.

#include <cstddef>
#include <span>
#include <vector>

#include "dema/nn.hpp"
#include "dema/series.hpp"
#include "dema/tensor.hpp"

namespace dema::embedding {

struct InstanceStats {
  std::vector<double> mean;
  std::vector<double> stdev;  // >= eps
  double eps = 1e-5;
};

struct Normalized {
  SeriesWindow window;
  InstanceStats stats;
};

// Per-variate z-scoring. When `observed` is non-empty (N*T, 1 = observed) the
// statistics use observed points only and unobserved points normalize to 0.
Normalized revin_normalize(const SeriesWindow& window, double eps = 1e-5,
                           std::span<const double> observed = {});
// y[n, :] * stdev[n] + mean[n] for a tensor whose leading axis is the variate.
Tensor revin_denormalize(const Tensor& y, const InstanceStats& stats);

// Patch count after right edge-replication padding.
std::size_t patch_count(std::size_t length, std::size_t patch_len, std::size_t stride);

// [N, L, P] patches; right-pads by repeating the last value when
// (T - P) is not a multiple of the stride.
Tensor patchify(const SeriesWindow& window, std::size_t patch_len, std::size_t stride);

enum class Layout { TimeMajor, VariateMajor };

struct TokenGrid {
  Layout layout = Layout::TimeMajor;
  Tensor tokens;  // TimeMajor [N, L, D]; VariateMajor [L, N, D]
  std::size_t patch_len = 0;
  std::size_t stride = 0;

  std::size_t n_vars() const { return tokens.dim(layout == Layout::TimeMajor ? 0 : 1); }
  std::size_t n_tokens() const { return tokens.dim(layout == Layout::TimeMajor ? 1 : 0); }
  std::size_t width() const { return tokens.dim(2); }
};

TokenGrid to_variate_major(const TokenGrid& grid);
TokenGrid to_time_major(const TokenGrid& grid);

// Linear map of each patch (a conv with kernel = stride = patch length) to D
// dimensions, shared across variates.
struct PatchEncoder {
  nn::Linear proj;

  PatchEncoder() = default;
  PatchEncoder(std::size_t patch_features, std::size_t d_model, nn::Rng& rng)
      : proj(patch_features, d_model, rng) {}

  TokenGrid operator()(const Tensor& patches, std::size_t patch_len, std::size_t stride) const;
  void collect(nn::ParamList& out, const std::string& prefix) { proj.collect(out, prefix + ".proj"); }
};

}  // namespace dema::embedding
