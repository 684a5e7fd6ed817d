#pragma once

// Temporal path: selective SSM over the cross-time token grid, evaluated
// independently per variate with the chunked semiseparable (SSD) algorithm.
//
// Shapes: N variates, L tokens, U = inner width, H = state size.
//   A_bar, B_bar, C : [N, L, H]
//   x, y            : [N, L, U]
// The state of one variate is an H x U matrix:
//   h_t = diag(A_bar_t) h_{t-1} + B_bar_t x_t^T,   y_t = h_t^T C_t
// and is zeroed at the start of every variate's sequence.

#include <cstddef>

#include "dema/embedding.hpp"
#include "dema/nn.hpp"
#include "dema/tensor.hpp"

namespace dema::ssd {

struct SelectiveParams {
  Tensor delta;  // softplus output, > 0
  Tensor B;
  Tensor C;
  Tensor A_log;  // [H]; A = -exp(A_log)
};

struct DiscreteSSM {
  Tensor A_bar;  // exp(delta * A), in (0, 1)
  Tensor B_bar;  // (1 - A_bar) * B
};

struct SelectiveWeights {
  nn::Linear delta_proj;  // U -> H
  nn::Linear b_proj;      // U -> H
  nn::Linear c_proj;      // U -> H
  Tensor A_log;           // [H]

  SelectiveWeights() = default;
  SelectiveWeights(std::size_t inner, std::size_t state, nn::Rng& rng);
  void collect(nn::ParamList& out, const std::string& prefix);
};

// x_time: content branch [N, L, U] after local mixing.
SelectiveParams selective_params(const Tensor& x_time, const SelectiveWeights& weights);

DiscreteSSM discretize(const SelectiveParams& params);

// Zero-order-hold input matrix for a diagonal A: (exp(delta*A) - 1) / A * B.
// Reference form only; the model uses DiscreteSSM's (1 - A_bar) * B.
Tensor zoh_input_matrix(const Tensor& delta, const Tensor& A, const Tensor& B);

// Step-by-step recurrence. Not differentiable; the oracle for ssd_blocked.
Tensor ssm_scan_reference(const DiscreteSSM& ssm, const Tensor& C, const Tensor& x);

// Chunked evaluation of y = M x with M_ji = C_j^T A_{j:i} B_bar_i: dense
// intra-chunk blocks plus a carried H x U state between chunks. Differentiable.
Tensor ssd_blocked(const DiscreteSSM& ssm, const Tensor& C, const Tensor& x, std::size_t chunk);

// Raw-buffer chunked kernel for one variate, used by ssd_blocked.
void ssd_blocked_kernel(const double* a, const double* b, const double* c, const double* x,
                        double* y, std::size_t len, std::size_t state, std::size_t inner,
                        std::size_t chunk);

struct MambaSSDConfig {
  std::size_t d_model = 64;
  std::size_t d_inner = 128;
  std::size_t d_state = 16;
  std::size_t conv_kernel = 4;
  std::size_t chunk = 16;
};

// Gated block: content/gate projections, causal depthwise conv on the content
// branch, selective SSM via ssd_blocked, sigmoid gate and output projection.
struct MambaSSD {
  MambaSSDConfig config;
  nn::Linear content_proj;  // D -> U
  nn::Linear gate_proj;     // D -> U
  Tensor conv_kernel;       // [U, K]
  Tensor conv_bias;         // [U]
  SelectiveWeights selective;
  nn::Linear out_proj;      // U -> D

  MambaSSD() = default;
  MambaSSD(const MambaSSDConfig& config, nn::Rng& rng);

  // [N, L, D] time-major in and out.
  embedding::TokenGrid forward(const embedding::TokenGrid& x_time) const;
  void collect(nn::ParamList& out, const std::string& prefix);
};

}  // namespace dema::ssd
