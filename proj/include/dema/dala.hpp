#pragma once

// Variate path: delay-aware linear attention over the cross-variate token grid.
//
// For query variate a at token l, keys of variate b at token j are placed at
// position j + delta_ab and only keys with j + delta_ab <= l take part:
//
//   y_{a,l} = (R_l phi(q_{a,l}))^T  sum_b rho_ab sum_j (R_{j+delta_ab} phi(k_{b,j})) v_{b,j}^T
//             ----------------------------------------------------------------------------
//                     phi(q_{a,l}) . sum_b rho_ab sum_j phi(k_{b,j})
//
// R_p is the rotary embedding at position p. Because R_{j+d} = R_d R_j, each
// term reads a per-variate prefix sum of (R_j phi(k)) v^T at index l - delta_ab
// against the query rotated to l - delta_ab, so nothing quadratic in L is
// formed.

#include <cstddef>
#include <span>
#include <vector>

#include "dema/delay.hpp"
#include "dema/embedding.hpp"
#include "dema/nn.hpp"
#include "dema/tensor.hpp"

namespace dema::dala {

class RotaryTable {
 public:
  RotaryTable() = default;
  // dim must be even; frequencies base^(-2i/dim).
  RotaryTable(std::size_t dim, double base = 10000.0);

  std::size_t dim() const { return 2 * freqs_.size(); }
  std::span<const double> freqs() const { return freqs_; }

  // out = R_pos x. `pos` may be negative (R_{-p} = R_p^T).
  void rotate(std::span<const double> x, long pos, std::span<double> out) const;
  std::vector<double> rotate(std::span<const double> x, long pos) const;

 private:
  std::vector<double> freqs_;
};

// Free-function form; validates that x has even length.
std::vector<double> rope_rotate(std::span<const double> x, long pos, double base = 10000.0);

// phi(x) = f(ReLU(x)), f(r) = |r| / |r^p| * r^p (elementwise power p); zero for
// an all-nonpositive input.
std::vector<double> kernel_phi(std::span<const double> x, double power);
// Differentiable version over the last axis.
Tensor kernel_phi(const Tensor& x, double power);

struct DalaOptions {
  double eps = 1e-6;
  bool rotated_denominator = false;
  double rope_base = 10000.0;
};

struct DalaInputs {
  Tensor q;  // [L, N, U]
  Tensor k;
  Tensor v;
  delay::DelayPriors priors;  // rho must already be clamped to [0, 1]
  double kernel_power = 3.0;
};

// Attention on kernel features phi(q), phi(k); differentiable in all three
// tensors. Work is O(L * N^2 * U^2), memory O(N * U^2) beyond inputs and outputs.
Tensor delay_linear_attention(const Tensor& phi_q, const Tensor& phi_k, const Tensor& v,
                              const delay::DelayPriors& priors, const DalaOptions& options);

// phi + delay_linear_attention.
Tensor dala_attention(const DalaInputs& inputs, const DalaOptions& options = {});

// Literal double sum over all (b, j) per query. Small instances only.
Tensor naive_dala_oracle(const DalaInputs& inputs, const DalaOptions& options = {});

struct MambaDALAConfig {
  std::size_t d_model = 64;
  std::size_t d_inner = 128;
  double kernel_power = 3.0;
  DalaOptions attention;
};

struct MambaDALA {
  MambaDALAConfig config;
  nn::Linear content_proj;  // D -> U
  nn::Linear gate_proj;     // D -> U
  nn::Linear q_proj;        // U -> U, bias-free
  nn::Linear k_proj;
  nn::Linear v_proj;
  nn::Linear out_proj;      // U -> D

  MambaDALA() = default;
  MambaDALA(const MambaDALAConfig& config, nn::Rng& rng);

  // [L, N, D] variate-major in and out. `priors` must be attention-ready.
  embedding::TokenGrid forward(const embedding::TokenGrid& x_var,
                               const delay::DelayPriors& priors) const;
  void collect(nn::ParamList& out, const std::string& prefix);
};

}  // namespace dema::dala
