#include "dema/ssd.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace dema::ssd {
namespace {

struct ScanDims {
  std::size_t n, len, state, inner;
};

ScanDims check_scan_inputs(const DiscreteSSM& ssm, const Tensor& C, const Tensor& x) {
  expect(x.rank() == 3, ErrorKind::Dimension, "ssd: x must be [N, L, U]");
  expect(ssm.A_bar.rank() == 3, ErrorKind::Dimension, "ssd: A_bar must be [N, L, H]");
  const ScanDims d{x.dim(0), x.dim(1), ssm.A_bar.dim(2), x.dim(2)};
  const Shape hs{d.n, d.len, d.state};
  expect(ssm.A_bar.shape() == hs && ssm.B_bar.shape() == hs && C.shape() == hs,
         ErrorKind::Dimension, "ssd: A_bar, B_bar and C must share shape [N, L, H]");
  return d;
}

// Lower clamp for log(A_bar); keeps exp(cum_j - cum_i) finite when a decay
// underflows to zero.
constexpr double kMinLogDecay = -700.0;

}  // namespace

SelectiveWeights::SelectiveWeights(std::size_t inner, std::size_t state, nn::Rng& rng)
    : delta_proj(inner, state, rng), b_proj(inner, state, rng), c_proj(inner, state, rng) {
  A_log = Tensor::zeros({state}, true);
  auto a = A_log.mutable_data();
  for (std::size_t s = 0; s < state; ++s) {
    const double v = state == 1 ? 1.0 : 1.0 + 15.0 * static_cast<double>(s) / static_cast<double>(state - 1);
    a[s] = std::log(v);
  }
  // Step sizes start log-uniform in [1e-3, 1e-1] via the inverse softplus.
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  for (auto& b : delta_proj.bias.mutable_data()) {
    const double dt = std::exp(u(rng));
    b = dt + std::log(-std::expm1(-dt));
  }
}

void SelectiveWeights::collect(nn::ParamList& out, const std::string& prefix) {
  delta_proj.collect(out, prefix + ".delta_proj");
  b_proj.collect(out, prefix + ".b_proj");
  c_proj.collect(out, prefix + ".c_proj");
  out.push_back({prefix + ".A_log", &A_log});
}

SelectiveParams selective_params(const Tensor& x_time, const SelectiveWeights& w) {
  expect(x_time.rank() == 3, ErrorKind::Dimension, "selective_params: input must be [N, L, U]");
  return {softplus(w.delta_proj(x_time)), w.b_proj(x_time), w.c_proj(x_time), w.A_log};
}

DiscreteSSM discretize(const SelectiveParams& p) {
  const Tensor A = scale(exp(p.A_log), -1.0);
  const Tensor A_bar = exp(mul_lastdim(p.delta, A));
  const Tensor B_bar = mul(add_scalar(scale(A_bar, -1.0), 1.0), p.B);
  return {A_bar, B_bar};
}

Tensor zoh_input_matrix(const Tensor& delta, const Tensor& A, const Tensor& B) {
  expect(delta.shape() == B.shape(), ErrorKind::Dimension, "zoh_input_matrix: shape mismatch");
  const std::size_t width = A.numel();
  Buffer out(B.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = A.data()[i % width];
    out[i] = std::expm1(delta.data()[i] * a) / a * B.data()[i];
  }
  return make_result(B.shape(), std::move(out), {}, nullptr);
}

Tensor ssm_scan_reference(const DiscreteSSM& ssm, const Tensor& C, const Tensor& x) {
  const auto d = check_scan_inputs(ssm, C, x);
  Buffer y(x.numel(), 0.0);
  std::vector<double> h(d.state * d.inner);
  for (std::size_t n = 0; n < d.n; ++n) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < d.len; ++t) {
      const std::size_t hs = (n * d.len + t) * d.state;
      const std::size_t xs = (n * d.len + t) * d.inner;
      for (std::size_t s = 0; s < d.state; ++s) {
        const double a = ssm.A_bar.data()[hs + s];
        const double b = ssm.B_bar.data()[hs + s];
        const double c = C.data()[hs + s];
        for (std::size_t u = 0; u < d.inner; ++u) {
          double& hv = h[s * d.inner + u];
          hv = a * hv + b * x.data()[xs + u];
          y[xs + u] += c * hv;
        }
      }
    }
  }
  return make_result(x.shape(), std::move(y), {}, nullptr);
}

void ssd_blocked_kernel(const double* a, const double* b, const double* c, const double* x,
                        double* y, std::size_t len, std::size_t state, std::size_t inner,
                        std::size_t chunk) {
  std::vector<double> h(state * inner, 0.0);
  std::vector<double> cum(chunk * state);
  std::vector<double> m(chunk * chunk);
  std::vector<double> decay(state);
  for (std::size_t c0 = 0; c0 < len; c0 += chunk) {
    const std::size_t q = std::min(chunk, len - c0);
    // Inclusive cumulative log-decay inside the chunk.
    for (std::size_t t = 0; t < q; ++t)
      for (std::size_t s = 0; s < state; ++s) {
        const double la = std::max(std::log(a[(c0 + t) * state + s]), kMinLogDecay);
        cum[t * state + s] = (t ? cum[(t - 1) * state + s] : 0.0) + la;
      }
    // Intra-chunk semiseparable block M[j, i] = sum_s C_j B_i exp(cum_j - cum_i).
    for (std::size_t j = 0; j < q; ++j)
      for (std::size_t i = 0; i <= j; ++i) {
        double acc = 0;
        const double* cj = c + (c0 + j) * state;
        const double* bi = b + (c0 + i) * state;
        for (std::size_t s = 0; s < state; ++s)
          acc += cj[s] * bi[s] * std::exp(cum[j * state + s] - cum[i * state + s]);
        m[j * chunk + i] = acc;
      }
    for (std::size_t j = 0; j < q; ++j) {
      double* yj = y + (c0 + j) * inner;
      std::fill(yj, yj + inner, 0.0);
      for (std::size_t i = 0; i <= j; ++i) {
        const double w = m[j * chunk + i];
        const double* xi = x + (c0 + i) * inner;
        for (std::size_t u = 0; u < inner; ++u) yj[u] += w * xi[u];
      }
      // Contribution of the state carried in from earlier chunks.
      if (c0 > 0) {
        const double* cj = c + (c0 + j) * state;
        for (std::size_t s = 0; s < state; ++s) {
          const double w = cj[s] * std::exp(cum[j * state + s]);
          if (w == 0.0) continue;
          const double* hs = h.data() + s * inner;
          for (std::size_t u = 0; u < inner; ++u) yj[u] += w * hs[u];
        }
      }
    }
    // Carry the state to the end of the chunk.
    const std::size_t last = q - 1;
    for (std::size_t s = 0; s < state; ++s) decay[s] = std::exp(cum[last * state + s]);
    for (std::size_t s = 0; s < state; ++s) {
      double* hs = h.data() + s * inner;
      for (std::size_t u = 0; u < inner; ++u) hs[u] *= decay[s];
    }
    for (std::size_t i = 0; i < q; ++i) {
      const double* xi = x + (c0 + i) * inner;
      for (std::size_t s = 0; s < state; ++s) {
        const double w = b[(c0 + i) * state + s] * std::exp(cum[last * state + s] - cum[i * state + s]);
        if (w == 0.0) continue;
        double* hs = h.data() + s * inner;
        for (std::size_t u = 0; u < inner; ++u) hs[u] += w * xi[u];
      }
    }
  }
}

Tensor ssd_blocked(const DiscreteSSM& ssm, const Tensor& C, const Tensor& x, std::size_t chunk) {
  expect(chunk >= 1, ErrorKind::Config, "ssd_blocked: chunk must be >= 1");
  const auto d = check_scan_inputs(ssm, C, x);
  Buffer y(x.numel(), 0.0);
  for (std::size_t n = 0; n < d.n; ++n) {
    const std::size_t hs = n * d.len * d.state;
    const std::size_t xs = n * d.len * d.inner;
    ssd_blocked_kernel(ssm.A_bar.data().data() + hs, ssm.B_bar.data().data() + hs,
                       C.data().data() + hs, x.data().data() + xs, y.data() + xs, d.len, d.state,
                       d.inner, chunk);
  }

  // Backward runs the recurrence in reverse over recomputed states, one
  // variate at a time.
  return make_result(x.shape(), std::move(y), {ssm.A_bar, ssm.B_bar, C, x}, [d](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto& pc = *self.parents[2];
    auto& px = *self.parents[3];
    std::span<double> ga, gb, gc, gx;
    if (pa.requires_grad) ga = pa.grad_buffer();
    if (pb.requires_grad) gb = pb.grad_buffer();
    if (pc.requires_grad) gc = pc.grad_buffer();
    if (px.requires_grad) gx = px.grad_buffer();
    const std::size_t hu = d.state * d.inner;
    std::vector<double> states((d.len + 1) * hu);
    std::vector<double> gh(hu);
    for (std::size_t n = 0; n < d.n; ++n) {
      const std::size_t h0 = n * d.len * d.state;
      const std::size_t x0 = n * d.len * d.inner;
      std::fill(states.begin(), states.begin() + hu, 0.0);
      for (std::size_t t = 0; t < d.len; ++t) {
        const double* prev = states.data() + t * hu;
        double* cur = states.data() + (t + 1) * hu;
        for (std::size_t s = 0; s < d.state; ++s) {
          const double a = pa.value[h0 + t * d.state + s];
          const double b = pb.value[h0 + t * d.state + s];
          for (std::size_t u = 0; u < d.inner; ++u)
            cur[s * d.inner + u] = a * prev[s * d.inner + u] + b * px.value[x0 + t * d.inner + u];
        }
      }
      std::fill(gh.begin(), gh.end(), 0.0);
      for (std::size_t t = d.len; t-- > 0;) {
        const double* gy = self.grad.data() + x0 + t * d.inner;
        const double* xt = px.value.data() + x0 + t * d.inner;
        const double* cur = states.data() + (t + 1) * hu;
        const double* prev = states.data() + t * hu;
        for (std::size_t s = 0; s < d.state; ++s) {
          const std::size_t k = h0 + t * d.state + s;
          const double c = pc.value[k];
          double gcs = 0, gas = 0, gbs = 0;
          double* ghs = gh.data() + s * d.inner;
          for (std::size_t u = 0; u < d.inner; ++u) {
            ghs[u] += c * gy[u];
            gcs += cur[s * d.inner + u] * gy[u];
            gas += ghs[u] * prev[s * d.inner + u];
            gbs += ghs[u] * xt[u];
          }
          if (!gc.empty()) gc[k] += gcs;
          if (!ga.empty()) ga[k] += gas;
          if (!gb.empty()) gb[k] += gbs;
          const double b = pb.value[k];
          if (!gx.empty())
            for (std::size_t u = 0; u < d.inner; ++u) gx[x0 + t * d.inner + u] += ghs[u] * b;
          const double a = pa.value[k];
          for (std::size_t u = 0; u < d.inner; ++u) ghs[u] *= a;
        }
      }
    }
  });
}

MambaSSD::MambaSSD(const MambaSSDConfig& cfg, nn::Rng& rng)
    : config(cfg),
      content_proj(cfg.d_model, cfg.d_inner, rng),
      gate_proj(cfg.d_model, cfg.d_inner, rng),
      conv_kernel(nn::uniform_init({cfg.d_inner, cfg.conv_kernel}, cfg.conv_kernel, rng)),
      conv_bias(nn::uniform_init({cfg.d_inner}, cfg.conv_kernel, rng)),
      selective(cfg.d_inner, cfg.d_state, rng),
      out_proj(cfg.d_inner, cfg.d_model, rng) {}

embedding::TokenGrid MambaSSD::forward(const embedding::TokenGrid& x_time) const {
  expect(x_time.layout == embedding::Layout::TimeMajor, ErrorKind::Contract,
         "MambaSSD expects a time-major token grid");
  const Tensor& x = x_time.tokens;
  Tensor content = conv1d(content_proj(x), conv_kernel, ConvPadding::Causal, conv_bias);
  const Tensor gate = sigmoid(gate_proj(x));
  const auto params = selective_params(content, selective);
  const auto ssm = discretize(params);
  const Tensor y = ssd_blocked(ssm, params.C, content, config.chunk);
  return {embedding::Layout::TimeMajor, out_proj(mul(y, gate)), x_time.patch_len, x_time.stride};
}

void MambaSSD::collect(nn::ParamList& out, const std::string& prefix) {
  content_proj.collect(out, prefix + ".content_proj");
  gate_proj.collect(out, prefix + ".gate_proj");
  out.push_back({prefix + ".conv_kernel", &conv_kernel});
  out.push_back({prefix + ".conv_bias", &conv_bias});
  selective.collect(out, prefix + ".selective");
  out_proj.collect(out, prefix + ".out_proj");
}

}  // namespace dema::ssd
