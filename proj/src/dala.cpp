#include "dema/dala.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dema::dala {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

struct Dims {
  std::size_t len, n, inner;
};

Dims check_inputs(const Tensor& q, const Tensor& k, const Tensor& v,
                  const delay::DelayPriors& priors) {
  expect(q.rank() == 3, ErrorKind::Dimension, "dala: q must be [L, N, U]");
  expect(k.shape() == q.shape() && v.shape() == q.shape(), ErrorKind::Dimension,
         "dala: q, k, v must share shape [L, N, U]");
  const Dims d{q.dim(0), q.dim(1), q.dim(2)};
  expect(d.inner % 2 == 0, ErrorKind::Config, "dala: inner width must be even for rotary encoding");
  expect(priors.n_vars == d.n && priors.rho.size() == d.n * d.n &&
             priors.delta_tok.size() == d.n * d.n,
         ErrorKind::Dimension, "dala: priors do not match the variate count");
  for (double r : priors.rho)
    expect(r >= 0.0, ErrorKind::Contract, "dala: rho must be clamped to be nonnegative");
  return d;
}

double safe_den(double den, double eps) { return std::abs(den) < eps ? eps : den; }

// One query/key-variate term: query (a, l) reads variate b's prefix at m.
struct Term {
  std::size_t a, l, b, m;
  double rho;
  long qpos;  // rotation applied to the query: l - delta_ab
};

// Enumerates the terms with m == key_pos in a fixed order. Terms whose
// unclamped prefix index lies past L - 1 are attached to key_pos == L - 1.
template <class F>
void for_each_term_at(std::size_t key_pos, const Dims& d, const delay::DelayPriors& priors, F&& f) {
  const long len = static_cast<long>(d.len);
  for (std::size_t a = 0; a < d.n; ++a)
    for (std::size_t b = 0; b < d.n; ++b) {
      const double rho = priors.rho[a * d.n + b];
      if (rho == 0.0) continue;
      const long delta = priors.delta_tok[a * d.n + b];
      const long l = static_cast<long>(key_pos) + delta;
      if (l >= 0 && l < len) f(Term{a, static_cast<std::size_t>(l), b, key_pos, rho, l - delta});
      if (key_pos + 1 == d.len && delta < 0) {
        // Queries whose whole key range of b is visible.
        for (long lc = std::max(0L, len + delta); lc < len; ++lc)
          f(Term{a, static_cast<std::size_t>(lc), b, key_pos, rho, lc - delta});
      }
    }
}

}  // namespace

// ---------------------------------------------------------------- rotary

RotaryTable::RotaryTable(std::size_t dim, double base) {
  expect(dim % 2 == 0 && dim > 0, ErrorKind::Config, "rotary dimension must be even and positive");
  freqs_.resize(dim / 2);
  for (std::size_t i = 0; i < freqs_.size(); ++i)
    freqs_[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
}

void RotaryTable::rotate(std::span<const double> x, long pos, std::span<double> out) const {
  expect(x.size() == dim() && out.size() == dim(), ErrorKind::Dimension,
         "rotate: vector width does not match the rotary table");
  if (pos == 0) {
    std::copy(x.begin(), x.end(), out.begin());
    return;
  }
  for (std::size_t i = 0; i < freqs_.size(); ++i) {
    const double angle = static_cast<double>(pos) * freqs_[i];
    const double c = std::cos(angle), s = std::sin(angle);
    const double x0 = x[2 * i], x1 = x[2 * i + 1];
    out[2 * i] = c * x0 - s * x1;
    out[2 * i + 1] = s * x0 + c * x1;
  }
}

std::vector<double> RotaryTable::rotate(std::span<const double> x, long pos) const {
  std::vector<double> out(x.size());
  rotate(x, pos, out);
  return out;
}

std::vector<double> rope_rotate(std::span<const double> x, long pos, double base) {
  expect(x.size() % 2 == 0, ErrorKind::Config, "rope_rotate: odd vector width");
  return RotaryTable(x.size(), base).rotate(x, pos);
}

// ---------------------------------------------------------------- kernel

namespace {

void phi_forward(const double* x, double* y, std::size_t n, double power) {
  double nr = 0, np = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = x[i] > 0 ? x[i] : 0.0;
    const double rp = r > 0 ? std::pow(r, power) : 0.0;
    y[i] = rp;
    nr += r * r;
    np += rp * rp;
  }
  if (np <= 0.0) {
    std::fill(y, y + n, 0.0);
    return;
  }
  const double g = std::sqrt(nr) / std::sqrt(np);
  for (std::size_t i = 0; i < n; ++i) y[i] *= g;
}

}  // namespace

std::vector<double> kernel_phi(std::span<const double> x, double power) {
  expect(power >= 1.0, ErrorKind::Config, "kernel_phi: power must be >= 1");
  std::vector<double> y(x.size());
  phi_forward(x.data(), y.data(), x.size(), power);
  return y;
}

Tensor kernel_phi(const Tensor& x, double power) {
  expect(power >= 1.0, ErrorKind::Config, "kernel_phi: power must be >= 1");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    phi_forward(x.data().data() + r * width, out.data() + r * width, width, power);
  return make_result(x.shape(), std::move(out), {x}, [rows, width, power](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto g = p.grad_buffer();
    std::vector<double> r(width), rp(width);
    for (std::size_t row = 0; row < rows; ++row) {
      const double* x = p.value.data() + row * width;
      const double* gy = self.grad.data() + row * width;
      double nr2 = 0, np2 = 0;
      for (std::size_t i = 0; i < width; ++i) {
        r[i] = x[i] > 0 ? x[i] : 0.0;
        rp[i] = r[i] > 0 ? std::pow(r[i], power) : 0.0;
        nr2 += r[i] * r[i];
        np2 += rp[i] * rp[i];
      }
      if (np2 <= 0.0) continue;
      const double nr = std::sqrt(nr2), np = std::sqrt(np2);
      const double scale_g = nr / np;
      double zrp = 0;
      for (std::size_t i = 0; i < width; ++i) zrp += gy[i] * rp[i];
      for (std::size_t i = 0; i < width; ++i) {
        if (r[i] <= 0) continue;
        const double d_rp = scale_g * gy[i] - zrp * nr * rp[i] / (np2 * np);
        const double d_r = d_rp * power * std::pow(r[i], power - 1.0) + zrp * r[i] / (nr * np);
        g[row * width + i] += d_r;
      }
    }
  });
}

// ---------------------------------------------------------------- attention

Tensor delay_linear_attention(const Tensor& phi_q, const Tensor& phi_k, const Tensor& v,
                              const delay::DelayPriors& priors, const DalaOptions& options) {
  const Dims d = check_inputs(phi_q, phi_k, v, priors);
  const std::size_t U = d.inner, N = d.n, L = d.len;
  const RotaryTable rope(U, options.rope_base);
  const bool rotated = options.rotated_denominator;
  const double eps = options.eps;
  auto fq = phi_q.data();
  auto fk = phi_k.data();
  auto vv = v.data();
  auto row = [N, U](std::size_t l, std::size_t n) { return (l * N + n) * U; };

  // Keys rotated to their own token positions.
  Buffer kr(phi_k.numel());
  for (std::size_t j = 0; j < L; ++j)
    for (std::size_t b = 0; b < N; ++b)
      rope.rotate(fk.subspan(row(j, b), U), static_cast<long>(j), {kr.data() + row(j, b), U});

  Buffer kv(N * U * U, 0.0);       // prefix of (R_j phi(k)) v^T per variate
  Buffer ksum(N * U, 0.0);         // prefix of phi(k)
  Buffer ksum_rot(N * U, 0.0);     // prefix of R_j phi(k)
  Buffer num(phi_q.numel(), 0.0);
  std::vector<double> den(L * N, 0.0);
  std::vector<char> has_key(L * N, 0);
  std::vector<double> qr(U);

  for (std::size_t m = 0; m < L; ++m) {
    for (std::size_t b = 0; b < N; ++b) {
      MatMap(kv.data() + b * U * U, U, U).noalias() +=
          ConstVecMap(kr.data() + row(m, b), U) * ConstVecMap(vv.data() + row(m, b), U).transpose();
      for (std::size_t u = 0; u < U; ++u) {
        ksum[b * U + u] += fk[row(m, b) + u];
        ksum_rot[b * U + u] += kr[row(m, b) + u];
      }
    }
    for_each_term_at(m, d, priors, [&](const Term& t) {
      const double* q = fq.data() + row(t.l, t.a);
      rope.rotate({q, U}, t.qpos, qr);
      VecMap(num.data() + row(t.l, t.a), U).noalias() +=
          t.rho * ConstMatMap(kv.data() + t.b * U * U, U, U).transpose() * ConstVecMap(qr.data(), U);
      den[t.l * N + t.a] += t.rho * (rotated ? dot(qr.data(), ksum_rot.data() + t.b * U, U)
                                             : dot(q, ksum.data() + t.b * U, U));
      has_key[t.l * N + t.a] = 1;
    });
  }

  Buffer y(phi_q.numel());
  std::vector<double> den_used(L * N);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t a = 0; a < N; ++a) {
      const std::size_t r = row(l, a);
      if (!has_key[l * N + a]) {
        // No visible key: attend to the token itself with zero shift.
        const double s = dot(fq.data() + r, fk.data() + r, U);
        for (std::size_t u = 0; u < U; ++u) num[r + u] = s * vv[r + u];
        den[l * N + a] = s;
      }
      const double ds = safe_den(den[l * N + a], eps);
      den_used[l * N + a] = ds;
      for (std::size_t u = 0; u < U; ++u) y[r + u] = num[r + u] / ds;
    }

  return make_result(
      phi_q.shape(), std::move(y), {phi_q, phi_k, v},
      [d, priors, options, kr = std::move(kr), den = std::move(den), den_used = std::move(den_used),
       has_key = std::move(has_key)](detail::Node& self) {
        const std::size_t U = d.inner, N = d.n, L = d.len;
        const RotaryTable rope(U, options.rope_base);
        const bool rotated = options.rotated_denominator;
        auto row = [N, U](std::size_t l, std::size_t n) { return (l * N + n) * U; };
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        const double* fq = pq.value.data();
        const double* fk = pk.value.data();
        const double* vv = pv.value.data();
        const double* y = self.value.data();
        const double* gy = self.grad.data();

        std::vector<double> gnum(L * N * U), gden(L * N, 0.0);
        for (std::size_t i = 0; i < L * N; ++i) {
          const double ds = den_used[i];
          double gyy = 0;
          for (std::size_t u = 0; u < U; ++u) {
            gnum[i * U + u] = gy[i * U + u] / ds;
            gyy += gy[i * U + u] * y[i * U + u];
          }
          if (std::abs(den[i]) >= options.eps) gden[i] = -gyy / ds;
        }

        std::vector<double> gfq(L * N * U, 0.0), gfk(L * N * U, 0.0), gv(L * N * U, 0.0);
        std::vector<double> qr(U), tmp(U), tmp2(U);

        // Fallback rows: num = s v, den = s with s = phi(q) . phi(k) of the same token.
        for (std::size_t i = 0; i < L * N; ++i) {
          if (has_key[i]) continue;
          const std::size_t r = i * U;
          const double s = dot(fq + r, fk + r, U);
          double gs = gden[i];
          for (std::size_t u = 0; u < U; ++u) {
            gv[r + u] += gnum[r + u] * s;
            gs += gnum[r + u] * vv[r + u];
          }
          for (std::size_t u = 0; u < U; ++u) {
            gfq[r + u] += gs * fk[r + u];
            gfk[r + u] += gs * fq[r + u];
          }
        }

        // Pass 1, ascending key index: query gradients against prefix sums.
        Buffer kv(N * U * U, 0.0), ksum(N * U, 0.0), ksum_rot(N * U, 0.0);
        for (std::size_t m = 0; m < L; ++m) {
          for (std::size_t b = 0; b < N; ++b) {
            MatMap(kv.data() + b * U * U, U, U).noalias() +=
                ConstVecMap(kr.data() + row(m, b), U) * ConstVecMap(vv + row(m, b), U).transpose();
            for (std::size_t u = 0; u < U; ++u) {
              ksum[b * U + u] += fk[row(m, b) + u];
              ksum_rot[b * U + u] += kr[row(m, b) + u];
            }
          }
          for_each_term_at(m, d, priors, [&](const Term& t) {
            const std::size_t r = row(t.l, t.a);
            const double g_den = gden[t.l * N + t.a];
            VecMap g_qr(tmp.data(), U);
            g_qr.noalias() = t.rho * ConstMatMap(kv.data() + t.b * U * U, U, U) *
                             ConstVecMap(gnum.data() + r, U);
            if (rotated) {
              for (std::size_t u = 0; u < U; ++u) tmp[u] += t.rho * g_den * ksum_rot[t.b * U + u];
            } else {
              for (std::size_t u = 0; u < U; ++u) gfq[r + u] += t.rho * g_den * ksum[t.b * U + u];
            }
            rope.rotate(tmp, -t.qpos, tmp2);
            for (std::size_t u = 0; u < U; ++u) gfq[r + u] += tmp2[u];
          });
        }

        // Pass 2, descending key index: suffix sums of the query-side terms.
        Buffer s(N * U * U, 0.0), sk(N * U, 0.0), sk_rot(N * U, 0.0);
        for (std::size_t m = L; m-- > 0;) {
          for_each_term_at(m, d, priors, [&](const Term& t) {
            const std::size_t r = row(t.l, t.a);
            const double* q = fq + r;
            rope.rotate({q, U}, t.qpos, qr);
            MatMap(s.data() + t.b * U * U, U, U).noalias() +=
                t.rho * ConstVecMap(qr.data(), U) * ConstVecMap(gnum.data() + r, U).transpose();
            const double g_den = t.rho * gden[t.l * N + t.a];
            for (std::size_t u = 0; u < U; ++u) {
              if (rotated)
                sk_rot[t.b * U + u] += g_den * qr[u];
              else
                sk[t.b * U + u] += g_den * q[u];
            }
          });
          for (std::size_t b = 0; b < N; ++b) {
            const std::size_t r = row(m, b);
            ConstMatMap sb(s.data() + b * U * U, U, U);
            VecMap g_kr(tmp.data(), U);
            g_kr.noalias() = sb * ConstVecMap(vv + r, U);
            VecMap(gv.data() + r, U).noalias() += sb.transpose() * ConstVecMap(kr.data() + r, U);
            for (std::size_t u = 0; u < U; ++u) tmp[u] += sk_rot[b * U + u];
            rope.rotate(tmp, -static_cast<long>(m), tmp2);
            for (std::size_t u = 0; u < U; ++u) gfk[r + u] += tmp2[u] + sk[b * U + u];
          }
        }

        if (pq.requires_grad) pq.accumulate(gfq);
        if (pk.requires_grad) pk.accumulate(gfk);
        if (pv.requires_grad) pv.accumulate(gv);
      });
}

Tensor dala_attention(const DalaInputs& in, const DalaOptions& options) {
  return delay_linear_attention(kernel_phi(in.q, in.kernel_power), kernel_phi(in.k, in.kernel_power),
                                in.v, in.priors, options);
}

Tensor naive_dala_oracle(const DalaInputs& in, const DalaOptions& options) {
  const Dims d = check_inputs(in.q, in.k, in.v, in.priors);
  const std::size_t U = d.inner, N = d.n, L = d.len;
  const RotaryTable rope(U, options.rope_base);
  auto at = [N, U](const Tensor& t, std::size_t l, std::size_t n) {
    return t.data().subspan((l * N + n) * U, U);
  };
  Buffer y(in.q.numel(), 0.0);
  for (std::size_t a = 0; a < N; ++a)
    for (std::size_t l = 0; l < L; ++l) {
      const auto fq = kernel_phi(at(in.q, l, a), in.kernel_power);
      const auto q_rot = rope.rotate(fq, static_cast<long>(l));
      std::vector<double> num(U, 0.0);
      double den = 0;
      bool any = false;
      for (std::size_t b = 0; b < N; ++b) {
        const double rho = in.priors.rho_at(a, b);
        const long delta = in.priors.delta_at(a, b);
        for (std::size_t j = 0; j < L; ++j) {
          if (static_cast<long>(j) + delta > static_cast<long>(l) || rho == 0.0) continue;
          any = true;
          const auto fk = kernel_phi(at(in.k, j, b), in.kernel_power);
          const auto k_rot = rope.rotate(fk, static_cast<long>(j) + delta);
          const double score = dot(q_rot.data(), k_rot.data(), U);
          const auto vj = at(in.v, j, b);
          for (std::size_t u = 0; u < U; ++u) num[u] += rho * score * vj[u];
          den += rho * (options.rotated_denominator ? score : dot(fq.data(), fk.data(), U));
        }
      }
      if (!any) {
        const auto fk = kernel_phi(at(in.k, l, a), in.kernel_power);
        const double s = dot(fq.data(), fk.data(), U);
        const auto vl = at(in.v, l, a);
        for (std::size_t u = 0; u < U; ++u) num[u] = s * vl[u];
        den = s;
      }
      const double ds = safe_den(den, options.eps);
      for (std::size_t u = 0; u < U; ++u) y[(l * N + a) * U + u] = num[u] / ds;
    }
  return make_result(in.q.shape(), std::move(y), {}, nullptr);
}

// ---------------------------------------------------------------- block

MambaDALA::MambaDALA(const MambaDALAConfig& cfg, nn::Rng& rng)
    : config(cfg),
      content_proj(cfg.d_model, cfg.d_inner, rng),
      gate_proj(cfg.d_model, cfg.d_inner, rng),
      q_proj(cfg.d_inner, cfg.d_inner, rng, false),
      k_proj(cfg.d_inner, cfg.d_inner, rng, false),
      v_proj(cfg.d_inner, cfg.d_inner, rng, false),
      out_proj(cfg.d_inner, cfg.d_model, rng) {}

embedding::TokenGrid MambaDALA::forward(const embedding::TokenGrid& x_var,
                                        const delay::DelayPriors& priors) const {
  expect(x_var.layout == embedding::Layout::VariateMajor, ErrorKind::Contract,
         "MambaDALA expects a variate-major token grid");
  const Tensor& x = x_var.tokens;
  const Tensor content = content_proj(x);
  const Tensor gate = sigmoid(gate_proj(x));
  const Tensor y = delay_linear_attention(kernel_phi(q_proj(content), config.kernel_power),
                                          kernel_phi(k_proj(content), config.kernel_power),
                                          v_proj(content), priors, config.attention);
  return {embedding::Layout::VariateMajor, out_proj(mul(y, gate)), x_var.patch_len, x_var.stride};
}

void MambaDALA::collect(nn::ParamList& out, const std::string& prefix) {
  content_proj.collect(out, prefix + ".content_proj");
  gate_proj.collect(out, prefix + ".gate_proj");
  q_proj.collect(out, prefix + ".q_proj");
  k_proj.collect(out, prefix + ".k_proj");
  v_proj.collect(out, prefix + ".v_proj");
  out_proj.collect(out, prefix + ".out_proj");
}

}  // namespace dema::dala
