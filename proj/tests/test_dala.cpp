#include <doctest.h>

#include <cmath>

#include "dema/dala.hpp"
#include "oracles.hpp"

using namespace dema;
using namespace dema::dala;

namespace {

struct Case {
  std::size_t L, N, U;
  Tensor q, k, v;
  delay::DelayPriors priors;
};

Case random_case(oracle::Rng& rng, bool grad = false) {
  std::uniform_int_distribution<std::size_t> len(1, 8), vars(1, 4), half(1, 4);
  const std::size_t L = len(rng), N = vars(rng), U = 2 * half(rng);
  return {L, N, U, oracle::random_tensor({L, N, U}, rng, grad), oracle::random_tensor({L, N, U}, rng, grad),
          oracle::random_tensor({L, N, U}, rng, grad), oracle::random_priors(N, 3, rng)};
}

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<double> direct(const Case& c) {
  return oracle::dala_direct(vec(c.q), vec(c.k), vec(c.v), c.L, c.N, c.U, c.priors, 3.0);
}

}  // namespace

TEST_CASE("rotary: identity at zero, norm preserving, relative, odd width") {
  oracle::Rng rng(30);
  const auto x = oracle::random_vector(8, rng);
  CHECK(oracle::max_abs_diff(rope_rotate(x, 0), x) <= 1e-12);

  const auto r = rope_rotate(x, 37);
  CHECK(std::sqrt(oracle::dot(r, r)) == doctest::Approx(std::sqrt(oracle::dot(x, x))).epsilon(1e-12));
  CHECK(oracle::max_abs_diff(r, oracle::apply_matrix(oracle::rope_matrix(8, 37), x)) <= 1e-12);

  const auto u = oracle::random_vector(8, rng), v = oracle::random_vector(8, rng);
  const double ref = oracle::dot(rope_rotate(u, 2), rope_rotate(v, 0));
  CHECK(oracle::dot(rope_rotate(u, 5), rope_rotate(v, 3)) == doctest::Approx(ref).epsilon(1e-12));
  for (long c : {-40L, -3L, 7L, 1000L})
    CHECK(std::abs(oracle::dot(rope_rotate(u, 9 + c), rope_rotate(v, 4 + c)) -
                   oracle::dot(rope_rotate(u, 9), rope_rotate(v, 4))) <= 1e-10);

  CHECK_THROWS_AS(rope_rotate(oracle::random_vector(5, rng), 1), Error);
}

TEST_CASE("kernel feature map: zero, norm, linear power, gradients") {
  const std::vector<double> neg{-1, -2, -0.5, 0};
  for (double v : kernel_phi(neg, 3.0)) CHECK(v == 0.0);

  oracle::Rng rng(31);
  const auto x = oracle::random_vector(6, rng);
  const auto y = kernel_phi(x, 3.0);
  double relu_norm = 0;
  for (double v : x) relu_norm += v > 0 ? v * v : 0.0;
  CHECK(std::sqrt(oracle::dot(y, y)) == doctest::Approx(std::sqrt(relu_norm)).epsilon(1e-12));
  CHECK(oracle::max_abs_diff(y, oracle::phi(x, 3.0)) <= 1e-14);
  const auto lin = kernel_phi(x, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(lin[i] == doctest::Approx(std::max(x[i], 0.0)).epsilon(1e-14));

  Tensor t = oracle::random_tensor({4, 6}, rng, true);
  const Tensor w = oracle::random_tensor({4, 6}, rng);
  CHECK(oracle::grad_check([&] { return sum(mul(kernel_phi(t, 3.0), w)); }, {&t}, rng, 20) <= 1e-4);
}

TEST_CASE("prefix-sum attention equals the direct double sum") {
  oracle::Rng rng(32);
  for (int i = 0; i < 40; ++i) {
    const auto c = random_case(rng);
    CAPTURE(i);
    const DalaInputs in{c.q, c.k, c.v, c.priors};
    const auto ref = direct(c);
    CHECK(oracle::max_abs_diff(dala_attention(in).data(), ref) <= 1e-9);
    CHECK(oracle::max_abs_diff(naive_dala_oracle(in).data(), ref) <= 1e-9);
  }
}

TEST_CASE("attention: single key, no cross-variate strength, permutation, uniform scale") {
  oracle::Rng rng(33);
  // One token, one variate: the output is the value itself.
  const Tensor q = oracle::random_tensor({1, 1, 4}, rng, false, 0.1, 1.0);
  const Tensor k = oracle::random_tensor({1, 1, 4}, rng, false, 0.1, 1.0);
  const Tensor v = oracle::random_tensor({1, 1, 4}, rng);
  CHECK(oracle::max_abs_diff(dala_attention({q, k, v, delay::DelayPriors::identity(1, 8)}).data(), v.data()) <= 1e-12);

  // Zero off-diagonal strength: each variate attends only to itself.
  const std::size_t L = 6, N = 3, U = 4;
  const Tensor Q = oracle::random_tensor({L, N, U}, rng), K = oracle::random_tensor({L, N, U}, rng),
               V = oracle::random_tensor({L, N, U}, rng);
  const Tensor full = dala_attention({Q, K, V, delay::DelayPriors::identity(N, 8)});
  for (std::size_t a = 0; a < N; ++a) {
    std::vector<double> qa, ka, va;
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t u = 0; u < U; ++u) {
        qa.push_back(Q.at({l, a, u}));
        ka.push_back(K.at({l, a, u}));
        va.push_back(V.at({l, a, u}));
      }
    const Tensor ya = dala_attention({Tensor::from({L, 1, U}, qa), Tensor::from({L, 1, U}, ka),
                                      Tensor::from({L, 1, U}, va), delay::DelayPriors::identity(1, 8)});
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t u = 0; u < U; ++u) CHECK(std::abs(ya.at({l, 0, u}) - full.at({l, a, u})) <= 1e-12);
  }

  // Relabelling variates relabels the output.
  const auto pr = oracle::random_priors(N, 2, rng);
  const std::vector<std::size_t> perm{2, 0, 1};
  auto permute = [&](const Tensor& t) {
    std::vector<double> out(t.numel());
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t u = 0; u < U; ++u) out[(l * N + n) * U + u] = t.at({l, perm[n], u});
    return Tensor::from({L, N, U}, out);
  };
  auto pp = pr;
  for (std::size_t a = 0; a < N; ++a)
    for (std::size_t b = 0; b < N; ++b) {
      pp.rho[a * N + b] = pr.rho_at(perm[a], perm[b]);
      pp.delta_tok[a * N + b] = pr.delta_at(perm[a], perm[b]);
      pp.tau[a * N + b] = pr.tau_at(perm[a], perm[b]);
    }
  const Tensor y = dala_attention({Q, K, V, pr});
  const Tensor yp = dala_attention({permute(Q), permute(K), permute(V), pp});
  CHECK(oracle::max_abs_diff(permute(y).data(), yp.data()) <= 1e-12);

  // Scaling every strength by the same factor cancels in the ratio.
  auto half = pr;
  for (auto& r : half.rho) r *= 0.5;
  CHECK(oracle::max_abs_diff(dala_attention({Q, K, V, half}).data(), y.data()) <= 1e-12);
}

TEST_CASE("attention is causal up to the largest token shift") {
  oracle::Rng rng(34);
  const std::size_t L = 10, N = 3, U = 4;
  const auto pr = oracle::random_priors(N, 2, rng);
  int max_shift = 0;
  for (int d : pr.delta_tok) max_shift = std::max(max_shift, std::abs(d));
  const Tensor Q = oracle::random_tensor({L, N, U}, rng), K = oracle::random_tensor({L, N, U}, rng),
               V = oracle::random_tensor({L, N, U}, rng);
  const Tensor y = dala_attention({Q, K, V, pr});
  for (std::size_t l = 0; l < L; ++l) {
    auto cut = [&](const Tensor& t) {
      std::vector<double> out(t.data().begin(), t.data().end());
      for (std::size_t i = (l + 1) * N * U; i < out.size(); ++i) out[i] = 0.0;
      return Tensor::from({L, N, U}, out);
    };
    const Tensor yc = dala_attention({cut(Q), cut(K), cut(V), pr});
    for (long p = 0; p <= static_cast<long>(l) - max_shift; ++p)
      for (std::size_t i = 0; i < N * U; ++i)
        CHECK(std::abs(yc.data()[p * N * U + i] - y.data()[p * N * U + i]) <= 1e-9);
  }
}

TEST_CASE("attention gradients match finite differences") {
  oracle::Rng rng(35);
  const std::size_t L = 5, N = 3, U = 4;
  Tensor fq = oracle::random_tensor({L, N, U}, rng, true, 0.05, 1.0);
  Tensor fk = oracle::random_tensor({L, N, U}, rng, true, 0.05, 1.0);
  Tensor v = oracle::random_tensor({L, N, U}, rng, true);
  const auto pr = oracle::random_priors(N, 2, rng);
  const Tensor w = oracle::random_tensor({L, N, U}, rng);
  for (bool rotated : {false, true}) {
    CAPTURE(rotated);
    DalaOptions opt;
    opt.rotated_denominator = rotated;
    auto loss = [&] { return sum(mul(delay_linear_attention(fq, fk, v, pr, opt), w)); };
    CHECK(oracle::grad_check(loss, {&fq, &fk, &v}, rng, 15) <= 1e-4);
  }
}

TEST_CASE("Mamba-DALA block: shape, gate kill, gradients, contract errors") {
  nn::Rng rng(36);
  MambaDALAConfig cfg;
  cfg.d_model = 6;
  cfg.d_inner = 8;
  MambaDALA block(cfg, rng);
  oracle::Rng r(37);
  const auto pr = oracle::random_priors(3, 1, r);
  const Tensor x = oracle::random_tensor({5, 3, 6}, r);
  const auto y = block.forward({embedding::Layout::VariateMajor, x, 8, 8}, pr);
  CHECK(y.tokens.shape() == Shape{5, 3, 6});
  CHECK(y.layout == embedding::Layout::VariateMajor);

  {
    nn::Rng other(36);
    MambaDALA killed(cfg, other);
    for (auto& v : killed.gate_proj.bias.mutable_data()) v = -1e3;
    for (auto& v : killed.out_proj.bias.mutable_data()) v = 0.0;
    const auto yk = killed.forward({embedding::Layout::VariateMajor, x, 8, 8}, pr);
    for (double v : yk.tokens.data()) CHECK(std::abs(v) < 1e-12);
  }

  nn::ParamList params;
  block.collect(params, "dala");
  std::vector<Tensor*> leaves;
  for (auto& p : params) leaves.push_back(p.tensor);
  Tensor xin = oracle::random_tensor({4, 3, 6}, r, true);
  leaves.push_back(&xin);
  const Tensor w = oracle::random_tensor({4, 3, 6}, r);
  auto loss = [&] { return sum(mul(block.forward({embedding::Layout::VariateMajor, xin, 8, 8}, pr).tokens, w)); };
  CHECK(oracle::grad_check(loss, leaves, r, 5) <= 1e-4);

  CHECK_THROWS_AS(block.forward({embedding::Layout::TimeMajor, x, 8, 8}, pr), Error);
  auto negative = pr;
  negative.rho[1] = -0.2;
  try {
    block.forward({embedding::Layout::VariateMajor, x, 8, 8}, negative);
    FAIL("negative strength accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Contract);
  }
  try {
    block.forward({embedding::Layout::VariateMajor, x, 8, 8}, delay::DelayPriors::identity(2, 8));
    FAIL("mismatched priors accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Dimension);
  }
}
