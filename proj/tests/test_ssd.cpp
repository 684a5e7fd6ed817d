#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dema/ssd.hpp"
#include "oracles.hpp"

using namespace dema;
using namespace dema::ssd;

namespace {

struct Instance {
  DiscreteSSM ssm;
  Tensor C, x;
};

Instance random_instance(std::size_t n, std::size_t len, std::size_t h, std::size_t u, oracle::Rng& rng,
                         bool grad = false) {
  return {{oracle::random_tensor({n, len, h}, rng, grad, 0.05, 0.99),
           oracle::random_tensor({n, len, h}, rng, grad)},
          oracle::random_tensor({n, len, h}, rng, grad),
          oracle::random_tensor({n, len, u}, rng, grad)};
}

}  // namespace

TEST_CASE("selective params: zero input gives softplus(0), delta positive") {
  nn::Rng rng(11);
  SelectiveWeights w(6, 4, rng);
  for (auto& v : w.delta_proj.bias.mutable_data()) v = 0.0;
  const auto p = selective_params(Tensor::zeros({2, 3, 6}), w);
  for (double d : p.delta.data()) CHECK(d == doctest::Approx(std::log(2.0)));

  oracle::Rng r2(12);
  SelectiveWeights w2(6, 4, rng);
  const auto q = selective_params(oracle::random_tensor({4, 625, 6}, r2, false, -5, 5), w2);
  CHECK(q.delta.numel() == 10000);
  CHECK(*std::min_element(q.delta.data().begin(), q.delta.data().end()) > 0.0);

  // Identical tokens give identical parameters.
  const Tensor same = Tensor::full({1, 2, 6}, 0.3);
  const auto s = selective_params(same, w2);
  for (std::size_t k = 0; k < 4; ++k) CHECK(s.B.at({0, 0, k}) == s.B.at({0, 1, k}));
}

TEST_CASE("discretize: analytic case, small-step limit, range") {
  SelectiveParams p{Tensor::from({1, 1, 1}, {std::log(2.0)}), Tensor::from({1, 1, 1}, {1.0}),
                    Tensor::from({1, 1, 1}, {0.0}), Tensor::from({1}, {0.0})};
  const auto d = discretize(p);
  CHECK(d.A_bar.item() == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(d.B_bar.item() == doctest::Approx(0.5).epsilon(1e-14));

  p.delta = Tensor::from({1, 1, 1}, {1e-12});
  const auto lim = discretize(p);
  CHECK(lim.A_bar.item() == doctest::Approx(1.0));
  CHECK(std::abs(lim.B_bar.item()) < 1e-11);

  oracle::Rng rng(13);
  SelectiveParams r{oracle::random_tensor({2, 50, 4}, rng, false, 1e-3, 3.0), oracle::random_tensor({2, 50, 4}, rng),
                    oracle::random_tensor({2, 50, 4}, rng), oracle::random_tensor({4}, rng, false, -1, 2.7)};
  const auto ssm = discretize(r);
  for (double a : ssm.A_bar.data()) CHECK((a > 0.0 && a < 1.0));
}

TEST_CASE("zero-order hold input matrix matches an RK4 solve of the continuous system") {
  oracle::Rng rng(14);
  for (int i = 0; i < 20; ++i) {
    const auto v = oracle::random_vector(3, rng, 0.0, 1.0);
    const double a = -(0.1 + 3.0 * v[0]), dt = 0.01 + v[1], b = 2 * v[2] - 1;
    const Tensor z = zoh_input_matrix(Tensor::from({1}, {dt}), Tensor::from({1}, {a}), Tensor::from({1}, {b}));
    CHECK(z.item() == doctest::Approx(oracle::rk4_zoh(a, b, dt)).epsilon(1e-10));
  }
}

TEST_CASE("reference scan: single step, memoryless, variate permutation") {
  oracle::Rng rng(15);
  auto one = random_instance(1, 1, 3, 2, rng);
  const Tensor y = ssm_scan_reference(one.ssm, one.C, one.x);
  for (std::size_t u = 0; u < 2; ++u) {
    double ref = 0;
    for (std::size_t s = 0; s < 3; ++s)
      ref += one.C.data()[s] * one.ssm.B_bar.data()[s] * one.x.data()[u];
    CHECK(y.data()[u] == doctest::Approx(ref).epsilon(1e-14));
  }

  auto inst = random_instance(1, 6, 3, 2, rng);
  inst.ssm.A_bar = Tensor::zeros({1, 6, 3});
  const Tensor ym = ssm_scan_reference(inst.ssm, inst.C, inst.x);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t u = 0; u < 2; ++u) {
      double ref = 0;
      for (std::size_t s = 0; s < 3; ++s)
        ref += inst.C.at({0, t, s}) * inst.ssm.B_bar.at({0, t, s}) * inst.x.at({0, t, u});
      CHECK(ym.at({0, t, u}) == doctest::Approx(ref).epsilon(1e-13));
    }

  const auto two = random_instance(2, 5, 3, 2, rng);
  auto swapped = [](const Tensor& t) {
    const std::size_t half = t.numel() / 2;
    std::vector<double> v(t.data().begin() + static_cast<long>(half), t.data().end());
    v.insert(v.end(), t.data().begin(), t.data().begin() + static_cast<long>(half));
    return Tensor::from(t.shape(), v);
  };
  const Tensor y2 = ssm_scan_reference(two.ssm, two.C, two.x);
  const Tensor yp = ssm_scan_reference({swapped(two.ssm.A_bar), swapped(two.ssm.B_bar)}, swapped(two.C), swapped(two.x));
  CHECK(oracle::max_abs_diff(swapped(y2).data(), yp.data()) == 0.0);
}

TEST_CASE("blocked SSD equals the recurrent scan") {
  oracle::Rng rng(16);
  for (int i = 0; i < 25; ++i) {
    const auto inst = random_instance(1 + i % 4, 1 + (i * 7) % 64, 1 + i % 8, 1 + i % 5, rng);
    const Tensor ref = ssm_scan_reference(inst.ssm, inst.C, inst.x);
    for (std::size_t chunk : {1u, 8u, 16u}) {
      CAPTURE(chunk);
      CHECK(oracle::max_abs_diff(ssd_blocked(inst.ssm, inst.C, inst.x, chunk).data(), ref.data()) <= 1e-10);
    }
    const std::size_t len = inst.x.dim(1);
    CHECK(oracle::max_abs_diff(ssd_blocked(inst.ssm, inst.C, inst.x, len).data(), ref.data()) <= 1e-10);
  }
  const auto inst = random_instance(1, 4, 2, 2, rng);
  CHECK_THROWS_AS(ssd_blocked(inst.ssm, inst.C, inst.x, 0), Error);
}

TEST_CASE("state stays bounded by max|B_bar x| / (1 - max A_bar)") {
  oracle::Rng rng(17);
  for (int i = 0; i < 10; ++i) {
    auto inst = random_instance(1, 200, 1, 1, rng);
    // With C = 1 and a single state/channel, y_t is the state itself.
    inst.C = Tensor::full({1, 200, 1}, 1.0);
    const Tensor h = ssm_scan_reference(inst.ssm, inst.C, inst.x);
    double max_bx = 0, max_a = 0;
    for (std::size_t t = 0; t < 200; ++t) {
      max_bx = std::max(max_bx, std::abs(inst.ssm.B_bar.data()[t] * inst.x.data()[t]));
      max_a = std::max(max_a, inst.ssm.A_bar.data()[t]);
    }
    for (double v : h.data()) CHECK(std::abs(v) <= max_bx / (1 - max_a) + 1e-12);
  }
}

TEST_CASE("blocked SSD gradients match finite differences") {
  oracle::Rng rng(18);
  auto inst = random_instance(2, 11, 3, 2, rng, true);
  const Tensor w = oracle::random_tensor({2, 11, 2}, rng);
  auto loss = [&] { return sum(mul(ssd_blocked(inst.ssm, inst.C, inst.x, 4), w)); };
  CHECK(oracle::grad_check(loss, {&inst.ssm.A_bar, &inst.ssm.B_bar, &inst.C, &inst.x}, rng) <= 1e-4);
}

TEST_CASE("Mamba-SSD block: shape, gate kill, causality, variate independence, gradients") {
  nn::Rng rng(19);
  MambaSSD block({6, 8, 4, 3, 4}, rng);
  oracle::Rng r(20);
  const Tensor x = oracle::random_tensor({2, 10, 6}, r);
  const auto y = block.forward({embedding::Layout::TimeMajor, x, 8, 8});
  CHECK(y.tokens.shape() == Shape{2, 10, 6});

  {
    nn::Rng other(19);
    MambaSSD killed({6, 8, 4, 3, 4}, other);
    for (auto& v : killed.gate_proj.bias.mutable_data()) v = -1e3;
    for (auto& v : killed.out_proj.bias.mutable_data()) v = 0.0;
    const auto yk = killed.forward({embedding::Layout::TimeMajor, x, 8, 8});
    for (double v : yk.tokens.data()) CHECK(std::abs(v) < 1e-12);
  }

  for (std::size_t l = 0; l < 10; ++l) {
    std::vector<double> cut(x.data().begin(), x.data().end());
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t t = l + 1; t < 10; ++t)
        for (std::size_t d = 0; d < 6; ++d) cut[(n * 10 + t) * 6 + d] = 0.0;
    const auto yc = block.forward({embedding::Layout::TimeMajor, Tensor::from({2, 10, 6}, cut), 8, 8});
    double diff = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t t = 0; t <= l; ++t)
        for (std::size_t d = 0; d < 6; ++d)
          diff = std::max(diff, std::abs(yc.tokens.at({n, t, d}) - y.tokens.at({n, t, d})));
    CHECK(diff <= 1e-10);
  }

  std::vector<double> dup(x.data().begin(), x.data().begin() + 60);
  dup.insert(dup.end(), dup.begin(), dup.end());
  const auto yd = block.forward({embedding::Layout::TimeMajor, Tensor::from({2, 10, 6}, dup), 8, 8});
  for (std::size_t i = 0; i < 60; ++i) CHECK(yd.tokens.data()[i] == yd.tokens.data()[60 + i]);

  CHECK_THROWS_AS(block.forward({embedding::Layout::VariateMajor, x, 8, 8}), Error);

  nn::ParamList params;
  block.collect(params, "ssd");
  std::vector<Tensor*> leaves;
  for (auto& p : params) leaves.push_back(p.tensor);
  Tensor xin = oracle::random_tensor({2, 7, 6}, r, true);
  leaves.push_back(&xin);
  const Tensor w = oracle::random_tensor({2, 7, 6}, r);
  auto loss = [&] { return sum(mul(block.forward({embedding::Layout::TimeMajor, xin, 8, 8}).tokens, w)); };
  CHECK(oracle::grad_check(loss, leaves, r, 5) <= 1e-4);
}
