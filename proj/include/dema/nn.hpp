#pragma once

// Parameter containers shared by the model blocks.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dema/tensor.hpp"

namespace dema::nn {

using Rng = std::mt19937_64;

struct NamedParam {
  std::string name;
  Tensor* tensor;
};
using ParamList = std::vector<NamedParam>;

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) leaf.
Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when bias-free

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(ParamList& out, const std::string& prefix);
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  Tensor operator()(const Tensor& x) const { return layer_norm(x, eps, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix);
};

}  // namespace dema::nn
