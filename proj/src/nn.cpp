#include "dema/nn.hpp"

#include <cmath>

namespace dema::nn {

Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias)
    : weight(uniform_init({in, out}, in, rng)) {
  if (with_bias) bias = uniform_init({out}, in, rng);
}

void Linear::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", &weight});
  if (bias.defined()) out.push_back({prefix + ".bias", &bias});
}

LayerNorm::LayerNorm(std::size_t width)
    : gamma(Tensor::full({width}, 1.0, true)), beta(Tensor::zeros({width}, true)) {}

void LayerNorm::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".gamma", &gamma});
  out.push_back({prefix + ".beta", &beta});
}

}  // namespace dema::nn
