#include "ecgmamba/nn.hpp"

#include <cmath>

#include "ecgmamba/error.hpp"

namespace ecgmamba {

Var ParamBinder::operator()(const Tensor& param) {
  auto it = bound_.find(&param);
  if (it != bound_.end()) return it->second;
  Var v = trainable_ ? tape_.variable(param) : tape_.constant(param);
  bound_.emplace(&param, v);
  return v;
}

Tensor ParamBinder::grad(const Tensor& param) const {
  auto it = bound_.find(&param);
  if (it == bound_.end()) return Tensor::zeros_like(param);
  return tape_.grad(it->second);
}

Linear Linear::init(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear layer;
  layer.weight = rng.uniform_tensor({in, out}, -bound, bound);
  if (with_bias) layer.bias = rng.uniform_tensor({out}, -bound, bound);
  return layer;
}

Var Linear::operator()(ParamBinder& bind, Var x) const {
  Var y = matmul(x, bind(weight));
  if (bias.defined()) y = add(y, bind(bias));
  return y;
}

Conv1dLayer Conv1dLayer::init(std::size_t in, std::size_t out, std::size_t kernel, Conv1dOptions options,
                              bool with_bias, Rng& rng) {
  if (options.groups == 0 || in % options.groups != 0 || out % options.groups != 0) {
    throw ConfigError("conv channels must be divisible by groups");
  }
  const std::size_t fan_in = (in / options.groups) * kernel;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Conv1dLayer layer;
  layer.options = options;
  layer.weight = rng.uniform_tensor({out, in / options.groups, kernel}, -bound, bound);
  if (with_bias) layer.bias = rng.uniform_tensor({out}, -bound, bound);
  return layer;
}

Var Conv1dLayer::operator()(ParamBinder& bind, Var x, bool recompute) const {
  std::optional<Var> b;
  if (bias.defined()) b = bind(bias);
  return conv1d(x, bind(weight), b, options, recompute);
}

LayerNormParams LayerNormParams::init(std::size_t dim, double eps) {
  return LayerNormParams{Tensor::ones({dim}), Tensor::zeros({dim}), eps};
}

Var LayerNormParams::operator()(ParamBinder& bind, Var x) const {
  return layer_norm(x, bind(gamma), bind(beta), eps);
}

BatchNormParams BatchNormParams::init(std::size_t channels, double eps, double momentum) {
  BatchNormParams bn;
  bn.gamma = Tensor::ones({channels});
  bn.beta = Tensor::zeros({channels});
  bn.running_mean = Tensor::zeros({channels});
  bn.running_var = Tensor::ones({channels});
  bn.eps = eps;
  bn.momentum = momentum;
  return bn;
}

Var BatchNormParams::operator()(ParamBinder& bind, Var x, bool training, BatchStats* stats_out) const {
  if (training) return batch_norm_train(x, bind(gamma), bind(beta), eps, stats_out);
  return batch_norm_eval(x, bind(gamma), bind(beta), running_mean, running_var, eps);
}

void BatchNormParams::update_running(const BatchStats& stats) {
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * stats.mean[c];
    running_var[c] = (1.0 - momentum) * running_var[c] + momentum * stats.var_unbiased[c];
  }
}

}  // namespace ecgmamba
