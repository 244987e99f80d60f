#pragma once

#include <string>
#include <unordered_map>

#include "ecgmamba/ops.hpp"
#include "ecgmamba/random.hpp"
#include "ecgmamba/tape.hpp"

namespace ecgmamba {

/// Maps parameter tensors onto tape leaves for one forward pass. Each
/// parameter is bound once; its gradient is read back after backward.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, bool trainable) : tape_(tape), trainable_(trainable) {}

  Var operator()(const Tensor& param);
  Tensor grad(const Tensor& param) const;
  Tape& tape() { return tape_; }
  bool trainable() const { return trainable_; }

 private:
  Tape& tape_;
  bool trainable_;
  std::unordered_map<const Tensor*, Var> bound_;
};

/// y = x W + b with W stored as [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear init(std::size_t in, std::size_t out, bool with_bias, Rng& rng);
  Var operator()(ParamBinder& bind, Var x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    if (bias.defined()) f(prefix + ".bias", bias);
  }
};

struct Conv1dLayer {
  Tensor weight;  // [Cout, Cin / groups, K]
  Tensor bias;    // [Cout] or undefined
  Conv1dOptions options;

  static Conv1dLayer init(std::size_t in, std::size_t out, std::size_t kernel, Conv1dOptions options, bool with_bias,
                          Rng& rng);
  Var operator()(ParamBinder& bind, Var x, bool recompute = false) const;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    if (bias.defined()) f(prefix + ".bias", bias);
  }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  static LayerNormParams init(std::size_t dim, double eps);
  Var operator()(ParamBinder& bind, Var x) const;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormParams init(std::size_t channels, double eps, double momentum);
  /// Training mode normalises with batch statistics and reports them through
  /// `stats_out`; eval mode uses the running statistics.
  Var operator()(ParamBinder& bind, Var x, bool training, BatchStats* stats_out) const;
  void update_running(const BatchStats& stats);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
  template <typename F>
  void visit_buffers(const std::string& prefix, F&& f) {
    f(prefix + ".running_mean", running_mean);
    f(prefix + ".running_var", running_var);
  }
};

}  // namespace ecgmamba
