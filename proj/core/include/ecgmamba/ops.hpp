#pragma once

#include <cstdint>
#include <optional>

#include "ecgmamba/tape.hpp"
#include "ecgmamba/tensor.hpp"

// Differentiable tensor operations. Every op has a plain Tensor overload
// (forward only) and a Var overload that records onto the input's tape.
//
// Broadcasting is limited to a second operand that matches the trailing
// axes of the first (e.g. a bias over the last axis, or a positional table
// shared across the batch).
namespace ecgmamba {

enum class Activation { relu, sigmoid, softplus, swish };
enum class Padding { none, causal_left, zero_symmetric };

struct Conv1dOptions {
  std::size_t stride = 1;
  Padding padding = Padding::none;
  std::size_t groups = 1;
};

/// Output length of a 1-D convolution; throws DimensionError when the kernel
/// does not fit in the padded input.
std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, const Conv1dOptions& options);

// a[..., M, K] x b[K, N] -> [..., M, N]
Tensor matmul(const Tensor& a, const Tensor& b);
Var matmul(Var a, Var b);

Tensor add(const Tensor& a, const Tensor& b);
Var add(Var a, Var b);
Tensor mul(const Tensor& a, const Tensor& b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);

double activation(Activation kind, double x);
Tensor activation(Activation kind, const Tensor& x);
Var activation(Activation kind, Var x, bool recompute = false);

// x[B, Cin, L], w[Cout, Cin / groups, K], bias[Cout] (optional) -> [B, Cout, Lout]
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv1dOptions& options);
Var conv1d(Var x, Var w, std::optional<Var> bias, const Conv1dOptions& options, bool recompute = false);

/// Normalises over the last axis with the biased (1/D) variance.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Var layer_norm(Var x, Var gamma, Var beta, double eps);

/// Per-channel statistics of a training-mode batch norm call.
struct BatchStats {
  Tensor mean;
  Tensor var_unbiased;
};

// x[B, C, L]; statistics over (B, L) per channel.
Var batch_norm_train(Var x, Var gamma, Var beta, double eps, BatchStats* stats_out);
Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& running_mean, const Tensor& running_var, double eps);

// [B, X, Y] -> [B, Y, X]
Tensor transpose_last2(const Tensor& x);
Var transpose_last2(Var x, bool recompute = false);

/// Reverses axis 1 of a tensor of rank >= 2.
Tensor reverse_time(const Tensor& x);
Var reverse_time(Var x);

// [B, L, D] -> [B, D]
Var mean_time(Var x);

/// -exp(x), used to decode log-parameterised state matrices.
Var neg_exp(Var x);

/// Inverted dropout; identity when p == 0.
Var dropout(Var x, double p, std::uint64_t seed);

/// Mean sigmoid binary cross-entropy over all cells; targets must be 0 or 1.
double bce_with_logits(const Tensor& logits, const Tensor& targets);
Var bce_with_logits(Var logits, Var targets);

}  // namespace ecgmamba
