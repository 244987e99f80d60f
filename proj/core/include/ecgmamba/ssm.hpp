#pragma once

#include <string>

#include "ecgmamba/nn.hpp"
#include "ecgmamba/tape.hpp"
#include "ecgmamba/tensor.hpp"

// Selective state-space kernels.
//
// Shapes: B batch, L sequence length, D channels, N state size. The state
// matrix is diagonal per channel, so A is stored as [D, N].
//
//   A_bar[b,t,d,n] = exp(delta[b,t,d] * A[d,n])
//   h_t            = A_bar_t * h_{t-1} + B_bar_t * x_t        (h_0 = 0)
//   y_t[d]         = sum_n C_t[n] * h_t[d,n]
namespace ecgmamba {

enum class DiscretizationRule {
  euler_b,  // B_bar = delta * B
  zoh_b,    // B_bar = (exp(delta * A) - 1) / A * B
};

enum class ScanStrategy {
  cache_all,  // keep the full (B, L, D, N) state trajectory for backward
  recompute,  // keep only the final state; rebuild the trajectory in backward
};

std::string to_string(DiscretizationRule rule);
std::string to_string(ScanStrategy strategy);
DiscretizationRule parse_rule(const std::string& name);
ScanStrategy parse_strategy(const std::string& name);

struct DiscretizedParams {
  Tensor a_bar;  // [B, L, D, N]
  Tensor b_bar;  // [B, L, D, N]
  Tensor c;      // [B, L, N]
};

/// delta[B,L,D] (> 0), a[D,N], b_in[B,L,N], c[B,L,N]. In checked mode a
/// nonpositive delta raises DomainError.
DiscretizedParams discretize(const Tensor& delta, const Tensor& a, const Tensor& b_in, const Tensor& c,
                             DiscretizationRule rule = DiscretizationRule::euler_b);

/// Sequential scan over t; x[B,L,D] -> y[B,L,D].
Tensor selective_scan(const DiscretizedParams& p, const Tensor& x);

struct ScanGradients {
  Tensor a_bar;
  Tensor b_bar;
  Tensor c;
  Tensor x;
  /// State bytes the forward pass retained for this backward.
  std::size_t recorded_state_bytes = 0;
};

ScanGradients scan_backward(const DiscretizedParams& p, const Tensor& x, const Tensor& grad_y,
                            ScanStrategy strategy = ScanStrategy::recompute);

/// Convolution kernel of a time-invariant SSM: K[d,j] = sum_n c[n] a_bar[d,n]^j b_bar[d,n],
/// for a_bar, b_bar [D,N], c [N], j = 0..length-1.
Tensor ssm_conv_kernel(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, std::size_t length);

/// y[b,t,d] = sum_{j<=t} kernel[d,j] x[b,t-j,d] for x[B,L,D], kernel[D,L'] with L' >= L.
Tensor causal_convolve(const Tensor& x, const Tensor& kernel);

// ---------------------------------------------------------------- tape ops

struct DiscretizedVars {
  Var a_bar;
  Var b_bar;
  Var c;
};

DiscretizedVars discretize(Var delta, Var a, Var b_in, Var c, DiscretizationRule rule = DiscretizationRule::euler_b);
Var selective_scan(const DiscretizedVars& p, Var x, ScanStrategy strategy = ScanStrategy::recompute);

/// Discretisation fused into the scan so the (B, L, D, N) tensors are never
/// materialised: x[B,L,D], delta[B,L,D], a[D,N], b_in[B,L,N], c[B,L,N].
Var selective_scan_fused(Var x, Var delta, Var a, Var b_in, Var c, DiscretizationRule rule, ScanStrategy strategy);

// ---------------------------------------------------------------- direction path

/// Learnable parameters of one scan direction.
struct SsmDirectionParams {
  Conv1dLayer conv;  // depthwise causal, weight [D, 1, K]
  Linear b_proj;     // D -> N
  Linear c_proj;     // D -> N
  Linear dt_down;    // D -> R
  Linear dt_up;      // R -> D; its bias is the delta offset fed to softplus
  Tensor a_log;      // [D, N]; A = -exp(a_log)

  /// A initialised to -n for n = 1..N in every channel; delta offset set so
  /// softplus lands log-uniformly in [dt_min, dt_max].
  static SsmDirectionParams init(std::size_t channels, std::size_t state, std::size_t kernel, std::size_t dt_rank,
                                 Rng& rng, double dt_min = 1e-3, double dt_max = 1e-1);

  std::size_t channels() const { return a_log.dim(0); }
  std::size_t state() const { return a_log.dim(1); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    conv.visit(prefix + ".conv", f);
    b_proj.visit(prefix + ".b_proj", f);
    c_proj.visit(prefix + ".c_proj", f);
    dt_down.visit(prefix + ".dt_down", f);
    dt_up.visit(prefix + ".dt_up", f);
    f(prefix + ".a_log", a_log);
  }
};

struct SsmOptions {
  DiscretizationRule rule = DiscretizationRule::euler_b;
  ScanStrategy strategy = ScanStrategy::recompute;
  /// Mark cheap activations (conv, swish, layout) for recomputation in backward.
  bool recompute_activations = true;
};

/// conv -> swish -> (B, C, delta) generation -> fused selective scan.
Var ssm_direction(ParamBinder& bind, const SsmDirectionParams& p, Var x, const SsmOptions& options);

struct BiScanOutput {
  Var forward;
  Var backward;
};

/// The backward branch scans the time-reversed input with its own parameters
/// and reverses its output back, so both outputs are aligned with x.
BiScanOutput bidirectional_scan(ParamBinder& bind, const SsmDirectionParams& p_fwd, const SsmDirectionParams& p_bwd,
                                Var x_fwd, Var x_bwd, const SsmOptions& options);

}  // namespace ecgmamba
