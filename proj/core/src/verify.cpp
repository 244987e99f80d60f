#include "ecgmamba/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>
#include <sstream>

#include "ecgmamba/bench.hpp"
#include "ecgmamba/error.hpp"
#include "ecgmamba/metrics.hpp"
#include "ecgmamba/model.hpp"
#include "ecgmamba/random.hpp"
#include "ecgmamba/ssm.hpp"

namespace ecgmamba::verify {

double relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  if (analytic.size() != numeric.size()) throw DimensionError("relative_error: tensors differ in size");
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

double max_gradient_error(const std::vector<Tensor*>& leaves, const std::function<Var(ParamBinder&)>& f,
                          std::uint64_t seed, double h) {
  Tensor projection;
  std::vector<Tensor> analytic;
  {
    Tape tape;
    ParamBinder bind(tape, true);
    Var out = f(bind);
    Rng rng(seed);
    projection = rng.normal_tensor(out.shape());
    Var loss = sum(mul(out, tape.constant(projection)));
    tape.release_recomputable();
    tape.backward(loss);
    for (Tensor* leaf : leaves) analytic.push_back(bind.grad(*leaf));
  }
  auto evaluate = [&] {
    Tape tape;
    ParamBinder bind(tape, false);
    const Tensor& y = f(bind).value();
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * projection[i];
    return acc;
  };
  double worst = 0.0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor& leaf = *leaves[l];
    Tensor numeric(leaf.shape());
    for (std::size_t j = 0; j < leaf.size(); ++j) {
      const double saved = leaf[j];
      leaf[j] = saved + h;
      const double plus = evaluate();
      leaf[j] = saved - h;
      const double minus = evaluate();
      leaf[j] = saved;
      numeric[j] = (plus - minus) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(analytic[l], numeric));
  }
  return worst;
}

namespace {

struct Outcome {
  double observed = 0.0;
  std::string detail;
};

struct Check {
  std::string name;
  std::string description;
  double threshold;
  std::function<Outcome()> run;
  /// Pass when observed <= threshold (default) or observed >= threshold.
  bool at_least = false;
};

double normwise(const Tensor& a, const Tensor& b) {
  double scale = 0.0;
  for (double v : b.values()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, b) / std::max(scale, 1e-300);
}

Tensor broadcast_time_invariant(const Tensor& per_channel, std::size_t batch, std::size_t length) {
  const std::size_t dn = per_channel.size();
  Tensor out({batch, length, per_channel.dim(0), per_channel.dim(1)});
  for (std::size_t bt = 0; bt < batch * length; ++bt) std::copy_n(per_channel.data(), dn, out.data() + bt * dn);
  return out;
}

SsmDirectionParams random_direction(std::size_t channels, std::size_t state, std::size_t kernel, std::size_t rank,
                                    Rng& rng) {
  SsmDirectionParams p = SsmDirectionParams::init(channels, state, kernel, rank, rng);
  for (double& v : p.a_log.values()) v += rng.uniform(-0.3, 0.3);
  return p;
}

// ---------------------------------------------------------------- tensor

Outcome check_tensor_examples() {
  double worst = 0.0;
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 2}, {5, 6, 7, 8});
  worst = std::max(worst, max_abs_diff(matmul(a, b), Tensor({2, 2}, {19, 22, 43, 50})));
  const Tensor x({1, 1, 4}, {1, 2, 3, 4});
  const Tensor w({1, 1, 2}, {1, 1});
  worst = std::max(worst, max_abs_diff(conv1d(x, w, Tensor(), {}), Tensor({1, 1, 3}, {3, 5, 7})));
  const Tensor ln = layer_norm(Tensor({1, 3}, {1, 2, 3}), Tensor::ones({3}), Tensor::zeros({3}), 0.0);
  const double s = std::sqrt(1.5);
  worst = std::max(worst, max_abs_diff(ln, Tensor({1, 3}, {-s, 0.0, s})));
  worst = std::max(worst, std::abs(activation(Activation::softplus, 0.0) - std::numbers::ln2));
  return {worst, "matmul, conv1d, layer_norm and softplus against hand-computed values"};
}

Outcome check_layer_norm_moments() {
  Rng rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 1 + rng.index(6), dim = 2 + rng.index(30);
    Tensor x = rng.normal_tensor({rows, dim}, 5.0);
    const Tensor y = layer_norm(x, Tensor::ones({dim}), Tensor::zeros({dim}), 1e-12);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t d = 0; d < dim; ++d) mean += y[r * dim + d];
      mean /= static_cast<double>(dim);
      for (std::size_t d = 0; d < dim; ++d) var += (y[r * dim + d] - mean) * (y[r * dim + d] - mean);
      var /= static_cast<double>(dim);
      worst = std::max({worst, std::abs(mean) * 1e3, std::abs(var - 1.0)});
    }
  }
  return {worst, "max(|row mean| * 1e3, |biased variance - 1|) over 20 random inputs"};
}

Outcome check_conv_partition() {
  Rng rng(12);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 1 + rng.index(5), windows = 1 + rng.index(8), cin = 1 + rng.index(3);
    const Tensor x = rng.normal_tensor({1, cin, k * windows});
    // One output channel per (input channel, tap) selects exactly that sample.
    Tensor w({cin * k, cin, k});
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t j = 0; j < k; ++j) w.at({c * k + j, c, j}) = 1.0;
    }
    const Tensor y = conv1d(x, w, Tensor(), Conv1dOptions{k, Padding::none, 1});
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t win = 0; win < windows; ++win) {
        for (std::size_t j = 0; j < k; ++j) {
          worst = std::max(worst, std::abs(y.at({0, c * k + j, win}) - x.at({0, c, win * k + j})));
        }
      }
    }
  }
  return {worst, "stride = kernel receptive fields reassemble the input"};
}

Outcome check_replay() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.ssm_state = 4;
  cfg.n_leads = 2;
  cfg.input_length = 64;
  cfg.encoder = {{8, 8, 8}};
  cfg.n_classes = 3;
  const Model model = Model::build(cfg, 3);
  Rng rng(13);
  Tape tape;
  ParamBinder bind(tape, true);
  Var logits = model.forward(bind, tape.constant(rng.normal_tensor({2, 2, 64})), true).logits;
  (void)logits;
  const bool exact = tape.replay_is_bit_exact();
  return {exact ? 0.0 : 1.0, "re-running every recorded op reproduces its output bit for bit"};
}

// ---------------------------------------------------------------- gradients

Outcome grad_ops() {
  Rng rng(21);
  double worst = 0.0;
  std::ostringstream detail;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = rng.normal_tensor({2, 3, 4}), b = rng.normal_tensor({4, 5});
    worst = std::max(worst, max_gradient_error({&a, &b}, [&](ParamBinder& p) { return matmul(p(a), p(b)); }, trial));
    Tensor x = rng.normal_tensor({2, 3, 4}), y = rng.normal_tensor({4});
    worst = std::max(worst, max_gradient_error({&x, &y}, [&](ParamBinder& p) { return add(p(x), p(y)); }, trial));
    Tensor u = rng.normal_tensor({3, 4}), v = rng.normal_tensor({3, 4});
    worst = std::max(worst, max_gradient_error({&u, &v}, [&](ParamBinder& p) { return mul(p(u), p(v)); }, trial));
    for (Activation kind : {Activation::relu, Activation::sigmoid, Activation::softplus, Activation::swish}) {
      Tensor z = rng.normal_tensor({3, 5}, 2.0);
      for (double& e : z.values()) {
        if (std::abs(e) < 1e-3) e = 0.5;  // keep relu away from its kink
      }
      worst = std::max(worst, max_gradient_error({&z}, [&](ParamBinder& p) { return activation(kind, p(z)); }, trial));
    }
    Tensor t = rng.normal_tensor({2, 3, 4});
    worst = std::max(worst, max_gradient_error({&t}, [&](ParamBinder& p) { return transpose_last2(p(t)); }, trial));
    worst = std::max(worst, max_gradient_error({&t}, [&](ParamBinder& p) { return reverse_time(p(t)); }, trial));
    worst = std::max(worst, max_gradient_error({&t}, [&](ParamBinder& p) { return mean_time(p(t)); }, trial));
    worst = std::max(worst, max_gradient_error({&t}, [&](ParamBinder& p) { return neg_exp(p(t)); }, trial));
    Tensor logits = rng.normal_tensor({3, 4}, 2.0);
    Tensor targets({3, 4});
    for (double& e : targets.values()) e = rng.bernoulli(0.5) ? 1.0 : 0.0;
    worst = std::max(worst, max_gradient_error({&logits},
                                               [&](ParamBinder& p) {
                                                 return bce_with_logits(p(logits), p.tape().constant(targets));
                                               },
                                               trial));
  }
  return {worst, "matmul, add, mul, activations, layout ops, neg_exp, bce"};
}

Outcome grad_conv1d() {
  Rng rng(22);
  double worst = 0.0;
  struct Case {
    std::size_t cin, cout, k, length;
    Conv1dOptions opts;
  };
  const Case cases[] = {{2, 3, 3, 9, {1, Padding::none, 1}},         {2, 3, 2, 9, {2, Padding::none, 1}},
                        {3, 2, 4, 8, {4, Padding::none, 1}},         {4, 4, 3, 7, {1, Padding::causal_left, 4}},
                        {2, 4, 3, 6, {1, Padding::zero_symmetric, 1}}, {4, 2, 4, 6, {1, Padding::zero_symmetric, 2}}};
  int trial = 0;
  for (const Case& c : cases) {
    Tensor x = rng.normal_tensor({2, c.cin, c.length});
    Tensor w = rng.normal_tensor({c.cout, c.cin / c.opts.groups, c.k});
    Tensor b = rng.normal_tensor({c.cout});
    worst = std::max(worst, max_gradient_error({&x, &w, &b},
                                               [&](ParamBinder& p) { return conv1d(p(x), p(w), p(b), c.opts); },
                                               ++trial));
  }
  return {worst, "strided, causal depthwise, grouped and zero-symmetric convolutions"};
}

Outcome grad_norms() {
  Rng rng(23);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = rng.normal_tensor({2, 3, 6}), g = rng.normal_tensor({6}), b = rng.normal_tensor({6});
    worst = std::max(worst, max_gradient_error({&x, &g, &b},
                                               [&](ParamBinder& p) { return layer_norm(p(x), p(g), p(b), 1e-5); },
                                               trial));
    Tensor y = rng.normal_tensor({3, 4, 5}), gb = rng.normal_tensor({4}), bb = rng.normal_tensor({4});
    worst = std::max(worst, max_gradient_error({&y, &gb, &bb},
                                               [&](ParamBinder& p) {
                                                 return batch_norm_train(p(y), p(gb), p(bb), 1e-5, nullptr);
                                               },
                                               trial));
  }
  return {worst, "layer_norm and training-mode batch_norm"};
}

Outcome grad_discretize() {
  Rng rng(24);
  double worst = 0.0;
  for (DiscretizationRule rule : {DiscretizationRule::euler_b, DiscretizationRule::zoh_b}) {
    for (int trial = 0; trial < 3; ++trial) {
      Tensor delta = rng.uniform_tensor({2, 3, 4}, 0.05, 0.8);
      Tensor a = rng.uniform_tensor({4, 3}, -2.0, -0.2);
      Tensor b = rng.normal_tensor({2, 3, 3});
      Tensor c = rng.normal_tensor({2, 3, 3});
      worst = std::max(worst, max_gradient_error({&delta, &a, &b},
                                                 [&](ParamBinder& p) {
                                                   const DiscretizedVars d = discretize(p(delta), p(a), p(b), p(c), rule);
                                                   return add(d.a_bar, d.b_bar);
                                                 },
                                                 trial));
    }
  }
  return {worst, "A_bar and B_bar under euler_b and zoh_b"};
}

Outcome grad_selective_scan() {
  Rng rng(25);
  double worst = 0.0;
  for (ScanStrategy strategy : {ScanStrategy::cache_all, ScanStrategy::recompute}) {
    for (int trial = 0; trial < 3; ++trial) {
      Tensor abar = rng.uniform_tensor({2, 6, 3, 4}, 0.1, 0.95);
      Tensor bbar = rng.normal_tensor({2, 6, 3, 4});
      Tensor c = rng.normal_tensor({2, 6, 4});
      Tensor x = rng.normal_tensor({2, 6, 3});
      worst = std::max(worst, max_gradient_error({&abar, &bbar, &c, &x},
                                                 [&](ParamBinder& p) {
                                                   return selective_scan(DiscretizedVars{p(abar), p(bbar), p(c)}, p(x),
                                                                         strategy);
                                                 },
                                                 trial));
    }
  }
  return {worst, "materialised scan, both strategies"};
}

Outcome grad_fused_scan() {
  Rng rng(26);
  double worst = 0.0;
  for (DiscretizationRule rule : {DiscretizationRule::euler_b, DiscretizationRule::zoh_b}) {
    for (ScanStrategy strategy : {ScanStrategy::cache_all, ScanStrategy::recompute}) {
      Tensor x = rng.normal_tensor({2, 7, 3});
      Tensor delta = rng.uniform_tensor({2, 7, 3}, 0.05, 0.8);
      Tensor a = rng.uniform_tensor({3, 4}, -2.0, -0.2);
      Tensor b = rng.normal_tensor({2, 7, 4});
      Tensor c = rng.normal_tensor({2, 7, 4});
      worst = std::max(worst, max_gradient_error({&x, &delta, &a, &b, &c},
                                                 [&](ParamBinder& p) {
                                                   return selective_scan_fused(p(x), p(delta), p(a), p(b), p(c), rule,
                                                                               strategy);
                                                 },
                                                 static_cast<std::uint64_t>(rule) * 2 + static_cast<std::uint64_t>(strategy)));
    }
  }
  return {worst, "discretisation fused into the scan, both rules and strategies"};
}

ModelConfig miniature_block_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 4;
  cfg.ssm_state = 4;
  cfg.expand = 2;
  cfg.conv_kernel = 2;
  cfg.dt_rank = 1;
  cfg.ffn_kernel = 3;
  return cfg;
}

/// Moves delta from its small initial range to O(1) so that A and the
/// projections feeding delta have gradients well above finite-difference noise.
void widen_delta(MambaBlockParams& p, Rng& rng) {
  for (SsmDirectionParams* d : {&p.forward, &p.backward}) {
    for (double& b : d->dt_up.bias.values()) b = rng.uniform(0.0, 1.0);
  }
}

Outcome grad_mamba_block() {
  const ModelConfig cfg = miniature_block_config();
  Rng rng(27);
  double worst = 0.0;
  for (DiscretizationRule rule : {DiscretizationRule::euler_b, DiscretizationRule::zoh_b}) {
    MambaBlockParams p = MambaBlockParams::init(cfg, rng);
    widen_delta(p, rng);
    Tensor x = rng.normal_tensor({1, 8, 4});
    std::vector<Tensor*> leaves{&x};
    p.visit("block", [&](const std::string&, Tensor& t) { leaves.push_back(&t); });
    const SsmOptions opts{rule, ScanStrategy::recompute, true};
    worst = std::max(worst, max_gradient_error(leaves, [&](ParamBinder& b) { return mamba_block(b, p, b(x), opts); },
                                               static_cast<std::uint64_t>(rule)));
  }
  return {worst, "B=1, L=8, D=4, N=4, E=2, K=2; input and every block parameter"};
}

Outcome grad_mamba_layer() {
  const ModelConfig cfg = miniature_block_config();
  Rng rng(28);
  MambaLayerParams p;
  p.block = MambaBlockParams::init(cfg, rng);
  widen_delta(p.block, rng);
  p.ln_block = LayerNormParams::init(4, 1e-5);
  p.ffn = FfnParams::init(4, 8, 3, rng);
  p.ln_ffn = LayerNormParams::init(4, 1e-5);
  for (LayerNormParams* ln : {&p.ln_block, &p.ln_ffn}) {
    ln->gamma = rng.uniform_tensor({4}, 0.5, 1.5);
    ln->beta = rng.normal_tensor({4}, 0.1);
  }
  Tensor x = rng.normal_tensor({2, 6, 4});
  const LayerFlags flags{true, true, 0.0};
  std::vector<Tensor*> leaves{&x};
  p.visit("layer", flags, [&](const std::string&, Tensor& t) { leaves.push_back(&t); });
  const SsmOptions opts{DiscretizationRule::euler_b, ScanStrategy::recompute, true};
  const double worst =
      max_gradient_error(leaves, [&](ParamBinder& b) { return mamba_layer(b, p, b(x), flags, opts); }, 5);
  return {worst, "block + LN + FFN + LN with residuals, every parameter"};
}

Outcome grad_model() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.ssm_state = 4;
  cfg.n_leads = 2;
  cfg.input_length = 64;
  cfg.encoder = {{8, 8, 8}};
  cfg.n_classes = 3;
  Model model = Model::build(cfg, 29);
  Rng rng(29);
  for (MambaLayerParams& layer : model.layers()) widen_delta(layer.block, rng);
  Tensor signal = rng.normal_tensor({2, 2, 64});
  std::vector<Tensor*> leaves{&signal};
  model.visit_parameters([&](const std::string&, Tensor& t) { leaves.push_back(&t); });
  const double worst = max_gradient_error(
      leaves, [&](ParamBinder& b) { return model.forward(b, b(signal), true).logits; }, 6);
  return {worst, "1 layer, D=8, N=4, L=8, T=64, training-mode batch norm"};
}

// ---------------------------------------------------------------- scan

Outcome scan_kernel_equivalence() {
  Rng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng.index(8), n = 1 + rng.index(8), length = 1 + rng.index(64), batch = 1 + rng.index(2);
    const Tensor abar = rng.uniform_tensor({d, n}, 0.05, 0.99);
    const Tensor bbar = rng.normal_tensor({d, n});
    const Tensor c = rng.normal_tensor({n});
    const Tensor x = rng.normal_tensor({batch, length, d});
    Tensor c_seq({batch, length, n});
    for (std::size_t bt = 0; bt < batch * length; ++bt) std::copy_n(c.data(), n, c_seq.data() + bt * n);
    const DiscretizedParams p{broadcast_time_invariant(abar, batch, length), broadcast_time_invariant(bbar, batch, length),
                              c_seq};
    const Tensor recurrent = selective_scan(p, x);
    const Tensor convolved = causal_convolve(x, ssm_conv_kernel(abar, bbar, c, length));
    worst = std::max(worst, normwise(convolved, recurrent));
  }
  return {worst, "100 random time-invariant systems, D,N <= 8, L <= 64 (max |diff| / max |y|)"};
}

struct FusedGrads {
  std::vector<Tensor> grads;
  std::size_t state_bytes = 0;
};

FusedGrads fused_gradients(const std::vector<Tensor>& in, const Tensor& weights, ScanStrategy strategy,
                           DiscretizationRule rule) {
  Tape tape;
  std::vector<Var> v;
  for (const Tensor& t : in) v.push_back(tape.variable(t));
  Var y = selective_scan_fused(v[0], v[1], v[2], v[3], v[4], rule, strategy);
  FusedGrads out;
  out.state_bytes = tape.saved_context_bytes();
  tape.backward(sum(mul(y, tape.constant(weights))));
  for (Var x : v) out.grads.push_back(tape.grad(x));
  return out;
}

Outcome scan_recompute_equivalence() {
  Rng rng(32);
  double worst = 0.0;
  for (DiscretizationRule rule : {DiscretizationRule::euler_b, DiscretizationRule::zoh_b}) {
    for (int trial = 0; trial < 5; ++trial) {
      const std::vector<Tensor> in{rng.normal_tensor({2, 32, 4}), rng.uniform_tensor({2, 32, 4}, 0.001, 0.5),
                                   rng.uniform_tensor({4, 8}, -3.0, -0.1), rng.normal_tensor({2, 32, 8}),
                                   rng.normal_tensor({2, 32, 8})};
      const Tensor w = rng.normal_tensor({2, 32, 4});
      const FusedGrads cached = fused_gradients(in, w, ScanStrategy::cache_all, rule);
      const FusedGrads recomputed = fused_gradients(in, w, ScanStrategy::recompute, rule);
      for (std::size_t i = 0; i < in.size(); ++i) worst = std::max(worst, max_abs_diff(cached.grads[i], recomputed.grads[i]));
    }
  }
  Rng rng2(33);
  const DiscretizedParams p{rng2.uniform_tensor({2, 32, 4, 8}, 0.1, 0.99), rng2.normal_tensor({2, 32, 4, 8}),
                            rng2.normal_tensor({2, 32, 8})};
  const Tensor x = rng2.normal_tensor({2, 32, 4});
  const Tensor gy = rng2.normal_tensor({2, 32, 4});
  const ScanGradients a = scan_backward(p, x, gy, ScanStrategy::cache_all);
  const ScanGradients b = scan_backward(p, x, gy, ScanStrategy::recompute);
  for (auto [u, v] : {std::pair{&a.a_bar, &b.a_bar}, {&a.b_bar, &b.b_bar}, {&a.c, &b.c}, {&a.x, &b.x}}) {
    worst = std::max(worst, max_abs_diff(*u, *v));
  }
  return {worst, "max |grad_cache_all - grad_recompute|, B=2, L=32, D=4, N=8"};
}

Outcome scan_recompute_bytes() {
  const ScanStateBytes bytes = scan_state_bytes(2, 1024, 4, 8);
  const double ratio = static_cast<double>(bytes.recompute) / static_cast<double>(bytes.cached);
  return {ratio, "recorded state bytes at L=1024: recompute " + std::to_string(bytes.recompute) + ", cache_all " +
                     std::to_string(bytes.cached)};
}

Outcome scan_reversal() {
  Rng rng(34);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t channels = 1 + rng.index(6), state = 1 + rng.index(5), length = 1 + rng.index(12);
    const std::size_t kernel = 1 + rng.index(4), batch = 1 + rng.index(2);
    const SsmDirectionParams fwd = random_direction(channels, state, kernel, 1, rng);
    const SsmDirectionParams bwd = random_direction(channels, state, kernel, 1, rng);
    const Tensor x = rng.normal_tensor({batch, length, channels});
    const SsmOptions opts{trial % 2 ? DiscretizationRule::zoh_b : DiscretizationRule::euler_b, ScanStrategy::recompute,
                          true};
    Tape t1;
    ParamBinder b1(t1, false);
    Var xv = t1.constant(x);
    const BiScanOutput bi = bidirectional_scan(b1, fwd, bwd, xv, xv, opts);
    Tape t2;
    ParamBinder b2(t2, false);
    const Var reference = reverse_time(ssm_direction(b2, bwd, reverse_time(t2.constant(x)), opts));
    const Var forward_only = ssm_direction(b2, fwd, t2.constant(x), opts);
    mismatches += !identical(bi.backward.value(), reference.value());
    mismatches += !identical(bi.forward.value(), forward_only.value());

    // Shared parameters and a palindromic input: the backward branch is the
    // time reversal of the forward one.
    Tensor pal({batch, length, channels});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < length; ++t) {
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t src = std::min(t, length - 1 - t);
          pal.at({b, t, c}) = x.at({b, src, c});
        }
      }
    }
    Tape t3;
    ParamBinder b3(t3, false);
    Var pv = t3.constant(pal);
    const BiScanOutput shared = bidirectional_scan(b3, fwd, fwd, pv, pv, opts);
    mismatches += !identical(shared.backward.value(), reverse_time(shared.forward.value()));
  }
  return {static_cast<double>(mismatches), "bit-exact mismatches over 100 random instances"};
}

Outcome scan_linearity() {
  Rng rng(35);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const DiscretizedParams p{rng.uniform_tensor({2, 16, 3, 5}, 0.1, 0.99), rng.normal_tensor({2, 16, 3, 5}),
                              rng.normal_tensor({2, 16, 5})};
    const Tensor x1 = rng.normal_tensor({2, 16, 3}), x2 = rng.normal_tensor({2, 16, 3});
    const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
    Tensor mix(x1.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * x1[i] + beta * x2[i];
    const Tensor y1 = selective_scan(p, x1), y2 = selective_scan(p, x2);
    Tensor combo(y1.shape());
    for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = alpha * y1[i] + beta * y2[i];
    worst = std::max(worst, normwise(selective_scan(p, mix), combo));
  }
  return {worst, "scan(a x1 + b x2) vs a scan(x1) + b scan(x2)"};
}

Outcome scan_stability() {
  Rng rng(36);
  double worst = 0.0;  // > 1 means the bound or the (0, 1) range was violated
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 1 + rng.index(4), n = 1 + rng.index(6), length = 1 + rng.index(64);
    const Tensor delta = rng.uniform_tensor({1, length, d}, 1e-3, 2.0);
    const Tensor a = rng.uniform_tensor({d, n}, -4.0, -0.05);
    const Tensor b = rng.uniform_tensor({1, length, n}, -1.0, 1.0);
    const Tensor c = rng.uniform_tensor({1, length, n}, -1.0, 1.0);
    const Tensor x = rng.uniform_tensor({1, length, d}, -1.0, 1.0);
    const DiscretizedParams p = discretize(delta, a, b, c, DiscretizationRule::zoh_b);
    double max_abar = 0.0;
    for (double v : p.a_bar.values()) {
      if (!(v > 0.0 && v < 1.0)) worst = std::max(worst, 2.0);
      max_abar = std::max(max_abar, v);
    }
    double sup_x = 0.0;
    for (double v : x.values()) sup_x = std::max(sup_x, std::abs(v));
    const Tensor y = selective_scan(p, x);
    for (std::size_t dd = 0; dd < d; ++dd) {
      double bound = 0.0;
      for (std::size_t nn = 0; nn < n; ++nn) {
        double sup_c = 0.0, sup_b = 0.0;
        for (std::size_t t = 0; t < length; ++t) {
          sup_c = std::max(sup_c, std::abs(c[t * n + nn]));
          sup_b = std::max(sup_b, std::abs(p.b_bar[(t * d + dd) * n + nn]));
        }
        bound += sup_c * sup_b;
      }
      bound *= sup_x / (1.0 - max_abar);
      for (std::size_t t = 0; t < length; ++t) worst = std::max(worst, std::abs(y[t * d + dd]) / std::max(bound, 1e-300));
    }
  }
  return {worst, "max |y| / geometric-series bound (<= 1 required), A_bar in (0, 1)"};
}

/// exp(M) for a small dense matrix by scaling and squaring with a Taylor series.
std::vector<double> dense_expm(std::vector<double> m, std::size_t n) {
  double norm = 0.0;
  for (double v : m) norm = std::max(norm, std::abs(v));
  int squarings = 0;
  while (norm * static_cast<double>(n) > 0.5) {
    norm /= 2.0;
    ++squarings;
  }
  const double scale = std::ldexp(1.0, -squarings);
  for (double& v : m) v *= scale;
  auto multiply = [n](const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> c(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * n + k] * b[k * n + j];
      }
    }
    return c;
  };
  std::vector<double> result(n * n, 0.0), term(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) result[i * n + i] = term[i * n + i] = 1.0;
  for (int k = 1; k <= 24; ++k) {
    term = multiply(term, m);
    for (double& v : term) v /= k;
    for (std::size_t i = 0; i < n * n; ++i) result[i] += term[i];
  }
  for (int s = 0; s < squarings; ++s) result = multiply(result, result);
  return result;
}

Outcome scan_continuous_oracle() {
  // A dense state matrix Q diag(a) Q^T with a random orthogonal Q: the exact
  // solution of h' = A h + B x under piecewise-constant input must match the
  // zero-order-hold recurrence on the diagonal system.
  Rng rng(37);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.index(6), length = 1 + rng.index(24);
    const double delta = rng.uniform(0.01, 1.0);
    std::vector<double> a(n), b(n), c(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.uniform(-3.0, -0.1);
      b[i] = rng.normal();
      c[i] = rng.normal();
    }
    std::vector<double> q(n * n);
    for (double& v : q) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {  // Gram-Schmidt on rows
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += q[i * n + k] * q[j * n + k];
        for (std::size_t k = 0; k < n; ++k) q[i * n + k] -= dot * q[j * n + k];
      }
      double norm = 0.0;
      for (std::size_t k = 0; k < n; ++k) norm += q[i * n + k] * q[i * n + k];
      for (std::size_t k = 0; k < n; ++k) q[i * n + k] /= std::sqrt(norm);
    }
    // Columns of Q^T are the rows of Q: A_dense = Q^T diag(a) Q, B_dense = Q^T b, C_dense = Q^T c.
    const std::size_t m = n + 1;
    std::vector<double> block(m * m, 0.0);
    std::vector<double> bd(n, 0.0), cd(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) acc += q[k * n + i] * a[k] * q[k * n + j];
        block[i * m + j] = delta * acc;
      }
      for (std::size_t k = 0; k < n; ++k) {
        bd[i] += q[k * n + i] * b[k];
        cd[i] += q[k * n + i] * c[k];
      }
      block[i * m + n] = delta * bd[i];
    }
    const std::vector<double> e = dense_expm(block, m);  // [[Phi, Gamma], [0, 1]]

    const Tensor x = rng.normal_tensor({1, length, 1});
    std::vector<double> h(n, 0.0), next(n);
    Tensor exact({1, length, 1});
    for (std::size_t t = 0; t < length; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        double acc = e[i * m + n] * x[t];
        for (std::size_t j = 0; j < n; ++j) acc += e[i * m + j] * h[j];
        next[i] = acc;
      }
      h = next;
      double y = 0.0;
      for (std::size_t i = 0; i < n; ++i) y += cd[i] * h[i];
      exact[t] = y;
    }

    const Tensor delta_t({1, length, 1}, delta);
    const Tensor a_t({1, n}, a);
    Tensor b_t({1, length, n}), c_t({1, length, n});
    for (std::size_t t = 0; t < length; ++t) {
      std::copy(b.begin(), b.end(), b_t.data() + t * n);
      std::copy(c.begin(), c.end(), c_t.data() + t * n);
    }
    const Tensor y = selective_scan(discretize(delta_t, a_t, b_t, c_t, DiscretizationRule::zoh_b), x);
    worst = std::max(worst, normwise(y, exact));
  }
  return {worst, "zoh_b recurrence vs exact solution of the dense continuous system"};
}

// ---------------------------------------------------------------- metrics

struct MetricInstance {
  Tensor scores, labels, pred;
};

MetricInstance random_metric_instance(Rng& rng) {
  const std::size_t b = 1 + rng.index(32), c = 1 + rng.index(9);
  MetricInstance m{Tensor({b, c}), Tensor({b, c}), Tensor({b, c})};
  const double p = rng.uniform(0.05, 0.95);
  const bool coarse = rng.bernoulli(0.5);  // coarse scores produce ties
  for (std::size_t i = 0; i < b * c; ++i) {
    m.labels[i] = rng.bernoulli(p) ? 1.0 : 0.0;
    const double s = rng.normal() + (m.labels[i] == 1.0 ? 0.7 : 0.0);
    m.scores[i] = coarse ? std::round(s * 2.0) / 2.0 : s;
    m.pred[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  return m;
}

Outcome metrics_auc_oracle() {
  Rng rng(41);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const MetricInstance m = random_metric_instance(rng);
    const std::size_t rows = m.scores.dim(0), cols = m.scores.dim(1);
    double total = 0.0;
    std::size_t valid = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      double wins = 0.0, pairs = 0.0;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < rows; ++j) {
          if (m.labels[i * cols + c] != 1.0 || m.labels[j * cols + c] != 0.0) continue;
          const double si = m.scores[i * cols + c], sj = m.scores[j * cols + c];
          wins += si > sj ? 1.0 : (si == sj ? 0.5 : 0.0);
          pairs += 1.0;
        }
      }
      if (pairs > 0) {
        total += wins / pairs;
        ++valid;
      }
    }
    if (valid == 0) {
      bool threw = false;
      try {
        (void)auc_macro(m.scores, m.labels);
      } catch (const MetricUndefinedError&) {
        threw = true;
      }
      if (!threw) worst = std::max(worst, 1.0);
      continue;
    }
    worst = std::max(worst, std::abs(auc_macro(m.scores, m.labels) - total / static_cast<double>(valid)));
  }
  return {worst, "rank-statistic macro AUC vs pairwise brute force, 200 instances"};
}

Outcome metrics_f1_accuracy_oracle() {
  Rng rng(42);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const MetricInstance m = random_metric_instance(rng);
    const std::size_t rows = m.pred.dim(0), cols = m.pred.dim(1);
    double f1_total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t r = 0; r < rows; ++r) {
        const double p = m.pred[r * cols + c], y = m.labels[r * cols + c];
        tp += p * y;
        fp += p * (1 - y);
        fn += (1 - p) * y;
      }
      const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
      f1_total += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    }
    double exact = 0.0, cells = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      bool all = true;
      for (std::size_t c = 0; c < cols; ++c) {
        const bool same = m.pred[r * cols + c] == m.labels[r * cols + c];
        cells += same;
        all = all && same;
      }
      exact += all;
    }
    worst = std::max({worst, std::abs(f1_macro(m.pred, m.labels) - f1_total / static_cast<double>(cols)),
                      std::abs(accuracy(m.pred, m.labels, AccuracyMode::subset) - exact / static_cast<double>(rows)),
                      std::abs(accuracy(m.pred, m.labels, AccuracyMode::per_label) -
                               cells / static_cast<double>(rows * cols))});
  }
  return {worst, "macro F1 (precision/recall form), subset and per-label accuracy, 200 instances"};
}

Outcome metrics_auc_monotone() {
  Rng rng(43);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const MetricInstance m = random_metric_instance(rng);
    Tensor transformed = m.scores;
    for (double& v : transformed.values()) v = v * v * v + v;
    try {
      worst = std::max(worst, std::abs(auc_macro(m.scores, m.labels) - auc_macro(transformed, m.labels)));
    } catch (const MetricUndefinedError&) {
    }
  }
  return {worst, "AUC under s -> s^3 + s"};
}

// ---------------------------------------------------------------- model

Outcome model_positional_encoding() {
  const std::size_t length = 1000, dim = 128;
  const Tensor pe = positional_encoding(length, dim);
  double worst = 0.0;
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::exp(static_cast<double>(2 * i) / static_cast<double>(dim) * std::log(10000.0));
      worst = std::max({worst, std::abs(pe[pos * dim + 2 * i] - std::sin(angle)),
                        std::abs(pe[pos * dim + 2 * i + 1] - std::cos(angle))});
    }
  }
  for (std::size_t i = 0; i < dim / 2; ++i) {
    worst = std::max({worst, std::abs(pe[2 * i]), std::abs(pe[2 * i + 1] - 1.0)});
  }
  return {worst, "L=1000, D=128 against sin/cos closed form"};
}

Outcome model_identity_stack() {
  ModelConfig cfg = miniature_block_config();
  cfg.n_layers = 3;
  cfg.use_ln = false;
  cfg.use_ffn = false;
  Rng rng(51);
  std::vector<MambaLayerParams> layers(cfg.n_layers);
  const LayerFlags flags{false, false, 0.0};
  for (MambaLayerParams& l : layers) {
    l.block = MambaBlockParams::init(cfg, rng);
    l.block.visit("b", [](const std::string&, Tensor& t) { t.fill(0.0); });
  }
  const Tensor x = rng.normal_tensor({2, 5, 4});
  Tape tape;
  ParamBinder bind(tape, false);
  Var h = tape.constant(x);
  for (const MambaLayerParams& l : layers) h = mamba_layer(bind, l, h, flags, SsmOptions{}, 0);
  return {max_abs_diff(h.value(), x), "zero block weights, no LN, no FFN"};
}

Outcome model_batch_permutation() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.ssm_state = 4;
  cfg.n_leads = 3;
  cfg.input_length = 40;
  cfg.encoder = {{8, 5, 5}, {8, 2, 2}};
  cfg.n_classes = 2;
  const Model model = Model::build(cfg, 52);
  Rng rng(52);
  const Tensor x = rng.normal_tensor({5, 3, 40});
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor xp(x.shape());
  const std::size_t per = 3 * 40;
  for (std::size_t i = 0; i < perm.size(); ++i) std::copy_n(x.data() + perm[i] * per, per, xp.data() + i * per);
  Tape tape;
  ParamBinder bind(tape, false);
  const Tensor y = model.forward(bind, tape.constant(x), false).logits.value();
  const Tensor yp = model.forward(bind, tape.constant(xp), false).logits.value();
  double worst = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t c = 0; c < 2; ++c) worst = std::max(worst, std::abs(yp.at({i, c}) - y.at({perm[i], c})));
  }
  return {worst, "inference-mode logits follow a batch permutation"};
}

std::vector<Check> all_checks() {
  return {
      {"tensor.examples", "hand-computed values of core ops", 1e-12, check_tensor_examples},
      {"tensor.layer_norm_moments", "normalised rows have zero mean and unit variance", 1e-9, check_layer_norm_moments},
      {"tensor.conv_partition", "stride = kernel convolution partitions its input", 0.0, check_conv_partition},
      {"tensor.replay_bit_exact", "tape replay reproduces every value bit for bit", 0.0, check_replay},
      {"grad.ops", "elementwise, layout and loss gradients vs finite differences", 1e-4, grad_ops},
      {"grad.conv1d", "conv1d gradients vs finite differences", 1e-4, grad_conv1d},
      {"grad.norms", "layer_norm and batch_norm gradients vs finite differences", 1e-4, grad_norms},
      {"grad.discretize", "discretisation gradients vs finite differences", 1e-4, grad_discretize},
      {"grad.selective_scan", "scan gradients vs finite differences", 1e-4, grad_selective_scan},
      {"grad.fused_scan", "fused scan gradients vs finite differences", 1e-4, grad_fused_scan},
      {"grad.mamba_block", "full block gradients vs finite differences", 1e-4, grad_mamba_block},
      {"grad.mamba_layer", "full layer gradients vs finite differences", 1e-4, grad_mamba_layer},
      {"grad.model", "miniature model gradients vs finite differences", 1e-4, grad_model},
      {"scan.kernel_equivalence", "recurrence equals causal convolution with the SSM kernel", 1e-10,
       scan_kernel_equivalence},
      {"scan.recompute_equivalence", "recompute and cache_all gradients agree", 1e-12, scan_recompute_equivalence},
      {"scan.recompute_bytes", "recompute records at most 60% of the cached state bytes", 0.6, scan_recompute_bytes},
      {"scan.reversal", "backward branch is reverse . scan . reverse, bit-exact", 0.0, scan_reversal},
      {"scan.linearity", "scan is linear in x for fixed parameters", 1e-10, scan_linearity},
      {"scan.stability", "A_bar in (0, 1) and outputs within the geometric bound", 1.0 + 1e-12, scan_stability},
      {"scan.continuous_oracle", "zoh_b matches the exact continuous-time solution", 1e-10, scan_continuous_oracle},
      {"metrics.auc_oracle", "macro AUC vs brute force", 1e-12, metrics_auc_oracle},
      {"metrics.f1_accuracy_oracle", "macro F1 and accuracies vs brute force", 1e-12, metrics_f1_accuracy_oracle},
      {"metrics.auc_monotone", "AUC is invariant under monotone transforms", 1e-12, metrics_auc_monotone},
      {"model.positional_encoding", "sinusoidal table matches its closed form", 1e-12, model_positional_encoding},
      {"model.identity_stack", "ablated zero-weight stack is the identity", 0.0, model_identity_stack},
      {"model.batch_permutation", "no cross-sample leakage in inference mode", 1e-12, model_batch_permutation},
  };
}

bool matches(const std::string& name, const std::string& filter) {
  if (filter.empty()) return true;
  std::stringstream ss(filter);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (name == item || name.rfind(item + ".", 0) == 0) return true;
  }
  return false;
}

}  // namespace

std::vector<CheckInfo> list_checks() {
  std::vector<CheckInfo> out;
  for (const Check& c : all_checks()) out.push_back({c.name, c.description});
  return out;
}

std::vector<CheckResult> run_checks(const std::string& filter, std::ostream* log) {
  std::vector<CheckResult> results;
  for (const Check& check : all_checks()) {
    if (!matches(check.name, filter)) continue;
    CheckResult r;
    r.name = check.name;
    r.threshold = check.threshold;
    const auto start = std::chrono::steady_clock::now();
    try {
      const Outcome o = check.run();
      r.observed = o.observed;
      r.detail = o.detail;
      r.passed = std::isfinite(o.observed) && (check.at_least ? o.observed >= check.threshold : o.observed <= check.threshold);
    } catch (const std::exception& e) {
      r.passed = false;
      r.observed = std::numeric_limits<double>::infinity();
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (log != nullptr) {
      *log << (r.passed ? "PASS " : "FAIL ") << r.name << "  observed=" << r.observed << " bound=" << r.threshold
           << "  (" << r.detail << ")\n";
    }
    results.push_back(std::move(r));
  }
  return results;
}

nlohmann::json to_json(const std::vector<CheckResult>& results) {
  nlohmann::json checks = nlohmann::json::array();
  bool all = true;
  for (const CheckResult& r : results) {
    all = all && r.passed;
    checks.push_back({{"name", r.name},
                      {"passed", r.passed},
                      {"observed", std::isfinite(r.observed) ? nlohmann::json(r.observed) : nlohmann::json(nullptr)},
                      {"threshold", r.threshold},
                      {"detail", r.detail},
                      {"seconds", r.seconds}});
  }
  return {{"passed", all}, {"checks", checks}};
}

}  // namespace ecgmamba::verify
