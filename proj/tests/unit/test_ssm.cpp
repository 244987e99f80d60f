#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ecgmamba/bench.hpp"
#include "ecgmamba/error.hpp"
#include "ecgmamba/random.hpp"
#include "ecgmamba/runtime.hpp"
#include "ecgmamba/ssm.hpp"
#include "oracles.hpp"

using namespace ecgmamba;

namespace {

DiscretizedParams constant_params(std::size_t len, double a_bar, double b_bar, double c) {
  return {Tensor({1, len, 1, 1}, a_bar), Tensor({1, len, 1, 1}, b_bar), Tensor({1, len, 1}, c)};
}

struct ScanInputs {
  Tensor x, delta, a, b_in, c;
};

ScanInputs random_inputs(std::size_t batch, std::size_t len, std::size_t d, std::size_t n, std::uint64_t seed) {
  return {oracle::random_normal({batch, len, d}, seed), oracle::random_uniform({batch, len, d}, seed + 1, 0.01, 1.5),
          oracle::random_uniform({d, n}, seed + 2, -3.0, -0.1), oracle::random_normal({batch, len, n}, seed + 3),
          oracle::random_normal({batch, len, n}, seed + 4)};
}

}  // namespace

TEST(Discretize, Examples) {
  const Tensor delta({1, 1, 1}, std::numbers::ln2), a({1, 1}, -1.0), b({1, 1, 1}, 1.0), c({1, 1, 1}, 1.0);
  EXPECT_NEAR(discretize(delta, a, b, c).a_bar[0], 0.5, 1e-15);

  const Tensor one({1, 1, 1}, 1.0);
  EXPECT_NEAR(discretize(one, a, b, c, DiscretizationRule::zoh_b).b_bar[0], 0.6321205588285577, 1e-15);
  EXPECT_NEAR(discretize(one, a, b, c, DiscretizationRule::euler_b).b_bar[0], 1.0, 0.0);

  const Tensor tiny({1, 1, 1}, 1e-12);
  for (DiscretizationRule rule : {DiscretizationRule::euler_b, DiscretizationRule::zoh_b}) {
    const DiscretizedParams p = discretize(tiny, a, b, c, rule);
    EXPECT_NEAR(p.a_bar[0], 1.0, 1e-11);
    EXPECT_NEAR(p.b_bar[0], 0.0, 1e-11);
  }
}

TEST(Discretize, CheckedModeRejectsNonPositiveDelta) {
  runtime::ScopedCheckedMode on(true);
  const Tensor a({1, 1}, -1.0), b({1, 1, 1}, 1.0);
  EXPECT_THROW(discretize(Tensor({1, 1, 1}, 0.0), a, b, b), DomainError);
}

TEST(SelectiveScan, Examples) {
  const Tensor x({1, 3, 1}, 1.0);
  EXPECT_TRUE(identical(selective_scan(constant_params(3, 0.5, 1.0, 1.0), x), Tensor({1, 3, 1}, {1, 1.5, 1.75})));

  const Tensor ramp({1, 4, 1}, {1, 2, 3, 4});
  EXPECT_TRUE(identical(selective_scan(constant_params(4, 1.0, 1.0, 1.0), ramp), Tensor({1, 4, 1}, {1, 3, 6, 10})));
  EXPECT_TRUE(identical(selective_scan(constant_params(4, 0.0, 2.0, 3.0), ramp), Tensor({1, 4, 1}, {6, 12, 18, 24})));
}

TEST(SelectiveScan, MatchesReferenceRecurrence) {
  const ScanInputs in = random_inputs(2, 17, 3, 5, 100);
  for (DiscretizationRule rule : {DiscretizationRule::euler_b, DiscretizationRule::zoh_b}) {
    const Tensor expected = oracle::ssm_scan(in.x, in.delta, in.a, in.b_in, in.c, rule);
    const DiscretizedParams p = discretize(in.delta, in.a, in.b_in, in.c, rule);
    EXPECT_LT(max_abs_diff(selective_scan(p, in.x), expected), 1e-12);
    EXPECT_LT(max_abs_diff(oracle::scan_discretized(p.a_bar, p.b_bar, p.c, in.x), expected), 1e-12);

    Tape tape;
    Var y = selective_scan_fused(tape.constant(in.x), tape.constant(in.delta), tape.constant(in.a),
                                 tape.constant(in.b_in), tape.constant(in.c), rule, ScanStrategy::recompute);
    EXPECT_LT(max_abs_diff(y.value(), expected), 1e-12);
  }
}

TEST(ConvKernel, Examples) {
  const Tensor a({1, 1}, 0.5), b({1, 1}, 1.0), c({1}, 1.0);
  EXPECT_TRUE(identical(ssm_conv_kernel(a, b, c, 3), Tensor({1, 3}, {1, 0.5, 0.25})));
  const Tensor a2({1, 2}, {0.3, 0.7}), b2({1, 2}, {2.0, -1.0}), c2({2}, {0.5, 4.0});
  EXPECT_NEAR(ssm_conv_kernel(a2, b2, c2, 1)[0], 0.5 * 2.0 + 4.0 * -1.0, 1e-15);
}

TEST(ConvKernel, EquivalentToScanForTimeInvariantSystems) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + rng.index(8), n = 1 + rng.index(8), len = 1 + rng.index(64);
    const Tensor abar = rng.uniform_tensor({d, n}, 0.05, 0.99), bbar = rng.normal_tensor({d, n});
    const Tensor c = rng.normal_tensor({n}), x = rng.normal_tensor({1, len, d});
    Tensor a_seq({1, len, d, n}), b_seq({1, len, d, n}), c_seq({1, len, n});
    for (std::size_t t = 0; t < len; ++t) {
      std::copy_n(abar.data(), d * n, a_seq.data() + t * d * n);
      std::copy_n(bbar.data(), d * n, b_seq.data() + t * d * n);
      std::copy_n(c.data(), n, c_seq.data() + t * n);
    }
    const Tensor y = oracle::scan_discretized(a_seq, b_seq, c_seq, x);
    const Tensor conv = causal_convolve(x, ssm_conv_kernel(abar, bbar, c, len));
    double scale = 0.0;
    for (double v : y.values()) scale = std::max(scale, std::abs(v));
    EXPECT_LE(max_abs_diff(conv, y), 1e-10 * scale);
  }
}

TEST(ScanBackward, MatchesFiniteDifferences) {
  Tensor a_bar = oracle::random_uniform({1, 6, 2, 3}, 1, 0.2, 0.95), b_bar = oracle::random_normal({1, 6, 2, 3}, 2);
  Tensor c = oracle::random_normal({1, 6, 3}, 3), x = oracle::random_normal({1, 6, 2}, 4);
  const Tensor gy = oracle::random_normal({1, 6, 2}, 5);
  auto loss = [&] {
    const Tensor y = oracle::scan_discretized(a_bar, b_bar, c, x);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * gy[i];
    return acc;
  };
  const ScanGradients g = scan_backward({a_bar, b_bar, c}, x, gy);
  EXPECT_LT(oracle::normwise_error(g.a_bar, oracle::numeric_gradient(loss, a_bar)), 1e-6);
  EXPECT_LT(oracle::normwise_error(g.b_bar, oracle::numeric_gradient(loss, b_bar)), 1e-6);
  EXPECT_LT(oracle::normwise_error(g.c, oracle::numeric_gradient(loss, c)), 1e-6);
  EXPECT_LT(oracle::normwise_error(g.x, oracle::numeric_gradient(loss, x)), 1e-6);
}

TEST(FusedScan, GradientsMatchFiniteDifferences) {
  for (DiscretizationRule rule : {DiscretizationRule::euler_b, DiscretizationRule::zoh_b}) {
    for (ScanStrategy strategy : {ScanStrategy::cache_all, ScanStrategy::recompute}) {
      ScanInputs in = random_inputs(2, 7, 3, 4, 200);
      std::vector<Tensor*> leaves{&in.x, &in.delta, &in.a, &in.b_in, &in.c};
      const Tensor gy = oracle::random_normal({2, 7, 3}, 7);
      Tape tape;
      std::vector<Var> v;
      for (Tensor* t : leaves) v.push_back(tape.variable(*t));
      Var y = selective_scan_fused(v[0], v[1], v[2], v[3], v[4], rule, strategy);
      tape.backward(sum(mul(y, tape.constant(gy))));
      auto loss = [&] {
        const Tensor y_ref = oracle::ssm_scan(in.x, in.delta, in.a, in.b_in, in.c, rule);
        double acc = 0.0;
        for (std::size_t i = 0; i < y_ref.size(); ++i) acc += y_ref[i] * gy[i];
        return acc;
      };
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        EXPECT_LT(oracle::normwise_error(tape.grad(v[i]), oracle::numeric_gradient(loss, *leaves[i])), 1e-6)
            << "leaf " << i << " rule " << to_string(rule) << " strategy " << to_string(strategy);
      }
    }
  }
}

TEST(FusedScan, StrategiesAgreeAndRecomputeStoresLess) {
  const ScanInputs in = random_inputs(2, 32, 4, 8, 300);
  const Tensor gy = oracle::random_normal({2, 32, 4}, 9);
  std::vector<Tensor> grads[2];
  std::size_t bytes[2];
  for (int s = 0; s < 2; ++s) {
    Tape tape;
    std::vector<Var> v{tape.variable(in.x), tape.variable(in.delta), tape.variable(in.a), tape.variable(in.b_in),
                       tape.variable(in.c)};
    Var y = selective_scan_fused(v[0], v[1], v[2], v[3], v[4], DiscretizationRule::euler_b,
                                 s == 0 ? ScanStrategy::cache_all : ScanStrategy::recompute);
    bytes[s] = tape.saved_context_bytes();
    tape.backward(sum(mul(y, tape.constant(gy))));
    for (Var x : v) grads[s].push_back(tape.grad(x));
  }
  for (std::size_t i = 0; i < grads[0].size(); ++i) EXPECT_LT(max_abs_diff(grads[0][i], grads[1][i]), 1e-12);
  EXPECT_LT(bytes[1], bytes[0]);

  const ScanStateBytes at_1024 = scan_state_bytes(2, 1024, 4, 8);
  EXPECT_LE(static_cast<double>(at_1024.recompute), 0.6 * static_cast<double>(at_1024.cached));
}

TEST(FusedScan, SingleStepStrategiesIdentical) {
  const DiscretizedParams p{oracle::random_uniform({1, 1, 2, 2}, 1, 0.1, 0.9), oracle::random_normal({1, 1, 2, 2}, 2),
                            oracle::random_normal({1, 1, 2}, 3)};
  const Tensor x = oracle::random_normal({1, 1, 2}, 4), gy = oracle::random_normal({1, 1, 2}, 5);
  const ScanGradients a = scan_backward(p, x, gy, ScanStrategy::cache_all);
  const ScanGradients b = scan_backward(p, x, gy, ScanStrategy::recompute);
  EXPECT_TRUE(identical(a.a_bar, b.a_bar));
  EXPECT_TRUE(identical(a.x, b.x));
}

TEST(FusedScan, InjectedFaultBreaksGradient) {
  const ScanInputs in = random_inputs(1, 5, 2, 3, 400);
  Tensor clean, faulty;
  for (int f = 0; f < 2; ++f) {
    runtime::ScopedFault fault(f ? runtime::Fault::scan_backward_sign_flip : runtime::Fault::none);
    Tape tape;
    Var x = tape.variable(in.x);
    Var y = selective_scan_fused(x, tape.constant(in.delta), tape.constant(in.a), tape.constant(in.b_in),
                                 tape.constant(in.c), DiscretizationRule::euler_b, ScanStrategy::recompute);
    tape.backward(sum(y));
    (f ? faulty : clean) = tape.grad(x);
  }
  EXPECT_GT(max_abs_diff(clean, faulty), 1e-3);
  EXPECT_EQ(runtime::parse_fault("scan-backward-sign"), runtime::Fault::scan_backward_sign_flip);
}

TEST(Bidirectional, HandExample) {
  // A_bar = 0.5, B_bar = C = 1 on x = [1, 2, 3]; the backward branch scans [3, 2, 1].
  const Tensor x({1, 3, 1}, {1, 2, 3});
  const DiscretizedParams p = constant_params(3, 0.5, 1.0, 1.0);
  EXPECT_TRUE(identical(selective_scan(p, x), Tensor({1, 3, 1}, {1, 2.5, 4.25})));
  EXPECT_TRUE(identical(reverse_time(selective_scan(p, reverse_time(x))), Tensor({1, 3, 1}, {2.75, 3.5, 3})));
}

TEST(Bidirectional, BackwardBranchIsReversedScan) {
  Rng rng(11);
  const SsmDirectionParams fwd = SsmDirectionParams::init(3, 4, 2, 1, rng);
  const SsmDirectionParams bwd = SsmDirectionParams::init(3, 4, 2, 1, rng);
  const Tensor x = rng.normal_tensor({2, 9, 3});
  const SsmOptions opts;
  Tape t1;
  ParamBinder b1(t1, false);
  Var xv = t1.constant(x);
  const BiScanOutput bi = bidirectional_scan(b1, fwd, bwd, xv, xv, opts);
  Tape t2;
  ParamBinder b2(t2, false);
  const Var ref = reverse_time(ssm_direction(b2, bwd, reverse_time(t2.constant(x)), opts));
  EXPECT_TRUE(identical(bi.backward.value(), ref.value()));
  EXPECT_TRUE(identical(bi.forward.value(), ssm_direction(b2, fwd, t2.constant(x), opts).value()));
}

TEST(Bidirectional, PalindromeWithSharedParameters) {
  Rng rng(12);
  const SsmDirectionParams p = SsmDirectionParams::init(2, 3, 3, 1, rng);
  Tensor x({1, 7, 2});
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t c = 0; c < 2; ++c) x.at({0, t, c}) = static_cast<double>(std::min(t, 6 - t) + c);
  Tape tape;
  ParamBinder bind(tape, false);
  Var xv = tape.constant(x);
  const BiScanOutput bi = bidirectional_scan(bind, p, p, xv, xv, SsmOptions{});
  EXPECT_TRUE(identical(bi.backward.value(), reverse_time(bi.forward.value())));
}

TEST(Bidirectional, MemorylessDirectionsAgree) {
  // A_bar = 0: each output depends only on its own time step.
  const Tensor x = oracle::random_normal({1, 6, 2}, 13);
  const DiscretizedParams p{Tensor({1, 6, 2, 3}, 0.0), oracle::random_normal({1, 6, 2, 3}, 14),
                            oracle::random_normal({1, 6, 3}, 15)};
  DiscretizedParams reversed{reverse_time(p.a_bar), reverse_time(p.b_bar), reverse_time(p.c)};
  EXPECT_TRUE(identical(selective_scan(p, x), reverse_time(selective_scan(reversed, reverse_time(x)))));
}

TEST(Names, RoundTrip) {
  EXPECT_EQ(parse_rule(to_string(DiscretizationRule::zoh_b)), DiscretizationRule::zoh_b);
  EXPECT_EQ(parse_strategy(to_string(ScanStrategy::cache_all)), ScanStrategy::cache_all);
  EXPECT_THROW(parse_rule("bilinear"), ConfigError);
}
