#include "ecgmamba/ssm.hpp"

#include <cmath>
#include <memory>
#include <string>

#include <Eigen/Core>

#include "ecgmamba/error.hpp"
#include "ecgmamba/ops.hpp"
#include "ecgmamba/runtime.hpp"

namespace ecgmamba {

std::string to_string(DiscretizationRule rule) { return rule == DiscretizationRule::euler_b ? "euler_b" : "zoh_b"; }
std::string to_string(ScanStrategy strategy) {
  return strategy == ScanStrategy::cache_all ? "cache_all" : "recompute";
}

DiscretizationRule parse_rule(const std::string& name) {
  if (name == "euler_b") return DiscretizationRule::euler_b;
  if (name == "zoh_b") return DiscretizationRule::zoh_b;
  throw ConfigError("unknown discretization rule '" + name + "' (expected euler_b or zoh_b)");
}

ScanStrategy parse_strategy(const std::string& name) {
  if (name == "cache_all") return ScanStrategy::cache_all;
  if (name == "recompute") return ScanStrategy::recompute;
  throw ConfigError("unknown scan strategy '" + name + "' (expected cache_all or recompute)");
}

namespace {

struct ScanDims {
  std::size_t batch, length, channels, state;
};

[[noreturn]] void bad_shapes(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
}

void check_delta(const Tensor& delta) {
  if (!runtime::checked_mode()) return;
  for (double v : delta.values()) {
    if (!(v > 0.0)) throw DomainError("discretize: delta must be positive, got " + std::to_string(v));
  }
}

// delta[B,L,D], a[D,N]
ScanDims delta_a_dims(const char* op, const Tensor& delta, const Tensor& a) {
  if (delta.rank() != 3 || a.rank() != 2 || delta.dim(2) != a.dim(0)) bad_shapes(op, delta, a);
  return {delta.dim(0), delta.dim(1), delta.dim(2), a.dim(1)};
}

void check_projection(const char* op, const ScanDims& s, const Tensor& t) {
  if (t.shape() != Shape{s.batch, s.length, s.state}) {
    throw DimensionError(std::string(op) + ": expected shape " + to_string(Shape{s.batch, s.length, s.state}) +
                         ", got " + to_string(t.shape()));
  }
}

// ---------------------------------------------------------------- discretisation

/// out[n] = exp(scale * a[n]) with Eigen's SIMD exp. Every path that forms
/// A_bar goes through here so cached and recomputed values agree exactly.
void exp_scaled(const double* a, double scale, double* out, std::size_t n) {
  const auto count = static_cast<Eigen::Index>(n);
  Eigen::Map<Eigen::ArrayXd>(out, count) = (Eigen::Map<const Eigen::ArrayXd>(a, count) * scale).exp();
}

class DiscretizeAFn final : public Function {
 public:
  std::string_view name() const override { return "discretize_a"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& delta = *in[0];
    const Tensor& a = *in[1];
    const ScanDims s = delta_a_dims("discretize", delta, a);
    check_delta(delta);
    Tensor out({s.batch, s.length, s.channels, s.state});
    for (std::size_t bt = 0; bt < s.batch * s.length; ++bt) {
      for (std::size_t d = 0; d < s.channels; ++d) {
        const double dl = delta[bt * s.channels + d];
        double* o = out.data() + (bt * s.channels + d) * s.state;
        const double* ar = a.data() + d * s.state;
        exp_scaled(ar, dl, o, s.state);
      }
    }
    flops_ = 2ull * out.size();
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& g,
                               std::span<const bool> needs) override {
    const Tensor& delta = *in[0];
    const Tensor& a = *in[1];
    const ScanDims s = delta_a_dims("discretize", delta, a);
    std::vector<Tensor> grads(2);
    Tensor ddelta(delta.shape());
    Tensor da(a.shape());
    for (std::size_t bt = 0; bt < s.batch * s.length; ++bt) {
      for (std::size_t d = 0; d < s.channels; ++d) {
        const double dl = delta[bt * s.channels + d];
        const std::size_t base = (bt * s.channels + d) * s.state;
        double acc = 0.0;
        for (std::size_t n = 0; n < s.state; ++n) {
          const double ga = g[base + n] * out[base + n];
          acc += ga * a[d * s.state + n];
          da[d * s.state + n] += ga * dl;
        }
        ddelta[bt * s.channels + d] = acc;
      }
    }
    if (needs[0]) grads[0] = std::move(ddelta);
    if (needs[1]) grads[1] = std::move(da);
    return grads;
  }

  std::uint64_t flops() const override { return flops_; }

 private:
  std::uint64_t flops_ = 0;
};

class DiscretizeBFn final : public Function {
 public:
  explicit DiscretizeBFn(DiscretizationRule rule) : rule_(rule) {}
  std::string_view name() const override { return "discretize_b"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& delta = *in[0];
    const Tensor& a = *in[1];
    const Tensor& b_in = *in[2];
    const ScanDims s = delta_a_dims("discretize", delta, a);
    check_projection("discretize", s, b_in);
    check_delta(delta);
    Tensor out({s.batch, s.length, s.channels, s.state});
    for (std::size_t bt = 0; bt < s.batch * s.length; ++bt) {
      const double* bv = b_in.data() + bt * s.state;
      for (std::size_t d = 0; d < s.channels; ++d) {
        const double dl = delta[bt * s.channels + d];
        double* o = out.data() + (bt * s.channels + d) * s.state;
        const double* ar = a.data() + d * s.state;
        for (std::size_t n = 0; n < s.state; ++n) {
          o[n] = rule_ == DiscretizationRule::euler_b ? dl * bv[n] : std::expm1(dl * ar[n]) / ar[n] * bv[n];
        }
      }
    }
    flops_ = (rule_ == DiscretizationRule::euler_b ? 1ull : 4ull) * out.size();
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool> needs) override {
    const Tensor& delta = *in[0];
    const Tensor& a = *in[1];
    const Tensor& b_in = *in[2];
    const ScanDims s = delta_a_dims("discretize", delta, a);
    Tensor ddelta(delta.shape());
    Tensor da(a.shape());
    Tensor db(b_in.shape());
    for (std::size_t bt = 0; bt < s.batch * s.length; ++bt) {
      const double* bv = b_in.data() + bt * s.state;
      for (std::size_t d = 0; d < s.channels; ++d) {
        const double dl = delta[bt * s.channels + d];
        const std::size_t base = (bt * s.channels + d) * s.state;
        double acc = 0.0;
        for (std::size_t n = 0; n < s.state; ++n) {
          const double gv = g[base + n];
          if (rule_ == DiscretizationRule::euler_b) {
            acc += gv * bv[n];
            db[bt * s.state + n] += gv * dl;
          } else {
            const double av = a[d * s.state + n];
            const double e = std::exp(dl * av);
            const double em1 = std::expm1(dl * av);
            acc += gv * e * bv[n];
            da[d * s.state + n] += gv * (dl * e * av - em1) / (av * av) * bv[n];
            db[bt * s.state + n] += gv * em1 / av;
          }
        }
        ddelta[bt * s.channels + d] = acc;
      }
    }
    std::vector<Tensor> grads(3);
    if (needs[0]) grads[0] = std::move(ddelta);
    if (needs[1]) grads[1] = std::move(da);
    if (needs[2]) grads[2] = std::move(db);
    return grads;
  }

  std::uint64_t flops() const override { return flops_; }

 private:
  DiscretizationRule rule_;
  std::uint64_t flops_ = 0;
};

// ---------------------------------------------------------------- materialised scan

ScanDims scan_dims(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& x) {
  if (a_bar.rank() != 4 || b_bar.shape() != a_bar.shape()) bad_shapes("selective_scan", a_bar, b_bar);
  const ScanDims s{a_bar.dim(0), a_bar.dim(1), a_bar.dim(2), a_bar.dim(3)};
  check_projection("selective_scan", s, c);
  if (x.shape() != Shape{s.batch, s.length, s.channels}) bad_shapes("selective_scan", a_bar, x);
  return s;
}

// Runs the recurrence for one batch element. `trajectory` receives h_t for
// every t when non-null ([L, D, N]); `final_state` receives h_L ([D, N]).
void scan_one(const ScanDims& s, std::size_t b, const double* a_bar, const double* b_bar, const double* c,
              const double* x, double* y, double* trajectory, double* final_state, std::vector<double>& h) {
  const std::size_t dn = s.channels * s.state;
  h.assign(dn, 0.0);
  for (std::size_t t = 0; t < s.length; ++t) {
    const std::size_t bt = b * s.length + t;
    const double* ct = c + bt * s.state;
    for (std::size_t d = 0; d < s.channels; ++d) {
      const double xv = x[bt * s.channels + d];
      const double* at = a_bar + (bt * s.channels + d) * s.state;
      const double* bb = b_bar + (bt * s.channels + d) * s.state;
      double* hd = h.data() + d * s.state;
      double acc = 0.0;
      for (std::size_t n = 0; n < s.state; ++n) {
        hd[n] = at[n] * hd[n] + bb[n] * xv;
        acc += ct[n] * hd[n];
      }
      if (y != nullptr) y[bt * s.channels + d] = acc;
    }
    if (trajectory != nullptr) std::copy(h.begin(), h.end(), trajectory + t * dn);
  }
  if (final_state != nullptr) std::copy(h.begin(), h.end(), final_state);
}

bool sign_flip_fault() { return runtime::active_fault() == runtime::Fault::scan_backward_sign_flip; }

class SelectiveScanFn final : public Function {
 public:
  explicit SelectiveScanFn(ScanStrategy strategy) : strategy_(strategy) {}
  std::string_view name() const override { return "selective_scan"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a_bar = *in[0];
    const Tensor& b_bar = *in[1];
    const Tensor& c = *in[2];
    const Tensor& x = *in[3];
    const ScanDims s = scan_dims(a_bar, b_bar, c, x);
    const std::size_t dn = s.channels * s.state;
    Tensor y({s.batch, s.length, s.channels});
    trajectory_.clear();
    final_state_.assign(s.batch * dn, 0.0);
    if (strategy_ == ScanStrategy::cache_all) trajectory_.assign(s.batch * s.length * dn, 0.0);
    std::vector<double> h;
    for (std::size_t b = 0; b < s.batch; ++b) {
      double* traj = strategy_ == ScanStrategy::cache_all ? trajectory_.data() + b * s.length * dn : nullptr;
      scan_one(s, b, a_bar.data(), b_bar.data(), c.data(), x.data(), y.data(), traj, final_state_.data() + b * dn, h);
    }
    flops_ = 3ull * s.batch * s.length * dn;
    return y;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& gy,
                               std::span<const bool> needs) override {
    const Tensor& a_bar = *in[0];
    const Tensor& b_bar = *in[1];
    const Tensor& c = *in[2];
    const Tensor& x = *in[3];
    const ScanDims s = scan_dims(a_bar, b_bar, c, x);
    const std::size_t dn = s.channels * s.state;
    Tensor da(a_bar.shape()), db(b_bar.shape()), dc(c.shape()), dx(x.shape());
    std::vector<double> scratch;
    std::vector<double> h;
    std::vector<double> g(dn);
    for (std::size_t b = 0; b < s.batch; ++b) {
      const double* traj = nullptr;
      if (strategy_ == ScanStrategy::cache_all && !trajectory_.empty()) {
        traj = trajectory_.data() + b * s.length * dn;
      } else {
        scratch.resize(s.length * dn);
        scan_one(s, b, a_bar.data(), b_bar.data(), c.data(), x.data(), nullptr, scratch.data(), nullptr, h);
        traj = scratch.data();
      }
      std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t t = s.length; t-- > 0;) {
        const std::size_t bt = b * s.length + t;
        const double* ct = c.data() + bt * s.state;
        double* dct = dc.data() + bt * s.state;
        for (std::size_t d = 0; d < s.channels; ++d) {
          const double gyv = gy[bt * s.channels + d];
          const double xv = x[bt * s.channels + d];
          const std::size_t base = (bt * s.channels + d) * s.state;
          const double* ht = traj + t * dn + d * s.state;
          const double* hp = t > 0 ? traj + (t - 1) * dn + d * s.state : nullptr;
          double* gd = g.data() + d * s.state;
          double dxv = 0.0;
          for (std::size_t n = 0; n < s.state; ++n) {
            const double gh = gd[n] + gyv * ct[n];
            dct[n] += gyv * ht[n];
            da[base + n] = hp != nullptr ? gh * hp[n] : 0.0;
            db[base + n] = gh * xv;
            dxv += gh * b_bar[base + n];
            gd[n] = gh * a_bar[base + n];
          }
          dx[bt * s.channels + d] = sign_flip_fault() ? -dxv : dxv;
        }
      }
    }
    std::vector<Tensor> grads(4);
    if (needs[0]) grads[0] = std::move(da);
    if (needs[1]) grads[1] = std::move(db);
    if (needs[2]) grads[2] = std::move(dc);
    if (needs[3]) grads[3] = std::move(dx);
    return grads;
  }

  std::size_t saved_bytes() const override {
    return (trajectory_.empty() ? final_state_.size() : trajectory_.size()) * sizeof(double);
  }
  void release_saved() override {
    trajectory_.clear();
    final_state_.clear();
  }
  std::uint64_t flops() const override { return flops_; }

 private:
  ScanStrategy strategy_;
  std::vector<double> trajectory_;
  std::vector<double> final_state_;
  std::uint64_t flops_ = 0;
};

// ---------------------------------------------------------------- fused scan

struct FusedInputs {
  const Tensor& x;
  const Tensor& delta;
  const Tensor& a;
  const Tensor& b_in;
  const Tensor& c;
};

ScanDims fused_dims(const FusedInputs& in) {
  const ScanDims s = delta_a_dims("selective_scan_fused", in.delta, in.a);
  if (in.x.shape() != in.delta.shape()) bad_shapes("selective_scan_fused", in.x, in.delta);
  check_projection("selective_scan_fused", s, in.b_in);
  check_projection("selective_scan_fused", s, in.c);
  return s;
}

/// Reverse step of the Euler-rule scan for one channel, written without
/// branches so the compiler can vectorise it. Per-state contributions to the
/// delta and x gradients go to t_ddl and t_dx (the x term still lacks its
/// delta factor); the caller reduces them.
void euler_step_backward(std::size_t state, double gyv, double dl, double xv, const double* __restrict a,
                         const double* __restrict abar, const double* __restrict c, const double* __restrict b_in,
                         const double* __restrict h, const double* __restrict h_prev, double* __restrict g,
                         double* __restrict da, double* __restrict db, double* __restrict dc,
                         double* __restrict t_ddl, double* __restrict t_dx) {
  for (std::size_t n = 0; n < state; ++n) {
    const double gh = g[n] + gyv * c[n];
    const double g_abar = gh * h_prev[n] * abar[n];
    const double g_bbar = gh * xv;
    dc[n] += gyv * h[n];
    da[n] += g_abar * dl;
    db[n] += g_bbar * dl;
    t_ddl[n] = g_abar * a[n] + g_bbar * b_in[n];
    t_dx[n] = gh * b_in[n];
    g[n] = gh * abar[n];
  }
}

class FusedScanFn final : public Function {
 public:
  FusedScanFn(DiscretizationRule rule, ScanStrategy strategy) : rule_(rule), strategy_(strategy) {}
  std::string_view name() const override { return "selective_scan_fused"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const FusedInputs f{*in[0], *in[1], *in[2], *in[3], *in[4]};
    const ScanDims s = fused_dims(f);
    check_delta(f.delta);
    const std::size_t dn = s.channels * s.state;
    Tensor y({s.batch, s.length, s.channels});
    trajectory_.clear();
    final_state_.assign(s.batch * dn, 0.0);
    if (strategy_ == ScanStrategy::cache_all) trajectory_.assign(s.batch * s.length * dn, 0.0);
    std::vector<double> h;
    for (std::size_t b = 0; b < s.batch; ++b) {
      double* traj = strategy_ == ScanStrategy::cache_all ? trajectory_.data() + b * s.length * dn : nullptr;
      run(s, f, b, y.data(), traj, final_state_.data() + b * dn, h);
    }
    const std::uint64_t elems = static_cast<std::uint64_t>(s.batch) * s.length * dn;
    flops_ = 3ull * elems + 2ull * elems;
    return y;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& gy,
                               std::span<const bool> needs) override {
    const FusedInputs f{*in[0], *in[1], *in[2], *in[3], *in[4]};
    const ScanDims s = fused_dims(f);
    const std::size_t dn = s.channels * s.state;
    Tensor dx(f.x.shape()), ddelta(f.delta.shape()), da(f.a.shape()), db(f.b_in.shape()), dc(f.c.shape());
    // The recompute scratch is fully overwritten by run(), so skip zeroing it.
    std::unique_ptr<double[]> h_scratch;
    std::vector<double> h, g(dn), a_row(s.state), zeros(s.state, 0.0), t_ddl(s.state), t_dx(s.state);
    const bool euler = rule_ == DiscretizationRule::euler_b;
    for (std::size_t b = 0; b < s.batch; ++b) {
      const double* traj = nullptr;
      if (strategy_ == ScanStrategy::cache_all && !trajectory_.empty()) {
        traj = trajectory_.data() + b * s.length * dn;
      } else {
        if (!h_scratch) h_scratch.reset(new double[s.length * dn]);
        run(s, f, b, nullptr, h_scratch.get(), nullptr, h);
        traj = h_scratch.get();
      }
      std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t t = s.length; t-- > 0;) {
        const std::size_t bt = b * s.length + t;
        const double* bt_in = f.b_in.data() + bt * s.state;
        const double* ct = f.c.data() + bt * s.state;
        double* dbt = db.data() + bt * s.state;
        double* dct = dc.data() + bt * s.state;
        for (std::size_t d = 0; d < s.channels; ++d) {
          const double gyv = gy[bt * s.channels + d];
          const double dl = f.delta[bt * s.channels + d];
          const double xv = f.x[bt * s.channels + d];
          const double* ar = f.a.data() + d * s.state;
          double* dar = da.data() + d * s.state;
          const double* ht = traj + t * dn + d * s.state;
          const double* hp = t > 0 ? traj + (t - 1) * dn + d * s.state : nullptr;
          // Recomputing A_bar is cheaper than streaming a cached copy back in.
          exp_scaled(ar, dl, a_row.data(), s.state);
          const double* at = a_row.data();
          double* gd = g.data() + d * s.state;
          double ddl = 0.0;
          double dxv = 0.0;
          if (euler) {
            euler_step_backward(s.state, gyv, dl, xv, ar, at, ct, bt_in, ht, hp != nullptr ? hp : zeros.data(), gd,
                                dar, dbt, dct, t_ddl.data(), t_dx.data());
            for (std::size_t n = 0; n < s.state; ++n) {
              ddl += t_ddl[n];
              dxv += t_dx[n];
            }
            dxv *= dl;
          } else {
            for (std::size_t n = 0; n < s.state; ++n) {
              const double av = ar[n];
              const double abar = at[n];
              const double gh = gd[n] + gyv * ct[n];
              dct[n] += gyv * ht[n];
              const double g_abar = hp != nullptr ? gh * hp[n] : 0.0;
              const double g_bbar = gh * xv;
              const double em1 = std::expm1(dl * av);
              ddl += g_abar * abar * av + g_bbar * abar * bt_in[n];
              dar[n] += g_abar * abar * dl + g_bbar * (dl * abar * av - em1) / (av * av) * bt_in[n];
              dxv += gh * em1 / av * bt_in[n];
              dbt[n] += g_bbar * em1 / av;
              gd[n] = gh * abar;
            }
          }
          dx[bt * s.channels + d] = sign_flip_fault() ? -dxv : dxv;
          ddelta[bt * s.channels + d] = ddl;
        }
      }
    }
    std::vector<Tensor> grads(5);
    if (needs[0]) grads[0] = std::move(dx);
    if (needs[1]) grads[1] = std::move(ddelta);
    if (needs[2]) grads[2] = std::move(da);
    if (needs[3]) grads[3] = std::move(db);
    if (needs[4]) grads[4] = std::move(dc);
    return grads;
  }

  std::size_t saved_bytes() const override {
    return (trajectory_.empty() ? final_state_.size() : trajectory_.size()) * sizeof(double);
  }
  void release_saved() override {
    trajectory_.clear();
    final_state_.clear();
  }
  std::uint64_t flops() const override { return flops_; }

 private:
  void run(const ScanDims& s, const FusedInputs& f, std::size_t b, double* y, double* trajectory, double* final_state,
           std::vector<double>& h) const {
    const std::size_t dn = s.channels * s.state;
    const bool euler = rule_ == DiscretizationRule::euler_b;
    h.assign(dn, 0.0);
    std::vector<double> row(s.state);
    for (std::size_t t = 0; t < s.length; ++t) {
      const std::size_t bt = b * s.length + t;
      const double* bt_in = f.b_in.data() + bt * s.state;
      const double* ct = f.c.data() + bt * s.state;
      for (std::size_t d = 0; d < s.channels; ++d) {
        const double dl = f.delta[bt * s.channels + d];
        const double xv = f.x[bt * s.channels + d];
        const double* ar = f.a.data() + d * s.state;
        double* hd = h.data() + d * s.state;
        double* a_row = row.data();
        exp_scaled(ar, dl, a_row, s.state);
        double acc = 0.0;
        for (std::size_t n = 0; n < s.state; ++n) {
          const double abar = a_row[n];
          const double bbar = euler ? dl * bt_in[n] : std::expm1(dl * ar[n]) / ar[n] * bt_in[n];
          hd[n] = abar * hd[n] + bbar * xv;
          acc += ct[n] * hd[n];
        }
        if (y != nullptr) y[bt * s.channels + d] = acc;
      }
      if (trajectory != nullptr) std::copy(h.begin(), h.end(), trajectory + t * dn);
    }
    if (final_state != nullptr) std::copy(h.begin(), h.end(), final_state);
  }

  DiscretizationRule rule_;
  ScanStrategy strategy_;
  std::vector<double> trajectory_;
  std::vector<double> final_state_;
  std::uint64_t flops_ = 0;
};

}  // namespace

// ---------------------------------------------------------------- tensor API

DiscretizedParams discretize(const Tensor& delta, const Tensor& a, const Tensor& b_in, const Tensor& c,
                             DiscretizationRule rule) {
  DiscretizeAFn fa;
  DiscretizeBFn fb(rule);
  const std::vector<const Tensor*> ia{&delta, &a};
  const std::vector<const Tensor*> ib{&delta, &a, &b_in};
  const ScanDims s = delta_a_dims("discretize", delta, a);
  check_projection("discretize", s, c);
  return DiscretizedParams{fa.forward(ia), fb.forward(ib), c};
}

Tensor selective_scan(const DiscretizedParams& p, const Tensor& x) {
  SelectiveScanFn fn(ScanStrategy::recompute);
  const std::vector<const Tensor*> in{&p.a_bar, &p.b_bar, &p.c, &x};
  return fn.forward(in);
}

ScanGradients scan_backward(const DiscretizedParams& p, const Tensor& x, const Tensor& grad_y, ScanStrategy strategy) {
  SelectiveScanFn fn(strategy);
  const std::vector<const Tensor*> in{&p.a_bar, &p.b_bar, &p.c, &x};
  const Tensor y = fn.forward(in);
  if (grad_y.shape() != y.shape()) bad_shapes("scan_backward", grad_y, y);
  ScanGradients out;
  out.recorded_state_bytes = fn.saved_bytes();
  const bool needs[4] = {true, true, true, true};
  auto grads = fn.backward(in, y, grad_y, needs);
  out.a_bar = std::move(grads[0]);
  out.b_bar = std::move(grads[1]);
  out.c = std::move(grads[2]);
  out.x = std::move(grads[3]);
  return out;
}

Tensor ssm_conv_kernel(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, std::size_t length) {
  if (a_bar.rank() != 2 || b_bar.shape() != a_bar.shape()) bad_shapes("ssm_conv_kernel", a_bar, b_bar);
  if (c.shape() != Shape{a_bar.dim(1)}) bad_shapes("ssm_conv_kernel", a_bar, c);
  if (length == 0) throw DimensionError("ssm_conv_kernel: length must be positive");
  const std::size_t channels = a_bar.dim(0);
  const std::size_t state = a_bar.dim(1);
  Tensor kernel({channels, length});
  std::vector<double> power(state);
  for (std::size_t d = 0; d < channels; ++d) {
    for (std::size_t n = 0; n < state; ++n) power[n] = c[n] * b_bar[d * state + n];
    for (std::size_t j = 0; j < length; ++j) {
      double acc = 0.0;
      for (std::size_t n = 0; n < state; ++n) {
        acc += power[n];
        power[n] *= a_bar[d * state + n];
      }
      kernel[d * length + j] = acc;
    }
  }
  return kernel;
}

Tensor causal_convolve(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 3 || kernel.rank() != 2 || kernel.dim(0) != x.dim(2) || kernel.dim(1) < x.dim(1)) {
    bad_shapes("causal_convolve", x, kernel);
  }
  const std::size_t nb = x.dim(0), nl = x.dim(1), nd = x.dim(2), nk = kernel.dim(1);
  Tensor y(x.shape());
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t t = 0; t < nl; ++t) {
      for (std::size_t d = 0; d < nd; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= t; ++j) acc += kernel[d * nk + j] * x[(b * nl + t - j) * nd + d];
        y[(b * nl + t) * nd + d] = acc;
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------- tape API

DiscretizedVars discretize(Var delta, Var a, Var b_in, Var c, DiscretizationRule rule) {
  Tape& tape = *delta.tape;
  Var a_bar = tape.record(std::make_unique<DiscretizeAFn>(), {delta, a});
  Var b_bar = tape.record(std::make_unique<DiscretizeBFn>(rule), {delta, a, b_in});
  return {a_bar, b_bar, c};
}

Var selective_scan(const DiscretizedVars& p, Var x, ScanStrategy strategy) {
  return x.tape->record(std::make_unique<SelectiveScanFn>(strategy), {p.a_bar, p.b_bar, p.c, x});
}

Var selective_scan_fused(Var x, Var delta, Var a, Var b_in, Var c, DiscretizationRule rule, ScanStrategy strategy) {
  return x.tape->record(std::make_unique<FusedScanFn>(rule, strategy), {x, delta, a, b_in, c});
}

// ---------------------------------------------------------------- direction path

SsmDirectionParams SsmDirectionParams::init(std::size_t channels, std::size_t state, std::size_t kernel,
                                            std::size_t dt_rank, Rng& rng, double dt_min, double dt_max) {
  SsmDirectionParams p;
  p.conv = Conv1dLayer::init(channels, channels, kernel, Conv1dOptions{1, Padding::causal_left, channels}, true, rng);
  p.b_proj = Linear::init(channels, state, false, rng);
  p.c_proj = Linear::init(channels, state, false, rng);
  p.dt_down = Linear::init(channels, dt_rank, false, rng);
  const double dt_bound = 1.0 / std::sqrt(static_cast<double>(dt_rank));
  p.dt_up.weight = rng.uniform_tensor({dt_rank, channels}, -dt_bound, dt_bound);
  p.dt_up.bias = Tensor({channels});
  for (double& v : p.dt_up.bias.values()) {
    const double dt = std::exp(rng.uniform(std::log(dt_min), std::log(dt_max)));
    v = dt + std::log(-std::expm1(-dt));  // softplus^{-1}(dt)
  }
  p.a_log = Tensor({channels, state});
  for (std::size_t d = 0; d < channels; ++d) {
    for (std::size_t n = 0; n < state; ++n) p.a_log[d * state + n] = std::log(static_cast<double>(n + 1));
  }
  return p;
}

Var ssm_direction(ParamBinder& bind, const SsmDirectionParams& p, Var x, const SsmOptions& options) {
  const bool rc = options.recompute_activations;
  Var channels_first = transpose_last2(x, rc);
  Var conv = p.conv(bind, channels_first, rc);
  Var xs = activation(Activation::swish, transpose_last2(conv, rc), rc);
  Var b_in = p.b_proj(bind, xs);
  Var c = p.c_proj(bind, xs);
  Var delta = activation(Activation::softplus, p.dt_up(bind, p.dt_down(bind, xs)));
  Var a = neg_exp(bind(p.a_log));
  return selective_scan_fused(xs, delta, a, b_in, c, options.rule, options.strategy);
}

BiScanOutput bidirectional_scan(ParamBinder& bind, const SsmDirectionParams& p_fwd, const SsmDirectionParams& p_bwd,
                                Var x_fwd, Var x_bwd, const SsmOptions& options) {
  Var y_fwd = ssm_direction(bind, p_fwd, x_fwd, options);
  Var y_bwd = reverse_time(ssm_direction(bind, p_bwd, reverse_time(x_bwd), options));
  return {y_fwd, y_bwd};
}

}  // namespace ecgmamba
