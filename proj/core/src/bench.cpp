#include "ecgmamba/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "ecgmamba/error.hpp"
#include "ecgmamba/ops.hpp"
#include "ecgmamba/random.hpp"
#include "ecgmamba/ssm.hpp"

namespace ecgmamba {

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ScanInputs {
  Tensor x, delta, a, b, c;
};

ScanInputs random_scan_inputs(std::size_t batch, std::size_t length, std::size_t channels, std::size_t state, Rng& rng) {
  ScanInputs in;
  in.x = rng.normal_tensor({batch, length, channels});
  in.delta = rng.uniform_tensor({batch, length, channels}, 0.001, 0.1);
  in.a = rng.uniform_tensor({channels, state}, -2.0, -0.5);
  in.b = rng.normal_tensor({batch, length, state});
  in.c = rng.normal_tensor({batch, length, state});
  return in;
}

/// Records the fused scan plus a weighted-sum loss; returns the scan node.
Var record_scan(Tape& tape, const ScanInputs& in, const Tensor& weights, ScanStrategy strategy, Var* loss) {
  Var y = selective_scan_fused(tape.variable(in.x), tape.variable(in.delta), tape.variable(in.a), tape.variable(in.b),
                               tape.variable(in.c), DiscretizationRule::euler_b, strategy);
  *loss = sum(mul(y, tape.constant(weights)));
  return y;
}

}  // namespace

ScanStateBytes scan_state_bytes(std::size_t batch, std::size_t length, std::size_t channels, std::size_t state) {
  Rng rng(1);
  const ScanInputs in = random_scan_inputs(batch, length, channels, state, rng);
  const Tensor weights({batch, length, channels}, 1.0);
  ScanStateBytes bytes;
  for (ScanStrategy s : {ScanStrategy::recompute, ScanStrategy::cache_all}) {
    Tape tape;
    Var loss;
    record_scan(tape, in, weights, s, &loss);
    (s == ScanStrategy::recompute ? bytes.recompute : bytes.cached) = tape.saved_context_bytes();
  }
  return bytes;
}

Tensor pairwise_mix(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("pairwise_mix: q, k, v must share one [L, F] shape");
  }
  const std::size_t n = q.dim(0), f = q.dim(1);
  const double inv = 1.0 / static_cast<double>(n);
  Tensor y(q.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* qi = q.data() + i * f;
    double* yi = y.data() + i * f;
    for (std::size_t j = 0; j < n; ++j) {
      const double* kj = k.data() + j * f;
      double s = 0.0;
      for (std::size_t e = 0; e < f; ++e) s += qi[e] * kj[e];
      s *= inv;
      const double* vj = v.data() + j * f;
      for (std::size_t e = 0; e < f; ++e) yi[e] += s * vj[e];
    }
  }
  return y;
}

void pairwise_mix_backward(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& gy, Tensor& dq, Tensor& dk,
                           Tensor& dv) {
  const std::size_t n = q.dim(0), f = q.dim(1);
  const double inv = 1.0 / static_cast<double>(n);
  dq = Tensor(q.shape());
  dk = Tensor(k.shape());
  dv = Tensor(v.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* qi = q.data() + i * f;
    const double* gi = gy.data() + i * f;
    for (std::size_t j = 0; j < n; ++j) {
      const double* kj = k.data() + j * f;
      const double* vj = v.data() + j * f;
      double s = 0.0, gs = 0.0;
      for (std::size_t e = 0; e < f; ++e) {
        s += qi[e] * kj[e];
        gs += gi[e] * vj[e];
      }
      s *= inv;
      gs *= inv;
      double* dqi = dq.data() + i * f;
      double* dkj = dk.data() + j * f;
      double* dvj = dv.data() + j * f;
      for (std::size_t e = 0; e < f; ++e) {
        dvj[e] += s * gi[e];
        dqi[e] += gs * kj[e];
        dkj[e] += gs * qi[e];
      }
    }
  }
}

std::vector<ScanBenchRow> run_scan_bench(const ScanBenchOptions& o) {
  if (o.lengths.empty() || o.repeats == 0) throw ConfigError("bench: need at least one length and one repeat");
  Rng rng(o.seed);
  std::vector<ScanBenchRow> rows;
  for (std::size_t length : o.lengths) {
    if (length == 0) throw ConfigError("bench: lengths must be positive");
    ScanBenchRow row;
    row.length = length;
    const ScanInputs in = random_scan_inputs(o.batch, length, o.channels, o.state, rng);
    const Tensor weights = rng.normal_tensor({o.batch, length, o.channels});

    std::vector<double> times;
    for (std::size_t r = 0; r < o.repeats + 1; ++r) {
      const auto start = Clock::now();
      Tape tape;
      Var loss;
      record_scan(tape, in, weights, ScanStrategy::recompute, &loss);
      if (r == 0) row.scan_peak_bytes_recompute = tape.saved_context_bytes();
      tape.backward(loss);
      const double ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
      if (r > 0) times.push_back(ms);  // the first run only warms caches
    }
    row.scan_ms = median(times);
    {
      Tape tape;
      Var loss;
      record_scan(tape, in, weights, ScanStrategy::cache_all, &loss);
      row.scan_peak_bytes_cached = tape.saved_context_bytes();
    }

    if (o.run_quadratic) {
      const Tensor q = rng.normal_tensor({length, o.quad_dim});
      const Tensor k = rng.normal_tensor({length, o.quad_dim});
      const Tensor v = rng.normal_tensor({length, o.quad_dim});
      const Tensor gy = rng.normal_tensor({length, o.quad_dim});
      times.clear();
      for (std::size_t r = 0; r < o.repeats; ++r) {
        const auto start = Clock::now();
        const Tensor y = pairwise_mix(q, k, v);
        Tensor dq, dk, dv;
        pairwise_mix_backward(q, k, v, gy, dq, dk, dv);
        times.push_back(std::chrono::duration<double, std::milli>(Clock::now() - start).count());
      }
      row.quad_ms = median(times);
    }
    rows.push_back(row);
  }
  return rows;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("loglog_slope needs two equally long series of >= 2 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw DomainError("loglog_slope needs positive values");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

void write_bench_csv(const std::filesystem::path& path, const std::vector<ScanBenchRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write bench csv '" + path.string() + "'");
  out << "L,scan_ms,quad_ms,scan_peak_bytes_recompute,scan_peak_bytes_cached\n";
  out.precision(6);
  out << std::fixed;
  for (const ScanBenchRow& r : rows) {
    out << r.length << ',' << r.scan_ms << ',' << r.quad_ms << ',' << r.scan_peak_bytes_recompute << ','
        << r.scan_peak_bytes_cached << '\n';
  }
}

}  // namespace ecgmamba
