#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ecgmamba/tensor.hpp"

namespace ecgmamba {

struct ScanBenchOptions {
  std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
  std::size_t batch = 2;
  std::size_t channels = 32;
  std::size_t state = 16;
  /// Dimension of the pairwise-score baseline's feature vectors.
  std::size_t quad_dim = 32;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  bool run_quadratic = true;
};

struct ScanBenchRow {
  std::size_t length = 0;
  double scan_ms = 0.0;  // median forward + backward of the fused selective scan
  double quad_ms = 0.0;  // median forward + backward of the O(L^2) baseline
  std::size_t scan_peak_bytes_recompute = 0;
  std::size_t scan_peak_bytes_cached = 0;
};

std::vector<ScanBenchRow> run_scan_bench(const ScanBenchOptions& options);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Columns: L,scan_ms,quad_ms,scan_peak_bytes_recompute,scan_peak_bytes_cached
void write_bench_csv(const std::filesystem::path& path, const std::vector<ScanBenchRow>& rows);

/// State bytes recorded by one fused scan forward under each strategy.
struct ScanStateBytes {
  std::size_t recompute = 0;
  std::size_t cached = 0;
};
ScanStateBytes scan_state_bytes(std::size_t batch, std::size_t length, std::size_t channels, std::size_t state);

/// Softmax-free pairwise-score mixing y_i = sum_j (q_i . k_j) v_j / L and its
/// gradient; q, k, v are [L, F]. Used as the quadratic reference workload.
Tensor pairwise_mix(const Tensor& q, const Tensor& k, const Tensor& v);
void pairwise_mix_backward(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& grad_y, Tensor& dq,
                           Tensor& dk, Tensor& dv);

}  // namespace ecgmamba
