#include "oracles.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace oracle {

using ecgmamba::DiscretizationRule;
using ecgmamba::Padding;

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at({i, p}) * b.at({p, j});
      out.at({i, j}) = acc;
    }
  return out;
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, Padding padding,
              std::size_t groups) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t cout = w.dim(0), cpg = w.dim(1), k = w.dim(2);
  std::size_t left = 0, right = 0;
  if (padding == Padding::causal_left) left = k - 1;
  if (padding == Padding::zero_symmetric) {
    left = (k - 1) / 2;
    right = k - 1 - left;
  }
  const std::size_t lout = (len + left + right - k) / stride + 1;
  const std::size_t opg = cout / groups;
  Tensor out({batch, cout, lout});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < lout; ++t) {
        double acc = bias.defined() ? bias[o] : 0.0;
        const std::size_t g = o / opg;
        for (std::size_t ci = 0; ci < cpg; ++ci)
          for (std::size_t j = 0; j < k; ++j) {
            const long src = static_cast<long>(t * stride + j) - static_cast<long>(left);
            if (src < 0 || src >= static_cast<long>(len)) continue;
            acc += w.at({o, ci, j}) * x.at({b, g * cpg + ci, static_cast<std::size_t>(src)});
          }
        out.at({b, o, t}) = acc;
      }
  (void)cin;
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += x[r * d + i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (x[r * d + i] - mean) * (x[r * d + i] - mean);
    var /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = (x[r * d + i] - mean) / std::sqrt(var + eps) * gamma[i] + beta[i];
  }
  return out;
}

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor ssm_scan(const Tensor& x, const Tensor& delta, const Tensor& a, const Tensor& b_in, const Tensor& c,
                DiscretizationRule rule) {
  const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2), n = a.dim(1);
  Tensor y(x.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < d; ++ch) {
      std::vector<double> h(n, 0.0);
      for (std::size_t t = 0; t < len; ++t) {
        const double dt = delta.at({b, t, ch});
        double acc = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          const double av = a.at({ch, s});
          const double abar = std::exp(dt * av);
          const double bbar = rule == DiscretizationRule::euler_b ? dt * b_in.at({b, t, s})
                                                                  : (abar - 1.0) / av * b_in.at({b, t, s});
          h[s] = abar * h[s] + bbar * x.at({b, t, ch});
          acc += c.at({b, t, s}) * h[s];
        }
        y.at({b, t, ch}) = acc;
      }
    }
  return y;
}

Tensor scan_discretized(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& x) {
  const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2), n = c.dim(2);
  Tensor y(x.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < d; ++ch) {
      std::vector<double> h(n, 0.0);
      for (std::size_t t = 0; t < len; ++t) {
        double acc = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          h[s] = a_bar.at({b, t, ch, s}) * h[s] + b_bar.at({b, t, ch, s}) * x.at({b, t, ch});
          acc += c.at({b, t, s}) * h[s];
        }
        y.at({b, t, ch}) = acc;
      }
    }
  return y;
}

double auc_pairs(const std::vector<double>& scores, const std::vector<double>& labels) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1.0) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0.0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return pairs == 0.0 ? std::numeric_limits<double>::quiet_NaN() : wins / pairs;
}

namespace {

std::vector<double> column(const Tensor& t, std::size_t c) {
  std::vector<double> out;
  for (std::size_t i = 0; i < t.dim(0); ++i) out.push_back(t.at({i, c}));
  return out;
}

}  // namespace

double auc_macro(const Tensor& scores, const Tensor& labels) {
  double total = 0.0;
  int counted = 0;
  for (std::size_t c = 0; c < scores.dim(1); ++c) {
    const double auc = auc_pairs(column(scores, c), column(labels, c));
    if (std::isnan(auc)) continue;
    total += auc;
    ++counted;
  }
  return counted == 0 ? std::numeric_limits<double>::quiet_NaN() : total / counted;
}

double f1_macro(const Tensor& pred, const Tensor& labels) {
  double total = 0.0;
  for (std::size_t c = 0; c < pred.dim(1); ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.dim(0); ++i) {
      const bool p = pred.at({i, c}) == 1.0, l = labels.at({i, c}) == 1.0;
      tp += p && l;
      fp += p && !l;
      fn += !p && l;
    }
    const double precision = tp + fp == 0 ? 0.0 : tp / (tp + fp);
    const double recall = tp + fn == 0 ? 0.0 : tp / (tp + fn);
    total += precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
  }
  return total / static_cast<double>(pred.dim(1));
}

double subset_accuracy(const Tensor& pred, const Tensor& labels) {
  double hits = 0.0;
  for (std::size_t i = 0; i < pred.dim(0); ++i) {
    bool all = true;
    for (std::size_t c = 0; c < pred.dim(1); ++c) all = all && pred.at({i, c}) == labels.at({i, c});
    hits += all;
  }
  return hits / static_cast<double>(pred.dim(0));
}

double per_label_accuracy(const Tensor& pred, const Tensor& labels) {
  double hits = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return hits / static_cast<double>(pred.size());
}

double positional_encoding(std::size_t pos, std::size_t col, std::size_t dim) {
  const double i2 = static_cast<double>(col - col % 2);
  const double angle = static_cast<double>(pos) / std::pow(10000.0, i2 / static_cast<double>(dim));
  return col % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

Tensor numeric_gradient(const std::function<double()>& f, Tensor& leaf, double h) {
  Tensor g(leaf.shape());
  for (std::size_t i = 0; i < leaf.size(); ++i) {
    const double saved = leaf[i];
    leaf[i] = saved + h;
    const double plus = f();
    leaf[i] = saved - h;
    const double minus = f();
    leaf[i] = saved;
    g[i] = (plus - minus) / (2.0 * h);
  }
  return g;
}

double normwise_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

Tensor random_normal(const std::vector<std::size_t>& shape, std::uint64_t seed, double stddev) {
  std::mt19937_64 gen(seed ^ 0x5eedULL);
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(shape);
  for (double& v : t.values()) v = dist(gen);
  return t;
}

Tensor random_uniform(const std::vector<std::size_t>& shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 gen(seed ^ 0xfaceULL);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (double& v : t.values()) v = dist(gen);
  return t;
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  std::random_device rd;
  path_ = std::filesystem::temp_directory_path() /
          ("ecgmamba-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace oracle
