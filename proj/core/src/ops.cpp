#include "ecgmamba/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "ecgmamba/error.hpp"

namespace ecgmamba {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Var record(std::unique_ptr<Function> fn, std::vector<Var> inputs, bool recompute = false) {
  Tape* tape = inputs.front().tape;
  return tape->record(std::move(fn), std::move(inputs), recompute);
}

template <typename Fn>
Tensor run_forward(Fn fn, std::initializer_list<const Tensor*> inputs) {
  std::vector<const Tensor*> ptrs(inputs);
  return fn.forward(ptrs);
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(x.shape()));
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------- matmul

class MatmulFn final : public Function {
 public:
  std::string_view name() const override { return "matmul"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) shape_mismatch("matmul", a, b);
    const std::size_t k = b.dim(0);
    const std::size_t n = b.dim(1);
    const std::size_t rows = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out(out_shape);
    MatMap(out.data(), rows, n).noalias() = ConstMatMap(a.data(), rows, k) * ConstMatMap(b.data(), k, n);
    flops_ = 2ull * rows * k * n;
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool> needs) override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    const std::size_t k = b.dim(0);
    const std::size_t n = b.dim(1);
    const std::size_t rows = a.size() / k;
    std::vector<Tensor> grads(2);
    ConstMatMap gy(g.data(), rows, n);
    if (needs[0]) {
      grads[0] = Tensor(a.shape());
      MatMap(grads[0].data(), rows, k).noalias() = gy * ConstMatMap(b.data(), k, n).transpose();
    }
    if (needs[1]) {
      grads[1] = Tensor(b.shape());
      MatMap(grads[1].data(), k, n).noalias() = ConstMatMap(a.data(), rows, k).transpose() * gy;
    }
    return grads;
  }

  std::uint64_t flops() const override { return flops_; }

 private:
  std::uint64_t flops_ = 0;
};

// ---------------------------------------------------------------- elementwise

bool is_trailing(const Shape& full, const Shape& part) {
  if (part.size() > full.size()) return false;
  return std::equal(part.rbegin(), part.rend(), full.rbegin());
}

class AddFn final : public Function {
 public:
  std::string_view name() const override { return "add"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    if (!is_trailing(a.shape(), b.shape())) shape_mismatch("add", a, b);
    Tensor out = a;
    const std::size_t inner = b.size();
    double* o = out.data();
    const double* pb = b.data();
    for (std::size_t base = 0; base < out.size(); base += inner) {
      for (std::size_t j = 0; j < inner; ++j) o[base + j] += pb[j];
    }
    flops_ = out.size();
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool> needs) override {
    std::vector<Tensor> grads(2);
    if (needs[0]) grads[0] = g;
    if (needs[1]) {
      const Tensor& b = *in[1];
      grads[1] = Tensor(b.shape());
      const std::size_t inner = b.size();
      double* db = grads[1].data();
      for (std::size_t base = 0; base < g.size(); base += inner) {
        for (std::size_t j = 0; j < inner; ++j) db[j] += g[base + j];
      }
    }
    return grads;
  }

  std::uint64_t flops() const override { return flops_; }

 private:
  std::uint64_t flops_ = 0;
};

class MulFn final : public Function {
 public:
  std::string_view name() const override { return "mul"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    if (a.shape() != b.shape()) shape_mismatch("mul", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    flops_ = out.size();
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool> needs) override {
    std::vector<Tensor> grads(2);
    for (int side = 0; side < 2; ++side) {
      if (!needs[side]) continue;
      const Tensor& other = *in[1 - side];
      grads[side] = Tensor(other.shape());
      for (std::size_t i = 0; i < g.size(); ++i) grads[side][i] = g[i] * other[i];
    }
    return grads;
  }

  std::uint64_t flops() const override { return flops_; }

 private:
  std::uint64_t flops_ = 0;
};

class ScaleFn final : public Function {
 public:
  explicit ScaleFn(double factor) : factor_(factor) {}
  std::string_view name() const override { return "scale"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    for (double& v : out.values()) v *= factor_;
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                               std::span<const bool>) override {
    Tensor dx = g;
    for (double& v : dx.values()) v *= factor_;
    return {dx};
  }

 private:
  double factor_;
};

class SumFn final : public Function {
 public:
  std::string_view name() const override { return "sum"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    double total = 0.0;
    for (double v : in[0]->values()) total += v;
    return Tensor::scalar(total);
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool>) override {
    return {Tensor(in[0]->shape(), g[0])};
  }
};

// ---------------------------------------------------------------- activations

double activation_grad(Activation kind, double x) {
  switch (kind) {
    case Activation::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Activation::softplus:
      return sigmoid(x);
    case Activation::swish: {
      const double s = sigmoid(x);
      return s + x * s * (1.0 - s);
    }
  }
  return 0.0;
}

std::string_view activation_name(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softplus: return "softplus";
    case Activation::swish: return "swish";
  }
  return "activation";
}

class ActivationFn final : public Function {
 public:
  explicit ActivationFn(Activation kind) : kind_(kind) {}
  std::string_view name() const override { return activation_name(kind_); }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = activation(kind_, x[i]);
    flops_ = x.size();
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool>) override {
    const Tensor& x = *in[0];
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = g[i] * activation_grad(kind_, x[i]);
    return {dx};
  }

  std::uint64_t flops() const override { return flops_; }

 private:
  Activation kind_;
  std::uint64_t flops_ = 0;
};

// ---------------------------------------------------------------- conv1d

struct ConvGeometry {
  std::size_t batch, in_channels, length, out_channels, in_per_group, kernel, groups;
  std::size_t stride, pad_left, out_length;
};

std::pair<std::size_t, std::size_t> padding_amounts(std::size_t kernel, Padding padding) {
  switch (padding) {
    case Padding::none: return {0, 0};
    case Padding::causal_left: return {kernel - 1, 0};
    case Padding::zero_symmetric: {
      const std::size_t left = (kernel - 1) / 2;
      return {left, kernel - 1 - left};
    }
  }
  return {0, 0};
}

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, const Tensor* bias, const Conv1dOptions& opt) {
  require_rank("conv1d input", x, 3);
  require_rank("conv1d weight", w, 3);
  ConvGeometry geo{};
  geo.batch = x.dim(0);
  geo.in_channels = x.dim(1);
  geo.length = x.dim(2);
  geo.out_channels = w.dim(0);
  geo.in_per_group = w.dim(1);
  geo.kernel = w.dim(2);
  geo.groups = opt.groups;
  geo.stride = opt.stride;
  if (opt.stride == 0) throw DomainError("conv1d: stride must be >= 1");
  if (opt.groups == 0 || geo.in_channels % opt.groups != 0 || geo.out_channels % opt.groups != 0 ||
      geo.in_per_group * opt.groups != geo.in_channels) {
    shape_mismatch("conv1d", x, w);
  }
  if (bias != nullptr && bias->defined() && (bias->rank() != 1 || bias->dim(0) != geo.out_channels)) {
    shape_mismatch("conv1d bias", w, *bias);
  }
  geo.pad_left = padding_amounts(geo.kernel, opt.padding).first;
  geo.out_length = conv1d_output_length(geo.length, geo.kernel, opt);
  return geo;
}

// cols[(ci * K + k), t] = x[b, ci, t * stride + k - pad_left]
void im2col(const ConvGeometry& g, const double* xb, double* cols) {
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    const double* row_in = xb + ci * g.length;
    for (std::size_t k = 0; k < g.kernel; ++k) {
      double* row = cols + (ci * g.kernel + k) * g.out_length;
      for (std::size_t t = 0; t < g.out_length; ++t) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                   static_cast<std::ptrdiff_t>(g.pad_left);
        row[t] = (pos >= 0 && pos < static_cast<std::ptrdiff_t>(g.length)) ? row_in[pos] : 0.0;
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* dxb) {
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    double* row_out = dxb + ci * g.length;
    for (std::size_t k = 0; k < g.kernel; ++k) {
      const double* row = cols + (ci * g.kernel + k) * g.out_length;
      for (std::size_t t = 0; t < g.out_length; ++t) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                   static_cast<std::ptrdiff_t>(g.pad_left);
        if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(g.length)) row_out[pos] += row[t];
      }
    }
  }
}

class Conv1dFn final : public Function {
 public:
  explicit Conv1dFn(Conv1dOptions options) : options_(options) {}
  std::string_view name() const override { return "conv1d"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const Tensor* bias = in.size() > 2 ? in[2] : nullptr;
    const ConvGeometry g = conv_geometry(x, w, bias, options_);
    Tensor out({g.batch, g.out_channels, g.out_length});
    if (g.groups == 1) {
      const std::size_t rows = g.in_channels * g.kernel;
      std::vector<double> cols(rows * g.out_length);
      ConstMatMap wm(w.data(), g.out_channels, rows);
      for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(g, x.data() + b * g.in_channels * g.length, cols.data());
        MatMap(out.data() + b * g.out_channels * g.out_length, g.out_channels, g.out_length).noalias() =
            wm * ConstMatMap(cols.data(), rows, g.out_length);
      }
    } else {
      grouped_forward(g, x, w, out);
    }
    if (bias != nullptr) {
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t co = 0; co < g.out_channels; ++co) {
          double* row = out.data() + (b * g.out_channels + co) * g.out_length;
          const double bv = (*bias)[co];
          for (std::size_t t = 0; t < g.out_length; ++t) row[t] += bv;
        }
      }
    }
    flops_ = 2ull * g.batch * g.out_channels * g.out_length * g.in_per_group * g.kernel +
             (bias != nullptr ? g.batch * g.out_channels * g.out_length : 0);
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& gy,
                               std::span<const bool> needs) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const bool has_bias = in.size() > 2;
    const ConvGeometry g = conv_geometry(x, w, has_bias ? in[2] : nullptr, options_);
    std::vector<Tensor> grads(in.size());
    if (needs[0]) grads[0] = Tensor(x.shape());
    if (needs[1]) grads[1] = Tensor(w.shape());
    if (g.groups == 1) {
      const std::size_t rows = g.in_channels * g.kernel;
      std::vector<double> cols(rows * g.out_length);
      ConstMatMap wm(w.data(), g.out_channels, rows);
      for (std::size_t b = 0; b < g.batch; ++b) {
        ConstMatMap gyb(gy.data() + b * g.out_channels * g.out_length, g.out_channels, g.out_length);
        if (needs[1]) {
          im2col(g, x.data() + b * g.in_channels * g.length, cols.data());
          MatMap(grads[1].data(), g.out_channels, rows).noalias() +=
              gyb * ConstMatMap(cols.data(), rows, g.out_length).transpose();
        }
        if (needs[0]) {
          MatMap(cols.data(), rows, g.out_length).noalias() = wm.transpose() * gyb;
          col2im_add(g, cols.data(), grads[0].data() + b * g.in_channels * g.length);
        }
      }
    } else {
      grouped_backward(g, x, w, gy, needs[0] ? &grads[0] : nullptr, needs[1] ? &grads[1] : nullptr);
    }
    if (has_bias && needs[2]) {
      grads[2] = Tensor({g.out_channels});
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t co = 0; co < g.out_channels; ++co) {
          const double* row = gy.data() + (b * g.out_channels + co) * g.out_length;
          double acc = 0.0;
          for (std::size_t t = 0; t < g.out_length; ++t) acc += row[t];
          grads[2][co] += acc;
        }
      }
    }
    return grads;
  }

  std::uint64_t flops() const override { return flops_; }

 private:
  static void grouped_forward(const ConvGeometry& g, const Tensor& x, const Tensor& w, Tensor& out) {
    const std::size_t out_per_group = g.out_channels / g.groups;
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t co = 0; co < g.out_channels; ++co) {
        const std::size_t group = co / out_per_group;
        double* row = out.data() + (b * g.out_channels + co) * g.out_length;
        for (std::size_t ci = 0; ci < g.in_per_group; ++ci) {
          const double* xin = x.data() + (b * g.in_channels + group * g.in_per_group + ci) * g.length;
          const double* wk = w.data() + (co * g.in_per_group + ci) * g.kernel;
          for (std::size_t k = 0; k < g.kernel; ++k) {
            const double wv = wk[k];
            for (std::size_t t = 0; t < g.out_length; ++t) {
              const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                         static_cast<std::ptrdiff_t>(g.pad_left);
              if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(g.length)) row[t] += wv * xin[pos];
            }
          }
        }
      }
    }
  }

  static void grouped_backward(const ConvGeometry& g, const Tensor& x, const Tensor& w, const Tensor& gy, Tensor* dx,
                               Tensor* dw) {
    const std::size_t out_per_group = g.out_channels / g.groups;
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t co = 0; co < g.out_channels; ++co) {
        const std::size_t group = co / out_per_group;
        const double* grow = gy.data() + (b * g.out_channels + co) * g.out_length;
        for (std::size_t ci = 0; ci < g.in_per_group; ++ci) {
          const std::size_t channel = group * g.in_per_group + ci;
          const double* xin = x.data() + (b * g.in_channels + channel) * g.length;
          const double* wk = w.data() + (co * g.in_per_group + ci) * g.kernel;
          for (std::size_t k = 0; k < g.kernel; ++k) {
            double acc = 0.0;
            for (std::size_t t = 0; t < g.out_length; ++t) {
              const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                         static_cast<std::ptrdiff_t>(g.pad_left);
              if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(g.length)) continue;
              acc += grow[t] * xin[pos];
              if (dx != nullptr) (*dx)[(b * g.in_channels + channel) * g.length + pos] += grow[t] * wk[k];
            }
            if (dw != nullptr) (*dw)[(co * g.in_per_group + ci) * g.kernel + k] += acc;
          }
        }
      }
    }
  }

  Conv1dOptions options_;
  std::uint64_t flops_ = 0;
};

// ---------------------------------------------------------------- normalisation

class LayerNormFn final : public Function {
 public:
  explicit LayerNormFn(double eps) : eps_(eps) {}
  std::string_view name() const override { return "layer_norm"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& gamma = *in[1];
    const Tensor& beta = *in[2];
    const std::size_t d = x.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) shape_mismatch("layer_norm", x, gamma);
    const std::size_t rows = x.size() / d;
    mean_.assign(rows, 0.0);
    rstd_.assign(rows, 0.0);
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = x.data() + r * d;
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += row[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= static_cast<double>(d);
      const double rstd = 1.0 / std::sqrt(var + eps_);
      mean_[r] = mean;
      rstd_[r] = rstd;
      double* o = out.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) o[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
    }
    flops_ = 6ull * x.size();
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool> needs) override {
    const Tensor& x = *in[0];
    const Tensor& gamma = *in[1];
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    std::vector<Tensor> grads(3);
    if (needs[0]) grads[0] = Tensor(x.shape());
    Tensor dgamma({d});
    Tensor dbeta({d});
    std::vector<double> xhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = x.data() + r * d;
      const double* grow = g.data() + r * d;
      double mean_dxhat = 0.0;
      double mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (row[j] - mean_[r]) * rstd_[r];
        const double dxhat = grow[j] * gamma[j];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat[j];
        dgamma[j] += grow[j] * xhat[j];
        dbeta[j] += grow[j];
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      if (needs[0]) {
        double* dx = grads[0].data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
          dx[j] = rstd_[r] * (grow[j] * gamma[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
      }
    }
    if (needs[1]) grads[1] = std::move(dgamma);
    if (needs[2]) grads[2] = std::move(dbeta);
    return grads;
  }

  std::size_t saved_bytes() const override { return (mean_.size() + rstd_.size()) * sizeof(double); }
  void release_saved() override {
    mean_.clear();
    rstd_.clear();
  }
  std::uint64_t flops() const override { return flops_; }

 private:
  double eps_;
  std::vector<double> mean_, rstd_;
  std::uint64_t flops_ = 0;
};

void check_batch_norm_shapes(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  require_rank("batch_norm", x, 3);
  const Shape expect{x.dim(1)};
  if (gamma.shape() != expect || beta.shape() != expect) shape_mismatch("batch_norm", x, gamma);
}

class BatchNormTrainFn final : public Function {
 public:
  BatchNormTrainFn(double eps, BatchStats* stats_out) : eps_(eps), stats_out_(stats_out) {}
  std::string_view name() const override { return "batch_norm"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& gamma = *in[1];
    const Tensor& beta = *in[2];
    check_batch_norm_shapes(x, gamma, beta);
    const std::size_t nb = x.dim(0), nc = x.dim(1), nl = x.dim(2);
    const double count = static_cast<double>(nb * nl);
    mean_.assign(nc, 0.0);
    rstd_.assign(nc, 0.0);
    std::vector<double> var(nc, 0.0);
    for (std::size_t c = 0; c < nc; ++c) {
      double m = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const double* row = x.data() + (b * nc + c) * nl;
        for (std::size_t t = 0; t < nl; ++t) m += row[t];
      }
      m /= count;
      double v = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const double* row = x.data() + (b * nc + c) * nl;
        for (std::size_t t = 0; t < nl; ++t) v += (row[t] - m) * (row[t] - m);
      }
      mean_[c] = m;
      var[c] = v;
      rstd_[c] = 1.0 / std::sqrt(v / count + eps_);
    }
    Tensor out(x.shape());
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t c = 0; c < nc; ++c) {
        const double* row = x.data() + (b * nc + c) * nl;
        double* o = out.data() + (b * nc + c) * nl;
        for (std::size_t t = 0; t < nl; ++t) o[t] = (row[t] - mean_[c]) * rstd_[c] * gamma[c] + beta[c];
      }
    }
    if (stats_out_ != nullptr) {
      stats_out_->mean = Tensor({nc}, mean_);
      stats_out_->var_unbiased = Tensor({nc});
      for (std::size_t c = 0; c < nc; ++c) {
        stats_out_->var_unbiased[c] = count > 1.0 ? var[c] / (count - 1.0) : 0.0;
      }
      stats_out_ = nullptr;
    }
    flops_ = 6ull * x.size();
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool> needs) override {
    const Tensor& x = *in[0];
    const Tensor& gamma = *in[1];
    const std::size_t nb = x.dim(0), nc = x.dim(1), nl = x.dim(2);
    const double count = static_cast<double>(nb * nl);
    std::vector<Tensor> grads(3);
    if (needs[0]) grads[0] = Tensor(x.shape());
    Tensor dgamma({nc});
    Tensor dbeta({nc});
    for (std::size_t c = 0; c < nc; ++c) {
      double sum_g = 0.0;
      double sum_g_xhat = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const double* row = x.data() + (b * nc + c) * nl;
        const double* grow = g.data() + (b * nc + c) * nl;
        for (std::size_t t = 0; t < nl; ++t) {
          const double xhat = (row[t] - mean_[c]) * rstd_[c];
          sum_g += grow[t];
          sum_g_xhat += grow[t] * xhat;
        }
      }
      dgamma[c] = sum_g_xhat;
      dbeta[c] = sum_g;
      if (!needs[0]) continue;
      const double mean_g = sum_g / count;
      const double mean_g_xhat = sum_g_xhat / count;
      for (std::size_t b = 0; b < nb; ++b) {
        const double* row = x.data() + (b * nc + c) * nl;
        const double* grow = g.data() + (b * nc + c) * nl;
        double* dx = grads[0].data() + (b * nc + c) * nl;
        for (std::size_t t = 0; t < nl; ++t) {
          const double xhat = (row[t] - mean_[c]) * rstd_[c];
          dx[t] = gamma[c] * rstd_[c] * (grow[t] - mean_g - xhat * mean_g_xhat);
        }
      }
    }
    if (needs[1]) grads[1] = std::move(dgamma);
    if (needs[2]) grads[2] = std::move(dbeta);
    return grads;
  }

  std::size_t saved_bytes() const override { return (mean_.size() + rstd_.size()) * sizeof(double); }
  void release_saved() override {
    mean_.clear();
    rstd_.clear();
  }
  std::uint64_t flops() const override { return flops_; }

 private:
  double eps_;
  BatchStats* stats_out_;
  std::vector<double> mean_, rstd_;
  std::uint64_t flops_ = 0;
};

class BatchNormEvalFn final : public Function {
 public:
  BatchNormEvalFn(Tensor running_mean, Tensor running_var, double eps)
      : mean_(std::move(running_mean)), rstd_(running_var.shape()) {
    for (std::size_t c = 0; c < rstd_.size(); ++c) rstd_[c] = 1.0 / std::sqrt(running_var[c] + eps);
  }
  std::string_view name() const override { return "batch_norm_eval"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& gamma = *in[1];
    const Tensor& beta = *in[2];
    check_batch_norm_shapes(x, gamma, beta);
    if (mean_.shape() != gamma.shape() || rstd_.shape() != gamma.shape()) shape_mismatch("batch_norm", x, mean_);
    const std::size_t nb = x.dim(0), nc = x.dim(1), nl = x.dim(2);
    Tensor out(x.shape());
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t c = 0; c < nc; ++c) {
        const double* row = x.data() + (b * nc + c) * nl;
        double* o = out.data() + (b * nc + c) * nl;
        for (std::size_t t = 0; t < nl; ++t) o[t] = (row[t] - mean_[c]) * rstd_[c] * gamma[c] + beta[c];
      }
    }
    flops_ = 4ull * x.size();
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool> needs) override {
    const Tensor& x = *in[0];
    const Tensor& gamma = *in[1];
    const std::size_t nb = x.dim(0), nc = x.dim(1), nl = x.dim(2);
    std::vector<Tensor> grads(3);
    if (needs[0]) grads[0] = Tensor(x.shape());
    Tensor dgamma({nc});
    Tensor dbeta({nc});
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t c = 0; c < nc; ++c) {
        const std::size_t base = (b * nc + c) * nl;
        for (std::size_t t = 0; t < nl; ++t) {
          const double gv = g[base + t];
          dgamma[c] += gv * (x[base + t] - mean_[c]) * rstd_[c];
          dbeta[c] += gv;
          if (needs[0]) grads[0][base + t] = gv * gamma[c] * rstd_[c];
        }
      }
    }
    if (needs[1]) grads[1] = std::move(dgamma);
    if (needs[2]) grads[2] = std::move(dbeta);
    return grads;
  }

  std::uint64_t flops() const override { return flops_; }

 private:
  Tensor mean_, rstd_;
  std::uint64_t flops_ = 0;
};

// ---------------------------------------------------------------- layout

class TransposeFn final : public Function {
 public:
  std::string_view name() const override { return "transpose"; }

  static Tensor apply(const Tensor& x) {
    require_rank("transpose_last2", x, 3);
    const std::size_t nb = x.dim(0), nx = x.dim(1), ny = x.dim(2);
    Tensor out({nb, ny, nx});
    for (std::size_t b = 0; b < nb; ++b) {
      const double* src = x.data() + b * nx * ny;
      double* dst = out.data() + b * nx * ny;
      for (std::size_t i = 0; i < nx; ++i) {
        for (std::size_t j = 0; j < ny; ++j) dst[j * nx + i] = src[i * ny + j];
      }
    }
    return out;
  }

  Tensor forward(std::span<const Tensor* const> in) override { return apply(*in[0]); }
  std::vector<Tensor> backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                               std::span<const bool>) override {
    return {apply(g)};
  }
};

class ReverseTimeFn final : public Function {
 public:
  std::string_view name() const override { return "reverse_time"; }

  static Tensor apply(const Tensor& x) {
    if (x.rank() < 2) throw DimensionError("reverse_time: need rank >= 2, got " + to_string(x.shape()));
    const std::size_t outer = x.dim(0);
    const std::size_t steps = x.dim(1);
    const std::size_t inner = x.size() / (outer * steps);
    Tensor out(x.shape());
    for (std::size_t b = 0; b < outer; ++b) {
      for (std::size_t t = 0; t < steps; ++t) {
        const double* src = x.data() + (b * steps + t) * inner;
        double* dst = out.data() + (b * steps + (steps - 1 - t)) * inner;
        std::copy(src, src + inner, dst);
      }
    }
    return out;
  }

  Tensor forward(std::span<const Tensor* const> in) override { return apply(*in[0]); }
  std::vector<Tensor> backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                               std::span<const bool>) override {
    return {apply(g)};
  }
};

class MeanTimeFn final : public Function {
 public:
  std::string_view name() const override { return "mean_time"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    require_rank("mean_time", x, 3);
    const std::size_t nb = x.dim(0), nl = x.dim(1), nd = x.dim(2);
    Tensor out({nb, nd});
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t t = 0; t < nl; ++t) {
        const double* row = x.data() + (b * nl + t) * nd;
        for (std::size_t d = 0; d < nd; ++d) out[b * nd + d] += row[d];
      }
      for (std::size_t d = 0; d < nd; ++d) out[b * nd + d] /= static_cast<double>(nl);
    }
    flops_ = x.size();
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool>) override {
    const Tensor& x = *in[0];
    const std::size_t nb = x.dim(0), nl = x.dim(1), nd = x.dim(2);
    Tensor dx(x.shape());
    const double inv = 1.0 / static_cast<double>(nl);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t t = 0; t < nl; ++t) {
        for (std::size_t d = 0; d < nd; ++d) dx[(b * nl + t) * nd + d] = g[b * nd + d] * inv;
      }
    }
    return {dx};
  }

  std::uint64_t flops() const override { return flops_; }

 private:
  std::uint64_t flops_ = 0;
};

class NegExpFn final : public Function {
 public:
  std::string_view name() const override { return "neg_exp"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -std::exp((*in[0])[i]);
    return out;
  }
  std::vector<Tensor> backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& g,
                               std::span<const bool>) override {
    Tensor dx(out.shape());
    for (std::size_t i = 0; i < out.size(); ++i) dx[i] = g[i] * out[i];
    return {dx};
  }
};

class DropoutFn final : public Function {
 public:
  DropoutFn(double p, std::uint64_t seed) : p_(p), seed_(seed) {}
  std::string_view name() const override { return "dropout"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    std::mt19937_64 rng(seed_);
    std::bernoulli_distribution keep(1.0 - p_);
    const double factor = 1.0 / (1.0 - p_);
    mask_.assign(x.size(), 0.0);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask_[i] = keep(rng) ? factor : 0.0;
      out[i] = x[i] * mask_[i];
    }
    return out;
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool>) override {
    if (mask_.size() != g.size()) forward(in);
    Tensor dx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * mask_[i];
    return {dx};
  }

  std::size_t saved_bytes() const override { return mask_.size() * sizeof(double); }
  void release_saved() override { mask_.clear(); }

 private:
  double p_;
  std::uint64_t seed_;
  std::vector<double> mask_;
};

class BceWithLogitsFn final : public Function {
 public:
  std::string_view name() const override { return "bce_with_logits"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& logits = *in[0];
    const Tensor& targets = *in[1];
    if (logits.shape() != targets.shape()) shape_mismatch("multilabel_loss", logits, targets);
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double y = targets[i];
      if (y != 0.0 && y != 1.0) {
        throw DomainError("multilabel_loss: target " + std::to_string(y) + " is not 0 or 1");
      }
      const double x = logits[i];
      // softplus(x) - x*y, written in the overflow-free form
      total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    return Tensor::scalar(total / static_cast<double>(logits.size()));
  }

  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                               std::span<const bool>) override {
    const Tensor& logits = *in[0];
    const Tensor& targets = *in[1];
    const double factor = g[0] / static_cast<double>(logits.size());
    Tensor dx(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) dx[i] = (sigmoid(logits[i]) - targets[i]) * factor;
    return {dx, Tensor()};
  }
};

}  // namespace

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, const Conv1dOptions& options) {
  if (options.stride == 0) throw DomainError("conv1d: stride must be >= 1");
  const auto [left, right] = padding_amounts(kernel, options.padding);
  const std::size_t padded = length + left + right;
  if (kernel == 0 || kernel > padded) {
    throw DimensionError("conv1d: kernel of length " + std::to_string(kernel) + " exceeds padded input of length " +
                         std::to_string(padded));
  }
  return (padded - kernel) / options.stride + 1;
}

Tensor matmul(const Tensor& a, const Tensor& b) { return run_forward(MatmulFn{}, {&a, &b}); }
Var matmul(Var a, Var b) { return record(std::make_unique<MatmulFn>(), {a, b}); }

Tensor add(const Tensor& a, const Tensor& b) { return run_forward(AddFn{}, {&a, &b}); }
Var add(Var a, Var b) { return record(std::make_unique<AddFn>(), {a, b}); }

Tensor mul(const Tensor& a, const Tensor& b) { return run_forward(MulFn{}, {&a, &b}); }
Var mul(Var a, Var b) { return record(std::make_unique<MulFn>(), {a, b}); }

Var scale(Var a, double factor) { return record(std::make_unique<ScaleFn>(factor), {a}); }
Var sum(Var a) { return record(std::make_unique<SumFn>(), {a}); }

double activation(Activation kind, double x) {
  switch (kind) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::sigmoid: return sigmoid(x);
    case Activation::softplus: return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    case Activation::swish: return x * sigmoid(x);
  }
  return x;
}

Tensor activation(Activation kind, const Tensor& x) { return run_forward(ActivationFn{kind}, {&x}); }
Var activation(Activation kind, Var x, bool recompute) {
  return record(std::make_unique<ActivationFn>(kind), {x}, recompute);
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv1dOptions& options) {
  Conv1dFn fn(options);
  std::vector<const Tensor*> ptrs{&x, &w};
  if (bias.defined()) ptrs.push_back(&bias);
  return fn.forward(ptrs);
}

Var conv1d(Var x, Var w, std::optional<Var> bias, const Conv1dOptions& options, bool recompute) {
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return record(std::make_unique<Conv1dFn>(options), std::move(inputs), recompute);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  return run_forward(LayerNormFn{eps}, {&x, &gamma, &beta});
}
Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  return record(std::make_unique<LayerNormFn>(eps), {x, gamma, beta});
}

Var batch_norm_train(Var x, Var gamma, Var beta, double eps, BatchStats* stats_out) {
  return record(std::make_unique<BatchNormTrainFn>(eps, stats_out), {x, gamma, beta});
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& running_mean, const Tensor& running_var, double eps) {
  return record(std::make_unique<BatchNormEvalFn>(running_mean, running_var, eps), {x, gamma, beta});
}

Tensor transpose_last2(const Tensor& x) { return TransposeFn::apply(x); }
Var transpose_last2(Var x, bool recompute) { return record(std::make_unique<TransposeFn>(), {x}, recompute); }

Tensor reverse_time(const Tensor& x) { return ReverseTimeFn::apply(x); }
Var reverse_time(Var x) { return record(std::make_unique<ReverseTimeFn>(), {x}); }

Var mean_time(Var x) { return record(std::make_unique<MeanTimeFn>(), {x}); }
Var neg_exp(Var x) { return record(std::make_unique<NegExpFn>(), {x}); }

Var dropout(Var x, double p, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw DomainError("dropout probability must lie in [0, 1)");
  if (p == 0.0) return x;
  return record(std::make_unique<DropoutFn>(p, seed), {x});
}

double bce_with_logits(const Tensor& logits, const Tensor& targets) {
  return run_forward(BceWithLogitsFn{}, {&logits, &targets}).item();
}
Var bce_with_logits(Var logits, Var targets) {
  return record(std::make_unique<BceWithLogitsFn>(), {logits, targets});
}

}  // namespace ecgmamba
