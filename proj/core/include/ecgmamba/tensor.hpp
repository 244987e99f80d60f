#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ecgmamba {

using Shape = std::vector<std::size_t>;

/// Storage precision of a tensor. Arithmetic always runs in double; an f32
/// tensor holds only values exactly representable in binary32.
enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
std::string to_string(DType dtype);
DType parse_dtype(const std::string& name);

/// Dense row-major array of reals with an optional same-shape gradient slot.
///
/// A default-constructed tensor is *undefined* (rank 0, no data); kernels use
/// it to mean "absent" (no bias, no gradient). Scalars have shape {1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape(), 0.0); }

  bool defined() const { return !shape_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  std::size_t nbytes() const { return data_.size() * sizeof(double); }

  DType dtype() const { return dtype_; }
  /// Rounds the stored values to binary32 when switching to f32.
  void set_dtype(DType dtype);
  Tensor as(DType dtype) const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;
  double item() const;

  Tensor reshaped(Shape shape) const;
  void fill(double value);
  bool all_finite() const;

  bool has_grad() const { return !grad_.empty(); }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  /// Allocates the gradient slot (zero-filled) if absent.
  std::span<double> ensure_grad();
  void zero_grad();
  void clear_grad() { grad_.clear(); }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  DType dtype_ = DType::f64;
};

/// Exact equality of shape and every value (bitwise for finite values).
bool identical(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace ecgmamba
