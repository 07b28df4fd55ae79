#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mfssd/errors.hpp"

namespace mfssd {

enum class DType { f32, f64 };

inline std::size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }
const char* dtype_name(DType dt);
DType dtype_from_name(const std::string& name);

// Dense extents, outermost first. Activations follow the N,C,H,W convention.
using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense numeric array, rank 1..4, single or double precision.
/// A Tensor is a plain value; autodiff state lives on the Tape that records it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f32);  // zero-filled

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::f32);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return shape_numel(shape_); }
  DType dtype() const { return dtype_; }
  bool defined() const { return !shape_.empty(); }

  template <typename T>
  std::span<T> data();
  template <typename T>
  std::span<const T> data() const;

  // Dtype-erased element access; slow path for tests and serialization.
  double at(std::int64_t i) const;
  void set(std::int64_t i, double v);

  Tensor astype(DType dt) const;
  Tensor clone() const { return *this; }
  void fill(double v);
  bool all_finite() const;
  bool same_values(const Tensor& other) const;  // bitwise per element

  // Whether a Tape should track gradients for this tensor when used as a leaf.
  bool requires_grad = false;

 private:
  Shape shape_;
  DType dtype_ = DType::f32;
  std::variant<std::vector<float>, std::vector<double>> buf_;
};

template <typename T>
std::span<T> Tensor::data() {
  return std::span<T>(std::get<std::vector<T>>(buf_));
}

template <typename T>
std::span<const T> Tensor::data() const {
  return std::span<const T>(std::get<std::vector<T>>(buf_));
}

}  // namespace mfssd
