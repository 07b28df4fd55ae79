#include "mfssd/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace mfssd {

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

DType dtype_from_name(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw DataError("unknown element type: " + name);
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  if (shape_.empty() || shape_.size() > 4)
    throw ShapeError("tensor rank must be 1..4, got " + shape_str(shape_));
  for (int d : shape_)
    if (d < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape_));
  const auto n = static_cast<std::size_t>(shape_numel(shape_));
  if (dtype_ == DType::f32)
    buf_ = std::vector<float>(n, 0.0f);
  else
    buf_ = std::vector<double>(n, 0.0);
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel())
    throw ShapeError("from_values: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(t.shape()));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, values[static_cast<std::size_t>(i)]);
  return t;
}

double Tensor::at(std::int64_t i) const {
  if (dtype_ == DType::f32) return data<float>()[static_cast<std::size_t>(i)];
  return data<double>()[static_cast<std::size_t>(i)];
}

void Tensor::set(std::int64_t i, double v) {
  if (dtype_ == DType::f32)
    data<float>()[static_cast<std::size_t>(i)] = static_cast<float>(v);
  else
    data<double>()[static_cast<std::size_t>(i)] = v;
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype_) return *this;
  Tensor out(shape_, dt);
  for (std::int64_t i = 0; i < numel(); ++i) out.set(i, at(i));
  return out;
}

void Tensor::fill(double v) {
  if (dtype_ == DType::f32) {
    auto d = data<float>();
    std::fill(d.begin(), d.end(), static_cast<float>(v));
  } else {
    auto d = data<double>();
    std::fill(d.begin(), d.end(), v);
  }
}

bool Tensor::all_finite() const {
  if (dtype_ == DType::f32) {
    for (float v : data<float>())
      if (!std::isfinite(v)) return false;
  } else {
    for (double v : data<double>())
      if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::same_values(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  if (dtype_ == DType::f32) {
    auto a = data<float>(), b = other.data<float>();
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
  }
  auto a = data<double>(), b = other.data<double>();
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace mfssd
