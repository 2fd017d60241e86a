#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace moedis {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float64 array. Immutable once built; every element is
/// checked to be finite at construction.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);
  static Tensor column(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D accessors; a rank-1 tensor is viewed as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& vector() const noexcept { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  Tensor reshaped(Shape shape) const;
  Tensor row_at(std::size_t r) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  struct Unchecked {};
  Tensor(Unchecked, Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {}
  friend class Tape;

  Shape shape_;
  std::vector<double> data_;
};

bool all_finite(std::span<const double> values);

}  // namespace moedis
