#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mf {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Raised when a primitive produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major array. Instantiated for float (training) and double
// (gradient checking).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> data);
  Tensor(std::initializer_list<std::size_t> shape) : Tensor(Shape(shape)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value);
  // Convenience for tests: rows of a 2-D tensor.
  static Tensor from_rows(const std::vector<std::vector<T>>& rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  // Row i of the tensor viewed as [size / last_dim, last_dim].
  std::span<T> row(std::size_t i);
  std::span<const T> row(std::size_t i) const;
  std::size_t rows() const { return shape_.empty() ? 0 : data_.size() / shape_.back(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  void fill(T value);
  void zero() { fill(T(0)); }
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Value plus an equally shaped, zero-initialised gradient buffer.
template <typename T>
struct DualTensor {
  Tensor<T> value;
  Tensor<T> grad;

  DualTensor() = default;
  explicit DualTensor(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.zero(); }
};

template <typename T>
bool all_finite(std::span<const T> values);

// Throws NonFiniteError naming `where` if any entry is NaN/Inf.
template <typename T>
void ensure_finite(const Tensor<T>& t, const char* where);

void require(bool condition, const std::string& message);

}  // namespace mf
