#include "memoryformer/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mf {

std::size_t shape_size(const Shape& shape) {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

template <typename T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), T(0)) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_rows(const std::vector<std::vector<T>>& rows) {
  require(!rows.empty(), "from_rows: no rows");
  const std::size_t n = rows.front().size();
  std::vector<T> data;
  data.reserve(rows.size() * n);
  for (const auto& r : rows) {
    require(r.size() == n, "from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), n}, std::move(data));
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw std::out_of_range("tensor: axis out of range");
  return shape_[axis];
}

template <typename T>
std::span<T> Tensor<T>::row(std::size_t i) {
  const std::size_t n = shape_.back();
  return std::span<T>(data_.data() + i * n, n);
}

template <typename T>
std::span<const T> Tensor<T>::row(std::size_t i) const {
  const std::size_t n = shape_.back();
  return std::span<const T>(data_.data() + i * n, n);
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw std::invalid_argument("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename T>
bool all_finite(std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* where) {
  if (!all_finite(t.values())) {
    throw NonFiniteError(std::string(where) + ": non-finite value in output " + shape_string(t.shape()));
  }
}

template class Tensor<float>;
template class Tensor<double>;
template bool all_finite<float>(std::span<const float>);
template bool all_finite<double>(std::span<const double>);
template void ensure_finite<float>(const Tensor<float>&, const char*);
template void ensure_finite<double>(const Tensor<double>&, const char*);

}  // namespace mf
