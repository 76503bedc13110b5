#ifndef VOLAGE_TENSOR_HPP
#define VOLAGE_TENSOR_HPP

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "volage/errors.hpp"

namespace volage {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major N-d array. The last axis varies fastest.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_ = Storage::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Scalar fill) : Tensor(std::move(shape)) { data_.setConstant(fill); }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : Tensor(std::move(shape)) {
    if (static_cast<Index>(values.size()) != data_.size())
      throw ShapeError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_string(shape_));
    std::copy(values.begin(), values.end(), data_.data());
  }

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size())
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }

  const Shape& shape() const { return shape_; }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  template <typename... Ix>
  Scalar& operator()(Ix... ix) {
    return data_[offset(ix...)];
  }
  template <typename... Ix>
  Scalar operator()(Ix... ix) const {
    return data_[offset(ix...)];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ShapeError("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  void set_zero() { data_.setZero(); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    data_ += other.data_;
    return *this;
  }

  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_)
      throw ShapeError(std::string(what) + ": shape " + shape_string(other.shape_) +
                       " does not match " + shape_string(shape_));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  void check_extents() const {
    for (std::size_t i = 0; i < shape_.size(); ++i)
      if (shape_[i] < 1)
        throw ShapeError("Tensor: extent of axis " + std::to_string(i) + " is " +
                         std::to_string(shape_[i]) + ", must be >= 1");
  }

  template <typename... Ix>
  Index offset(Ix... ix) const {
    const Index idx[] = {static_cast<Index>(ix)...};
    Index off = 0;
    for (std::size_t a = 0; a < sizeof...(Ix); ++a) off = off * shape_[a] + idx[a];
    return off;
  }

  Shape shape_;
  Storage data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace volage

#endif  // VOLAGE_TENSOR_HPP
