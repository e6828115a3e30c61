#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nfa/rng.hpp"

namespace nfa {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense row-major tensor. Immutable by convention: operations produce new
/// tensors, the backing store is shared on copy. Scalar type is float or
/// double; training runs usually pick float, gradient checks double.
template <typename S>
class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::make_shared<std::vector<S>>()) {}

  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(std::move(data))) {
    check_invariants();
  }

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), S(0)));
  }

  static Tensor full(Shape shape, S value) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), value));
  }

  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  static Tensor uniform(Shape shape, S lo, S hi, Rng& rng) {
    auto n = static_cast<std::size_t>(shape_numel(shape));
    std::vector<S> d(n);
    for (auto& x : d) x = static_cast<S>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor normal(Shape shape, S mean, S stddev, Rng& rng) {
    auto n = static_cast<std::size_t>(shape_numel(shape));
    std::vector<S> d(n);
    for (auto& x : d) x = static_cast<S>(rng.normal(mean, stddev));
    return Tensor(std::move(shape), std::move(d));
  }

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }
  std::int64_t rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.size() == 1 ? 1 : -1); }
  std::int64_t cols() const { return shape_.size() == 2 ? shape_[1] : (shape_.size() == 1 ? shape_[0] : -1); }

  const S* data() const { return data_->data(); }
  const std::vector<S>& vec() const { return *data_; }

  S at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  S item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item on non-scalar " + shape_str(shape_));
    return (*data_)[0];
  }

  /// Same data, new shape (element count must match).
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw std::invalid_argument("reshape: numel mismatch " + shape_str(shape_) + " -> " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    for (S x : *data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> d(data_->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>((*data_)[i]);
    return Tensor<T>(shape_, std::move(d));
  }

 private:
  void check_invariants() const {
    for (auto e : shape_)
      if (e < 1) throw std::invalid_argument("Tensor: extent < 1 in " + shape_str(shape_));
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_->size()))
      throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match data size " +
                                  std::to_string(data_->size()));
  }

  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace nfa
