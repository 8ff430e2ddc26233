#pragma once

// Dense row-major float tensor. Values are immutable once constructed; the
// buffer is shared, so copies are cheap and snapshots need no deep copy.

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "skirl/rng.hpp"

namespace skirl::nd {

using Shape = std::vector<int>;

inline int shape_size(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("non-positive tensor dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

class Tensor {
 public:
  Tensor() : shape_{0} {}

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<float>>(std::move(data))) {
    if (shape_size(shape_) != int(data_->size()))
      throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) {
    int n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<float>(size_t(n), 0.0f));
  }

  static Tensor full(Shape shape, float v) {
    int n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<float>(size_t(n), v));
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  static Tensor from(std::initializer_list<float> xs) {
    return Tensor({int(xs.size())}, std::vector<float>(xs));
  }

  // He-style uniform fan-in init, bound sqrt(6/fan_in)
  static Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
    int n = shape_size(shape);
    float bound = std::sqrt(6.0f / float(fan_in > 0 ? fan_in : 1));
    std::vector<float> d(size_t(n));
    for (auto& x : d) x = rng.uniform_float(-bound, bound);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor one_hot(int index, int k) {
    if (index < 0 || index >= k) throw std::out_of_range("one_hot index out of range");
    std::vector<float> d(size_t(k), 0.0f);
    d[size_t(index)] = 1.0f;
    return Tensor({k}, std::move(d));
  }

  const Shape& shape() const { return shape_; }
  int ndim() const { return int(shape_.size()); }
  int dim(int i) const { return shape_.at(size_t(i)); }
  int size() const { return data_ ? int(data_->size()) : 0; }
  bool empty() const { return size() == 0; }

  const float* data() const { return data_->data(); }
  float operator[](int i) const { return (*data_)[size_t(i)]; }
  float at2(int r, int c) const { return (*data_)[size_t(r) * dim(1) + c]; }

  const std::vector<float>& vec() const { return *data_; }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size())
      throw std::invalid_argument("reshape size mismatch " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor t;
    t.shape_ = std::move(s);
    t.data_ = data_;
    return t;
  }

  uint64_t hash() const {
    uint64_t h = fnv1a64(shape_.data(), shape_.size() * sizeof(int));
    return data_ ? fnv1a64(data_->data(), data_->size() * sizeof(float), h) : h;
  }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<float>> data_;
};

}  // namespace skirl::nd
