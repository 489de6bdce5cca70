#pragma once

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace darc {

// Dense double-precision tensor with shared storage. Shapes follow the
// NCHW convention for feature maps; per-channel parameters are {C},
// per-sample statistics {N,C}, scalars {1}.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (int d : shape_) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
      n *= static_cast<std::size_t>(d);
    }
    data_ = std::make_shared<std::vector<double>>(n, 0.0);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : *t.data_) x = v;
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from(std::vector<int> shape, std::vector<double> values) {
    Tensor t(std::move(shape));
    if (values.size() != t.size())
      throw std::invalid_argument("Tensor::from: value count does not match shape");
    *t.data_ = std::move(values);
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_ ? data_->size() : 0; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  double& operator[](std::size_t i) { return (*data_)[i]; }
  double operator[](std::size_t i) const { return (*data_)[i]; }

  double item() const {
    if (size() != 1) throw std::logic_error("Tensor::item: not a scalar");
    return (*data_)[0];
  }

  // Deep copy.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

  // Same storage, new shape (element counts must agree).
  Tensor reshaped(std::vector<int> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    std::size_t n = 1;
    for (int d : t.shape_) n *= static_cast<std::size_t>(d);
    if (n != size()) throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    t.data_ = data_;
    return t;
  }

  void fill(double v) {
    for (double& x : *data_) x = v;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::string s = "{";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "}";
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

}  // namespace darc
