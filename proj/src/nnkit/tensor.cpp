#include "pctk/nnkit/tensor.hpp"

#include <cmath>
#include <sstream>

namespace nnkit {

std::size_t shape_numel(const std::vector<int>& shape) {
  if (shape.empty() || shape.size() > 3)
    throw pctk::ShapeError("tensor rank must be 1..3, got rank " +
                           std::to_string(shape.size()));
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw pctk::ShapeError("tensor dims must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size())
    throw pctk::ShapeError("from_data: element count does not match shape");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

std::string Tensor::shape_str() const {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) ss << ", ";
    ss << shape_[i];
  }
  ss << ']';
  return ss.str();
}

}  // namespace nnkit
