#include "stonefuse/tensor.hpp"

#include <sstream>

#include "stonefuse/common.hpp"

namespace stonefuse {

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(numel(shape_), 0.0f);
}

std::size_t Tensor::numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) fail("bad_shape", "negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

int Tensor::dim(std::size_t i) const {
  if (i >= shape_.size()) fail("bad_shape", "dimension index out of range");
  return shape_[i];
}

void Tensor::reshape(std::vector<int> shape) {
  if (numel(shape) != data_.size()) {
    fail("bad_shape", "reshape changes element count");
  }
  shape_ = std::move(shape);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ",";
    os << shape_[i];
  }
  os << ")";
  return os.str();
}

}  // namespace stonefuse
