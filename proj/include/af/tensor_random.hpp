#pragma once

#include "af/rng.hpp"
#include "af/tensor.hpp"

namespace af {

inline Tensor randn_tensor(Shape shape, RngStream& stream) {
  Eigen::ArrayXd v(shape_size(shape));
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = stream.normal();
  return Tensor::from_array(std::move(shape), std::move(v));
}

inline Tensor rand_tensor(Shape shape, RngStream& stream) {
  Eigen::ArrayXd v(shape_size(shape));
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = stream.uniform();
  return Tensor::from_array(std::move(shape), std::move(v));
}

}  // namespace af
