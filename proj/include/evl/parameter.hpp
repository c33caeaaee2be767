#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "evl/tensor.hpp"

namespace evl {

// A named trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

// fan_in x fan_out matrix, zero-mean uniform in +-1/sqrt(fan_in).
Tensor init_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

}  // namespace evl
