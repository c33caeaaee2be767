#include "evl/parameter.hpp"

#include <cmath>

namespace evl {

Tensor init_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform_tensor({fan_in, fan_out}, -bound, bound, rng);
}

}  // namespace evl
