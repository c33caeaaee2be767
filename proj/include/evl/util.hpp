#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

namespace evl {

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);
// Derives an independent stream seed from a parent seed and an index.
inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(seed ^ splitmix64(index + 0x9e3779b97f4a7c15ULL));
}
std::string hex64(std::uint64_t v);

// Runs body(i) for i in [0, n) over up to `threads` workers. Iterations must
// be independent; threads <= 1 runs inline in index order.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

}  // namespace evl
