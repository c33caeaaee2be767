#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace evl {

struct VerifyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Fast invariant checks over the loss stack, metrics and persistence.
std::vector<VerifyResult> run_verify_suite(std::uint64_t seed, int threads = 1);

}  // namespace evl
