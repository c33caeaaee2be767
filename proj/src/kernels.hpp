#pragma once

#include <cstddef>

namespace evl::kernels {

// out[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* out_row = out + i * n;
    const double* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_row[p];
      const double* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

// out[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* out, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b_row = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
      out[i * n + j] += acc;
    }
  }
}

// out[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const double* a, const double* b, double* out, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = a + i * k;
    const double* b_row = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_row[p];
      double* out_row = out + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

}  // namespace evl::kernels
