#pragma once

#include <cstdlib>
#include <cstring>

#if defined(__linux__)
#include <dlfcn.h>
#define LTSP_HAVE_DLOPEN 1
#endif

namespace ltsp::detail {

// Row-major GEMM: C[m,n] = alpha * op(A) * op(B) + beta * C.
// Backed by OpenBLAS when the shared library is present, with a blocked
// fallback otherwise. OpenBLAS is loaded lazily via dlopen so the core-type
// override below takes effect; on this class of VMs the CPUID vendor string
// is masked and OpenBLAS would otherwise select its generic SSE2 kernels.

using SgemmFn = void (*)(int order, int transA, int transB, int m, int n, int k, float alpha,
                         const float* a, int lda, const float* b, int ldb, float beta, float* c,
                         int ldc);
using DgemmFn = void (*)(int order, int transA, int transB, int m, int n, int k, double alpha,
                         const double* a, int lda, const double* b, int ldb, double beta,
                         double* c, int ldc);

struct BlasRuntime {
  SgemmFn sgemm = nullptr;
  DgemmFn dgemm = nullptr;

  BlasRuntime() {
#if LTSP_HAVE_DLOPEN
    if (!std::getenv("OPENBLAS_CORETYPE")) {
#if defined(__x86_64__)
      __builtin_cpu_init();
      if (__builtin_cpu_supports("avx2")) setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
#endif
    }
    for (const char* name : {"libopenblas.so.0", "libopenblas.so"}) {
      handle_ = dlopen(name, RTLD_NOW | RTLD_LOCAL);
      if (handle_) break;
    }
    if (handle_) {
      sgemm = reinterpret_cast<SgemmFn>(dlsym(handle_, "cblas_sgemm"));
      dgemm = reinterpret_cast<DgemmFn>(dlsym(handle_, "cblas_dgemm"));
    }
#endif
  }

  static const BlasRuntime& instance() {
    static BlasRuntime rt;
    return rt;
  }

 private:
  void* handle_ = nullptr;
};

// Fallback: ikj loop order, deterministic, vectorizable over n.
template <typename T>
void gemm_fallback(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
                   const T* b, int ldb, T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<long>(i) * ldc;
    if (beta == T(0)) {
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    } else if (beta != T(1)) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int p = 0; p < k; ++p) {
      T aval = trans_a ? a[static_cast<long>(p) * lda + i] : a[static_cast<long>(i) * lda + p];
      aval *= alpha;
      if (aval == T(0)) continue;
      if (!trans_b) {
        const T* brow = b + static_cast<long>(p) * ldb;
        for (int j = 0; j < n; ++j) crow[j] += aval * brow[j];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += aval * b[static_cast<long>(j) * ldb + p];
      }
    }
  }
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  const auto& rt = BlasRuntime::instance();
  if (rt.sgemm) {
    rt.sgemm(101, trans_a ? 112 : 111, trans_b ? 112 : 111, m, n, k, alpha, a, lda, b, ldb, beta,
             c, ldc);
  } else {
    gemm_fallback(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  const auto& rt = BlasRuntime::instance();
  if (rt.dgemm) {
    rt.dgemm(101, trans_a ? 112 : 111, trans_b ? 112 : 111, m, n, k, alpha, a, lda, b, ldb, beta,
             c, ldc);
  } else {
    gemm_fallback(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

}  // namespace ltsp::detail
