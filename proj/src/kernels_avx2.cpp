// AVX2/FMA kernel variants. Compiled with -mavx2 -mfma; callers reach these
// only through the dispatcher after a runtime CPU check.
//
// Accumulation-order contract (see kernels.hpp): every (row, column) result
// of a batched kernel runs the exact same FMA chain as the batch-1 call, so
// batching never changes bits. Scalar tails use std::fma to keep the tail
// independent of the compiler's contraction choices.

#include "gpn/kernels_impl.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

namespace gpn::kern::detail {

namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehl_ps(lo, lo);
  lo = _mm_add_ps(lo, sh);
  sh = _mm_shuffle_ps(lo, lo, 0x1);
  lo = _mm_add_ss(lo, sh);
  return _mm_cvtss_f32(lo);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  lo = _mm_add_sd(lo, sh);
  return _mm_cvtsd_f64(lo);
}

// ---------------------------------------------------------------- float

float dot_v(const float* a, const float* b, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8) {
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + k), _mm256_loadu_ps(b + k), acc);
  }
  float r = hsum(acc);
  for (; k < n; ++k) r = std::fma(a[k], b[k], r);
  return r;
}

void axpy_v(float* y, float a, const float* x, std::size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8) {
    _mm256_storeu_ps(
        y + k, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + k), _mm256_loadu_ps(y + k)));
  }
  for (; k < n; ++k) y[k] = std::fma(a, x[k], y[k]);
}

float sumsq_v(const float* x, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8) {
    const __m256 v = _mm256_loadu_ps(x + k);
    acc = _mm256_fmadd_ps(v, v, acc);
  }
  float r = hsum(acc);
  for (; k < n; ++k) r = std::fma(x[k], x[k], r);
  return r;
}

void gemm_wx_v(float* Y, const float* W, const float* X, std::size_t batch,
               std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* w = W + i * n;
    std::size_t b = 0;
    for (; b + 4 <= batch; b += 4) {
      const float* x0 = X + (b + 0) * n;
      const float* x1 = X + (b + 1) * n;
      const float* x2 = X + (b + 2) * n;
      const float* x3 = X + (b + 3) * n;
      __m256 a0 = _mm256_setzero_ps(), a1 = _mm256_setzero_ps();
      __m256 a2 = _mm256_setzero_ps(), a3 = _mm256_setzero_ps();
      std::size_t k = 0;
      for (; k + 8 <= n; k += 8) {
        const __m256 wv = _mm256_loadu_ps(w + k);
        a0 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(x0 + k), a0);
        a1 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(x1 + k), a1);
        a2 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(x2 + k), a2);
        a3 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(x3 + k), a3);
      }
      float r0 = hsum(a0), r1 = hsum(a1), r2 = hsum(a2), r3 = hsum(a3);
      for (; k < n; ++k) {
        const float wk = w[k];
        r0 = std::fma(wk, x0[k], r0);
        r1 = std::fma(wk, x1[k], r1);
        r2 = std::fma(wk, x2[k], r2);
        r3 = std::fma(wk, x3[k], r3);
      }
      Y[(b + 0) * m + i] = r0;
      Y[(b + 1) * m + i] = r1;
      Y[(b + 2) * m + i] = r2;
      Y[(b + 3) * m + i] = r3;
    }
    for (; b < batch; ++b) {
      Y[b * m + i] = dot_v(w, X + b * n, n);
    }
  }
}

void gemm_dx_acc_v(float* dX, const float* W, const float* dY,
                   std::size_t batch, std::size_t m, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const float* w0 = W + i * n;
    const float* w1 = W + (i + 1) * n;
    std::size_t b = 0;
    for (; b + 4 <= batch; b += 4) {
      __m256 y00 = _mm256_set1_ps(dY[(b + 0) * m + i]);
      __m256 y01 = _mm256_set1_ps(dY[(b + 0) * m + i + 1]);
      __m256 y10 = _mm256_set1_ps(dY[(b + 1) * m + i]);
      __m256 y11 = _mm256_set1_ps(dY[(b + 1) * m + i + 1]);
      __m256 y20 = _mm256_set1_ps(dY[(b + 2) * m + i]);
      __m256 y21 = _mm256_set1_ps(dY[(b + 2) * m + i + 1]);
      __m256 y30 = _mm256_set1_ps(dY[(b + 3) * m + i]);
      __m256 y31 = _mm256_set1_ps(dY[(b + 3) * m + i + 1]);
      float* d0 = dX + (b + 0) * n;
      float* d1 = dX + (b + 1) * n;
      float* d2 = dX + (b + 2) * n;
      float* d3 = dX + (b + 3) * n;
      std::size_t k = 0;
      for (; k + 8 <= n; k += 8) {
        const __m256 wv0 = _mm256_loadu_ps(w0 + k);
        const __m256 wv1 = _mm256_loadu_ps(w1 + k);
        __m256 v;
        v = _mm256_fmadd_ps(y01, wv1, _mm256_fmadd_ps(y00, wv0, _mm256_loadu_ps(d0 + k)));
        _mm256_storeu_ps(d0 + k, v);
        v = _mm256_fmadd_ps(y11, wv1, _mm256_fmadd_ps(y10, wv0, _mm256_loadu_ps(d1 + k)));
        _mm256_storeu_ps(d1 + k, v);
        v = _mm256_fmadd_ps(y21, wv1, _mm256_fmadd_ps(y20, wv0, _mm256_loadu_ps(d2 + k)));
        _mm256_storeu_ps(d2 + k, v);
        v = _mm256_fmadd_ps(y31, wv1, _mm256_fmadd_ps(y30, wv0, _mm256_loadu_ps(d3 + k)));
        _mm256_storeu_ps(d3 + k, v);
      }
      for (; k < n; ++k) {
        d0[k] = std::fma(dY[(b + 0) * m + i + 1], w1[k], std::fma(dY[(b + 0) * m + i], w0[k], d0[k]));
        d1[k] = std::fma(dY[(b + 1) * m + i + 1], w1[k], std::fma(dY[(b + 1) * m + i], w0[k], d1[k]));
        d2[k] = std::fma(dY[(b + 2) * m + i + 1], w1[k], std::fma(dY[(b + 2) * m + i], w0[k], d2[k]));
        d3[k] = std::fma(dY[(b + 3) * m + i + 1], w1[k], std::fma(dY[(b + 3) * m + i], w0[k], d3[k]));
      }
    }
    for (; b < batch; ++b) {
      const __m256 y0 = _mm256_set1_ps(dY[b * m + i]);
      const __m256 y1 = _mm256_set1_ps(dY[b * m + i + 1]);
      float* d = dX + b * n;
      std::size_t k = 0;
      for (; k + 8 <= n; k += 8) {
        __m256 v = _mm256_fmadd_ps(y1, _mm256_loadu_ps(w1 + k),
                                   _mm256_fmadd_ps(y0, _mm256_loadu_ps(w0 + k),
                                                   _mm256_loadu_ps(d + k)));
        _mm256_storeu_ps(d + k, v);
      }
      for (; k < n; ++k) {
        d[k] = std::fma(dY[b * m + i + 1], w1[k], std::fma(dY[b * m + i], w0[k], d[k]));
      }
    }
  }
  if (i < m) {  // odd trailing row
    const float* w = W + i * n;
    for (std::size_t b = 0; b < batch; ++b) {
      axpy_v(dX + b * n, dY[b * m + i], w, n);
    }
  }
}

void gemm_dw_acc_v(float* dW, const float* dY, const float* X,
                   std::size_t batch, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* w = dW + i * n;
    std::size_t b = 0;
    for (; b + 8 <= batch; b += 8) {
      const __m256 y0 = _mm256_set1_ps(dY[(b + 0) * m + i]);
      const __m256 y1 = _mm256_set1_ps(dY[(b + 1) * m + i]);
      const __m256 y2 = _mm256_set1_ps(dY[(b + 2) * m + i]);
      const __m256 y3 = _mm256_set1_ps(dY[(b + 3) * m + i]);
      const __m256 y4 = _mm256_set1_ps(dY[(b + 4) * m + i]);
      const __m256 y5 = _mm256_set1_ps(dY[(b + 5) * m + i]);
      const __m256 y6 = _mm256_set1_ps(dY[(b + 6) * m + i]);
      const __m256 y7 = _mm256_set1_ps(dY[(b + 7) * m + i]);
      std::size_t k = 0;
      for (; k + 8 <= n; k += 8) {
        __m256 acc = _mm256_loadu_ps(w + k);
        acc = _mm256_fmadd_ps(y0, _mm256_loadu_ps(X + (b + 0) * n + k), acc);
        acc = _mm256_fmadd_ps(y1, _mm256_loadu_ps(X + (b + 1) * n + k), acc);
        acc = _mm256_fmadd_ps(y2, _mm256_loadu_ps(X + (b + 2) * n + k), acc);
        acc = _mm256_fmadd_ps(y3, _mm256_loadu_ps(X + (b + 3) * n + k), acc);
        acc = _mm256_fmadd_ps(y4, _mm256_loadu_ps(X + (b + 4) * n + k), acc);
        acc = _mm256_fmadd_ps(y5, _mm256_loadu_ps(X + (b + 5) * n + k), acc);
        acc = _mm256_fmadd_ps(y6, _mm256_loadu_ps(X + (b + 6) * n + k), acc);
        acc = _mm256_fmadd_ps(y7, _mm256_loadu_ps(X + (b + 7) * n + k), acc);
        _mm256_storeu_ps(w + k, acc);
      }
      for (; k < n; ++k) {
        float acc = w[k];
        for (std::size_t j = 0; j < 8; ++j) {
          acc = std::fma(dY[(b + j) * m + i], X[(b + j) * n + k], acc);
        }
        w[k] = acc;
      }
    }
    for (; b < batch; ++b) {
      axpy_v(w, dY[b * m + i], X + b * n, n);
    }
  }
}

void scale_axpy_to_v(float* dst, const float* src, float decay, float c,
                     const float* x, std::size_t n) {
  const __m256 dv = _mm256_set1_ps(decay);
  const __m256 cv = _mm256_set1_ps(c);
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8) {
    const __m256 s = _mm256_mul_ps(dv, _mm256_loadu_ps(src + k));
    _mm256_storeu_ps(dst + k, _mm256_fmadd_ps(cv, _mm256_loadu_ps(x + k), s));
  }
  for (; k < n; ++k) dst[k] = std::fma(c, x[k], decay * src[k]);
}

// ---------------------------------------------------------------- double

double dot_v(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + k), _mm256_loadu_pd(b + k), acc);
  }
  double r = hsum(acc);
  for (; k < n; ++k) r = std::fma(a[k], b[k], r);
  return r;
}

void axpy_v(double* y, double a, const double* x, std::size_t n) {
  const __m256d av = _mm256_set1_pd(a);
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    _mm256_storeu_pd(
        y + k, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + k), _mm256_loadu_pd(y + k)));
  }
  for (; k < n; ++k) y[k] = std::fma(a, x[k], y[k]);
}

double sumsq_v(const double* x, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    const __m256d v = _mm256_loadu_pd(x + k);
    acc = _mm256_fmadd_pd(v, v, acc);
  }
  double r = hsum(acc);
  for (; k < n; ++k) r = std::fma(x[k], x[k], r);
  return r;
}

void gemm_wx_v(double* Y, const double* W, const double* X, std::size_t batch,
               std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* w = W + i * n;
    std::size_t b = 0;
    for (; b + 4 <= batch; b += 4) {
      const double* x0 = X + (b + 0) * n;
      const double* x1 = X + (b + 1) * n;
      const double* x2 = X + (b + 2) * n;
      const double* x3 = X + (b + 3) * n;
      __m256d a0 = _mm256_setzero_pd(), a1 = _mm256_setzero_pd();
      __m256d a2 = _mm256_setzero_pd(), a3 = _mm256_setzero_pd();
      std::size_t k = 0;
      for (; k + 4 <= n; k += 4) {
        const __m256d wv = _mm256_loadu_pd(w + k);
        a0 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(x0 + k), a0);
        a1 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(x1 + k), a1);
        a2 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(x2 + k), a2);
        a3 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(x3 + k), a3);
      }
      double r0 = hsum(a0), r1 = hsum(a1), r2 = hsum(a2), r3 = hsum(a3);
      for (; k < n; ++k) {
        const double wk = w[k];
        r0 = std::fma(wk, x0[k], r0);
        r1 = std::fma(wk, x1[k], r1);
        r2 = std::fma(wk, x2[k], r2);
        r3 = std::fma(wk, x3[k], r3);
      }
      Y[(b + 0) * m + i] = r0;
      Y[(b + 1) * m + i] = r1;
      Y[(b + 2) * m + i] = r2;
      Y[(b + 3) * m + i] = r3;
    }
    for (; b < batch; ++b) {
      Y[b * m + i] = dot_v(w, X + b * n, n);
    }
  }
}

void gemm_dx_acc_v(double* dX, const double* W, const double* dY,
                   std::size_t batch, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* w = W + i * n;
    for (std::size_t b = 0; b < batch; ++b) {
      axpy_v(dX + b * n, dY[b * m + i], w, n);
    }
  }
}

void gemm_dw_acc_v(double* dW, const double* dY, const double* X,
                   std::size_t batch, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* w = dW + i * n;
    for (std::size_t b = 0; b < batch; ++b) {
      axpy_v(w, dY[b * m + i], X + b * n, n);
    }
  }
}

void scale_axpy_to_v(double* dst, const double* src, double decay, double c,
                     const double* x, std::size_t n) {
  const __m256d dv = _mm256_set1_pd(decay);
  const __m256d cv = _mm256_set1_pd(c);
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    const __m256d s = _mm256_mul_pd(dv, _mm256_loadu_pd(src + k));
    _mm256_storeu_pd(dst + k, _mm256_fmadd_pd(cv, _mm256_loadu_pd(x + k), s));
  }
  for (; k < n; ++k) dst[k] = std::fma(c, x[k], decay * src[k]);
}

const Table<float> kAvx2F32Table = {
    static_cast<float (*)(const float*, const float*, std::size_t)>(&dot_v),
    static_cast<void (*)(float*, float, const float*, std::size_t)>(&axpy_v),
    static_cast<float (*)(const float*, std::size_t)>(&sumsq_v),
    static_cast<void (*)(float*, const float*, const float*, std::size_t, std::size_t, std::size_t)>(&gemm_wx_v),
    static_cast<void (*)(float*, const float*, const float*, std::size_t, std::size_t, std::size_t)>(&gemm_dx_acc_v),
    static_cast<void (*)(float*, const float*, const float*, std::size_t, std::size_t, std::size_t)>(&gemm_dw_acc_v),
    static_cast<void (*)(float*, const float*, float, float, const float*, std::size_t)>(&scale_axpy_to_v),
};

const Table<double> kAvx2F64Table = {
    static_cast<double (*)(const double*, const double*, std::size_t)>(&dot_v),
    static_cast<void (*)(double*, double, const double*, std::size_t)>(&axpy_v),
    static_cast<double (*)(const double*, std::size_t)>(&sumsq_v),
    static_cast<void (*)(double*, const double*, const double*, std::size_t, std::size_t, std::size_t)>(&gemm_wx_v),
    static_cast<void (*)(double*, const double*, const double*, std::size_t, std::size_t, std::size_t)>(&gemm_dx_acc_v),
    static_cast<void (*)(double*, const double*, const double*, std::size_t, std::size_t, std::size_t)>(&gemm_dw_acc_v),
    static_cast<void (*)(double*, const double*, double, double, const double*, std::size_t)>(&scale_axpy_to_v),
};

}  // namespace

const Table<float>* const kAvx2F32 = &kAvx2F32Table;
const Table<double>* const kAvx2F64 = &kAvx2F64Table;

}  // namespace gpn::kern::detail

#else  // non-x86 build: no AVX2 tables

namespace gpn::kern::detail {
const Table<float>* const kAvx2F32 = nullptr;
const Table<double>* const kAvx2F64 = nullptr;
}  // namespace gpn::kern::detail

#endif
