// Scalar reference kernels. These define the reference accumulation order:
// dot-like reductions sum k ascending into a single accumulator; gemm_dx
// accumulates rows i ascending; gemm_dw accumulates batch entries ascending.

#include "gpn/kernels_impl.hpp"

namespace gpn::kern::detail {

namespace {

template <typename T>
T dot_s(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t k = 0; k < n; ++k) acc += a[k] * b[k];
  return acc;
}

template <typename T>
void axpy_s(T* y, T a, const T* x, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) y[k] += a * x[k];
}

template <typename T>
T sumsq_s(const T* x, std::size_t n) {
  T acc = 0;
  for (std::size_t k = 0; k < n; ++k) acc += x[k] * x[k];
  return acc;
}

template <typename T>
void gemm_wx_s(T* Y, const T* W, const T* X, std::size_t batch, std::size_t m,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* w = W + i * n;
    for (std::size_t b = 0; b < batch; ++b) {
      Y[b * m + i] = dot_s(w, X + b * n, n);
    }
  }
}

template <typename T>
void gemm_dx_acc_s(T* dX, const T* W, const T* dY, std::size_t batch,
                   std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* w = W + i * n;
    for (std::size_t b = 0; b < batch; ++b) {
      axpy_s(dX + b * n, dY[b * m + i], w, n);
    }
  }
}

template <typename T>
void gemm_dw_acc_s(T* dW, const T* dY, const T* X, std::size_t batch,
                   std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* w = dW + i * n;
    for (std::size_t b = 0; b < batch; ++b) {
      axpy_s(w, dY[b * m + i], X + b * n, n);
    }
  }
}

template <typename T>
void scale_axpy_to_s(T* dst, const T* src, T decay, T c, const T* x,
                     std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) dst[k] = decay * src[k] + c * x[k];
}

}  // namespace

const Table<float> kScalarF32 = {
    &dot_s<float>,         &axpy_s<float>,        &sumsq_s<float>,
    &gemm_wx_s<float>,     &gemm_dx_acc_s<float>, &gemm_dw_acc_s<float>,
    &scale_axpy_to_s<float>,
};

const Table<double> kScalarF64 = {
    &dot_s<double>,         &axpy_s<double>,        &sumsq_s<double>,
    &gemm_wx_s<double>,     &gemm_dx_acc_s<double>, &gemm_dw_acc_s<double>,
    &scale_axpy_to_s<double>,
};

}  // namespace gpn::kern::detail
