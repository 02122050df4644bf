#pragma once

#include <cstddef>
#include <string_view>

namespace gpn::kern {

/// Backends for the dense inner loops. Scalar is the reference semantics;
/// AVX2 (with FMA) is selected at runtime when the CPU supports it. The
/// environment variable GPN_KERNELS={auto,scalar,avx2} overrides selection.
enum class Backend { kScalar, kAvx2 };

Backend active_backend();
std::string_view backend_name();
bool avx2_supported();
/// Force a backend (tests / reproducibility). Throws if unsupported.
void set_backend(Backend b);

// Everything below is row-major. W is m x n. Batched activations are packed
// as `batch` contiguous rows: X[b] = X + b*n.
//
// Per-element accumulation order is fixed within a backend, and the batched
// forms reduce to their single-vector forms column by column, so a batch-1
// call and one column of a batch-N call produce bit-identical results.

float  dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);

void axpy(float* y, float a, const float* x, std::size_t n);   // y += a*x
void axpy(double* y, double a, const double* x, std::size_t n);

float  sumsq(const float* x, std::size_t n);
double sumsq(const double* x, std::size_t n);

// Y[b] = W * X[b]
void gemm_wx(float* Y, const float* W, const float* X,
             std::size_t batch, std::size_t m, std::size_t n);
void gemm_wx(double* Y, const double* W, const double* X,
             std::size_t batch, std::size_t m, std::size_t n);

// dX[b] += W^T * dY[b]
void gemm_dx_acc(float* dX, const float* W, const float* dY,
                 std::size_t batch, std::size_t m, std::size_t n);
void gemm_dx_acc(double* dX, const double* W, const double* dY,
                 std::size_t batch, std::size_t m, std::size_t n);

// dW += sum_b dY[b] (outer) X[b]
void gemm_dw_acc(float* dW, const float* dY, const float* X,
                 std::size_t batch, std::size_t m, std::size_t n);
void gemm_dw_acc(double* dW, const double* dY, const double* X,
                 std::size_t batch, std::size_t m, std::size_t n);

// dst = decay*src + c*x, elementwise over n (delta-rule row update)
void scale_axpy_to(float* dst, const float* src, float decay, float c,
                   const float* x, std::size_t n);
void scale_axpy_to(double* dst, const double* src, double decay, double c,
                   const double* x, std::size_t n);

// Single-vector forms (batch == 1)
template <typename T>
inline void matvec(T* y, const T* W, const T* x, std::size_t m, std::size_t n) {
  gemm_wx(y, W, x, 1, m, n);
}
template <typename T>
inline void matvec_t_acc(T* dx, const T* W, const T* dy, std::size_t m,
                         std::size_t n) {
  gemm_dx_acc(dx, W, dy, 1, m, n);
}
template <typename T>
inline void outer_acc(T* dW, const T* dy, const T* x, std::size_t m,
                      std::size_t n) {
  gemm_dw_acc(dW, dy, x, 1, m, n);
}

}  // namespace gpn::kern
