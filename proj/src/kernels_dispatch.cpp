#include "gpn/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <stdexcept>

#include "gpn/kernels_impl.hpp"

namespace gpn::kern {

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma") &&
         detail::kAvx2F32 != nullptr;
#else
  return false;
#endif
}

Backend pick_initial() {
  if (const char* env = std::getenv("GPN_KERNELS")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::kScalar;
    if (std::strcmp(env, "avx2") == 0) {
      if (!cpu_has_avx2()) {
        throw std::runtime_error("GPN_KERNELS=avx2 but CPU lacks AVX2/FMA");
      }
      return Backend::kAvx2;
    }
    // "auto" or anything else falls through to detection
  }
  return cpu_has_avx2() ? Backend::kAvx2 : Backend::kScalar;
}

struct State {
  Backend backend;
  const detail::Table<float>* f32;
  const detail::Table<double>* f64;
};

State make_state(Backend b) {
  if (b == Backend::kAvx2) {
    return {b, detail::kAvx2F32, detail::kAvx2F64};
  }
  return {b, &detail::kScalarF32, &detail::kScalarF64};
}

State& state() {
  static State s = make_state(pick_initial());
  return s;
}

}  // namespace

Backend active_backend() { return state().backend; }

std::string_view backend_name() {
  return state().backend == Backend::kAvx2 ? "avx2" : "scalar";
}

bool avx2_supported() { return cpu_has_avx2(); }

void set_backend(Backend b) {
  if (b == Backend::kAvx2 && !cpu_has_avx2()) {
    throw std::runtime_error("AVX2 backend not supported on this CPU");
  }
  state() = make_state(b);
}

float dot(const float* a, const float* b, std::size_t n) {
  return state().f32->dot(a, b, n);
}
double dot(const double* a, const double* b, std::size_t n) {
  return state().f64->dot(a, b, n);
}

void axpy(float* y, float a, const float* x, std::size_t n) {
  state().f32->axpy(y, a, x, n);
}
void axpy(double* y, double a, const double* x, std::size_t n) {
  state().f64->axpy(y, a, x, n);
}

float sumsq(const float* x, std::size_t n) { return state().f32->sumsq(x, n); }
double sumsq(const double* x, std::size_t n) { return state().f64->sumsq(x, n); }

void gemm_wx(float* Y, const float* W, const float* X, std::size_t batch,
             std::size_t m, std::size_t n) {
  state().f32->gemm_wx(Y, W, X, batch, m, n);
}
void gemm_wx(double* Y, const double* W, const double* X, std::size_t batch,
             std::size_t m, std::size_t n) {
  state().f64->gemm_wx(Y, W, X, batch, m, n);
}

void gemm_dx_acc(float* dX, const float* W, const float* dY, std::size_t batch,
                 std::size_t m, std::size_t n) {
  state().f32->gemm_dx_acc(dX, W, dY, batch, m, n);
}
void gemm_dx_acc(double* dX, const double* W, const double* dY,
                 std::size_t batch, std::size_t m, std::size_t n) {
  state().f64->gemm_dx_acc(dX, W, dY, batch, m, n);
}

void gemm_dw_acc(float* dW, const float* dY, const float* X, std::size_t batch,
                 std::size_t m, std::size_t n) {
  state().f32->gemm_dw_acc(dW, dY, X, batch, m, n);
}
void gemm_dw_acc(double* dW, const double* dY, const double* X,
                 std::size_t batch, std::size_t m, std::size_t n) {
  state().f64->gemm_dw_acc(dW, dY, X, batch, m, n);
}

void scale_axpy_to(float* dst, const float* src, float decay, float c,
                   const float* x, std::size_t n) {
  state().f32->scale_axpy_to(dst, src, decay, c, x, n);
}
void scale_axpy_to(double* dst, const double* src, double decay, double c,
                   const double* x, std::size_t n) {
  state().f64->scale_axpy_to(dst, src, decay, c, x, n);
}

}  // namespace gpn::kern
