#pragma once

// Internal: per-backend kernel tables. Only the kernels TUs and the
// dispatcher include this.

#include <cstddef>

namespace gpn::kern::detail {

template <typename T>
struct Table {
  T (*dot)(const T*, const T*, std::size_t);
  void (*axpy)(T*, T, const T*, std::size_t);
  T (*sumsq)(const T*, std::size_t);
  void (*gemm_wx)(T*, const T*, const T*, std::size_t, std::size_t,
                  std::size_t);
  void (*gemm_dx_acc)(T*, const T*, const T*, std::size_t, std::size_t,
                      std::size_t);
  void (*gemm_dw_acc)(T*, const T*, const T*, std::size_t, std::size_t,
                      std::size_t);
  void (*scale_axpy_to)(T*, const T*, T, T, const T*, std::size_t);
};

extern const Table<float> kScalarF32;
extern const Table<double> kScalarF64;

// Null when the build target has no AVX2 path.
extern const Table<float>* const kAvx2F32;
extern const Table<double>* const kAvx2F64;

}  // namespace gpn::kern::detail
