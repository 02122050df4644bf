#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gpn {

/// Dense row-major tensor of rank 1..3. Just storage plus shape; all math
/// lives in the kernels and the modules composing them.
template <typename T>
struct Tensor {
  std::vector<T> data;
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::uint8_t rank = 0;

  Tensor() = default;

  static Tensor vec(std::size_t n) { return make({n, 0, 0}, 1); }
  static Tensor mat(std::size_t m, std::size_t n) { return make({m, n, 0}, 2); }
  static Tensor cube(std::size_t a, std::size_t b, std::size_t c) {
    return make({a, b, c}, 3);
  }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::uint8_t i = 0; i < rank; ++i) n *= dims[i];
    return rank == 0 ? 0 : n;
  }

  bool empty() const { return rank == 0; }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // row i of a rank-2 tensor
  T* row(std::size_t i) { return data.data() + i * dims[1]; }
  const T* row(std::size_t i) const { return data.data() + i * dims[1]; }

  bool same_shape(const Tensor& o) const {
    return rank == o.rank && dims == o.dims;
  }

 private:
  static Tensor make(std::array<std::size_t, 3> d, std::uint8_t r) {
    Tensor t;
    t.dims = d;
    t.rank = r;
    t.data.assign([&] {
      std::size_t n = 1;
      for (std::uint8_t i = 0; i < r; ++i) n *= d[i];
      return n;
    }(), T(0));
    return t;
  }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  Tensor<T> z = t;
  z.zero();
  return z;
}

}  // namespace gpn
