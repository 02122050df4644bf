#include "doctest.h"

#include <cmath>
#include <vector>

#include "gpn/kernels.hpp"
#include "gpn/rng.hpp"

using namespace gpn;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(scale * rng.gaussian());
  return v;
}

std::vector<double> widen(const std::vector<float>& v) {
  return {v.begin(), v.end()};
}

// reference in double: y[b] = W x[b]
std::vector<double> gemm_ref(const std::vector<double>& w,
                             const std::vector<double>& x, std::size_t batch,
                             std::size_t m, std::size_t n) {
  std::vector<double> y(batch * m, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0;
      for (std::size_t k = 0; k < n; ++k) acc += w[i * n + k] * x[b * n + k];
      y[b * m + i] = acc;
    }
  }
  return y;
}

struct BackendGuard {
  kern::Backend saved;
  BackendGuard() : saved(kern::active_backend()) {}
  ~BackendGuard() { kern::set_backend(saved); }
};

const std::vector<std::size_t> kSizes = {1, 3, 7, 8, 13, 64, 129, 300};

}  // namespace

TEST_CASE("dot and sumsq match a double reference on both backends") {
  BackendGuard guard;
  Rng rng(11);
  for (const std::size_t n : kSizes) {
    const auto a = random_vec(rng, n);
    const auto b = random_vec(rng, n);
    double exact = 0, mag = 0;
    for (std::size_t i = 0; i < n; ++i) {
      exact += static_cast<double>(a[i]) * b[i];
      mag += std::abs(static_cast<double>(a[i]) * b[i]);
    }
    for (const auto backend : {kern::Backend::kScalar, kern::Backend::kAvx2}) {
      if (backend == kern::Backend::kAvx2 && !kern::avx2_supported()) continue;
      kern::set_backend(backend);
      const float got = kern::dot(a.data(), b.data(), n);
      CHECK(std::abs(got - exact) <= 1e-5 * (mag + 1.0));
      const float ss = kern::sumsq(a.data(), n);
      double ss_exact = 0;
      for (const float v : a) ss_exact += static_cast<double>(v) * v;
      CHECK(std::abs(ss - ss_exact) <= 1e-5 * (ss_exact + 1.0));
    }
  }
}

TEST_CASE("gemm_wx matches the double reference for odd shapes and batches") {
  BackendGuard guard;
  Rng rng(12);
  for (const std::size_t n : {1u, 5u, 8u, 19u, 96u}) {
    for (const std::size_t m : {1u, 3u, 17u}) {
      for (const std::size_t batch : {1u, 2u, 4u, 5u, 9u}) {
        const auto w = random_vec(rng, m * n);
        const auto x = random_vec(rng, batch * n);
        const auto ref = gemm_ref(widen(w), widen(x), batch, m, n);
        for (const auto backend :
             {kern::Backend::kScalar, kern::Backend::kAvx2}) {
          if (backend == kern::Backend::kAvx2 && !kern::avx2_supported()) continue;
          kern::set_backend(backend);
          std::vector<float> y(batch * m, -1.0f);
          kern::gemm_wx(y.data(), w.data(), x.data(), batch, m, n);
          for (std::size_t i = 0; i < y.size(); ++i) {
            CHECK(std::abs(y[i] - ref[i]) <=
                  1e-4 * (std::abs(ref[i]) + std::sqrt(static_cast<double>(n))));
          }
        }
      }
    }
  }
}

TEST_CASE("batched kernels reproduce the single-vector forms bit-exactly") {
  BackendGuard guard;
  Rng rng(13);
  const std::size_t m = 23, n = 37, batch = 7;
  const auto w = random_vec(rng, m * n);
  const auto x = random_vec(rng, batch * n);
  const auto dy = random_vec(rng, batch * m);
  for (const auto backend : {kern::Backend::kScalar, kern::Backend::kAvx2}) {
    if (backend == kern::Backend::kAvx2 && !kern::avx2_supported()) continue;
    kern::set_backend(backend);

    std::vector<float> y_batched(batch * m);
    kern::gemm_wx(y_batched.data(), w.data(), x.data(), batch, m, n);
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<float> y_single(m);
      kern::matvec(y_single.data(), w.data(), x.data() + b * n, m, n);
      for (std::size_t i = 0; i < m; ++i) {
        CHECK(y_batched[b * m + i] == y_single[i]);
      }
    }

    std::vector<float> dx_batched(batch * n, 0.5f);
    kern::gemm_dx_acc(dx_batched.data(), w.data(), dy.data(), batch, m, n);
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<float> dx_single(n, 0.5f);
      kern::matvec_t_acc(dx_single.data(), w.data(), dy.data() + b * m, m, n);
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(dx_batched[b * n + i] == dx_single[i]);
      }
    }

    std::vector<float> dw_batched(m * n, 0.25f);
    kern::gemm_dw_acc(dw_batched.data(), dy.data(), x.data(), batch, m, n);
    std::vector<float> dw_seq(m * n, 0.25f);
    for (std::size_t b = 0; b < batch; ++b) {
      kern::outer_acc(dw_seq.data(), dy.data() + b * m, x.data() + b * n, m, n);
    }
    for (std::size_t i = 0; i < m * n; ++i) {
      CHECK(dw_batched[i] == dw_seq[i]);
    }
  }
}

TEST_CASE("scalar and avx2 agree within float tolerance on every kernel") {
  if (!kern::avx2_supported()) return;
  BackendGuard guard;
  Rng rng(14);
  const std::size_t m = 31, n = 45, batch = 6;
  const auto w = random_vec(rng, m * n);
  const auto x = random_vec(rng, batch * n);
  const auto dy = random_vec(rng, batch * m);

  auto run = [&](kern::Backend backend) {
    kern::set_backend(backend);
    std::vector<std::vector<float>> out;
    std::vector<float> y(batch * m);
    kern::gemm_wx(y.data(), w.data(), x.data(), batch, m, n);
    out.push_back(y);
    std::vector<float> dx(batch * n, 0.0f);
    kern::gemm_dx_acc(dx.data(), w.data(), dy.data(), batch, m, n);
    out.push_back(dx);
    std::vector<float> dw(m * n, 0.0f);
    kern::gemm_dw_acc(dw.data(), dy.data(), x.data(), batch, m, n);
    out.push_back(dw);
    std::vector<float> saxl(n);
    kern::scale_axpy_to(saxl.data(), x.data(), 0.75f, -1.25f, w.data(), n);
    out.push_back(saxl);
    std::vector<float> ax(n, 1.0f);
    kern::axpy(ax.data(), 0.5f, x.data(), n);
    out.push_back(ax);
    return out;
  };
  const auto s = run(kern::Backend::kScalar);
  const auto v = run(kern::Backend::kAvx2);
  REQUIRE(s.size() == v.size());
  for (std::size_t g = 0; g < s.size(); ++g) {
    REQUIRE(s[g].size() == v[g].size());
    for (std::size_t i = 0; i < s[g].size(); ++i) {
      CHECK(std::abs(s[g][i] - v[g][i]) <= 2e-5 * (std::abs(s[g][i]) + 1.0));
    }
  }
}

TEST_CASE("double kernels run on both backends") {
  BackendGuard guard;
  Rng rng(15);
  const std::size_t m = 9, n = 21, batch = 3;
  std::vector<double> w(m * n), x(batch * n), dy(batch * m);
  for (auto& v : w) v = rng.gaussian();
  for (auto& v : x) v = rng.gaussian();
  for (auto& v : dy) v = rng.gaussian();
  const auto ref = gemm_ref(w, x, batch, m, n);
  for (const auto backend : {kern::Backend::kScalar, kern::Backend::kAvx2}) {
    if (backend == kern::Backend::kAvx2 && !kern::avx2_supported()) continue;
    kern::set_backend(backend);
    std::vector<double> y(batch * m);
    kern::gemm_wx(y.data(), w.data(), x.data(), batch, m, n);
    for (std::size_t i = 0; i < y.size(); ++i) {
      CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
    std::vector<double> dx(batch * n, 0.0), dw(m * n, 0.0);
    kern::gemm_dx_acc(dx.data(), w.data(), dy.data(), batch, m, n);
    kern::gemm_dw_acc(dw.data(), dy.data(), x.data(), batch, m, n);
    double check = 0;
    for (const double v2 : dx) check += v2;
    CHECK(std::isfinite(check));
  }
}
