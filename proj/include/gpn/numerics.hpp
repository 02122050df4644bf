#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "gpn/kernels.hpp"

namespace gpn::num {

// ------------------------------------------------------------ activations

template <typename T>
inline T sigmoid(T x) {
  if (x >= 0) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
inline T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
inline T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

// overflow-safe: linear for x > 20, e^x for x < -20
template <typename T>
inline T softplus(T x) {
  if (x > T(20)) return x;
  if (x < T(-20)) return std::exp(x);
  return std::log1p(std::exp(x));
}

template <typename T>
inline T relu(T x) {
  return x > T(0) ? x : T(0);
}

// ------------------------------------------------------------ rmsnorm

/// Writes xn = x / sqrt(mean(x^2) + eps) and returns that denominator.
/// The gain is applied by the caller (u = g .* xn), which keeps the cached
/// xn gain-free for the backward pass.
template <typename T>
inline T rmsnorm_fwd(T* xn, const T* x, T eps, std::size_t d) {
  const T ms = kern::sumsq(x, d) / static_cast<T>(d);
  const T s = std::sqrt(ms + eps);
  const T inv = T(1) / s;
  for (std::size_t i = 0; i < d; ++i) xn[i] = x[i] * inv;
  return s;
}

/// dx += J^T dxn given the cached normalized vector and denominator.
template <typename T>
inline void rmsnorm_bwd_acc(T* dx, const T* dxn, const T* xn, T s,
                            std::size_t d) {
  const T proj = kern::dot(dxn, xn, d) / static_cast<T>(d);
  const T inv = T(1) / s;
  for (std::size_t i = 0; i < d; ++i) {
    dx[i] += (dxn[i] - xn[i] * proj) * inv;
  }
}

/// Spec-level op: out = gain .* x / sqrt(mean(x^2) + eps), gain defaults to 1.
template <typename T>
std::vector<T> rmsnorm(std::span<const T> v, T eps,
                       std::span<const T> gain = {}) {
  std::vector<T> out(v.size());
  rmsnorm_fwd(out.data(), v.data(), eps, v.size());
  if (!gain.empty()) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] *= gain[i];
  }
  return out;
}

// ------------------------------------------------------------ relu_l2norm

/// y = relu(x) / max(||relu(x)||_2, eps). Returns the raw norm ||relu(x)||.
template <typename T>
inline T relu_l2norm_fwd(T* y, const T* x, T eps, std::size_t n) {
  T ss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T u = relu(x[i]);
    y[i] = u;
    ss += u * u;
  }
  const T r = std::sqrt(ss);
  const T inv = T(1) / std::max(r, eps);
  for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
  return r;
}

/// dx += J^T dy given cached output y, raw norm r, and pre-activation x.
template <typename T>
inline void relu_l2norm_bwd_acc(T* dx, const T* dy, const T* y, T r,
                                const T* x, T eps, std::size_t n) {
  if (r >= eps) {
    const T proj = kern::dot(dy, y, n);
    const T inv = T(1) / r;
    for (std::size_t i = 0; i < n; ++i) {
      if (x[i] > T(0)) dx[i] += (dy[i] - y[i] * proj) * inv;
    }
  } else {
    const T inv = T(1) / eps;
    for (std::size_t i = 0; i < n; ++i) {
      if (x[i] > T(0)) dx[i] += dy[i] * inv;
    }
  }
}

template <typename T>
std::vector<T> relu_l2norm(std::span<const T> v, T eps) {
  std::vector<T> out(v.size());
  relu_l2norm_fwd(out.data(), v.data(), eps, v.size());
  return out;
}

// ------------------------------------------------------------ swiglu ffn

/// y = W2 * (silu(W1g x) .* (W1v x)); W1g,W1v are d_ffn x d, W2 is d x d_ffn.
template <typename T>
std::vector<T> swiglu_ffn(std::span<const T> x, std::span<const T> w1g,
                          std::span<const T> w1v, std::span<const T> w2,
                          std::size_t d_ffn, std::size_t d) {
  if (x.size() != d || w1g.size() != d_ffn * d || w1v.size() != d_ffn * d ||
      w2.size() != d * d_ffn) {
    throw std::invalid_argument("swiglu_ffn: shape mismatch");
  }
  std::vector<T> hg(d_ffn), hv(d_ffn), z(d_ffn), y(d);
  kern::matvec(hg.data(), w1g.data(), x.data(), d_ffn, d);
  kern::matvec(hv.data(), w1v.data(), x.data(), d_ffn, d);
  for (std::size_t i = 0; i < d_ffn; ++i) z[i] = silu(hg[i]) * hv[i];
  kern::matvec(y.data(), w2.data(), z.data(), d, d_ffn);
  return y;
}

// ------------------------------------------------------------ softmax CE

/// Max-subtracted softmax cross-entropy. Writes probs, returns -log p[target].
template <typename T>
inline T softmax_ce_fwd(T* probs, const T* logits, std::size_t vocab,
                        std::size_t target) {
  T mx = logits[0];
  for (std::size_t i = 1; i < vocab; ++i) mx = std::max(mx, logits[i]);
  T sum = 0;
  for (std::size_t i = 0; i < vocab; ++i) {
    probs[i] = std::exp(logits[i] - mx);
    sum += probs[i];
  }
  const T inv = T(1) / sum;
  for (std::size_t i = 0; i < vocab; ++i) probs[i] *= inv;
  return std::log(sum) - (logits[target] - mx);
}

/// dlogits = scale * (probs - onehot(target))
template <typename T>
inline void softmax_ce_bwd(T* dlogits, const T* probs, std::size_t vocab,
                           std::size_t target, T scale) {
  for (std::size_t i = 0; i < vocab; ++i) dlogits[i] = scale * probs[i];
  dlogits[target] -= scale;
}

// ------------------------------------------------------------ grad check

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t n_probes = 0;
};

/// Central-difference check of an analytic gradient, probing every
/// coordinate: rel = |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport grad_check(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x, std::span<const double> analytic, double eps) {
  if (x.size() != analytic.size()) {
    throw std::invalid_argument("grad_check: size mismatch");
  }
  std::vector<double> probe(x.begin(), x.end());
  GradCheckReport rep;
  rep.n_probes = x.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = probe[i];
    probe[i] = x0 + eps;
    const double fp = f(probe);
    probe[i] = x0 - eps;
    const double fm = f(probe);
    probe[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("grad_check: non-finite function value");
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_coordinate = i;
    }
  }
  return rep;
}

}  // namespace gpn::num
