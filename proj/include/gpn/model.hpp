#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpn/kernels.hpp"
#include "gpn/numerics.hpp"
#include "gpn/rng.hpp"
#include "gpn/tensor.hpp"

namespace gpn {

enum class Mode { kGpn, kGpnM };

inline const char* mode_name(Mode m) {
  return m == Mode::kGpnM ? "gpn+m" : "gpn";
}

struct ModelConfig {
  std::size_t d = 256;       // state width
  std::size_t d_ffn = 682;   // FFN hidden width
  std::size_t d_emb = 256;   // embedding width (== d here)
  std::size_t vocab = 256;   // byte-level by default
  std::size_t heads = 4;     // memory heads
  std::size_t d_k = 32;      // per-head key width
  std::size_t d_v = 64;      // per-head value width
  Mode mode = Mode::kGpnM;
  bool decoder_bias = false;
  double eps_norm = 1e-6;
  std::size_t bptt_trunc = 0;  // 0 = full BPTT

  std::size_t dk_total() const { return heads * d_k; }
  std::size_t dv_total() const { return heads * d_v; }

  void validate() const {
    if (d < 1 || d_ffn < 1 || d_emb < 1 || vocab < 2) {
      throw std::invalid_argument("ModelConfig: dimensions must be positive");
    }
    if (mode == Mode::kGpnM && (heads < 1 || d_k < 1 || d_v < 1)) {
      throw std::invalid_argument("ModelConfig: memory dims must be positive");
    }
    if (eps_norm <= 0) {
      throw std::invalid_argument("ModelConfig: eps_norm must be > 0");
    }
  }
};

// Data-dependent decay floor: gamma is clamped here so alpha = e^gamma stays
// a strictly positive float no matter how hard training pushes the decay.
inline constexpr double kGammaMin = -60.0;

/// Every learnable tensor of GPN / GPN+M. Memory tensors are empty in GPN
/// mode; dec_b is empty unless decoder_bias is set. The same struct doubles
/// as the gradient container.
template <typename T>
struct Params {
  Tensor<T> emb;       // vocab x d_emb
  Tensor<T> w_fuse;    // d x d_emb
  Tensor<T> gate_f_w;  // d x d
  Tensor<T> gate_f_g;  // d
  Tensor<T> gate_p_w;  // d x d
  Tensor<T> gate_p_g;  // d
  Tensor<T> ffn_w1g;   // d_ffn x d
  Tensor<T> ffn_w1v;   // d_ffn x d
  Tensor<T> ffn_w2;    // d x d_ffn
  Tensor<T> ffn_g;     // d
  Tensor<T> dec_w;     // vocab x d
  Tensor<T> dec_g;     // d
  Tensor<T> dec_b;     // vocab (optional)
  Tensor<T> mem_wk;    // H*d_k x d
  Tensor<T> mem_wv;    // H*d_v x d
  Tensor<T> mem_wq;    // H*d_k x d
  Tensor<T> mem_wbeta; // H x d
  Tensor<T> mem_wa;    // H x d
  Tensor<T> mem_a;     // H (per-head log-scale of the decay rate)
  Tensor<T> mem_wrg;   // H*d_v x d
  Tensor<T> mem_wo;    // d x H*d_v
  Tensor<T> mem_gr;    // H*d_v (read rmsnorm gain)
  Tensor<T> s0;        // d (learned initial state)

  /// Visits every present tensor in a fixed order: f(name, tensor, decayed).
  /// `decayed` marks the weight matrices (AdamW applies decay only to them).
  template <typename F>
  void for_each(F&& f) {
    f("emb", emb, true);
    f("w_fuse", w_fuse, true);
    f("gate_f.w", gate_f_w, true);
    f("gate_f.g", gate_f_g, false);
    f("gate_p.w", gate_p_w, true);
    f("gate_p.g", gate_p_g, false);
    f("ffn.w1g", ffn_w1g, true);
    f("ffn.w1v", ffn_w1v, true);
    f("ffn.w2", ffn_w2, true);
    f("ffn.g", ffn_g, false);
    f("dec.w", dec_w, true);
    f("dec.g", dec_g, false);
    if (!dec_b.empty()) f("dec.b", dec_b, false);
    if (!mem_wk.empty()) {
      f("mem.wk", mem_wk, true);
      f("mem.wv", mem_wv, true);
      f("mem.wq", mem_wq, true);
      f("mem.wbeta", mem_wbeta, true);
      f("mem.wa", mem_wa, true);
      f("mem.a", mem_a, false);
      f("mem.wrg", mem_wrg, true);
      f("mem.wo", mem_wo, true);
      f("mem.gr", mem_gr, false);
    }
    f("s0", s0, false);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<Params*>(this)->for_each(
        [&](const char* name, Tensor<T>& t, bool decayed) {
          f(name, static_cast<const Tensor<T>&>(t), decayed);
        });
  }
};

/// Allocates all tensors for the config, zero-filled.
template <typename T>
Params<T> make_params(const ModelConfig& c) {
  c.validate();
  Params<T> p;
  p.emb = Tensor<T>::mat(c.vocab, c.d_emb);
  p.w_fuse = Tensor<T>::mat(c.d, c.d_emb);
  p.gate_f_w = Tensor<T>::mat(c.d, c.d);
  p.gate_f_g = Tensor<T>::vec(c.d);
  p.gate_p_w = Tensor<T>::mat(c.d, c.d);
  p.gate_p_g = Tensor<T>::vec(c.d);
  p.ffn_w1g = Tensor<T>::mat(c.d_ffn, c.d);
  p.ffn_w1v = Tensor<T>::mat(c.d_ffn, c.d);
  p.ffn_w2 = Tensor<T>::mat(c.d, c.d_ffn);
  p.ffn_g = Tensor<T>::vec(c.d);
  p.dec_w = Tensor<T>::mat(c.vocab, c.d);
  p.dec_g = Tensor<T>::vec(c.d);
  if (c.decoder_bias) p.dec_b = Tensor<T>::vec(c.vocab);
  if (c.mode == Mode::kGpnM) {
    p.mem_wk = Tensor<T>::mat(c.dk_total(), c.d);
    p.mem_wv = Tensor<T>::mat(c.dv_total(), c.d);
    p.mem_wq = Tensor<T>::mat(c.dk_total(), c.d);
    p.mem_wbeta = Tensor<T>::mat(c.heads, c.d);
    p.mem_wa = Tensor<T>::mat(c.heads, c.d);
    p.mem_a = Tensor<T>::vec(c.heads);
    p.mem_wrg = Tensor<T>::mat(c.dv_total(), c.d);
    p.mem_wo = Tensor<T>::mat(c.d, c.dv_total());
    p.mem_gr = Tensor<T>::vec(c.dv_total());
  }
  p.s0 = Tensor<T>::vec(c.d);
  return p;
}

template <typename T>
Params<T> zeros_like_params(const Params<T>& p) {
  Params<T> z = p;
  z.for_each([](const char*, Tensor<T>& t, bool) { t.zero(); });
  return z;
}

/// Deterministic init. Weights N(0, 0.02); the residual-exit projections
/// ffn.w2 and mem.wo additionally scaled by 1/sqrt(2); both gate weight
/// matrices, mem.a, and s0 start at zero (gates open at 0.5, all heads share
/// the same decay law); rms gains start at one. Gaussian tensors draw from
/// one stream in visit order, so GPN and GPN+M share every common tensor for
/// the same seed.
template <typename T>
Params<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  Params<T> p = make_params<T>(c);
  Rng rng(seed);
  const T std_dev = T(0.02);
  const T damp = T(1) / std::sqrt(T(2));
  auto fill = [&](Tensor<T>& t, T scale) {
    for (auto& v : t.data) v = scale * static_cast<T>(rng.gaussian());
  };
  fill(p.emb, std_dev);
  fill(p.w_fuse, std_dev);
  fill(p.ffn_w1g, std_dev);
  fill(p.ffn_w1v, std_dev);
  fill(p.ffn_w2, std_dev * damp);
  fill(p.dec_w, std_dev);
  if (c.mode == Mode::kGpnM) {
    fill(p.mem_wk, std_dev);
    fill(p.mem_wv, std_dev);
    fill(p.mem_wq, std_dev);
    fill(p.mem_wbeta, std_dev);
    fill(p.mem_wa, std_dev);
    fill(p.mem_wrg, std_dev);
    fill(p.mem_wo, std_dev * damp);
    for (auto& v : p.mem_gr.data) v = T(1);
  }
  for (auto& v : p.gate_f_g.data) v = T(1);
  for (auto& v : p.gate_p_g.data) v = T(1);
  for (auto& v : p.ffn_g.data) v = T(1);
  for (auto& v : p.dec_g.data) v = T(1);
  return p;
}

inline std::size_t count_params(const ModelConfig& c) {
  auto p = make_params<float>(c);
  std::size_t n = 0;
  p.for_each([&](const char*, const Tensor<float>& t, bool) { n += t.numel(); });
  return n;
}

// ------------------------------------------------------------ state

/// The recurrent carry of one sequence: predicted state, matrix memory, and
/// the previous grounded state (the key source of the next write).
template <typename T>
struct StateBundle {
  std::vector<T> s_p;       // d
  std::vector<T> m;         // H*d_k*d_v, zero at sequence start
  std::vector<T> s_g_prev;  // d

  static StateBundle initial(const Params<T>& p, const ModelConfig& c) {
    StateBundle b;
    b.s_p.assign(p.s0.data.begin(), p.s0.data.end());
    b.s_g_prev = b.s_p;
    if (c.mode == Mode::kGpnM) {
      b.m.assign(c.heads * c.d_k * c.d_v, T(0));
    }
    return b;
  }
};

/// Per-step activations needed to replay one step in reverse.
template <typename T>
struct StepCache {
  std::vector<T> xn_f, gate_f;          // ground
  std::vector<T> kraw, k, v, a_omega, beta, alpha, r_old;  // write
  std::vector<T> qraw, q, r, xn_r, p_rg;                   // read
  std::vector<T> xn_p, gate_p, xn_ffn, h_g, h_v;           // predict
  std::vector<T> xn_dec, probs;                            // decode
  T s_f = 0, k_norm = 0, q_norm = 0, s_r = 0, s_p = 0, s_ffn = 0, s_dec = 0;
};

/// Per-step, per-head decay factors plus sequence boundaries, for the
/// retention analysis.
struct DecayLog {
  std::size_t heads = 0;
  std::vector<double> alphas;           // [t][h]
  std::vector<std::size_t> seq_starts;  // row index where each sequence begins

  std::size_t steps() const { return heads ? alphas.size() / heads : 0; }
  double at(std::size_t t, std::size_t h) const { return alphas[t * heads + h]; }
};

// ------------------------------------------------------------ ops

namespace detail {

// u = gain .* rmsnorm-core(x); returns the rms denominator, caches xn.
template <typename T>
inline T normed_input(T* u, T* xn, const T* x, const T* gain, T eps,
                      std::size_t d) {
  const T s = num::rmsnorm_fwd(xn, x, eps, d);
  for (std::size_t i = 0; i < d; ++i) u[i] = gain[i] * xn[i];
  return s;
}

}  // namespace detail

/// Gated delta-rule update of one head: M_new = alpha*M_prev + beta * k (x)
/// (v - M_prev^T k). Writes the pre-write read M_prev^T k to r_old;
/// delta_tmp is dv scratch owned by the caller.
template <typename T>
inline void delta_rule_update(T* m_new, const T* m_prev, const T* k,
                              const T* v, T beta, T alpha, std::size_t dk,
                              std::size_t dv, T* r_old, T* delta_tmp) {
  for (std::size_t j = 0; j < dv; ++j) r_old[j] = T(0);
  kern::matvec_t_acc(r_old, m_prev, k, dk, dv);
  for (std::size_t j = 0; j < dv; ++j) delta_tmp[j] = v[j] - r_old[j];
  for (std::size_t i = 0; i < dk; ++i) {
    kern::scale_axpy_to(m_new + i * dv, m_prev + i * dv, alpha, beta * k[i],
                        delta_tmp, dv);
  }
}

/// Read one head: r = M^T q (contraction over the key axis).
template <typename T>
inline void mem_read_head(T* r, const T* m, const T* q, std::size_t dk,
                          std::size_t dv) {
  for (std::size_t j = 0; j < dv; ++j) r[j] = T(0);
  kern::matvec_t_acc(r, m, q, dk, dv);
}

/// Ground: s_g = sigmoid(W_f * rmsnorm(s_p_prev)) .* s_p_prev + W_fuse * emb[token].
template <typename T>
std::vector<T> ground(const std::vector<T>& s_p_prev, std::size_t token,
                      const Params<T>& p, const ModelConfig& c) {
  if (token >= c.vocab) throw std::out_of_range("ground: token out of range");
  const std::size_t d = c.d;
  const T eps = static_cast<T>(c.eps_norm);
  std::vector<T> xn(d), u(d), a(d), s_g(d);
  detail::normed_input(u.data(), xn.data(), s_p_prev.data(),
                       p.gate_f_g.ptr(), eps, d);
  kern::matvec(a.data(), p.gate_f_w.ptr(), u.data(), d, d);
  std::vector<T> fused(d);
  kern::matvec(fused.data(), p.w_fuse.ptr(), p.emb.row(token), d, c.d_emb);
  for (std::size_t i = 0; i < d; ++i) {
    s_g[i] = num::sigmoid(a[i]) * s_p_prev[i] + fused[i];
  }
  return s_g;
}

/// Gated delta-rule write across all heads. Keys come from the previous
/// grounded state, values and the write/decay gates from the current one.
/// Returns the updated memory and the per-head decay factors alpha.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> mem_write(
    const std::vector<T>& m_prev, const std::vector<T>& s_g_prev,
    const std::vector<T>& s_g_cur, const Params<T>& p, const ModelConfig& c) {
  const std::size_t H = c.heads, dk = c.d_k, dv = c.d_v;
  const T eps = static_cast<T>(c.eps_norm);
  std::vector<T> kraw(c.dk_total()), k(c.dk_total());
  kern::matvec(kraw.data(), p.mem_wk.ptr(), s_g_prev.data(), c.dk_total(), c.d);
  num::relu_l2norm_fwd(k.data(), kraw.data(), eps, c.dk_total());
  std::vector<T> v(c.dv_total());
  kern::matvec(v.data(), p.mem_wv.ptr(), s_g_cur.data(), c.dv_total(), c.d);
  std::vector<T> a_beta(H), a_omega(H);
  kern::matvec(a_beta.data(), p.mem_wbeta.ptr(), s_g_cur.data(), H, c.d);
  kern::matvec(a_omega.data(), p.mem_wa.ptr(), s_g_cur.data(), H, c.d);
  std::vector<T> m_new(H * dk * dv), alpha(H), r_old(dv), delta(dv);
  for (std::size_t h = 0; h < H; ++h) {
    const T beta = num::sigmoid(a_beta[h]);
    T gamma = -std::exp(p.mem_a.data[h]) * num::softplus(a_omega[h]);
    gamma = std::max(gamma, static_cast<T>(kGammaMin));
    alpha[h] = std::exp(gamma);
    delta_rule_update(m_new.data() + h * dk * dv, m_prev.data() + h * dk * dv,
                      k.data() + h * dk, v.data() + h * dv, beta, alpha[h], dk,
                      dv, r_old.data(), delta.data());
  }
  return {std::move(m_new), std::move(alpha)};
}

/// MemRead: per-head contraction of M with the query, rms-normalized with a
/// learnable gain, gated by silu(W_rg s_g), projected back to width d.
template <typename T>
std::vector<T> mem_read(const std::vector<T>& m, const std::vector<T>& s_g,
                        const Params<T>& p, const ModelConfig& c) {
  const std::size_t H = c.heads, dk = c.d_k, dv = c.d_v, Dv = c.dv_total();
  const T eps = static_cast<T>(c.eps_norm);
  std::vector<T> qraw(c.dk_total()), q(c.dk_total());
  kern::matvec(qraw.data(), p.mem_wq.ptr(), s_g.data(), c.dk_total(), c.d);
  num::relu_l2norm_fwd(q.data(), qraw.data(), eps, c.dk_total());
  std::vector<T> r(Dv);
  for (std::size_t h = 0; h < H; ++h) {
    mem_read_head(r.data() + h * dv, m.data() + h * dk * dv, q.data() + h * dk,
                  dk, dv);
  }
  std::vector<T> xn(Dv), p_rg(Dv), out(c.d), gated(Dv);
  num::rmsnorm_fwd(xn.data(), r.data(), eps, Dv);
  kern::matvec(p_rg.data(), p.mem_wrg.ptr(), s_g.data(), Dv, c.d);
  for (std::size_t j = 0; j < Dv; ++j) {
    gated[j] = num::silu(p_rg[j]) * (p.mem_gr.data[j] * xn[j]);
  }
  kern::matvec(out.data(), p.mem_wo.ptr(), gated.data(), c.d, Dv);
  return out;
}

/// Predict: s_p = sigmoid(W_p * rmsnorm(s_g)) .* s_g + FFN(rmsnorm(s_g))
/// [+ MemRead(s_g, M) in GPN+M mode, M already holding this step's write].
template <typename T>
std::vector<T> predict(const std::vector<T>& s_g,
                       const std::vector<T>* m_post_write, const Params<T>& p,
                       const ModelConfig& c) {
  if (c.mode == Mode::kGpnM && m_post_write == nullptr) {
    throw std::invalid_argument("predict: GPN+M requires the matrix memory");
  }
  const std::size_t d = c.d, dffn = c.d_ffn;
  const T eps = static_cast<T>(c.eps_norm);
  std::vector<T> xn(d), u(d), a(d);
  detail::normed_input(u.data(), xn.data(), s_g.data(), p.gate_p_g.ptr(), eps, d);
  kern::matvec(a.data(), p.gate_p_w.ptr(), u.data(), d, d);
  std::vector<T> xn2(d), u2(d), hg(dffn), hv(dffn), z(dffn), ffn(d);
  detail::normed_input(u2.data(), xn2.data(), s_g.data(), p.ffn_g.ptr(), eps, d);
  kern::matvec(hg.data(), p.ffn_w1g.ptr(), u2.data(), dffn, d);
  kern::matvec(hv.data(), p.ffn_w1v.ptr(), u2.data(), dffn, d);
  for (std::size_t i = 0; i < dffn; ++i) z[i] = num::silu(hg[i]) * hv[i];
  kern::matvec(ffn.data(), p.ffn_w2.ptr(), z.data(), d, dffn);
  std::vector<T> s_p(d);
  for (std::size_t i = 0; i < d; ++i) {
    s_p[i] = num::sigmoid(a[i]) * s_g[i] + ffn[i];
  }
  if (c.mode == Mode::kGpnM) {
    const std::vector<T> read = mem_read(*m_post_write, s_g, p, c);
    for (std::size_t i = 0; i < d; ++i) s_p[i] += read[i];
  }
  return s_p;
}

/// logits = W_dec * rmsnorm(s_p) (+ bias when enabled)
template <typename T>
std::vector<T> decode_logits(const std::vector<T>& s_p, const Params<T>& p,
                             const ModelConfig& c) {
  const T eps = static_cast<T>(c.eps_norm);
  std::vector<T> xn(c.d), u(c.d), logits(c.vocab);
  detail::normed_input(u.data(), xn.data(), s_p.data(), p.dec_g.ptr(), eps, c.d);
  kern::matvec(logits.data(), p.dec_w.ptr(), u.data(), c.vocab, c.d);
  if (!p.dec_b.empty()) {
    for (std::size_t i = 0; i < c.vocab; ++i) logits[i] += p.dec_b.data[i];
  }
  return logits;
}

template <typename T>
std::pair<std::vector<T>, T> decode_loss(const std::vector<T>& s_p,
                                         std::size_t target,
                                         const Params<T>& p,
                                         const ModelConfig& c) {
  if (target >= c.vocab) throw std::out_of_range("decode_loss: target out of range");
  std::vector<T> logits = decode_logits(s_p, p, c);
  std::vector<T> probs(c.vocab);
  const T ce = num::softmax_ce_fwd(probs.data(), logits.data(), c.vocab, target);
  return {std::move(logits), ce};
}

// Flatten / unflatten for the gradient checker.
template <typename T>
std::vector<T> flatten_params(const Params<T>& p) {
  std::vector<T> out;
  p.for_each([&](const char*, const Tensor<T>& t, bool) {
    out.insert(out.end(), t.data.begin(), t.data.end());
  });
  return out;
}

template <typename T>
void unflatten_params(Params<T>& p, std::span<const T> flat) {
  std::size_t off = 0;
  p.for_each([&](const char*, Tensor<T>& t, bool) {
    if (off + t.numel() > flat.size()) {
      throw std::invalid_argument("unflatten_params: flat vector too short");
    }
    std::copy(flat.begin() + off, flat.begin() + off + t.numel(),
              t.data.begin());
    off += t.numel();
  });
  if (off != flat.size()) {
    throw std::invalid_argument("unflatten_params: flat vector too long");
  }
}

}  // namespace gpn
