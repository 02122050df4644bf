#pragma once

// Batched sequence engine: lockstep forward over B independent sequences and
// hand-derived reverse-mode BPTT. All large linear maps run through the gemm
// kernels so each weight matrix streams once per step for the whole batch;
// per-(row, column) accumulation order is fixed, so a batch-1 run and one
// lane of a batch-N run produce bit-identical numbers.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "gpn/model.hpp"

namespace gpn {

template <typename T>
class Engine {
 public:
  /// keep_caches=true retains every step's activations (required for
  /// backward); false ping-pongs two slots and supports forward-only use.
  Engine(const ModelConfig& cfg, std::size_t batch, std::size_t t_win,
         bool keep_caches)
      : cfg_(cfg), b_(batch), t_(t_win), keep_(keep_caches) {
    cfg_.validate();
    if (batch < 1 || t_win < 1) {
      throw std::invalid_argument("Engine: batch and window must be >= 1");
    }
    const std::size_t d = cfg_.d, dffn = cfg_.d_ffn, v = cfg_.vocab;
    const std::size_t dk = gpnm() ? cfg_.dk_total() : 0;
    const std::size_t dv = gpnm() ? cfg_.dv_total() : 0;
    const std::size_t h = gpnm() ? cfg_.heads : 0;
    msz_ = gpnm() ? cfg_.heads * cfg_.d_k * cfg_.d_v : 0;
    const std::size_t tc = keep_ ? t_ : 1;       // cache slots
    const std::size_t tm = keep_ ? t_ + 1 : 2;   // memory chain slots

    sp_.assign((t_ + 1) * b_ * d, T(0));
    sg_.assign((t_ + 1) * b_ * d, T(0));
    m_.assign(tm * b_ * msz_, T(0));
    alphas_.assign(t_ * b_ * h, T(0));
    tok_.assign(t_ * b_, 0);
    tgt_.assign(t_ * b_, 0);
    ce_.assign(t_ * b_, T(0));

    xn_f_.assign(tc * b_ * d, T(0));
    gate_f_.assign(tc * b_ * d, T(0));
    s_f_.assign(tc * b_, T(0));
    xn_p_.assign(tc * b_ * d, T(0));
    gate_p_.assign(tc * b_ * d, T(0));
    s_p_.assign(tc * b_, T(0));
    xn_ffn_.assign(tc * b_ * d, T(0));
    s_ffn_.assign(tc * b_, T(0));
    hg_.assign(tc * b_ * dffn, T(0));
    hv_.assign(tc * b_ * dffn, T(0));
    xn_dec_.assign(tc * b_ * d, T(0));
    s_dec_.assign(tc * b_, T(0));
    probs_.assign(tc * b_ * v, T(0));
    if (gpnm()) {
      kraw_.assign(tc * b_ * dk, T(0));
      k_.assign(tc * b_ * dk, T(0));
      knorm_.assign(tc * b_, T(0));
      v_.assign(tc * b_ * dv, T(0));
      r_old_.assign(tc * b_ * dv, T(0));
      a_omega_.assign(tc * b_ * h, T(0));
      beta_.assign(tc * b_ * h, T(0));
      qraw_.assign(tc * b_ * dk, T(0));
      q_.assign(tc * b_ * dk, T(0));
      qnorm_.assign(tc * b_, T(0));
      r_.assign(tc * b_ * dv, T(0));
      xn_r_.assign(tc * b_ * dv, T(0));
      s_r_.assign(tc * b_, T(0));
      p_rg_.assign(tc * b_ * dv, T(0));
    }

    const std::size_t w = std::max({d, dffn, v, dv, dk, cfg_.d_emb});
    u_.assign(b_ * w, T(0));
    u2_.assign(b_ * w, T(0));
    u3_.assign(b_ * w, T(0));
    u4_.assign(b_ * w, T(0));
    if (gpnm()) {
      dm_a_.assign(b_ * msz_, T(0));
      dm_b_.assign(b_ * msz_, T(0));
      head_dk_.assign(cfg_.d_k, T(0));
      head_dk2_.assign(cfg_.d_k, T(0));
      head_dv_.assign(cfg_.d_v, T(0));
      head_dv2_.assign(cfg_.d_v, T(0));
    }
    carry_sp_.assign(b_ * d, T(0));
    carry_sg_.assign(b_ * d, T(0));
    dsg_.assign(b_ * d, T(0));
    dsp_.assign(b_ * d, T(0));
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t batch() const { return b_; }
  std::size_t window() const { return t_; }
  bool keeps_caches() const { return keep_; }

  /// Fresh window: every lane starts from {s0, 0, s0}.
  void reset(const Params<T>& p) {
    for (std::size_t b = 0; b < b_; ++b) {
      std::copy(p.s0.data.begin(), p.s0.data.end(), sp(0) + b * cfg_.d);
      std::copy(p.s0.data.begin(), p.s0.data.end(), sg(0) + b * cfg_.d);
    }
    if (gpnm()) std::fill(m_.begin(), m_.end(), T(0));
  }

  /// Seed lane b from a carried bundle (chained windows).
  void seed(std::size_t b, const StateBundle<T>& bundle) {
    std::copy(bundle.s_p.begin(), bundle.s_p.end(), sp(0) + b * cfg_.d);
    std::copy(bundle.s_g_prev.begin(), bundle.s_g_prev.end(),
              sg(0) + b * cfg_.d);
    if (gpnm()) std::copy(bundle.m.begin(), bundle.m.end(), m(0) + b * msz_);
  }

  StateBundle<T> bundle(std::size_t b) const {
    StateBundle<T> out;
    out.s_p.assign(sp(t_) + b * cfg_.d, sp(t_) + (b + 1) * cfg_.d);
    // in GPN mode s_g_prev and M are carried through untouched
    const std::size_t tg = gpnm() ? t_ : 0;
    out.s_g_prev.assign(sg(tg) + b * cfg_.d, sg(tg) + (b + 1) * cfg_.d);
    if (gpnm()) out.m.assign(m(t_) + b * msz_, m(t_) + (b + 1) * msz_);
    return out;
  }

  /// inputs/targets are [batch][t_win], row per lane.
  void forward(const Params<T>& p, std::span<const std::int32_t> inputs,
               std::span<const std::int32_t> targets) {
    if (inputs.size() != b_ * t_ || targets.size() != b_ * t_) {
      throw std::invalid_argument("Engine::forward: bad token array size");
    }
    for (std::size_t t = 0; t < t_; ++t) {
      for (std::size_t b = 0; b < b_; ++b) {
        const std::int32_t x = inputs[b * t_ + t];
        const std::int32_t y = targets[b * t_ + t];
        if (x < 0 || static_cast<std::size_t>(x) >= cfg_.vocab || y < 0 ||
            static_cast<std::size_t>(y) >= cfg_.vocab) {
          throw std::out_of_range("Engine::forward: token out of range");
        }
        tok_[t * b_ + b] = x;
        tgt_[t * b_ + b] = y;
      }
    }
    for (std::size_t t = 1; t <= t_; ++t) forward_step(p, t);
  }

  double mean_ce() const {
    double s = 0;
    for (const T c : ce_) s += static_cast<double>(c);
    return s / static_cast<double>(ce_.size());
  }

  T ce_at(std::size_t t, std::size_t b) const { return ce_[(t - 1) * b_ + b]; }
  const std::vector<T>& ce_flat() const { return ce_; }

  const T* state_at(std::size_t t) const { return sp(t); }  // [B][d], t in 0..T
  T alpha_at(std::size_t t, std::size_t b, std::size_t h) const {
    return alphas_[((t - 1) * b_ + b) * cfg_.heads + h];
  }

  /// Reverse-mode gradients of the mean CE over the window. trunc = 0 means
  /// full BPTT; otherwise recurrent adjoints are zeroed every trunc steps
  /// (every loss term still contributes).
  void backward(const Params<T>& p, Params<T>& g, std::size_t trunc) {
    if (!keep_) {
      throw std::logic_error("Engine::backward: forward ran without caches");
    }
    check_shapes(p);
    const std::size_t d = cfg_.d;
    std::fill(carry_sp_.begin(), carry_sp_.end(), T(0));
    std::fill(carry_sg_.begin(), carry_sg_.end(), T(0));
    if (gpnm()) std::fill(dm_a_.begin(), dm_a_.end(), T(0));
    T* dm_carry = dm_a_.data();
    T* dm_next = dm_b_.data();
    const T scale = T(1) / static_cast<T>(b_ * t_);
    for (std::size_t t = t_; t >= 1; --t) {
      backward_step(p, g, t, scale, dm_carry, dm_next);
      if (gpnm()) std::swap(dm_carry, dm_next);
      const std::size_t boundary = t - 1;
      if (boundary == 0) {
        for (std::size_t b = 0; b < b_; ++b) {
          kern::axpy(g.s0.ptr(), T(1), carry_sp_.data() + b * d, d);
        }
        if (gpnm()) {
          // s_g_0 := s0, so the first write's key path reaches s0 too
          for (std::size_t b = 0; b < b_; ++b) {
            kern::axpy(g.s0.ptr(), T(1), carry_sg_.data() + b * d, d);
          }
        }
      } else if (trunc != 0 && boundary % trunc == 0) {
        std::fill(carry_sp_.begin(), carry_sp_.end(), T(0));
        std::fill(carry_sg_.begin(), carry_sg_.end(), T(0));
        if (gpnm()) std::fill(dm_carry, dm_carry + b_ * msz_, T(0));
      }
    }
  }

  DecayLog decay_log() const {
    DecayLog log;
    log.heads = gpnm() ? cfg_.heads : 0;
    if (!gpnm()) return log;
    log.alphas.reserve(t_ * b_ * cfg_.heads);
    // lane-major: each lane is one contiguous sequence
    for (std::size_t b = 0; b < b_; ++b) {
      log.seq_starts.push_back(b * t_);
      for (std::size_t t = 1; t <= t_; ++t) {
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
          log.alphas.push_back(static_cast<double>(alpha_at(t, b, h)));
        }
      }
    }
    return log;
  }

  /// Copy of one step's cached activations (t in 1..T).
  StepCache<T> step_cache(std::size_t t, std::size_t b) const {
    StepCache<T> s;
    const std::size_t d = cfg_.d, dffn = cfg_.d_ffn, v = cfg_.vocab;
    auto grab = [&](const std::vector<T>& src, std::size_t width) {
      return std::vector<T>(src.data() + (ci(t) * b_ + b) * width,
                            src.data() + (ci(t) * b_ + b + 1) * width);
    };
    s.xn_f = grab(xn_f_, d);
    s.gate_f = grab(gate_f_, d);
    s.xn_p = grab(xn_p_, d);
    s.gate_p = grab(gate_p_, d);
    s.xn_ffn = grab(xn_ffn_, d);
    s.h_g = grab(hg_, dffn);
    s.h_v = grab(hv_, dffn);
    s.xn_dec = grab(xn_dec_, d);
    s.probs = grab(probs_, v);
    s.s_f = s_f_[ci(t) * b_ + b];
    s.s_p = s_p_[ci(t) * b_ + b];
    s.s_ffn = s_ffn_[ci(t) * b_ + b];
    s.s_dec = s_dec_[ci(t) * b_ + b];
    if (gpnm()) {
      const std::size_t dk = cfg_.dk_total(), dv = cfg_.dv_total();
      s.kraw = grab(kraw_, dk);
      s.k = grab(k_, dk);
      s.v = grab(v_, dv);
      s.a_omega = grab(a_omega_, cfg_.heads);
      s.beta = grab(beta_, cfg_.heads);
      s.r_old = grab(r_old_, dv);
      s.qraw = grab(qraw_, dk);
      s.q = grab(q_, dk);
      s.r = grab(r_, dv);
      s.xn_r = grab(xn_r_, dv);
      s.p_rg = grab(p_rg_, dv);
      s.k_norm = knorm_[ci(t) * b_ + b];
      s.q_norm = qnorm_[ci(t) * b_ + b];
      s.s_r = s_r_[ci(t) * b_ + b];
      s.alpha.resize(cfg_.heads);
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        s.alpha[h] = alpha_at(t, b, h);
      }
    }
    return s;
  }

 private:
  bool gpnm() const { return cfg_.mode == Mode::kGpnM; }
  std::size_t ci(std::size_t t) const { return keep_ ? t - 1 : 0; }
  std::size_t mi(std::size_t t) const { return keep_ ? t : (t & 1); }

  T* sp(std::size_t t) { return sp_.data() + t * b_ * cfg_.d; }
  const T* sp(std::size_t t) const { return sp_.data() + t * b_ * cfg_.d; }
  T* sg(std::size_t t) { return sg_.data() + t * b_ * cfg_.d; }
  const T* sg(std::size_t t) const { return sg_.data() + t * b_ * cfg_.d; }
  T* m(std::size_t t) { return m_.data() + mi(t) * b_ * msz_; }
  const T* m(std::size_t t) const { return m_.data() + mi(t) * b_ * msz_; }

  T* cache(std::vector<T>& v, std::size_t t, std::size_t width) {
    return v.data() + ci(t) * b_ * width;
  }
  const T* cache(const std::vector<T>& v, std::size_t t, std::size_t width) const {
    return v.data() + ci(t) * b_ * width;
  }

  void check_shapes(const Params<T>& p) const {
    if (p.dec_w.dims[0] != cfg_.vocab || p.dec_w.dims[1] != cfg_.d ||
        p.ffn_w1g.dims[0] != cfg_.d_ffn ||
        (gpnm() && p.mem_wk.dims[0] != cfg_.dk_total())) {
      throw std::invalid_argument("Engine: params do not match config");
    }
  }

  void forward_step(const Params<T>& p, std::size_t t) {
    const std::size_t d = cfg_.d, dffn = cfg_.d_ffn, v = cfg_.vocab;
    const std::size_t de = cfg_.d_emb;
    const T eps = static_cast<T>(cfg_.eps_norm);

    // --- Ground
    T* xnf = cache(xn_f_, t, d);
    T* gf = cache(gate_f_, t, d);
    T* sf = cache(s_f_, t, 1);
    const T* sp_prev = sp(t - 1);
    T* sg_cur = sg(t);
    for (std::size_t b = 0; b < b_; ++b) {
      sf[b] = detail::normed_input(u_.data() + b * d, xnf + b * d,
                                   sp_prev + b * d, p.gate_f_g.ptr(), eps, d);
    }
    kern::gemm_wx(u2_.data(), p.gate_f_w.ptr(), u_.data(), b_, d, d);
    for (std::size_t b = 0; b < b_; ++b) {
      const std::int32_t token = tok_[(t - 1) * b_ + b];
      std::copy(p.emb.row(token), p.emb.row(token) + de, u3_.data() + b * de);
      for (std::size_t i = 0; i < d; ++i) {
        const T g = num::sigmoid(u2_[b * d + i]);
        gf[b * d + i] = g;
        sg_cur[b * d + i] = g * sp_prev[b * d + i];
      }
    }
    kern::gemm_wx(u4_.data(), p.w_fuse.ptr(), u3_.data(), b_, d, de);
    for (std::size_t i = 0; i < b_ * d; ++i) sg_cur[i] += u4_[i];

    // --- MemWrite (keys from the previous grounded state)
    if (gpnm()) {
      const std::size_t H = cfg_.heads, dk = cfg_.d_k, dv = cfg_.d_v;
      const std::size_t Dk = cfg_.dk_total(), Dv = cfg_.dv_total();
      T* kraw = cache(kraw_, t, Dk);
      T* kv = cache(k_, t, Dk);
      T* kn = cache(knorm_, t, 1);
      T* vv = cache(v_, t, Dv);
      T* aom = cache(a_omega_, t, H);
      T* bet = cache(beta_, t, H);
      T* rold = cache(r_old_, t, Dv);
      kern::gemm_wx(kraw, p.mem_wk.ptr(), sg(t - 1), b_, Dk, d);
      for (std::size_t b = 0; b < b_; ++b) {
        kn[b] = num::relu_l2norm_fwd(kv + b * Dk, kraw + b * Dk, eps, Dk);
      }
      kern::gemm_wx(vv, p.mem_wv.ptr(), sg_cur, b_, Dv, d);
      kern::gemm_wx(u_.data(), p.mem_wbeta.ptr(), sg_cur, b_, H, d);
      kern::gemm_wx(aom, p.mem_wa.ptr(), sg_cur, b_, H, d);
      const T* m_prev = m(t - 1);
      T* m_cur = m(t);
      for (std::size_t b = 0; b < b_; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const T beta = num::sigmoid(u_[b * H + h]);
          bet[b * H + h] = beta;
          T gamma = -std::exp(p.mem_a.data[h]) * num::softplus(aom[b * H + h]);
          gamma = std::max(gamma, static_cast<T>(kGammaMin));
          const T alpha = std::exp(gamma);
          alphas_[((t - 1) * b_ + b) * H + h] = alpha;
          delta_rule_update(m_cur + (b * H + h) * dk * dv,
                            m_prev + (b * H + h) * dk * dv, kv + b * Dk + h * dk,
                            vv + b * Dv + h * dv, beta, alpha, dk, dv,
                            rold + b * Dv + h * dv, head_dv_.data());
        }
      }

      // --- MemRead (post-write memory)
      T* qraw = cache(qraw_, t, Dk);
      T* qv = cache(q_, t, Dk);
      T* qn = cache(qnorm_, t, 1);
      T* rv = cache(r_, t, Dv);
      T* xnr = cache(xn_r_, t, Dv);
      T* sr = cache(s_r_, t, 1);
      T* prg = cache(p_rg_, t, Dv);
      kern::gemm_wx(qraw, p.mem_wq.ptr(), sg_cur, b_, Dk, d);
      for (std::size_t b = 0; b < b_; ++b) {
        qn[b] = num::relu_l2norm_fwd(qv + b * Dk, qraw + b * Dk, eps, Dk);
        for (std::size_t h = 0; h < H; ++h) {
          mem_read_head(rv + b * Dv + h * dv, m_cur + (b * H + h) * dk * dv,
                        qv + b * Dk + h * dk, dk, dv);
        }
        sr[b] = num::rmsnorm_fwd(xnr + b * Dv, rv + b * Dv, eps, Dv);
      }
      kern::gemm_wx(prg, p.mem_wrg.ptr(), sg_cur, b_, Dv, d);
      for (std::size_t b = 0; b < b_; ++b) {
        for (std::size_t j = 0; j < Dv; ++j) {
          u_[b * Dv + j] = num::silu(prg[b * Dv + j]) *
                           (p.mem_gr.data[j] * xnr[b * Dv + j]);
        }
      }
      kern::gemm_wx(u2_.data(), p.mem_wo.ptr(), u_.data(), b_, d, Dv);
      // u2_ now holds the memory-read contribution
    }

    // --- Predict
    T* xnp = cache(xn_p_, t, d);
    T* gp = cache(gate_p_, t, d);
    T* spn = cache(s_p_, t, 1);
    T* xnffn = cache(xn_ffn_, t, d);
    T* sffn = cache(s_ffn_, t, 1);
    T* hg = cache(hg_, t, dffn);
    T* hv = cache(hv_, t, dffn);
    T* sp_cur = sp(t);
    for (std::size_t b = 0; b < b_; ++b) {
      spn[b] = detail::normed_input(u_.data() + b * d, xnp + b * d,
                                    sg_cur + b * d, p.gate_p_g.ptr(), eps, d);
    }
    kern::gemm_wx(u3_.data(), p.gate_p_w.ptr(), u_.data(), b_, d, d);
    for (std::size_t b = 0; b < b_; ++b) {
      sffn[b] = detail::normed_input(u_.data() + b * d, xnffn + b * d,
                                     sg_cur + b * d, p.ffn_g.ptr(), eps, d);
    }
    kern::gemm_wx(hg, p.ffn_w1g.ptr(), u_.data(), b_, dffn, d);
    kern::gemm_wx(hv, p.ffn_w1v.ptr(), u_.data(), b_, dffn, d);
    for (std::size_t i = 0; i < b_ * dffn; ++i) {
      u4_[i] = num::silu(hg[i]) * hv[i];
    }
    kern::gemm_wx(u_.data(), p.ffn_w2.ptr(), u4_.data(), b_, d, dffn);
    for (std::size_t b = 0; b < b_; ++b) {
      for (std::size_t i = 0; i < d; ++i) {
        const T g = num::sigmoid(u3_[b * d + i]);
        gp[b * d + i] = g;
        T s = g * sg_cur[b * d + i] + u_[b * d + i];
        if (gpnm()) s += u2_[b * d + i];
        sp_cur[b * d + i] = s;
      }
    }

    // --- Decode
    T* xnd = cache(xn_dec_, t, d);
    T* sd = cache(s_dec_, t, 1);
    T* pr = cache(probs_, t, v);
    for (std::size_t b = 0; b < b_; ++b) {
      sd[b] = detail::normed_input(u_.data() + b * d, xnd + b * d,
                                   sp_cur + b * d, p.dec_g.ptr(), eps, d);
    }
    kern::gemm_wx(u2_.data(), p.dec_w.ptr(), u_.data(), b_, v, d);
    for (std::size_t b = 0; b < b_; ++b) {
      T* logits = u2_.data() + b * v;
      if (!p.dec_b.empty()) {
        for (std::size_t i = 0; i < v; ++i) logits[i] += p.dec_b.data[i];
      }
      ce_[(t - 1) * b_ + b] = num::softmax_ce_fwd(
          pr + b * v, logits, v, static_cast<std::size_t>(tgt_[(t - 1) * b_ + b]));
    }
  }

  void backward_step(const Params<T>& p, Params<T>& g, std::size_t t, T scale,
                     T* dm_carry, T* dm_prev_out) {
    const std::size_t d = cfg_.d, dffn = cfg_.d_ffn, v = cfg_.vocab;
    const std::size_t de = cfg_.d_emb;
    const T eps = static_cast<T>(cfg_.eps_norm);
    const T* sg_cur = sg(t);
    const T* sp_cur = sp(t);
    const T* sp_prev = sp(t - 1);

    // --- Decode backward: dsp_ = d(mean CE)/d(s_p_t) + carried adjoint
    const T* pr = cache(probs_, t, v);
    const T* xnd = cache(xn_dec_, t, d);
    const T* sd = cache(s_dec_, t, 1);
    for (std::size_t b = 0; b < b_; ++b) {
      num::softmax_ce_bwd(u_.data() + b * v, pr + b * v, v,
                          static_cast<std::size_t>(tgt_[(t - 1) * b_ + b]),
                          scale);
    }
    if (!g.dec_b.empty()) {
      for (std::size_t b = 0; b < b_; ++b) {
        kern::axpy(g.dec_b.ptr(), T(1), u_.data() + b * v, v);
      }
    }
    for (std::size_t b = 0; b < b_; ++b) {  // rebuild u_dec = g .* xn
      for (std::size_t i = 0; i < d; ++i) {
        u2_[b * d + i] = p.dec_g.data[i] * xnd[b * d + i];
      }
    }
    kern::gemm_dw_acc(g.dec_w.ptr(), u_.data(), u2_.data(), b_, v, d);
    std::fill(u3_.begin(), u3_.begin() + b_ * d, T(0));
    kern::gemm_dx_acc(u3_.data(), p.dec_w.ptr(), u_.data(), b_, v, d);
    std::copy(carry_sp_.begin(), carry_sp_.end(), dsp_.begin());
    for (std::size_t b = 0; b < b_; ++b) {
      const T* du = u3_.data() + b * d;
      for (std::size_t i = 0; i < d; ++i) {
        g.dec_g.data[i] += du[i] * xnd[b * d + i];
        u4_[b * d + i] = du[i] * p.dec_g.data[i];
      }
      num::rmsnorm_bwd_acc(dsp_.data() + b * d, u4_.data() + b * d,
                           xnd + b * d, sd[b], d);
    }

    // --- Predict backward
    const T* gp = cache(gate_p_, t, d);
    std::copy(carry_sg_.begin(), carry_sg_.end(), dsg_.begin());
    for (std::size_t b = 0; b < b_; ++b) {
      for (std::size_t i = 0; i < d; ++i) {
        dsg_[b * d + i] += dsp_[b * d + i] * gp[b * d + i];
      }
    }

    // FFN branch
    const T* hg = cache(hg_, t, dffn);
    const T* hv = cache(hv_, t, dffn);
    const T* xnffn = cache(xn_ffn_, t, d);
    const T* sffn = cache(s_ffn_, t, 1);
    for (std::size_t i = 0; i < b_ * dffn; ++i) {
      u_[i] = num::silu(hg[i]) * hv[i];  // z
    }
    kern::gemm_dw_acc(g.ffn_w2.ptr(), dsp_.data(), u_.data(), b_, d, dffn);
    std::fill(u2_.begin(), u2_.begin() + b_ * dffn, T(0));
    kern::gemm_dx_acc(u2_.data(), p.ffn_w2.ptr(), dsp_.data(), b_, d, dffn);
    for (std::size_t i = 0; i < b_ * dffn; ++i) {
      const T dz = u2_[i];
      u_[i] = dz * hv[i] * num::silu_grad(hg[i]);  // dhg
      u2_[i] = dz * num::silu(hg[i]);              // dhv
    }
    for (std::size_t b = 0; b < b_; ++b) {  // rebuild u_ffn
      for (std::size_t i = 0; i < d; ++i) {
        u3_[b * d + i] = p.ffn_g.data[i] * xnffn[b * d + i];
      }
    }
    kern::gemm_dw_acc(g.ffn_w1g.ptr(), u_.data(), u3_.data(), b_, dffn, d);
    kern::gemm_dw_acc(g.ffn_w1v.ptr(), u2_.data(), u3_.data(), b_, dffn, d);
    std::fill(u4_.begin(), u4_.begin() + b_ * d, T(0));
    kern::gemm_dx_acc(u4_.data(), p.ffn_w1g.ptr(), u_.data(), b_, dffn, d);
    kern::gemm_dx_acc(u4_.data(), p.ffn_w1v.ptr(), u2_.data(), b_, dffn, d);
    for (std::size_t b = 0; b < b_; ++b) {
      const T* du = u4_.data() + b * d;
      for (std::size_t i = 0; i < d; ++i) {
        g.ffn_g.data[i] += du[i] * xnffn[b * d + i];
        u3_[b * d + i] = du[i] * p.ffn_g.data[i];
      }
      num::rmsnorm_bwd_acc(dsg_.data() + b * d, u3_.data() + b * d,
                           xnffn + b * d, sffn[b], d);
    }

    // predict-gate branch
    const T* xnp = cache(xn_p_, t, d);
    const T* spn = cache(s_p_, t, 1);
    for (std::size_t b = 0; b < b_; ++b) {
      for (std::size_t i = 0; i < d; ++i) {
        const T gate = gp[b * d + i];
        u_[b * d + i] = dsp_[b * d + i] * sg_cur[b * d + i] * gate * (T(1) - gate);
      }
    }
    for (std::size_t b = 0; b < b_; ++b) {  // rebuild u_p
      for (std::size_t i = 0; i < d; ++i) {
        u2_[b * d + i] = p.gate_p_g.data[i] * xnp[b * d + i];
      }
    }
    kern::gemm_dw_acc(g.gate_p_w.ptr(), u_.data(), u2_.data(), b_, d, d);
    std::fill(u3_.begin(), u3_.begin() + b_ * d, T(0));
    kern::gemm_dx_acc(u3_.data(), p.gate_p_w.ptr(), u_.data(), b_, d, d);
    for (std::size_t b = 0; b < b_; ++b) {
      const T* du = u3_.data() + b * d;
      for (std::size_t i = 0; i < d; ++i) {
        g.gate_p_g.data[i] += du[i] * xnp[b * d + i];
        u4_[b * d + i] = du[i] * p.gate_p_g.data[i];
      }
      num::rmsnorm_bwd_acc(dsg_.data() + b * d, u4_.data() + b * d, xnp + b * d,
                           spn[b], d);
    }

    if (gpnm()) {
      backward_memory(p, g, t, dm_carry, dm_prev_out);
    }

    // --- Ground backward (dsg_ now holds the full adjoint of s_g_t)
    const T* gf = cache(gate_f_, t, d);
    const T* xnf = cache(xn_f_, t, d);
    const T* sf = cache(s_f_, t, 1);
    for (std::size_t b = 0; b < b_; ++b) {
      for (std::size_t i = 0; i < d; ++i) {
        carry_sp_[b * d + i] = dsg_[b * d + i] * gf[b * d + i];
      }
    }
    for (std::size_t b = 0; b < b_; ++b) {  // gather embeddings
      const std::int32_t token = tok_[(t - 1) * b_ + b];
      std::copy(p.emb.row(token), p.emb.row(token) + de, u_.data() + b * de);
    }
    kern::gemm_dw_acc(g.w_fuse.ptr(), dsg_.data(), u_.data(), b_, d, de);
    std::fill(u2_.begin(), u2_.begin() + b_ * de, T(0));
    kern::gemm_dx_acc(u2_.data(), p.w_fuse.ptr(), dsg_.data(), b_, d, de);
    for (std::size_t b = 0; b < b_; ++b) {
      const std::int32_t token = tok_[(t - 1) * b_ + b];
      kern::axpy(g.emb.row(token), T(1), u2_.data() + b * de, de);
    }
    for (std::size_t b = 0; b < b_; ++b) {
      for (std::size_t i = 0; i < d; ++i) {
        const T gate = gf[b * d + i];
        u_[b * d + i] =
            dsg_[b * d + i] * sp_prev[b * d + i] * gate * (T(1) - gate);
      }
    }
    for (std::size_t b = 0; b < b_; ++b) {  // rebuild u_f
      for (std::size_t i = 0; i < d; ++i) {
        u2_[b * d + i] = p.gate_f_g.data[i] * xnf[b * d + i];
      }
    }
    kern::gemm_dw_acc(g.gate_f_w.ptr(), u_.data(), u2_.data(), b_, d, d);
    std::fill(u3_.begin(), u3_.begin() + b_ * d, T(0));
    kern::gemm_dx_acc(u3_.data(), p.gate_f_w.ptr(), u_.data(), b_, d, d);
    for (std::size_t b = 0; b < b_; ++b) {
      const T* du = u3_.data() + b * d;
      for (std::size_t i = 0; i < d; ++i) {
        g.gate_f_g.data[i] += du[i] * xnf[b * d + i];
        u4_[b * d + i] = du[i] * p.gate_f_g.data[i];
      }
      num::rmsnorm_bwd_acc(carry_sp_.data() + b * d, u4_.data() + b * d,
                           xnf + b * d, sf[b], d);
    }
  }

  // Read backward, then write backward. On entry dm_carry holds dL/dM_t from
  // step t+1; on exit dm_prev_out holds dL/dM_{t-1} and dsg/carry_sg are
  // updated.
  void backward_memory(const Params<T>& p, Params<T>& g, std::size_t t,
                       T* dm_carry, T* dm_prev_out) {
    const std::size_t d = cfg_.d, H = cfg_.heads, dk = cfg_.d_k, dv = cfg_.d_v;
    const std::size_t Dk = cfg_.dk_total(), Dv = cfg_.dv_total();
    const T eps = static_cast<T>(cfg_.eps_norm);
    const T* m_cur = m(t);
    const T* m_prev = m(t - 1);
    const T* xnr = cache(xn_r_, t, Dv);
    const T* sr = cache(s_r_, t, 1);
    const T* prg = cache(p_rg_, t, Dv);
    const T* qv = cache(q_, t, Dk);
    const T* qn = cache(qnorm_, t, 1);
    const T* qraw = cache(qraw_, t, Dk);
    const T* kv = cache(k_, t, Dk);
    const T* kn = cache(knorm_, t, 1);
    const T* kraw = cache(kraw_, t, Dk);
    const T* vv = cache(v_, t, Dv);
    const T* rold = cache(r_old_, t, Dv);
    const T* aom = cache(a_omega_, t, H);
    const T* bet = cache(beta_, t, H);

    // --- MemRead backward; the read contribution to s_p is dsp_ itself
    for (std::size_t b = 0; b < b_; ++b) {  // rebuild gated read
      for (std::size_t j = 0; j < Dv; ++j) {
        u_[b * Dv + j] = num::silu(prg[b * Dv + j]) *
                         (p.mem_gr.data[j] * xnr[b * Dv + j]);
      }
    }
    kern::gemm_dw_acc(g.mem_wo.ptr(), dsp_.data(), u_.data(), b_, d, Dv);
    std::fill(u2_.begin(), u2_.begin() + b_ * Dv, T(0));
    kern::gemm_dx_acc(u2_.data(), p.mem_wo.ptr(), dsp_.data(), b_, d, Dv);
    // u2_ = d(gated read); split into the gate and the normalized read
    for (std::size_t b = 0; b < b_; ++b) {
      for (std::size_t j = 0; j < Dv; ++j) {
        const T dgr = u2_[b * Dv + j];
        const T rn = p.mem_gr.data[j] * xnr[b * Dv + j];
        const T sl = num::silu(prg[b * Dv + j]);
        u_[b * Dv + j] = dgr * rn * num::silu_grad(prg[b * Dv + j]);  // dprg
        const T drn = dgr * sl;
        g.mem_gr.data[j] += drn * xnr[b * Dv + j];
        u3_[b * Dv + j] = drn * p.mem_gr.data[j];  // dxnr
      }
    }
    kern::gemm_dw_acc(g.mem_wrg.ptr(), u_.data(), sg(t), b_, Dv, d);
    kern::gemm_dx_acc(dsg_.data(), p.mem_wrg.ptr(), u_.data(), b_, Dv, d);
    // dxnr -> dr (raw read adjoint) in u4_
    std::fill(u4_.begin(), u4_.begin() + b_ * Dv, T(0));
    for (std::size_t b = 0; b < b_; ++b) {
      num::rmsnorm_bwd_acc(u4_.data() + b * Dv, u3_.data() + b * Dv,
                           xnr + b * Dv, sr[b], Dv);
    }
    // dM_t += q (x) dr ; dq = M_t dr
    for (std::size_t b = 0; b < b_; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        T* dmh = dm_carry + (b * H + h) * dk * dv;
        kern::outer_acc(dmh, qv + b * Dk + h * dk, u4_.data() + b * Dv + h * dv,
                        dk, dv);
        kern::matvec(head_dk_.data(), m_cur + (b * H + h) * dk * dv,
                     u4_.data() + b * Dv + h * dv, dk, dv);
        std::copy(head_dk_.begin(), head_dk_.end(), u_.data() + b * Dk + h * dk);
      }
    }
    // dq -> dqraw -> W_q grads + dsg
    for (std::size_t b = 0; b < b_; ++b) {
      std::fill(u2_.begin() + b * Dk, u2_.begin() + (b + 1) * Dk, T(0));
      num::relu_l2norm_bwd_acc(u2_.data() + b * Dk, u_.data() + b * Dk,
                               qv + b * Dk, qn[b], qraw + b * Dk, eps, Dk);
    }
    kern::gemm_dw_acc(g.mem_wq.ptr(), u2_.data(), sg(t), b_, Dk, d);
    kern::gemm_dx_acc(dsg_.data(), p.mem_wq.ptr(), u2_.data(), b_, Dk, d);

    // --- MemWrite backward. dm_carry now holds the full dL/dM_t.
    // u_ = dK, u2_ = dV, u3_[.. H] = da_beta, u4_[.. H] = da_omega.
    std::fill(u_.begin(), u_.begin() + b_ * Dk, T(0));
    for (std::size_t b = 0; b < b_; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        const T* dmh = dm_carry + (b * H + h) * dk * dv;
        const T* mph = m_prev + (b * H + h) * dk * dv;
        const T* kh = kv + b * Dk + h * dk;
        const T alpha = alpha_at(t, b, h);
        const T beta = bet[b * H + h];
        // delta = v - r_old
        for (std::size_t j = 0; j < dv; ++j) {
          head_dv_[j] = vv[b * Dv + h * dv + j] - rold[b * Dv + h * dv + j];
        }
        // w = dM delta ; dbeta = k . w ; dk += beta w
        kern::matvec(head_dk_.data(), dmh, head_dv_.data(), dk, dv);
        const T dbeta = kern::dot(kh, head_dk_.data(), dk);
        kern::axpy(u_.data() + b * Dk + h * dk, beta, head_dk_.data(), dk);
        // ddelta = beta dM^T k ; dv = ddelta ; dr_old = -ddelta
        std::fill(head_dv2_.begin(), head_dv2_.end(), T(0));
        kern::matvec_t_acc(head_dv2_.data(), dmh, kh, dk, dv);
        for (std::size_t j = 0; j < dv; ++j) {
          const T dd = beta * head_dv2_[j];
          u2_[b * Dv + h * dv + j] = dd;
          head_dv_[j] = -dd;  // dr_old
        }
        // dalpha = <dM, M_prev> ; dM_prev = alpha dM + k (x) dr_old
        const T dalpha = kern::dot(dmh, mph, dk * dv);
        T* dmp = dm_prev_out + (b * H + h) * dk * dv;
        kern::scale_axpy_to(dmp, dmh, alpha, T(0), dmh, dk * dv);
        kern::outer_acc(dmp, kh, head_dv_.data(), dk, dv);
        // dk += M_prev dr_old
        kern::matvec(head_dk2_.data(), mph, head_dv_.data(), dk, dv);
        kern::axpy(u_.data() + b * Dk + h * dk, T(1), head_dk2_.data(), dk);
        // decay chain: alpha = e^gamma, gamma = -e^A * softplus(a_omega),
        // clamped below at kGammaMin (no gradient once clamped)
        const T omega = num::softplus(aom[b * H + h]);
        const T expa = std::exp(p.mem_a.data[h]);
        const T gamma_raw = -expa * omega;
        T da_omega = T(0);
        if (gamma_raw > static_cast<T>(kGammaMin)) {
          const T dgamma = dalpha * alpha;
          g.mem_a.data[h] += dgamma * gamma_raw;
          da_omega = -expa * dgamma * num::sigmoid(aom[b * H + h]);
        }
        u4_[b * H + h] = da_omega;
        u3_[b * H + h] = dbeta * beta * (T(1) - beta);
      }
    }
    kern::gemm_dw_acc(g.mem_wbeta.ptr(), u3_.data(), sg(t), b_, H, d);
    kern::gemm_dx_acc(dsg_.data(), p.mem_wbeta.ptr(), u3_.data(), b_, H, d);
    kern::gemm_dw_acc(g.mem_wa.ptr(), u4_.data(), sg(t), b_, H, d);
    kern::gemm_dx_acc(dsg_.data(), p.mem_wa.ptr(), u4_.data(), b_, H, d);
    kern::gemm_dw_acc(g.mem_wv.ptr(), u2_.data(), sg(t), b_, Dv, d);
    kern::gemm_dx_acc(dsg_.data(), p.mem_wv.ptr(), u2_.data(), b_, Dv, d);
    // dK -> dkraw -> W_k grads + carry into s_g_{t-1}
    for (std::size_t b = 0; b < b_; ++b) {
      std::fill(u2_.begin() + b * Dk, u2_.begin() + (b + 1) * Dk, T(0));
      num::relu_l2norm_bwd_acc(u2_.data() + b * Dk, u_.data() + b * Dk,
                               kv + b * Dk, kn[b], kraw + b * Dk, eps, Dk);
    }
    kern::gemm_dw_acc(g.mem_wk.ptr(), u2_.data(), sg(t - 1), b_, Dk, d);
    std::fill(carry_sg_.begin(), carry_sg_.end(), T(0));
    kern::gemm_dx_acc(carry_sg_.data(), p.mem_wk.ptr(), u2_.data(), b_, Dk, d);
  }

  ModelConfig cfg_;
  std::size_t b_, t_, msz_ = 0;
  bool keep_;

  std::vector<T> sp_, sg_, m_, alphas_, ce_;
  std::vector<std::int32_t> tok_, tgt_;
  std::vector<T> xn_f_, gate_f_, s_f_;
  std::vector<T> kraw_, k_, knorm_, v_, r_old_, a_omega_, beta_;
  std::vector<T> qraw_, q_, qnorm_, r_, xn_r_, s_r_, p_rg_;
  std::vector<T> xn_p_, gate_p_, s_p_, xn_ffn_, s_ffn_, hg_, hv_;
  std::vector<T> xn_dec_, s_dec_, probs_;

  // scratch
  std::vector<T> u_, u2_, u3_, u4_;
  std::vector<T> dm_a_, dm_b_, head_dk_, head_dk2_, head_dv_, head_dv2_;
  std::vector<T> carry_sp_, carry_sg_, dsg_, dsp_;
};

// ------------------------------------------------------------ sequence API

template <typename T>
struct StepOut {
  StateBundle<T> bundle;
  T ce;
  StepCache<T> cache;
};

/// One full step: ground, (write, read), predict, decode. Pure in the input
/// bundle; write precedes read within the step.
template <typename T>
StepOut<T> step(const StateBundle<T>& bundle, std::size_t token,
                std::size_t target, const Params<T>& p, const ModelConfig& c) {
  Engine<T> eng(c, 1, 1, true);
  eng.seed(0, bundle);
  const std::int32_t in = static_cast<std::int32_t>(token);
  const std::int32_t tg = static_cast<std::int32_t>(target);
  eng.forward(p, std::span<const std::int32_t>(&in, 1),
              std::span<const std::int32_t>(&tg, 1));
  return {eng.bundle(0), eng.ce_at(1, 0), eng.step_cache(1, 0)};
}

/// A forward pass with everything backward needs, plus per-step CE and the
/// decay log.
template <typename T>
struct SequenceRun {
  Engine<T> engine;
  std::vector<T> ce;  // per step
  DecayLog log;

  SequenceRun(const ModelConfig& c, std::size_t t_win)
      : engine(c, 1, t_win, true) {}
};

/// tokens has length T+1: inputs are tokens[0..T-1], targets tokens[1..T].
template <typename T>
SequenceRun<T> forward_sequence(std::span<const std::int32_t> tokens,
                                const Params<T>& p, const ModelConfig& c) {
  if (tokens.size() < 2) {
    throw std::invalid_argument("forward_sequence: need at least 2 tokens");
  }
  const std::size_t t_win = tokens.size() - 1;
  SequenceRun<T> run(c, t_win);
  run.engine.reset(p);
  std::vector<std::int32_t> inputs(tokens.begin(), tokens.end() - 1);
  std::vector<std::int32_t> targets(tokens.begin() + 1, tokens.end());
  run.engine.forward(p, inputs, targets);
  run.ce.assign(run.engine.ce_flat().begin(), run.engine.ce_flat().end());
  run.log = run.engine.decay_log();
  return run;
}

/// Gradients of mean CE over the run. trunc = 0 (or >= T) is full BPTT.
template <typename T>
Params<T> backward_bptt(SequenceRun<T>& run, const Params<T>& p,
                        std::size_t trunc = 0) {
  Params<T> g = make_params<T>(run.engine.config());
  run.engine.backward(p, g, trunc);
  return g;
}

}  // namespace gpn
