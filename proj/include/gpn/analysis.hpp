#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gpn/model.hpp"

namespace gpn {

/// Rows are predicted states s_p over time; seq_starts marks where each
/// independent sequence begins.
struct StateMatrix {
  std::size_t d = 0;
  std::vector<float> rows;              // [n][d]
  std::vector<std::size_t> seq_starts;  // ascending, first is 0

  std::size_t n() const { return d ? rows.size() / d : 0; }
  const float* row(std::size_t i) const { return rows.data() + i * d; }
};

struct CollectedStates {
  StateMatrix states;
  DecayLog log;
};

/// Forward-only pass over held-out bytes, recording every s_p_t and every
/// per-head decay alpha. Data is consumed as independent windows of
/// seq_len tokens until n_tokens states are collected.
CollectedStates collect_states(const Params<float>& p, const ModelConfig& c,
                               std::span<const std::uint8_t> data,
                               std::size_t n_tokens, std::size_t seq_len,
                               std::size_t batch = 8);

struct GeometryReport {
  std::vector<double> per_dim_std;   // descending
  double mean_abs_offdiag = 0;
  double max_abs_offdiag = 0;
  std::vector<double> cumvar;        // cumulative explained variance
  std::size_t n_components_90 = 0;
  std::size_t n_components_99 = 0;
  double stable_rank_raw = 0;        // ||X||_F^2 / sigma_max(X)^2
  double stable_rank_centered = 0;
  double participation_ratio = 0;    // (sum l)^2 / sum l^2 of centered cov
  double mean_norm = 0;
  double std_norm = 0;
  bool few_rows_warning = false;     // rows < d
  std::vector<double> corr;          // full correlation matrix, row-major d*d
};

GeometryReport geometry_report(const StateMatrix& s);

/// Spearman rank correlation with average ties.
double spearman(std::span<const double> a, std::span<const double> b);

struct MeanDirectionReport {
  std::vector<double> mean_state;        // s_bar
  double mean_norm = 0;                  // ||s_bar||
  double norm_ratio = 0;                 // ||s_bar|| / E||s||
  std::vector<std::size_t> top_tokens;   // by decoded logit, best first
  std::vector<double> logits;            // decode(s_bar), full vocab
  double spearman_rho = 0;               // softmax(logits) vs unigram
  std::vector<double> batch_cosines;     // pairwise, >= 4 disjoint batches
  std::vector<std::pair<std::size_t, double>> running_cosine;  // (k, cos)
  std::size_t control_topk_overlap = 0;  // mean-embedding control
  double control_cosine = 0;             // cos(mean embedding, s_bar)
  std::vector<double> unigram;
};

MeanDirectionReport mean_direction_report(const StateMatrix& s,
                                          const Params<float>& p,
                                          const ModelConfig& c,
                                          std::span<const double> unigram,
                                          std::size_t top_k = 10,
                                          std::size_t n_batches = 4);

struct StateHorizon {
  std::vector<std::size_t> lags;
  std::vector<double> raw;       // E cos(s_t, s_{t+k})
  std::vector<double> centered;  // after per-sequence mean removal
  bool degenerate = false;
};

/// Lags must be ascending; pairs crossing sequence boundaries are excluded.
StateHorizon centered_cosine_curve(const StateMatrix& s,
                                   std::span<const std::size_t> lags);

struct MemoryHorizon {
  std::vector<std::size_t> lags;
  std::vector<std::vector<double>> retention;  // [head][lag]
  std::vector<double> half_life;               // k_{1/e}, inf if never crossed
  std::vector<bool> fast_pool;                 // half_life < pool_threshold
};

/// R_h(k) = mean_t prod_{tau=t+1..t+k} alpha_tau^{(h)}, within sequences.
/// Half-life interpolates log-linearly between bracketing lags.
MemoryHorizon retention_curves(const DecayLog& log,
                               std::span<const std::size_t> lags,
                               double pool_threshold);

/// Normalized token frequencies over a byte split.
std::vector<double> unigram_counts(std::span<const std::uint8_t> split,
                                   std::size_t vocab);

/// Entropy of a distribution in nats (zero bins contribute zero).
double distribution_entropy(std::span<const double> p);

/// Cyclic Jacobi eigensolver for a symmetric matrix (row-major n*n).
/// Eigenvalues are returned in descending order.
std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n);

/// Log-spaced lags 1, 2, 4, ... up to max_lag (deduplicated, ascending).
std::vector<std::size_t> log_spaced_lags(std::size_t max_lag);

}  // namespace gpn
