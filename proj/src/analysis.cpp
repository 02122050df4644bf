#include "gpn/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gpn/engine.hpp"

namespace gpn {

namespace {

double cosine(const double* a, const double* b, std::size_t d) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < d; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double denom = std::sqrt(aa) * std::sqrt(bb);
  if (denom < 1e-30) return std::numeric_limits<double>::quiet_NaN();
  return ab / denom;
}

std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0 || sbb <= 0) return 0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

CollectedStates collect_states(const Params<float>& p, const ModelConfig& c,
                               std::span<const std::uint8_t> data,
                               std::size_t n_tokens, std::size_t seq_len,
                               std::size_t batch) {
  if (seq_len < 1 || n_tokens < seq_len) {
    throw std::invalid_argument("collect_states: need n_tokens >= seq_len");
  }
  const std::size_t n_windows = n_tokens / seq_len;
  if (data.size() < n_windows * seq_len + 1) {
    throw std::invalid_argument(
        "collect_states: data too short for requested token count");
  }
  CollectedStates out;
  out.states.d = c.d;
  out.states.rows.reserve(n_windows * seq_len * c.d);
  out.log.heads = c.mode == Mode::kGpnM ? c.heads : 0;

  std::vector<std::int32_t> inputs, targets;
  std::size_t w = 0;
  while (w < n_windows) {
    const std::size_t bsz = std::min(batch, n_windows - w);
    Engine<float> eng(c, bsz, seq_len, /*keep_caches=*/false);
    eng.reset(p);
    inputs.assign(bsz * seq_len, 0);
    targets.assign(bsz * seq_len, 0);
    for (std::size_t b = 0; b < bsz; ++b) {
      const std::size_t off = (w + b) * seq_len;
      for (std::size_t t = 0; t < seq_len; ++t) {
        inputs[b * seq_len + t] = data[off + t];
        targets[b * seq_len + t] = data[off + t + 1];
      }
    }
    eng.forward(p, inputs, targets);
    for (std::size_t b = 0; b < bsz; ++b) {
      out.states.seq_starts.push_back(out.states.rows.size() / c.d);
      if (out.log.heads) {
        out.log.seq_starts.push_back(out.log.alphas.size() / out.log.heads);
      }
      for (std::size_t t = 1; t <= seq_len; ++t) {
        const float* row = eng.state_at(t) + b * c.d;
        out.states.rows.insert(out.states.rows.end(), row, row + c.d);
        if (out.log.heads) {
          for (std::size_t h = 0; h < c.heads; ++h) {
            out.log.alphas.push_back(static_cast<double>(eng.alpha_at(t, b, h)));
          }
        }
      }
    }
    w += bsz;
  }
  return out;
}

std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n) {
  if (a.size() != n * n) {
    throw std::invalid_argument("jacobi_eigenvalues: bad matrix size");
  }
  auto at = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
    }
    double diag = 0;
    for (std::size_t i = 0; i < n; ++i) diag += at(i, i) * at(i, i);
    if (off <= 1e-30 * std::max(diag, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cph = 1.0 / std::sqrt(t * t + 1.0);
        const double sph = t * cph;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = cph * akp - sph * akq;
          at(k, q) = sph * akp + cph * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = cph * apk - sph * aqk;
          at(q, k) = sph * apk + cph * aqk;
        }
      }
    }
  }
  std::vector<double> evals(n);
  for (std::size_t i = 0; i < n; ++i) evals[i] = at(i, i);
  std::sort(evals.begin(), evals.end(), std::greater<>());
  return evals;
}

GeometryReport geometry_report(const StateMatrix& s) {
  const std::size_t n = s.n(), d = s.d;
  if (n < 2) {
    throw std::invalid_argument("geometry_report: need at least 2 rows");
  }
  GeometryReport rep;
  rep.few_rows_warning = n < d;

  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = s.row(i);
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);

  // sample covariance of centered rows, and the raw Gram diagonal/trace
  std::vector<double> cov(d * d, 0.0), gram_raw(d * d, 0.0);
  double norm_sum = 0, norm_sq_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = s.row(i);
    double ns = 0;
    for (std::size_t j = 0; j < d; ++j) {
      ns += static_cast<double>(row[j]) * row[j];
    }
    norm_sum += std::sqrt(ns);
    norm_sq_sum += ns;
    for (std::size_t j = 0; j < d; ++j) {
      const double cj = row[j] - mean[j];
      const double rj = row[j];
      for (std::size_t k = j; k < d; ++k) {
        cov[j * d + k] += cj * (row[k] - mean[k]);
        gram_raw[j * d + k] += rj * row[k];
      }
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = j; k < d; ++k) {
      cov[j * d + k] /= static_cast<double>(n - 1);
      cov[k * d + j] = cov[j * d + k];
      gram_raw[k * d + j] = gram_raw[j * d + k];
    }
  }

  rep.mean_norm = norm_sum / static_cast<double>(n);
  rep.std_norm = std::sqrt(std::max(
      0.0, norm_sq_sum / static_cast<double>(n) - rep.mean_norm * rep.mean_norm));

  rep.per_dim_std.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    rep.per_dim_std[j] = std::sqrt(std::max(0.0, cov[j * d + j]));
  }

  rep.corr.assign(d * d, 0.0);
  double abs_sum = 0, abs_max = 0;
  for (std::size_t j = 0; j < d; ++j) {
    rep.corr[j * d + j] = 1.0;
    for (std::size_t k = j + 1; k < d; ++k) {
      const double denom = rep.per_dim_std[j] * rep.per_dim_std[k];
      const double r = denom > 0 ? cov[j * d + k] / denom : 0.0;
      rep.corr[j * d + k] = r;
      rep.corr[k * d + j] = r;
      abs_sum += std::abs(r);
      abs_max = std::max(abs_max, std::abs(r));
    }
  }
  const double n_pairs = 0.5 * static_cast<double>(d) * static_cast<double>(d - 1);
  rep.mean_abs_offdiag = d > 1 ? abs_sum / n_pairs : 0.0;
  rep.max_abs_offdiag = abs_max;

  std::sort(rep.per_dim_std.begin(), rep.per_dim_std.end(), std::greater<>());

  std::vector<double> evals = jacobi_eigenvalues(cov, d);
  for (auto& l : evals) l = std::max(l, 0.0);
  const double total = std::accumulate(evals.begin(), evals.end(), 0.0);
  rep.cumvar.resize(d);
  double acc = 0;
  rep.n_components_90 = rep.n_components_99 = d;
  for (std::size_t j = 0; j < d; ++j) {
    acc += evals[j];
    rep.cumvar[j] = total > 0 ? acc / total : 1.0;
    if (rep.n_components_90 == d && rep.cumvar[j] >= 0.90) {
      rep.n_components_90 = j + 1;
    }
    if (rep.n_components_99 == d && rep.cumvar[j] >= 0.99) {
      rep.n_components_99 = j + 1;
    }
  }
  double sum_sq = 0;
  for (const double l : evals) sum_sq += l * l;
  rep.participation_ratio = sum_sq > 0 ? total * total / sum_sq : 0.0;
  rep.stable_rank_centered = evals.empty() || evals[0] <= 0
                                 ? 0.0
                                 : total / evals[0];

  double frob_raw = 0;  // ||X||_F^2 = trace(X^T X)
  for (std::size_t j = 0; j < d; ++j) frob_raw += gram_raw[j * d + j];
  std::vector<double> evals_raw = jacobi_eigenvalues(std::move(gram_raw), d);
  rep.stable_rank_raw =
      evals_raw.empty() || evals_raw[0] <= 0 ? 0.0 : frob_raw / evals_raw[0];
  return rep;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("spearman: need two equal series, n >= 2");
  }
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  return pearson(ra, rb);
}

MeanDirectionReport mean_direction_report(const StateMatrix& s,
                                          const Params<float>& p,
                                          const ModelConfig& c,
                                          std::span<const double> unigram,
                                          std::size_t top_k,
                                          std::size_t n_batches) {
  const std::size_t n = s.n(), d = s.d;
  if (n < n_batches || unigram.size() != c.vocab) {
    throw std::invalid_argument("mean_direction_report: bad inputs");
  }
  MeanDirectionReport rep;
  rep.unigram.assign(unigram.begin(), unigram.end());

  rep.mean_state.assign(d, 0.0);
  double norm_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = s.row(i);
    double ns = 0;
    for (std::size_t j = 0; j < d; ++j) {
      rep.mean_state[j] += row[j];
      ns += static_cast<double>(row[j]) * row[j];
    }
    norm_sum += std::sqrt(ns);
  }
  for (auto& v : rep.mean_state) v /= static_cast<double>(n);
  double mn = 0;
  for (const double v : rep.mean_state) mn += v * v;
  rep.mean_norm = std::sqrt(mn);
  rep.norm_ratio = rep.mean_norm / (norm_sum / static_cast<double>(n));

  auto decode = [&](const std::vector<double>& vec) {
    std::vector<float> xf(vec.begin(), vec.end());
    const std::vector<float> lf = decode_logits(xf, p, c);
    return std::vector<double>(lf.begin(), lf.end());
  };
  rep.logits = decode(rep.mean_state);

  std::vector<std::size_t> order(c.vocab);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return rep.logits[a] > rep.logits[b];
  });
  rep.top_tokens.assign(order.begin(),
                        order.begin() + std::min(top_k, order.size()));

  // softmax over the decoded logits, rank-correlated with the unigram
  std::vector<double> probs(c.vocab);
  const double mx = *std::max_element(rep.logits.begin(), rep.logits.end());
  double sum = 0;
  for (std::size_t i = 0; i < c.vocab; ++i) {
    probs[i] = std::exp(rep.logits[i] - mx);
    sum += probs[i];
  }
  for (auto& v : probs) v /= sum;
  rep.spearman_rho = spearman(probs, unigram);

  // disjoint contiguous batches of rows
  std::vector<std::vector<double>> means(n_batches, std::vector<double>(d, 0.0));
  for (std::size_t g = 0; g < n_batches; ++g) {
    const std::size_t lo = g * n / n_batches;
    const std::size_t hi = (g + 1) * n / n_batches;
    for (std::size_t i = lo; i < hi; ++i) {
      const float* row = s.row(i);
      for (std::size_t j = 0; j < d; ++j) means[g][j] += row[j];
    }
    for (auto& v : means[g]) v /= static_cast<double>(hi - lo);
  }
  for (std::size_t a = 0; a < n_batches; ++a) {
    for (std::size_t b = a + 1; b < n_batches; ++b) {
      rep.batch_cosines.push_back(cosine(means[a].data(), means[b].data(), d));
    }
  }

  // running mean vs final, at log-spaced checkpoints
  std::vector<double> running(d, 0.0);
  std::size_t next_mark = 10;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = s.row(i);
    for (std::size_t j = 0; j < d; ++j) running[j] += row[j];
    if (i + 1 == next_mark || i + 1 == n) {
      std::vector<double> avg(d);
      for (std::size_t j = 0; j < d; ++j) {
        avg[j] = running[j] / static_cast<double>(i + 1);
      }
      rep.running_cosine.emplace_back(
          i + 1, cosine(avg.data(), rep.mean_state.data(), d));
      next_mark *= 10;
    }
  }

  // control: unigram-weighted mean embedding, decoded the same way
  std::vector<double> mean_emb(c.d_emb, 0.0);
  for (std::size_t v = 0; v < c.vocab; ++v) {
    const float* row = p.emb.row(v);
    for (std::size_t j = 0; j < c.d_emb; ++j) mean_emb[j] += unigram[v] * row[j];
  }
  const std::vector<double> ctrl_logits = decode(mean_emb);
  std::vector<std::size_t> ctrl_order(c.vocab);
  std::iota(ctrl_order.begin(), ctrl_order.end(), 0);
  std::sort(ctrl_order.begin(), ctrl_order.end(),
            [&](std::size_t a, std::size_t b) {
              return ctrl_logits[a] > ctrl_logits[b];
            });
  for (std::size_t i = 0; i < rep.top_tokens.size(); ++i) {
    for (std::size_t j = 0; j < rep.top_tokens.size(); ++j) {
      if (ctrl_order[i] == rep.top_tokens[j]) {
        ++rep.control_topk_overlap;
        break;
      }
    }
  }
  rep.control_cosine = cosine(mean_emb.data(), rep.mean_state.data(), d);
  return rep;
}

StateHorizon centered_cosine_curve(const StateMatrix& s,
                                   std::span<const std::size_t> lags) {
  const std::size_t n = s.n(), d = s.d;
  StateHorizon hz;
  hz.lags.assign(lags.begin(), lags.end());
  hz.raw.assign(lags.size(), 0.0);
  hz.centered.assign(lags.size(), 0.0);

  std::vector<std::size_t> bounds(s.seq_starts.begin(), s.seq_starts.end());
  if (bounds.empty()) bounds.push_back(0);
  bounds.push_back(n);

  // per-sequence means
  std::vector<std::vector<double>> seq_mean;
  for (std::size_t q = 0; q + 1 < bounds.size(); ++q) {
    std::vector<double> m(d, 0.0);
    for (std::size_t i = bounds[q]; i < bounds[q + 1]; ++i) {
      const float* row = s.row(i);
      for (std::size_t j = 0; j < d; ++j) m[j] += row[j];
    }
    const double len = static_cast<double>(bounds[q + 1] - bounds[q]);
    for (auto& v : m) v /= len;
    seq_mean.push_back(std::move(m));
  }

  std::vector<double> a(d), b(d);
  for (std::size_t li = 0; li < lags.size(); ++li) {
    const std::size_t k = lags[li];
    double raw_sum = 0, cen_sum = 0;
    std::size_t raw_cnt = 0, cen_cnt = 0;
    for (std::size_t q = 0; q + 1 < bounds.size(); ++q) {
      const std::size_t lo = bounds[q], hi = bounds[q + 1];
      if (hi - lo <= k) {
        if (k > 0) hz.degenerate = true;  // sequence shorter than this lag
        continue;
      }
      const std::vector<double>& m = seq_mean[q];
      for (std::size_t t = lo; t + k < hi; ++t) {
        const float* ra = s.row(t);
        const float* rb = s.row(t + k);
        for (std::size_t j = 0; j < d; ++j) {
          a[j] = ra[j];
          b[j] = rb[j];
        }
        const double craw = cosine(a.data(), b.data(), d);
        if (std::isfinite(craw)) {
          raw_sum += craw;
          ++raw_cnt;
        }
        for (std::size_t j = 0; j < d; ++j) {
          a[j] -= m[j];
          b[j] -= m[j];
        }
        const double ccen = cosine(a.data(), b.data(), d);
        if (std::isfinite(ccen)) {
          cen_sum += ccen;
          ++cen_cnt;
        } else {
          hz.degenerate = true;
        }
      }
    }
    hz.raw[li] = raw_cnt ? raw_sum / static_cast<double>(raw_cnt) : 0.0;
    hz.centered[li] = cen_cnt ? cen_sum / static_cast<double>(cen_cnt) : 0.0;
    if (raw_cnt == 0) hz.degenerate = true;
  }
  return hz;
}

MemoryHorizon retention_curves(const DecayLog& log,
                               std::span<const std::size_t> lags,
                               double pool_threshold) {
  if (log.heads == 0 || log.steps() == 0) {
    throw std::invalid_argument("retention_curves: empty decay log");
  }
  const std::size_t H = log.heads, n = log.steps();
  MemoryHorizon hz;
  hz.lags.assign(lags.begin(), lags.end());
  hz.retention.assign(H, std::vector<double>(lags.size(), 0.0));
  hz.half_life.assign(H, std::numeric_limits<double>::infinity());
  hz.fast_pool.assign(H, false);

  std::vector<std::size_t> bounds(log.seq_starts.begin(), log.seq_starts.end());
  if (bounds.empty()) bounds.push_back(0);
  bounds.push_back(n);

  for (std::size_t h = 0; h < H; ++h) {
    std::vector<double> sum(lags.size(), 0.0);
    std::vector<std::size_t> cnt(lags.size(), 0);
    std::vector<double> pref;
    for (std::size_t q = 0; q + 1 < bounds.size(); ++q) {
      const std::size_t lo = bounds[q], hi = bounds[q + 1];
      pref.assign(hi - lo + 1, 0.0);  // prefix sums of log alpha
      for (std::size_t t = lo; t < hi; ++t) {
        pref[t - lo + 1] = pref[t - lo] + std::log(log.at(t, h));
      }
      for (std::size_t li = 0; li < lags.size(); ++li) {
        const std::size_t k = lags[li];
        if (hi - lo < k) continue;
        for (std::size_t t = 0; t + k <= hi - lo; ++t) {
          sum[li] += std::exp(pref[t + k] - pref[t]);
          ++cnt[li];
        }
      }
    }
    for (std::size_t li = 0; li < lags.size(); ++li) {
      hz.retention[h][li] = cnt[li] ? sum[li] / static_cast<double>(cnt[li]) : 0.0;
    }
    // first crossing of 1/e, interpolated in (k, log R)
    double prev_k = 0.0, prev_log = 0.0;  // R(0) = 1
    for (std::size_t li = 0; li < lags.size(); ++li) {
      const double r = hz.retention[h][li];
      const double lr = std::log(std::max(r, 1e-300));
      if (r <= std::exp(-1.0)) {
        const double kk = static_cast<double>(lags[li]);
        hz.half_life[h] =
            lr == prev_log
                ? kk
                : prev_k + (-1.0 - prev_log) * (kk - prev_k) / (lr - prev_log);
        break;
      }
      prev_k = static_cast<double>(lags[li]);
      prev_log = lr;
    }
    hz.fast_pool[h] = hz.half_life[h] < pool_threshold;
  }
  return hz;
}

std::vector<double> unigram_counts(std::span<const std::uint8_t> split,
                                   std::size_t vocab) {
  if (split.empty()) {
    throw std::invalid_argument("unigram_counts: empty split");
  }
  std::vector<double> counts(vocab, 0.0);
  for (const std::uint8_t b : split) {
    if (b < vocab) counts[b] += 1.0;
  }
  for (auto& c : counts) c /= static_cast<double>(split.size());
  return counts;
}

double distribution_entropy(std::span<const double> p) {
  double h = 0;
  for (const double v : p) {
    if (v > 0) h -= v * std::log(v);
  }
  return h;
}

std::vector<std::size_t> log_spaced_lags(std::size_t max_lag) {
  std::vector<std::size_t> lags;
  for (std::size_t k = 1; k <= max_lag; k *= 2) lags.push_back(k);
  if (lags.empty() || lags.back() != max_lag) lags.push_back(max_lag);
  return lags;
}

}  // namespace gpn
