#include "gpn/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "gpn/rng.hpp"

namespace gpn {

namespace {

std::string metrics_path(const std::string& out_dir) {
  return out_dir + "/metrics.csv";
}

void append_metric(std::ofstream& os, const MetricRow& r) {
  char buf[160];
  if (r.val_ce) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g\n", r.step, r.lr,
                  r.train_ce, r.grad_norm, *r.val_ce);
  } else {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,\n", r.step, r.lr,
                  r.train_ce, r.grad_norm);
  }
  os << buf;
}

}  // namespace

Corpus corpus_from_bytes(std::vector<std::uint8_t> bytes, double val_fraction) {
  if (bytes.empty()) {
    throw std::runtime_error("corpus is empty");
  }
  if (val_fraction < 0 || val_fraction >= 1) {
    throw std::invalid_argument("val_fraction must be in [0, 1)");
  }
  Corpus c;
  c.bytes = std::move(bytes);
  const auto val_len = static_cast<std::size_t>(
      static_cast<double>(c.bytes.size()) * val_fraction);
  c.train_len = c.bytes.size() - val_len;
  return c;
}

Corpus load_corpus(const std::string& path, double val_fraction) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("cannot open corpus: " + path);
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  if (bytes.empty()) {
    throw std::runtime_error("corpus file is empty: " + path);
  }
  return corpus_from_bytes(std::move(bytes), val_fraction);
}

double lr_at(std::size_t step, const TrainHyper& h) {
  if (h.warmup_steps >= h.total_steps) {
    throw std::invalid_argument("lr_at: warmup must be shorter than the run");
  }
  if (step > h.total_steps) {
    throw std::invalid_argument("lr_at: step beyond total_steps");
  }
  if (step < h.warmup_steps) {
    return h.peak_lr * static_cast<double>(step) /
           static_cast<double>(h.warmup_steps);
  }
  const double progress = static_cast<double>(step - h.warmup_steps) /
                          static_cast<double>(h.total_steps - h.warmup_steps);
  const double f = h.final_lr_fraction;
  return h.peak_lr *
         (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

Batcher::Batcher(std::span<const std::uint8_t> data, std::size_t batch,
                 std::size_t seq_len, std::uint64_t seed)
    : data_(data), batch_(batch), seq_len_(seq_len), seed_(seed) {
  if (data.size() < seq_len + 2) {
    throw std::runtime_error("corpus too short for the requested window");
  }
  const std::size_t n = (data.size() - 1) / seq_len;  // window needs L+1 bytes
  starts_.resize(n);
  for (std::size_t i = 0; i < n; ++i) starts_[i] = i * seq_len;
  reshuffle();
}

void Batcher::reshuffle() {
  Rng rng(seed_ ^ (0x9e3779b97f4a7c15ull * (epoch_ + 1)));
  rng.shuffle(starts_);
}

void Batcher::next(std::vector<std::int32_t>& inputs,
                   std::vector<std::int32_t>& targets) {
  inputs.resize(batch_ * seq_len_);
  targets.resize(batch_ * seq_len_);
  for (std::size_t b = 0; b < batch_; ++b) {
    if (cursor_ == starts_.size()) {
      cursor_ = 0;
      ++epoch_;
      reshuffle();
    }
    const std::size_t off = starts_[cursor_++];
    for (std::size_t t = 0; t < seq_len_; ++t) {
      inputs[b * seq_len_ + t] = data_[off + t];
      targets[b * seq_len_ + t] = data_[off + t + 1];
    }
  }
}

void Batcher::skip(std::size_t n_batches) {
  for (std::size_t i = 0; i < n_batches * batch_; ++i) {
    if (cursor_ == starts_.size()) {
      cursor_ = 0;
      ++epoch_;
      reshuffle();
    }
    ++cursor_;
  }
}

OptimizerState make_optimizer_state(const ModelConfig& c) {
  OptimizerState s;
  s.m = make_params<float>(c);
  s.v = make_params<float>(c);
  return s;
}

double clip_global_norm(Params<float>& grads, double max_norm) {
  double ss = 0;
  grads.for_each([&](const char*, const Tensor<float>& t, bool) {
    ss += static_cast<double>(kern::sumsq(t.ptr(), t.numel()));
  });
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    grads.for_each([&](const char*, Tensor<float>& t, bool) {
      for (auto& v : t.data) v *= s;
    });
  }
  return norm;
}

namespace {

struct TensorRef {
  Tensor<float>* t;
  bool decayed;
};

std::vector<TensorRef> tensor_list(Params<float>& p) {
  std::vector<TensorRef> out;
  p.for_each([&](const char*, Tensor<float>& t, bool d) {
    out.push_back({&t, d});
  });
  return out;
}

}  // namespace

void adamw_step(Params<float>& params, const Params<float>& grads,
                OptimizerState& opt, const TrainHyper& h, double lr) {
  opt.step += 1;
  const double b1 = h.beta1, b2 = h.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
  // all four structs visit tensors in the same fixed order
  auto ts = tensor_list(params);
  auto gs = tensor_list(const_cast<Params<float>&>(grads));
  auto ms = tensor_list(opt.m);
  auto vs = tensor_list(opt.v);
  if (gs.size() != ts.size() || ms.size() != ts.size() || vs.size() != ts.size()) {
    throw std::invalid_argument("adamw_step: tensor set mismatch");
  }
  for (std::size_t k = 0; k < ts.size(); ++k) {
    Tensor<float>& t = *ts[k].t;
    const Tensor<float>& g = *gs[k].t;
    Tensor<float>& m = *ms[k].t;
    Tensor<float>& v = *vs[k].t;
    if (!t.same_shape(g) || !t.same_shape(m) || !t.same_shape(v)) {
      throw std::invalid_argument("adamw_step: tensor shape mismatch");
    }
    const bool decayed = ts[k].decayed;
    const std::size_t n = t.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g.data[i];
      const double mi = b1 * m.data[i] + (1.0 - b1) * gi;
      const double vi = b2 * v.data[i] + (1.0 - b2) * gi * gi;
      m.data[i] = static_cast<float>(mi);
      v.data[i] = static_cast<float>(vi);
      double upd = lr * (mi / corr1) / (std::sqrt(vi / corr2) + h.adam_eps);
      if (decayed) upd += lr * h.weight_decay * t.data[i];
      t.data[i] = static_cast<float>(t.data[i] - upd);
    }
  }
}

EvalResult evaluate_ppl(const Params<float>& p, const ModelConfig& c,
                        std::span<const std::uint8_t> data,
                        std::size_t seq_len, std::size_t max_windows,
                        std::size_t batch) {
  if (data.size() < seq_len + 1) {
    throw std::runtime_error("evaluate_ppl: data shorter than one window");
  }
  std::size_t n_windows = (data.size() - 1) / seq_len;
  if (max_windows > 0) n_windows = std::min(n_windows, max_windows);
  EvalResult r;
  double total = 0;
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
    total += eng.mean_ce() * static_cast<double>(bsz * seq_len);
    r.positions += bsz * seq_len;
    w += bsz;
  }
  r.mean_ce = total / static_cast<double>(r.positions);
  r.ppl = std::exp(r.mean_ce);
  r.bits_per_byte = r.mean_ce / std::numbers::ln2;
  return r;
}

TrainResult train_loop(const ModelConfig& cfg, const TrainHyper& hyper,
                       const Corpus& corpus, const std::string& out_dir,
                       const std::optional<std::string>& resume) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);

  Params<float> params;
  OptimizerState opt = make_optimizer_state(cfg);
  std::size_t start_step = 0;
  if (resume) {
    Checkpoint ckpt = load_checkpoint(*resume);
    params = std::move(ckpt.params);
    if (!ckpt.has_optimizer) {
      throw std::runtime_error("resume checkpoint has no optimizer state");
    }
    opt.m = std::move(ckpt.opt_m);
    opt.v = std::move(ckpt.opt_v);
    opt.step = ckpt.step;
    start_step = static_cast<std::size_t>(ckpt.step);
  } else {
    params = init_params<float>(cfg, hyper.seed);
  }

  Batcher batcher(corpus.train(), hyper.batch, hyper.seq_len, hyper.seed);
  batcher.skip(start_step);

  std::ofstream metrics(metrics_path(out_dir),
                        start_step == 0 ? std::ios::trunc : std::ios::app);
  if (start_step == 0) {
    metrics << "step,lr,train_ce,grad_norm,val_ce\n";
  }

  Engine<float> eng(cfg, hyper.batch, hyper.seq_len, /*keep_caches=*/true);
  Params<float> grads = make_params<float>(cfg);
  std::vector<std::int32_t> inputs, targets;
  const std::size_t ckpt_every =
      std::max<std::size_t>(1, hyper.total_steps / 10);

  auto save = [&](std::size_t step, const std::string& name) {
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.params = params;
    ckpt.step = step;
    ckpt.has_optimizer = true;
    ckpt.opt_m = opt.m;
    ckpt.opt_v = opt.v;
    save_checkpoint(out_dir + "/" + name, ckpt);
  };

  TrainResult result;
  for (std::size_t step = start_step + 1; step <= hyper.total_steps; ++step) {
    batcher.next(inputs, targets);
    eng.reset(params);
    eng.forward(params, inputs, targets);
    const double train_ce = eng.mean_ce();
    if (!std::isfinite(train_ce)) {
      throw NumericError("non-finite training loss at step " +
                         std::to_string(step));
    }
    grads.for_each([](const char*, Tensor<float>& t, bool) { t.zero(); });
    eng.backward(params, grads, cfg.bptt_trunc);
    const double gnorm = clip_global_norm(grads, hyper.clip_norm);
    if (!std::isfinite(gnorm)) {
      throw NumericError("non-finite gradient norm at step " +
                         std::to_string(step));
    }
    const double lr = lr_at(step, hyper);
    adamw_step(params, grads, opt, hyper, lr);

    MetricRow row{step, lr, train_ce, gnorm, std::nullopt};
    if (hyper.val_interval > 0 &&
        (step % hyper.val_interval == 0 || step == hyper.total_steps) &&
        corpus.val().size() > hyper.seq_len) {
      row.val_ce = evaluate_ppl(params, cfg, corpus.val(), hyper.seq_len,
                                hyper.val_windows, hyper.batch)
                       .mean_ce;
    }
    append_metric(metrics, row);
    result.metrics.push_back(row);
    if (step % ckpt_every == 0 && step != hyper.total_steps) {
      save(step, "ckpt_step" + std::to_string(step) + ".gpn");
    }
  }
  save(hyper.total_steps, "ckpt_final.gpn");
  result.final_checkpoint = out_dir + "/ckpt_final.gpn";
  result.params = std::move(params);
  return result;
}

}  // namespace gpn
