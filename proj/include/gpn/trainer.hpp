#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gpn/checkpoint.hpp"
#include "gpn/engine.hpp"
#include "gpn/model.hpp"

namespace gpn {

/// Raw byte stream; the last val_fraction of it is the validation split.
struct Corpus {
  std::vector<std::uint8_t> bytes;
  std::size_t train_len = 0;

  std::span<const std::uint8_t> train() const {
    return {bytes.data(), train_len};
  }
  std::span<const std::uint8_t> val() const {
    return {bytes.data() + train_len, bytes.size() - train_len};
  }
};

Corpus load_corpus(const std::string& path, double val_fraction);
Corpus corpus_from_bytes(std::vector<std::uint8_t> bytes, double val_fraction);

struct TrainHyper {
  double peak_lr = 6e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 2000;
  double final_lr_fraction = 0.1;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  std::size_t batch = 16;
  std::size_t seq_len = 256;
  std::uint64_t seed = 1234;
  double val_fraction = 0.1;
  std::size_t val_interval = 100;  // 0 disables periodic validation
  std::size_t val_windows = 16;    // eval windows per validation pass
};

/// Linear warmup to peak, then cosine down to final_lr_fraction of peak.
double lr_at(std::size_t step, const TrainHyper& h);

/// Deterministic stream of (inputs, targets) batches: the non-overlapping
/// window starts are reshuffled each epoch with a seed derived from
/// (seed, epoch).
class Batcher {
 public:
  Batcher(std::span<const std::uint8_t> data, std::size_t batch,
          std::size_t seq_len, std::uint64_t seed);

  /// Fills inputs/targets, both [batch][seq_len] row-major.
  void next(std::vector<std::int32_t>& inputs,
            std::vector<std::int32_t>& targets);
  void skip(std::size_t n_batches);
  std::size_t windows_per_epoch() const { return starts_.size(); }

 private:
  void reshuffle();
  std::span<const std::uint8_t> data_;
  std::size_t batch_, seq_len_, cursor_ = 0;
  std::uint64_t seed_, epoch_ = 0;
  std::vector<std::size_t> starts_;
};

struct OptimizerState {
  Params<float> m, v;
  std::uint64_t step = 0;
};

OptimizerState make_optimizer_state(const ModelConfig& c);

/// Scales all gradients to max_norm when the global L2 norm exceeds it;
/// returns the pre-clip norm.
double clip_global_norm(Params<float>& grads, double max_norm);

/// Decoupled weight decay, applied to weight matrices only.
void adamw_step(Params<float>& params, const Params<float>& grads,
                OptimizerState& opt, const TrainHyper& h, double lr);

struct EvalResult {
  double mean_ce = 0;
  double ppl = 0;
  double bits_per_byte = 0;
  std::size_t positions = 0;
};

/// Mean CE over all positions of non-overlapping seq_len windows.
/// max_windows = 0 evaluates everything.
EvalResult evaluate_ppl(const Params<float>& p, const ModelConfig& c,
                        std::span<const std::uint8_t> data,
                        std::size_t seq_len, std::size_t max_windows = 0,
                        std::size_t batch = 8);

struct MetricRow {
  std::size_t step = 0;
  double lr = 0, train_ce = 0, grad_norm = 0;
  std::optional<double> val_ce;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  std::vector<MetricRow> metrics;
  Params<float> params;
  std::string final_checkpoint;
};

/// Full training run. Writes metrics.csv and periodic checkpoints under
/// out_dir; resume continues bit-exactly from a saved checkpoint.
TrainResult train_loop(const ModelConfig& cfg, const TrainHyper& hyper,
                       const Corpus& corpus, const std::string& out_dir,
                       const std::optional<std::string>& resume = std::nullopt);

}  // namespace gpn
