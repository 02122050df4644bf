#include "gpn/recall.hpp"

#include <filesystem>
#include <fstream>

#include "gpn/engine.hpp"
#include "gpn/rng.hpp"
#include "json.hpp"

namespace gpn {

RecallSet gen_assoc_recall(std::size_t n_pairs, std::size_t key_vocab,
                           std::size_t val_vocab, std::size_t seq_count,
                           std::size_t model_vocab, std::uint64_t seed) {
  if (n_pairs < 1 || n_pairs > key_vocab) {
    throw std::invalid_argument("gen_assoc_recall: need 1 <= n_pairs <= key_vocab");
  }
  if (1 + key_vocab + val_vocab > model_vocab) {
    throw std::invalid_argument(
        "gen_assoc_recall: keys + values + marker exceed the model vocab");
  }
  RecallSet set;
  set.n_pairs = n_pairs;
  set.key_vocab = key_vocab;
  set.val_vocab = val_vocab;
  set.seq_count = seq_count;
  set.seq_len = 2 * n_pairs + 3;
  set.tokens.resize(seq_count * set.seq_len);
  set.answer_pos.resize(seq_count, set.seq_len - 1);

  Rng rng(seed);
  std::vector<std::int32_t> keys(key_vocab);
  for (std::size_t i = 0; i < key_vocab; ++i) {
    keys[i] = static_cast<std::int32_t>(1 + i);
  }
  for (std::size_t s = 0; s < seq_count; ++s) {
    std::int32_t* seq = set.tokens.data() + s * set.seq_len;
    rng.shuffle(keys);  // distinct keys per sequence
    std::vector<std::int32_t> vals(n_pairs);
    for (std::size_t i = 0; i < n_pairs; ++i) {
      vals[i] = static_cast<std::int32_t>(1 + key_vocab + rng.below(val_vocab));
      seq[2 * i] = keys[i];
      seq[2 * i + 1] = vals[i];
    }
    const std::size_t q = rng.below(n_pairs);
    seq[2 * n_pairs] = 0;  // query marker
    seq[2 * n_pairs + 1] = keys[q];
    seq[2 * n_pairs + 2] = vals[q];
  }
  return set;
}

double recall_accuracy(const Params<float>& p, const ModelConfig& c,
                       const RecallSet& set, std::size_t batch) {
  const std::size_t t_win = set.seq_len - 1;  // predict positions 1..len-1
  std::size_t correct = 0;
  std::vector<std::int32_t> inputs, targets;
  std::size_t s = 0;
  while (s < set.seq_count) {
    const std::size_t bsz = std::min(batch, set.seq_count - s);
    Engine<float> eng(c, bsz, t_win, /*keep_caches=*/false);
    eng.reset(p);
    inputs.assign(bsz * t_win, 0);
    targets.assign(bsz * t_win, 0);
    for (std::size_t b = 0; b < bsz; ++b) {
      const std::int32_t* seq = set.seq(s + b);
      for (std::size_t t = 0; t < t_win; ++t) {
        inputs[b * t_win + t] = seq[t];
        targets[b * t_win + t] = seq[t + 1];
      }
    }
    eng.forward(p, inputs, targets);
    for (std::size_t b = 0; b < bsz; ++b) {
      // the answer is the target of the last step; argmax via the decode head
      const std::size_t ans = set.answer_pos[s + b];
      std::vector<float> state(eng.state_at(ans) + b * c.d,
                               eng.state_at(ans) + (b + 1) * c.d);
      const std::vector<float> logits = decode_logits(state, p, c);
      std::size_t best = 0;
      for (std::size_t i = 1; i < c.vocab; ++i) {
        if (logits[i] > logits[best]) best = i;
      }
      if (static_cast<std::int32_t>(best) == set.seq(s + b)[ans]) ++correct;
    }
    s += bsz;
  }
  return static_cast<double>(correct) / static_cast<double>(set.seq_count);
}

void write_recall_files(const RecallSet& set, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir + "/tokens.bin", std::ios::binary);
    for (const std::int32_t t : set.tokens) {
      const auto b = static_cast<unsigned char>(t);
      os.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
  {
    std::ofstream os(dir + "/answers.csv");
    os << "sequence,answer_pos,answer_token\n";
    for (std::size_t s = 0; s < set.seq_count; ++s) {
      os << s << ',' << set.answer_pos[s] << ','
         << set.seq(s)[set.answer_pos[s]] << '\n';
    }
  }
  {
    nlohmann::json j;
    j["n_pairs"] = set.n_pairs;
    j["key_vocab"] = set.key_vocab;
    j["val_vocab"] = set.val_vocab;
    j["seq_len"] = set.seq_len;
    j["seq_count"] = set.seq_count;
    j["marker_token"] = 0;
    std::ofstream os(dir + "/meta.json");
    os << j.dump(2) << '\n';
  }
}

}  // namespace gpn
