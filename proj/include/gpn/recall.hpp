#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gpn/model.hpp"

namespace gpn {

/// Associative-recall sequences: n_pairs (key, value) pairs, a query marker,
/// a repeated key, then the value that key was bound to. Token ids:
/// 0 = query marker, 1..key_vocab = keys, key_vocab+1.. = values.
struct RecallSet {
  std::size_t n_pairs = 0;
  std::size_t key_vocab = 0;
  std::size_t val_vocab = 0;
  std::size_t seq_len = 0;   // 2*n_pairs + 3
  std::size_t seq_count = 0;
  std::vector<std::int32_t> tokens;      // [seq_count][seq_len]
  std::vector<std::size_t> answer_pos;   // per sequence

  const std::int32_t* seq(std::size_t i) const {
    return tokens.data() + i * seq_len;
  }
};

RecallSet gen_assoc_recall(std::size_t n_pairs, std::size_t key_vocab,
                           std::size_t val_vocab, std::size_t seq_count,
                           std::size_t model_vocab, std::uint64_t seed);

/// Fraction of sequences whose answer token is the argmax prediction.
double recall_accuracy(const Params<float>& p, const ModelConfig& c,
                       const RecallSet& set, std::size_t batch = 32);

/// tokens.bin (u8), answers.csv sidecar, meta.json.
void write_recall_files(const RecallSet& set, const std::string& dir);

}  // namespace gpn
