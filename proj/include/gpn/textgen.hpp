#pragma once

#include <cstdint>
#include <string>

namespace gpn::textgen {

/// Deterministic English-like prose: templated sentences over a weighted
/// common-word bank, with punctuation and paragraph breaks. Generated here,
/// so it ships with no external licensing strings attached, and its byte
/// statistics (space/vowel-heavy unigram, strong within-word structure) look
/// like natural text to a byte-level model.
std::string generate(std::size_t n_bytes, std::uint64_t seed);

}  // namespace gpn::textgen
