#include "gpn/textgen.hpp"

#include <array>
#include <vector>

#include "gpn/rng.hpp"

namespace gpn::textgen {

namespace {

// clang-format off
const char* kDeterminers[] = {"the", "the", "the", "a", "a", "this", "that", "its", "every", "one"};
const char* kNouns[] = {
    "river", "house", "garden", "child", "story", "market", "window", "road",
    "mountain", "teacher", "letter", "morning", "winter", "village", "stone",
    "bird", "field", "voice", "shadow", "bridge", "lamp", "forest", "door",
    "harbor", "clock", "paper", "rain", "city", "valley", "song", "horse",
    "table", "candle", "journey", "neighbor", "orchard", "path", "ship",
    "tower", "well", "wind", "workshop", "coat", "meadow", "mill", "library",
    "question", "answer", "evening", "farmer", "fisherman", "kitchen", "map",
    "engine", "island", "ladder", "mirror", "needle", "ocean", "pocket"};
const char* kTransVerbs[] = {
    "found", "carried", "watched", "opened", "followed", "remembered",
    "crossed", "painted", "borrowed", "counted", "repaired", "gathered",
    "measured", "traded", "visited", "studied", "described", "promised",
    "built", "lost", "kept", "sold", "planted", "filled", "cleaned"};
const char* kIntransVerbs[] = {
    "slept", "waited", "vanished", "arrived", "laughed", "wandered",
    "rested", "returned", "listened", "stumbled", "hesitated", "sang",
    "worked", "dreamed", "whistled", "paused"};
const char* kAdjectives[] = {
    "old", "quiet", "bright", "narrow", "heavy", "small", "green", "distant",
    "warm", "broken", "gentle", "pale", "steep", "wooden", "empty", "crooked",
    "silver", "patient", "early", "late", "cold", "long", "round", "simple"};
const char* kAdverbs[] = {
    "slowly", "often", "again", "quietly", "almost", "finally", "suddenly",
    "carefully", "rarely", "together", "alone", "soon"};
const char* kPreps[] = {
    "near", "under", "beyond", "across", "through", "behind", "beside",
    "toward", "inside", "around", "past", "above"};
const char* kOpeners[] = {
    "then", "later", "meanwhile", "at dawn", "after a while", "that year",
    "in the spring", "before long", "by evening", "once more"};
// clang-format on

template <std::size_t N>
const char* pick_zipf(Rng& rng, const char* const (&bank)[N]) {
  // weight ~ 1/(rank+2): a heavy head with a long usable tail
  static_assert(N > 0);
  double total = 0;
  for (std::size_t i = 0; i < N; ++i) total += 1.0 / static_cast<double>(i + 2);
  double r = rng.uniform() * total;
  for (std::size_t i = 0; i < N; ++i) {
    r -= 1.0 / static_cast<double>(i + 2);
    if (r <= 0) return bank[i];
  }
  return bank[N - 1];
}

template <std::size_t N>
const char* pick_uniform(Rng& rng, const char* const (&bank)[N]) {
  return bank[rng.below(N)];
}

void noun_phrase(Rng& rng, std::string& out) {
  out += pick_uniform(rng, kDeterminers);
  out += ' ';
  if (rng.uniform() < 0.45) {
    out += pick_zipf(rng, kAdjectives);
    out += ' ';
  }
  out += pick_zipf(rng, kNouns);
}

void sentence(Rng& rng, std::string& out) {
  std::string s;
  if (rng.uniform() < 0.18) {
    s += pick_uniform(rng, kOpeners);
    s += ", ";
  }
  noun_phrase(rng, s);
  s += ' ';
  if (rng.uniform() < 0.25) {
    s += pick_zipf(rng, kAdverbs);
    s += ' ';
  }
  if (rng.uniform() < 0.68) {
    s += pick_zipf(rng, kTransVerbs);
    s += ' ';
    noun_phrase(rng, s);
  } else {
    s += pick_zipf(rng, kIntransVerbs);
  }
  if (rng.uniform() < 0.5) {
    s += ' ';
    s += pick_uniform(rng, kPreps);
    s += ' ';
    noun_phrase(rng, s);
  }
  if (rng.uniform() < 0.12) {
    s += ", and ";
    noun_phrase(rng, s);
    s += ' ';
    s += pick_zipf(rng, kIntransVerbs);
  }
  s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  s += rng.uniform() < 0.06 ? '?' : '.';
  out += s;
}

}  // namespace

std::string generate(std::size_t n_bytes, std::uint64_t seed) {
  Rng rng(seed);
  std::string out;
  out.reserve(n_bytes + 256);
  std::size_t sentences_left = 4 + rng.below(8);
  while (out.size() < n_bytes) {
    sentence(rng, out);
    if (--sentences_left == 0) {
      out += "\n\n";
      sentences_left = 4 + rng.below(8);
    } else {
      out += ' ';
    }
  }
  out.resize(n_bytes);
  return out;
}

}  // namespace gpn::textgen
