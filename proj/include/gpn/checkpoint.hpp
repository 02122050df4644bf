#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "gpn/model.hpp"

namespace gpn {

/// Binary checkpoint:
///   "GPN1" | u32 version=1 | u64 json_len + config JSON | u32 tensor count |
///   per tensor: u16 name_len, name, u8 rank, u64 dims[rank], f32 LE data |
///   optional optimizer section (same tensor layout), flagged in the JSON.
struct Checkpoint {
  ModelConfig config;
  Params<float> params;
  std::uint64_t step = 0;
  bool has_optimizer = false;
  Params<float> opt_m, opt_v;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kVersionMismatch, kTruncated, kFormat };
  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Config <-> flat JSON (shared with the CLI config file).
std::string config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const std::string& json_text);

}  // namespace gpn
