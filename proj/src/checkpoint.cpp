#include "gpn/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

#include "json.hpp"

namespace gpn {

namespace {

constexpr char kMagic[4] = {'G', 'P', 'N', '1'};
constexpr std::uint32_t kVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

void write_raw(std::FILE* f, const void* p, std::size_t n) {
  if (std::fwrite(p, 1, n, f) != n) {
    throw CheckpointError(CheckpointError::Kind::kFormat, "checkpoint: short write");
  }
}

template <typename T>
void write_pod(std::FILE* f, T v) {
  write_raw(f, &v, sizeof(v));
}

void read_raw(std::FILE* f, void* p, std::size_t n) {
  if (std::fread(p, 1, n, f) != n) {
    throw CheckpointError(CheckpointError::Kind::kTruncated,
                          "checkpoint: truncated file");
  }
}

template <typename T>
T read_pod(std::FILE* f) {
  T v;
  read_raw(f, &v, sizeof(v));
  return v;
}

void write_tensor_section(std::FILE* f, const Params<float>& p,
                          const char* suffix) {
  std::uint32_t count = 0;
  p.for_each([&](const char*, const Tensor<float>&, bool) { ++count; });
  write_pod(f, count);
  p.for_each([&](const char* name, const Tensor<float>& t, bool) {
    std::string full = std::string(name) + suffix;
    write_pod(f, static_cast<std::uint16_t>(full.size()));
    write_raw(f, full.data(), full.size());
    write_pod(f, static_cast<std::uint8_t>(t.rank));
    for (std::uint8_t i = 0; i < t.rank; ++i) {
      write_pod(f, static_cast<std::uint64_t>(t.dims[i]));
    }
    write_raw(f, t.data.data(), t.data.size() * sizeof(float));
  });
}

void read_tensor_section(std::FILE* f, Params<float>& p, const char* suffix) {
  const std::uint32_t count = read_pod<std::uint32_t>(f);
  std::uint32_t expected = 0;
  p.for_each([&](const char*, const Tensor<float>&, bool) { ++expected; });
  if (count != expected) {
    throw CheckpointError(CheckpointError::Kind::kFormat,
                          "checkpoint: tensor count does not match config");
  }
  p.for_each([&](const char* name, Tensor<float>& t, bool) {
    const std::uint16_t len = read_pod<std::uint16_t>(f);
    std::string full(len, '\0');
    read_raw(f, full.data(), len);
    if (full != std::string(name) + suffix) {
      throw CheckpointError(CheckpointError::Kind::kFormat,
                            "checkpoint: unexpected tensor name " + full);
    }
    const std::uint8_t rank = read_pod<std::uint8_t>(f);
    if (rank != t.rank) {
      throw CheckpointError(CheckpointError::Kind::kFormat,
                            "checkpoint: rank mismatch for " + full);
    }
    for (std::uint8_t i = 0; i < rank; ++i) {
      if (read_pod<std::uint64_t>(f) != t.dims[i]) {
        throw CheckpointError(CheckpointError::Kind::kFormat,
                              "checkpoint: shape mismatch for " + full);
      }
    }
    read_raw(f, t.data.data(), t.data.size() * sizeof(float));
  });
}

}  // namespace

std::string config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["d"] = c.d;
  j["d_ffn"] = c.d_ffn;
  j["d_emb"] = c.d_emb;
  j["vocab"] = c.vocab;
  j["heads"] = c.heads;
  j["d_k"] = c.d_k;
  j["d_v"] = c.d_v;
  j["mode"] = mode_name(c.mode);
  j["decoder_bias"] = c.decoder_bias;
  j["eps_norm"] = c.eps_norm;
  j["bptt_trunc"] = c.bptt_trunc;
  return j.dump();
}

ModelConfig config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kFormat,
                          std::string("bad config JSON: ") + e.what());
  }
  ModelConfig c;
  c.d = j.value("d", c.d);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.d_emb = j.value("d_emb", c.d_emb);
  c.vocab = j.value("vocab", c.vocab);
  c.heads = j.value("heads", c.heads);
  c.d_k = j.value("d_k", c.d_k);
  c.d_v = j.value("d_v", c.d_v);
  const std::string mode = j.value("mode", std::string("gpn+m"));
  if (mode == "gpn+m" || mode == "gpnm") {
    c.mode = Mode::kGpnM;
  } else if (mode == "gpn") {
    c.mode = Mode::kGpn;
  } else {
    throw CheckpointError(CheckpointError::Kind::kFormat,
                          "bad config JSON: unknown mode " + mode);
  }
  c.decoder_bias = j.value("decoder_bias", c.decoder_bias);
  c.eps_norm = j.value("eps_norm", c.eps_norm);
  c.bptt_trunc = j.value("bptt_trunc", c.bptt_trunc);
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) {
    throw CheckpointError(CheckpointError::Kind::kFormat,
                          "cannot open for writing: " + path);
  }
  write_raw(f.get(), kMagic, 4);
  write_pod(f.get(), kVersion);
  nlohmann::json j = nlohmann::json::parse(config_to_json(ckpt.config));
  j["step"] = ckpt.step;
  j["has_optimizer"] = ckpt.has_optimizer;
  const std::string rec = j.dump();
  write_pod(f.get(), static_cast<std::uint64_t>(rec.size()));
  write_raw(f.get(), rec.data(), rec.size());
  write_tensor_section(f.get(), ckpt.params, "");
  if (ckpt.has_optimizer) {
    write_tensor_section(f.get(), ckpt.opt_m, ".m");
    write_tensor_section(f.get(), ckpt.opt_v, ".v");
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) {
    throw CheckpointError(CheckpointError::Kind::kFormat,
                          "cannot open: " + path);
  }
  char magic[4];
  read_raw(f.get(), magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::kBadMagic,
                          "bad magic in " + path);
  }
  const std::uint32_t version = read_pod<std::uint32_t>(f.get());
  if (version != kVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersionMismatch,
                          "unsupported checkpoint version " +
                              std::to_string(version));
  }
  const std::uint64_t json_len = read_pod<std::uint64_t>(f.get());
  if (json_len > (1u << 20)) {
    throw CheckpointError(CheckpointError::Kind::kFormat,
                          "config record implausibly large");
  }
  std::string rec(json_len, '\0');
  read_raw(f.get(), rec.data(), json_len);
  Checkpoint ckpt;
  ckpt.config = config_from_json(rec);
  nlohmann::json j = nlohmann::json::parse(rec);
  ckpt.step = j.value("step", std::uint64_t{0});
  ckpt.has_optimizer = j.value("has_optimizer", false);
  ckpt.params = make_params<float>(ckpt.config);
  read_tensor_section(f.get(), ckpt.params, "");
  if (ckpt.has_optimizer) {
    ckpt.opt_m = make_params<float>(ckpt.config);
    ckpt.opt_v = make_params<float>(ckpt.config);
    read_tensor_section(f.get(), ckpt.opt_m, ".m");
    read_tensor_section(f.get(), ckpt.opt_v, ".v");
  }
  return ckpt;
}

}  // namespace gpn
