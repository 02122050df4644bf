// gpn: train / eval / analyze / gen / inspect for the grounded-prediction
// network. Exit codes: 0 success, 2 usage, 3 I/O or format, 4 numeric
// failure.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gpn/analysis.hpp"
#include "gpn/checkpoint.hpp"
#include "gpn/engine.hpp"
#include "gpn/kernels.hpp"
#include "gpn/model.hpp"
#include "gpn/recall.hpp"
#include "gpn/svg.hpp"
#include "gpn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::uint64_t fnv1a64_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (is) {
    is.read(buf, sizeof(buf));
    const std::streamsize n = is.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

void write_manifest(const std::string& out_dir) {
  json entries = json::array();
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(out_dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a64_file(f)));
    entries.push_back({{"file", f.filename().string()},
                       {"bytes", fs::file_size(f)},
                       {"fnv1a64", hex}});
  }
  std::ofstream os(out_dir + "/manifest.json");
  os << json{{"files", entries}}.dump(2) << '\n';
}

struct RunConfig {
  gpn::ModelConfig model;
  gpn::TrainHyper hyper;
};

void apply_json(RunConfig& rc, const json& j) {
  using gpn::Mode;
  auto& m = rc.model;
  auto& h = rc.hyper;
  m.d = j.value("d", m.d);
  m.d_ffn = j.value("d_ffn", m.d_ffn);
  m.d_emb = j.value("d_emb", m.d_emb);
  m.vocab = j.value("vocab", m.vocab);
  m.heads = j.value("heads", m.heads);
  m.d_k = j.value("d_k", m.d_k);
  m.d_v = j.value("d_v", m.d_v);
  if (j.contains("mode")) {
    const std::string mode = j["mode"];
    if (mode == "gpn+m" || mode == "gpnm") {
      m.mode = Mode::kGpnM;
    } else if (mode == "gpn") {
      m.mode = Mode::kGpn;
    } else {
      throw std::invalid_argument("unknown mode: " + mode);
    }
  }
  m.decoder_bias = j.value("decoder_bias", m.decoder_bias);
  m.eps_norm = j.value("eps_norm", m.eps_norm);
  m.bptt_trunc = j.value("bptt_trunc", m.bptt_trunc);
  h.peak_lr = j.value("peak_lr", h.peak_lr);
  h.warmup_steps = j.value("warmup_steps", h.warmup_steps);
  h.total_steps = j.value("total_steps", h.total_steps);
  h.final_lr_fraction = j.value("final_lr_fraction", h.final_lr_fraction);
  h.weight_decay = j.value("weight_decay", h.weight_decay);
  h.beta1 = j.value("beta1", h.beta1);
  h.beta2 = j.value("beta2", h.beta2);
  h.adam_eps = j.value("adam_eps", h.adam_eps);
  h.clip_norm = j.value("clip_norm", h.clip_norm);
  h.batch = j.value("batch", h.batch);
  h.seq_len = j.value("seq_len", h.seq_len);
  h.seed = j.value("seed", h.seed);
  h.val_fraction = j.value("val_fraction", h.val_fraction);
  h.val_interval = j.value("val_interval", h.val_interval);
  h.val_windows = j.value("val_windows", h.val_windows);
}

json to_json(const RunConfig& rc) {
  json j = json::parse(gpn::config_to_json(rc.model));
  const auto& h = rc.hyper;
  j["peak_lr"] = h.peak_lr;
  j["warmup_steps"] = h.warmup_steps;
  j["total_steps"] = h.total_steps;
  j["final_lr_fraction"] = h.final_lr_fraction;
  j["weight_decay"] = h.weight_decay;
  j["beta1"] = h.beta1;
  j["beta2"] = h.beta2;
  j["adam_eps"] = h.adam_eps;
  j["clip_norm"] = h.clip_norm;
  j["batch"] = h.batch;
  j["seq_len"] = h.seq_len;
  j["seed"] = h.seed;
  j["val_fraction"] = h.val_fraction;
  j["val_interval"] = h.val_interval;
  j["val_windows"] = h.val_windows;
  return j;
}

RunConfig load_run_config(const std::string& config_path) {
  RunConfig rc;
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) {
      throw std::runtime_error("cannot open config: " + config_path);
    }
    json j;
    is >> j;
    apply_json(rc, j);
  }
  return rc;
}

gpn::Mode parse_mode(const std::string& mode) {
  if (mode == "gpn+m" || mode == "gpnm") return gpn::Mode::kGpnM;
  if (mode == "gpn") return gpn::Mode::kGpn;
  throw std::invalid_argument("unknown mode: " + mode);
}

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::string>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << header << '\n';
  for (const auto& r : rows) os << r << '\n';
}

std::string row(std::initializer_list<double> vals) {
  std::string out;
  char buf[48];
  bool first = true;
  for (const double v : vals) {
    if (!first) out += ',';
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    out += buf;
    first = false;
  }
  return out;
}

// ------------------------------------------------------------ analyze

int run_analyze(const std::string& ckpt_path, const std::string& corpus_path,
                const std::string& out_dir, const std::string& which,
                double val_fraction, std::size_t n_tokens, std::size_t max_lag,
                std::size_t seq_len) {
  const gpn::Checkpoint ckpt = gpn::load_checkpoint(ckpt_path);
  const gpn::ModelConfig& cfg = ckpt.config;
  const gpn::Corpus corpus = gpn::load_corpus(corpus_path, val_fraction);
  const bool want_geometry = which == "all" || which == "geometry";
  const bool want_mean = which == "all" || which == "mean";
  const bool want_horizons = which == "all" || which == "horizons";

  if (want_horizons && seq_len <= max_lag) {
    std::cerr << "analysis window (" << seq_len
              << ") must exceed the maximum lag (" << max_lag
              << "); pass a larger --analysis-seq-len\n";
    return kExitUsage;
  }
  const std::size_t need = n_tokens + 1;
  if (corpus.val().size() < need) {
    std::cerr << "held-out split has " << corpus.val().size()
              << " bytes; need at least " << need << " for --tokens "
              << n_tokens << "\n";
    return kExitUsage;
  }

  fs::create_directories(out_dir);
  const auto collected =
      gpn::collect_states(ckpt.params, cfg, corpus.val(), n_tokens, seq_len);
  const gpn::StateMatrix& S = collected.states;
  json summary;
  summary["kernel_backend"] = std::string(gpn::kern::backend_name());
  summary["n_states"] = S.n();

  if (want_geometry) {
    const gpn::GeometryReport rep = gpn::geometry_report(S);
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < rep.per_dim_std.size(); ++i) {
      rows.push_back(std::to_string(i) + ',' + row({rep.per_dim_std[i]}));
    }
    write_csv(out_dir + "/geometry.csv", "dim,std", rows);
    rows.clear();
    for (std::size_t i = 0; i < S.d; ++i) {
      for (std::size_t j = i + 1; j < S.d; ++j) {
        rows.push_back(std::to_string(i) + ',' + std::to_string(j) + ',' +
                       row({rep.corr[i * S.d + j]}));
      }
    }
    write_csv(out_dir + "/corr.csv", "i,j,corr", rows);
    rows.clear();
    for (std::size_t i = 0; i < rep.cumvar.size(); ++i) {
      rows.push_back(std::to_string(i + 1) + ',' + row({rep.cumvar[i]}));
    }
    write_csv(out_dir + "/pca.csv", "component,cumvar", rows);

    gpn::svg::Series std_series{"per-dim std", {}, {}, {}};
    for (std::size_t i = 0; i < rep.per_dim_std.size(); ++i) {
      std_series.x.push_back(static_cast<double>(i + 1));
      std_series.y.push_back(rep.per_dim_std[i]);
    }
    gpn::svg::write_lineplot({std_series},
                             {"Sorted per-dimension std", "rank", "std", false},
                             out_dir + "/sorted_std.svg");
    gpn::svg::Series cv{"cumulative variance", {}, {}, {}};
    for (std::size_t i = 0; i < rep.cumvar.size(); ++i) {
      cv.x.push_back(static_cast<double>(i + 1));
      cv.y.push_back(rep.cumvar[i]);
    }
    gpn::svg::write_lineplot({cv},
                             {"PCA cumulative variance", "components",
                              "fraction of variance", false},
                             out_dir + "/pca_cumvar.svg");

    summary["geometry"] = {
        {"mean_abs_offdiag_corr", rep.mean_abs_offdiag},
        {"max_abs_offdiag_corr", rep.max_abs_offdiag},
        {"n_components_90", rep.n_components_90},
        {"n_components_99", rep.n_components_99},
        {"stable_rank_raw", rep.stable_rank_raw},
        {"stable_rank_centered", rep.stable_rank_centered},
        {"participation_ratio", rep.participation_ratio},
        {"mean_state_norm", rep.mean_norm},
        {"std_state_norm", rep.std_norm},
        {"few_rows_warning", rep.few_rows_warning},
    };
    if (rep.few_rows_warning) {
      std::cerr << "warning: fewer state rows than dimensions; PCA statistics "
                   "will be noisy\n";
    }
  }

  if (want_mean) {
    const std::vector<double> unigram =
        gpn::unigram_counts(corpus.train(), cfg.vocab);
    const gpn::MeanDirectionReport rep =
        gpn::mean_direction_report(S, ckpt.params, cfg, unigram);
    // ranks of each token in the training unigram (1 = most frequent)
    std::vector<std::size_t> order(cfg.vocab);
    for (std::size_t i = 0; i < cfg.vocab; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return unigram[a] > unigram[b];
    });
    std::vector<std::size_t> rank(cfg.vocab);
    for (std::size_t i = 0; i < cfg.vocab; ++i) rank[order[i]] = i + 1;
    std::vector<std::string> rows;
    for (std::size_t v = 0; v < cfg.vocab; ++v) {
      rows.push_back(std::to_string(v) + ',' + row({rep.logits[v]}) + ',' +
                     std::to_string(rank[v]));
    }
    write_csv(out_dir + "/mean_direction.csv", "token_id,logit,unigram_rank",
              rows);
    json jb = json::array();
    for (const double c : rep.batch_cosines) jb.push_back(c);
    json jr = json::array();
    for (const auto& [k, c] : rep.running_cosine) jr.push_back({{"k", k}, {"cos", c}});
    json jt = json::array();
    for (const std::size_t t : rep.top_tokens) jt.push_back(t);
    summary["mean_direction"] = {
        {"mean_norm", rep.mean_norm},
        {"norm_ratio", rep.norm_ratio},
        {"spearman_vs_unigram", rep.spearman_rho},
        {"batch_cosines", jb},
        {"running_cosine", jr},
        {"top_tokens", jt},
        {"control_topk_overlap", rep.control_topk_overlap},
        {"control_cosine", rep.control_cosine},
    };
  }

  if (want_horizons) {
    const std::vector<std::size_t> lags = gpn::log_spaced_lags(max_lag);
    const gpn::StateHorizon hz = gpn::centered_cosine_curve(S, lags);
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < lags.size(); ++i) {
      rows.push_back(std::to_string(lags[i]) + ',' +
                     row({hz.raw[i], hz.centered[i]}));
    }
    write_csv(out_dir + "/horizons_state.csv", "lag,raw,centered", rows);
    gpn::svg::Series raw{"raw", {}, {}, {}};
    gpn::svg::Series cen{"centered", {}, {}, {}};
    for (std::size_t i = 0; i < lags.size(); ++i) {
      raw.x.push_back(static_cast<double>(lags[i]));
      raw.y.push_back(hz.raw[i]);
      cen.x.push_back(static_cast<double>(lags[i]));
      cen.y.push_back(hz.centered[i]);
    }
    gpn::svg::write_lineplot(
        {raw, cen}, {"State cosine vs lag", "lag", "cosine", true},
        out_dir + "/state_cosine.svg");
    summary["state_horizon_degenerate"] = hz.degenerate;

    if (cfg.mode == gpn::Mode::kGpnM) {
      const gpn::MemoryHorizon mh =
          gpn::retention_curves(collected.log, lags, /*pool_threshold=*/4.0);
      rows.clear();
      for (std::size_t i = 0; i < lags.size(); ++i) {
        for (std::size_t h = 0; h < cfg.heads; ++h) {
          rows.push_back(std::to_string(lags[i]) + ',' + std::to_string(h) +
                         ',' + row({mh.retention[h][i]}));
        }
      }
      write_csv(out_dir + "/horizons_memory.csv", "lag,head,retention", rows);
      rows.clear();
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        rows.push_back(std::to_string(h) + ',' + row({mh.half_life[h]}) + ',' +
                       (mh.fast_pool[h] ? "fast" : "slow"));
      }
      write_csv(out_dir + "/halflives.csv", "head,k_1e,pool", rows);

      std::vector<gpn::svg::Series> rs;
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        gpn::svg::Series s{
            "head " + std::to_string(h) + (mh.fast_pool[h] ? " (fast)" : " (slow)"),
            {}, {}, {}};
        std::size_t mark = lags.size();
        for (std::size_t i = 0; i < lags.size(); ++i) {
          s.x.push_back(static_cast<double>(lags[i]));
          s.y.push_back(mh.retention[h][i]);
          if (mark == lags.size() && mh.retention[h][i] <= std::exp(-1.0)) {
            mark = i;
          }
        }
        if (mark < lags.size()) s.marks.push_back(mark);
        rs.push_back(std::move(s));
      }
      gpn::svg::write_lineplot(
          rs, {"Per-head retention", "lag", "retention", true},
          out_dir + "/retention.svg");
      json jh = json::array();
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        jh.push_back({{"head", h},
                      {"k_1e", std::isfinite(mh.half_life[h])
                                   ? json(mh.half_life[h])
                                   : json("inf")},
                      {"pool", mh.fast_pool[h] ? "fast" : "slow"}});
      }
      summary["half_lives"] = jh;
    }
  }

  {
    std::ofstream os(out_dir + "/analysis_summary.json");
    os << summary.dump(2) << '\n';
  }
  write_manifest(out_dir);
  std::cout << summary.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gpn: grounded prediction network trainer and analyzer"};
  app.require_subcommand(1);

  std::string config_path, corpus_path, out_dir = "out", ckpt_path, mode_str;
  std::uint64_t seed = 0;
  bool have_seed = false;

  // --- train
  auto* train = app.add_subcommand("train", "train a model");
  std::string resume_path;
  std::size_t steps_override = 0;
  train->add_option("--config", config_path, "flat JSON config");
  train->add_option("--corpus", corpus_path, "byte corpus")->required();
  train->add_option("--out", out_dir, "output directory")->capture_default_str();
  train->add_option("--mode", mode_str, "gpn or gpn+m");
  train->add_option("--steps", steps_override, "override total_steps");
  train->add_option("--resume", resume_path, "checkpoint to resume from");
  auto* seed_opt = train->add_option("--seed", seed, "training seed");

  // --- eval
  auto* eval = app.add_subcommand("eval", "evaluate perplexity");
  std::string split = "all";
  double val_fraction = 0.1;
  std::size_t eval_seq_len = 0;
  eval->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  eval->add_option("--corpus", corpus_path, "byte corpus")->required();
  eval->add_option("--out", out_dir, "output directory (optional)");
  eval->add_option("--split", split, "all, val or train")
      ->check(CLI::IsMember({"all", "val", "train"}))
      ->capture_default_str();
  eval->add_option("--val-fraction", val_fraction, "validation tail fraction")
      ->capture_default_str();
  eval->add_option("--seq-len", eval_seq_len, "evaluation window (default 256)");

  // --- analyze
  auto* analyze = app.add_subcommand("analyze", "state and memory analyses");
  std::string which = "all";
  std::size_t n_tokens = 16384, max_lag = 1024, analysis_seq_len = 2048;
  analyze->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  analyze->add_option("--corpus", corpus_path, "byte corpus")->required();
  analyze->add_option("--out", out_dir, "output directory")->capture_default_str();
  analyze->add_option("--which", which, "geometry, mean, horizons or all")
      ->check(CLI::IsMember({"geometry", "mean", "horizons", "all"}))
      ->capture_default_str();
  analyze->add_option("--val-fraction", val_fraction, "held-out tail fraction")
      ->capture_default_str();
  analyze->add_option("--tokens", n_tokens, "states to collect")
      ->capture_default_str();
  analyze->add_option("--max-lag", max_lag, "largest horizon lag")
      ->capture_default_str();
  analyze->add_option("--analysis-seq-len", analysis_seq_len,
                      "window length for collection")
      ->capture_default_str();

  // --- gen
  auto* gen = app.add_subcommand("gen", "synthetic associative-recall data");
  std::size_t pairs = 8, key_vocab = 64, val_vocab = 64, count = 1000,
              gen_vocab = 256;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", out_dir, "output directory")->capture_default_str();
  gen->add_option("--pairs", pairs, "key/value pairs per sequence")
      ->capture_default_str();
  gen->add_option("--key-vocab", key_vocab, "distinct keys")->capture_default_str();
  gen->add_option("--val-vocab", val_vocab, "distinct values")->capture_default_str();
  gen->add_option("--count", count, "number of sequences")->capture_default_str();
  gen->add_option("--vocab", gen_vocab, "model vocabulary size")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "dataset seed")->capture_default_str();

  // --- inspect
  auto* inspect = app.add_subcommand("inspect", "print checkpoint contents");
  inspect->add_option("--ckpt", ckpt_path, "checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  have_seed = seed_opt->count() > 0;

  try {
    if (train->parsed()) {
      RunConfig rc = load_run_config(config_path);
      if (!mode_str.empty()) rc.model.mode = parse_mode(mode_str);
      if (steps_override > 0) rc.hyper.total_steps = steps_override;
      if (have_seed) rc.hyper.seed = seed;
      fs::create_directories(out_dir);
      {
        std::ofstream os(out_dir + "/resolved_config.json");
        os << to_json(rc).dump(2) << '\n';
      }
      const gpn::Corpus corpus =
          gpn::load_corpus(corpus_path, rc.hyper.val_fraction);
      std::optional<std::string> resume;
      if (!resume_path.empty()) resume = resume_path;
      const gpn::TrainResult res =
          gpn::train_loop(rc.model, rc.hyper, corpus, out_dir, resume);
      write_manifest(out_dir);
      std::cout << "final step " << res.metrics.back().step << ", train CE "
                << res.metrics.back().train_ce << ", checkpoint "
                << res.final_checkpoint << "\n";
      return 0;
    }

    if (eval->parsed()) {
      const gpn::Checkpoint ckpt = gpn::load_checkpoint(ckpt_path);
      const gpn::Corpus corpus = gpn::load_corpus(
          corpus_path, split == "all" ? 0.0 : val_fraction);
      const auto data = split == "val" ? corpus.val()
                        : split == "train" ? corpus.train()
                                           : std::span<const std::uint8_t>(
                                                 corpus.bytes);
      const std::size_t seq_len = eval_seq_len ? eval_seq_len : 256;
      const gpn::EvalResult r =
          gpn::evaluate_ppl(ckpt.params, ckpt.config, data, seq_len);
      std::printf("positions %zu  mean_ce %.9g  ppl %.9g  bits_per_byte %.9g\n",
                  r.positions, r.mean_ce, r.ppl, r.bits_per_byte);
      if (!out_dir.empty() && out_dir != "out") {
        fs::create_directories(out_dir);
        write_csv(out_dir + "/eval.csv", "positions,mean_ce,ppl,bits_per_byte",
                  {std::to_string(r.positions) + ',' +
                   row({r.mean_ce, r.ppl, r.bits_per_byte})});
        write_manifest(out_dir);
      }
      return 0;
    }

    if (analyze->parsed()) {
      return run_analyze(ckpt_path, corpus_path, out_dir, which, val_fraction,
                         n_tokens, max_lag, analysis_seq_len);
    }

    if (gen->parsed()) {
      const gpn::RecallSet set = gpn::gen_assoc_recall(
          pairs, key_vocab, val_vocab, count, gen_vocab, gen_seed);
      gpn::write_recall_files(set, out_dir);
      write_manifest(out_dir);
      std::cout << "wrote " << set.seq_count << " sequences of length "
                << set.seq_len << " to " << out_dir << "\n";
      return 0;
    }

    if (inspect->parsed()) {
      const gpn::Checkpoint ckpt = gpn::load_checkpoint(ckpt_path);
      std::cout << "magic GPN1, version 1\n";
      std::cout << "step " << ckpt.step << ", optimizer "
                << (ckpt.has_optimizer ? "present" : "absent") << "\n";
      std::cout << "config: " << gpn::config_to_json(ckpt.config) << "\n";
      std::cout << "tensors:\n";
      ckpt.params.for_each(
          [&](const char* name, const gpn::Tensor<float>& t, bool) {
            std::cout << "  " << name << " [";
            for (std::uint8_t i = 0; i < t.rank; ++i) {
              std::cout << (i ? "x" : "") << t.dims[i];
            }
            std::cout << "] " << t.numel() << "\n";
          });
      std::cout << "total parameters: " << gpn::count_params(ckpt.config)
                << "\n";
      return 0;
    }
  } catch (const gpn::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitIo;
  } catch (const gpn::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid arguments: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}
