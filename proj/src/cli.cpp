#include "marq/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "marq/checkpoint.hpp"
#include "marq/config.hpp"
#include "marq/error.hpp"
#include "marq/parallel.hpp"
#include "marq/pretrain.hpp"
#include "marq/probes.hpp"
#include "marq/rng.hpp"

namespace marq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  bool force = false;
  std::optional<std::uint64_t> steps;

  std::string manifest;
  std::string out;
  std::string cache;
  std::string tokens;
  std::string checkpoint;
  std::string task;
  std::string metrics;
  std::string embeddings;
  std::string export_embeddings;
  std::string resume;
  std::string split = "valid";
  std::optional<std::uint64_t> stop_at;
  std::optional<std::int64_t> layer;
};

fs::path cache_path(const std::string& given, const char* file) {
  if (!given.empty()) return given;
  const char* dir = std::getenv("MARQ_CACHE_DIR");
  return dir && *dir ? fs::path(dir) / file : fs::path(file);
}

void require_flag(const std::string& value, const char* flag) {
  require(!value.empty(), Errc::usage, std::string("missing required option ") + flag);
}

// Preset from --preset (or the config file), then file overrides, then flags.
PipelineConfig resolve_config(const Options& o) {
  json j = json::object();
  if (!o.config.empty()) j = load_config_json(o.config);
  if (!o.preset.empty()) {
    if (j.contains("preset")) {
      require(j["preset"] == o.preset, Errc::usage,
              "--preset " + o.preset + " conflicts with preset in " + o.config);
    }
    j["preset"] = o.preset;
  }
  PipelineConfig cfg = config_from_json(j);
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) {
    cfg.train.steps = *o.steps;
    cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, *o.steps - (*o.steps > 0 ? 1 : 0));
  }
  cfg.resolve();
  return cfg;
}

std::optional<FeatureCache> maybe_cache(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return read_feature_cache(path);
}

// External records: an explicit features cache plus the configured enc cache.
std::optional<FeatureCache> external_features(const Options& o, const PipelineConfig& cfg) {
  auto ext = maybe_cache(o.cache);
  if (!cfg.enc_cache.empty()) {
    FeatureCache enc = read_feature_cache(cfg.enc_cache);
    if (!ext) {
      ext = std::move(enc);
    } else {
      for (auto& r : enc.records) {
        if (!ext->find(r.clip_id, r.feature_name)) ext->upsert(std::move(r));
      }
    }
  }
  return ext;
}

const FeatureCache* ptr(const std::optional<FeatureCache>& c) { return c ? &*c : nullptr; }

std::string meta(const char* kind, const PipelineConfig& cfg, json extra = json::object()) {
  json m = {{"kind", kind}, {"config", to_json(cfg)}};
  for (auto& [k, v] : extra.items()) m[k] = v;
  return m.dump();
}

int cmd_features(const Options& o, std::ostream& out) {
  require_flag(o.manifest, "--manifest");
  const PipelineConfig cfg = resolve_config(o);
  const DatasetManifest manifest = load_manifest(o.manifest);
  const fs::path path = cache_path(o.out, "features.marqfc");
  FeatureCache cache;
  const bool existed = fs::exists(path);
  if (existed && !o.force) cache = read_feature_cache(path);
  const auto ext = external_features(o, cfg);

  const auto names = cfg.feature_names();
  std::vector<std::vector<std::string>> todo(manifest.entries.size());
  std::size_t pending = 0;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    for (const auto& n : names) {
      if (!cache.find(manifest.entries[i].clip_id, n)) todo[i].push_back(n);
    }
    pending += todo[i].empty() ? 0 : 1;
  }
  if (pending == 0 && existed && !o.force) {
    out << "features up to date: " << path.string() << " (" << cache.records.size() << " records)\n";
    return 0;
  }
  std::vector<std::map<std::string, FeatureMatrix>> computed(manifest.entries.size());
  parallel_for(manifest.entries.size(), o.jobs, [&](std::size_t i) {
    if (!todo[i].empty()) computed[i] = clip_features(manifest.entries[i], cfg, ptr(ext), todo[i]);
  });
  std::size_t written = 0;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    for (const auto& n : todo[i]) {
      cache.upsert(to_record(computed[i].at(n), manifest.entries[i].clip_id));
      ++written;
    }
  }
  cache.meta_json = meta("features", cfg);
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  write_feature_cache(cache, path);
  out << "wrote " << written << " feature records to " << path.string() << "\n";
  return 0;
}

int cmd_tokenize(const Options& o, std::ostream& out) {
  const PipelineConfig cfg = resolve_config(o);
  const fs::path in_path = cache_path(o.cache, "features.marqfc");
  const fs::path out_path = cache_path(o.out, "tokens.marqfc");
  FeatureCache cache = read_feature_cache(in_path);
  if (!cfg.enc_cache.empty()) {
    for (auto& r : read_feature_cache(cfg.enc_cache).records) {
      if (!cache.find(r.clip_id, r.feature_name)) cache.upsert(std::move(r));
    }
  }
  std::vector<std::string> clips;
  for (const auto& r : cache.records) {
    if (std::find(clips.begin(), clips.end(), r.clip_id) == clips.end()) clips.push_back(r.clip_id);
  }
  require(!clips.empty(), Errc::invalid_argument, "feature cache has no records");
  std::vector<std::string> target_names;
  for (const auto& h : cfg.quantizer.heads) {
    if (std::find(target_names.begin(), target_names.end(), h.feature) == target_names.end()) {
      target_names.push_back(h.feature);
    }
  }
  std::vector<std::map<std::string, FeatureMatrix>> feats(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    for (const auto& n : target_names) {
      const auto* rec = cache.find(clips[i], n);
      require(rec != nullptr, Errc::not_found, "clip '" + clips[i] + "': no '" + n + "' record in cache");
      feats[i].emplace(n, resample_frames(from_record(*rec), cfg.frame_rate));
    }
    try {
      align_frames(feats[i]);
    } catch (const Error& e) {
      fail(e.code(), "clip '" + clips[i] + "': " + e.what());
    }
  }
  const TargetNorm norm = TargetNorm::fit(feats, cfg);
  const QuantizerBank bank = build_bank(cfg);
  std::vector<TargetTensor> targets(clips.size());
  parallel_for(clips.size(), o.jobs, [&](std::size_t i) { targets[i] = tokenize_multi(norm.apply(feats[i]), bank); });
  FeatureCache tokens;
  tokens.meta_json = meta("tokens", cfg, {{"vocab_sizes", bank.vocab_sizes()}});
  for (std::size_t i = 0; i < clips.size(); ++i) tokens.records.push_back(to_record(targets[i], clips[i], cfg.frame_rate));
  if (!out_path.parent_path().empty()) fs::create_directories(out_path.parent_path());
  write_feature_cache(tokens, out_path);
  out << "wrote tokens for " << clips.size() << " clips (" << bank.heads.size() << " heads) to "
      << out_path.string() << "\n";
  return 0;
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

int cmd_codebook_stats(const Options& o, std::ostream& out) {
  const fs::path path = cache_path(o.tokens, "tokens.marqfc");
  const FeatureCache cache = read_feature_cache(path);
  std::vector<std::uint64_t> vocab;
  try {
    vocab = json::parse(cache.meta_json).at("vocab_sizes").get<std::vector<std::uint64_t>>();
  } catch (const json::exception&) {
    fail(Errc::format, path.string() + ": token cache metadata lacks vocab_sizes");
  }
  std::vector<TargetTensor> corpus;
  for (const auto& r : cache.records) {
    if (r.feature_name == "tokens") corpus.push_back(targets_from_record(r, vocab));
  }
  require(!corpus.empty(), Errc::invalid_argument, path.string() + ": no token records");
  const auto stats = codebook_stats(corpus);
  double usage = 0.0, perplexity = 0.0;
  for (const auto& s : stats) {
    usage += 100.0 * s.usage_fraction;
    perplexity += s.perplexity;
  }
  usage /= static_cast<double>(stats.size());
  perplexity /= static_cast<double>(stats.size());
  const bool same_vocab = std::all_of(vocab.begin(), vocab.end(), [&](auto v) { return v == vocab.front(); });
  const std::string codewords = same_vocab ? std::to_string(vocab.front()) : std::to_string(vocab.front()) + "+";

  out << std::left << std::setw(6) << "head" << std::right << std::setw(10) << "codewords" << std::setw(10)
      << "used" << std::setw(10) << "usage %" << std::setw(12) << "perplexity" << "\n";
  for (std::size_t h = 0; h < stats.size(); ++h) {
    out << std::left << std::setw(6) << h << std::right << std::setw(10) << stats[h].vocab << std::setw(10)
        << stats[h].distinct << std::setw(10) << fixed(100.0 * stats[h].usage_fraction, 2) << std::setw(12)
        << fixed(stats[h].perplexity, 2) << "\n";
  }
  out << std::left << std::setw(6) << "mean" << std::right << std::setw(10) << codewords << std::setw(10) << ""
      << std::setw(10) << fixed(usage, 2) << std::setw(12) << fixed(perplexity, 2) << "\n";

  std::ostringstream csv;
  csv << "num_codebooks,codewords,usage_pct,perplexity\n"
      << stats.size() << "," << codewords << "," << fixed(usage, 6) << "," << fixed(perplexity, 6) << "\n";
  if (o.out.empty()) {
    out << "\n" << csv.str();
  } else {
    std::ofstream f(o.out, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), Errc::io, "cannot write '" + o.out + "'");
    f << csv.str();
  }
  return 0;
}

int cmd_pretrain(const Options& o, std::ostream& out) {
  require_flag(o.manifest, "--manifest");
  require(o.resume.empty() || (o.config.empty() && o.preset.empty() && !o.seed && !o.steps), Errc::usage,
          "--resume takes its configuration from the checkpoint");
  const DatasetManifest manifest = load_manifest(o.manifest);
  std::optional<TrainState> state;
  PipelineConfig cfg;
  if (!o.resume.empty()) {
    state = load_checkpoint(o.resume);
    cfg = state->config;
  } else {
    cfg = resolve_config(o);
  }
  const auto ext = external_features(o, cfg);
  const Corpus corpus =
      prepare_corpus(manifest, cfg, o.jobs, ptr(ext), state ? &state->input_norm : nullptr);
  if (!state) state = init_state(cfg, corpus);

  const fs::path ckpt = o.out.empty() ? fs::path("checkpoint.marqck") : fs::path(o.out);
  const fs::path metrics = o.metrics.empty() ? fs::path("metrics.jsonl") : fs::path(o.metrics);
  for (const auto& p : {ckpt, metrics}) {
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
  }
  {
    fs::path sidecar = metrics;
    sidecar += ".config.json";
    std::ofstream f(sidecar, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), Errc::io, "cannot write '" + sidecar.string() + "'");
    f << to_json(cfg).dump(2) << "\n";
  }
  std::ofstream log(metrics, std::ios::binary | (o.resume.empty() ? std::ios::trunc : std::ios::app));
  require(static_cast<bool>(log), Errc::io, "cannot write '" + metrics.string() + "'");

  const std::uint64_t stop = o.stop_at.value_or(cfg.train.steps);
  train_until(*state, corpus, stop, o.jobs, [&](const MetricRecord& r) {
    log << r.to_json().dump() << "\n";
    log.flush();
  });
  save_checkpoint(*state, ckpt);
  out << "step " << state->step << "/" << cfg.train.steps << " loss_ema " << fixed(state->loss_ema, 4)
      << " checkpoint " << ckpt.string() << "\n";
  return 0;
}

int cmd_validate(const Options& o, std::ostream& out) {
  require_flag(o.manifest, "--manifest");
  require_flag(o.checkpoint, "--checkpoint");
  const TrainState state = load_checkpoint(o.checkpoint);
  const DatasetManifest manifest = load_manifest(o.manifest);
  const auto ext = external_features(o, state.config);
  const Corpus corpus = prepare_corpus(manifest, state.config, o.jobs, ptr(ext), &state.input_norm);
  const ValidationResult v = validate(state, corpus, parse_split(o.split), o.jobs);
  const json report = {{"split", o.split},
                       {"step", state.step},
                       {"head_accuracy", v.head_accuracy},
                       {"mean_accuracy", v.mean_accuracy},
                       {"loss", v.loss},
                       {"masked_frames", v.masked_frames},
                       {"clips", v.clips},
                       {"config", to_json(state.config)}};
  if (o.out.empty()) {
    out << report.dump(2) << "\n";
  } else {
    std::ofstream f(o.out, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), Errc::io, "cannot write '" + o.out + "'");
    f << report.dump(2) << "\n";
  }
  return 0;
}

int cmd_probe(const Options& o, std::ostream& out) {
  require_flag(o.manifest, "--manifest");
  // Usage errors before any file is read.
  if (!o.task.empty()) parse_task_kind(o.task);
  const DatasetManifest manifest = load_manifest(o.manifest);
  std::map<std::string, ad::Matrix> embeddings;
  Rational rate;
  PipelineConfig cfg;
  std::int64_t layer = -1;

  if (!o.embeddings.empty()) {
    cfg = resolve_config(o);
    const FeatureCache cache = read_feature_cache(o.embeddings);
    bool have_rate = false;
    for (const auto& r : cache.records) {
      if (r.feature_name != "embeddings") continue;
      const FeatureMatrix f = from_record(r);
      ad::Matrix m(f.frames, f.dims);
      std::copy(f.data.begin(), f.data.end(), m.data.begin());
      embeddings.emplace(r.clip_id, std::move(m));
      rate = f.frame_rate;
      have_rate = true;
    }
    require(have_rate, Errc::invalid_argument, o.embeddings + ": no embedding records");
  } else {
    require_flag(o.checkpoint, "--checkpoint");
    const TrainState state = load_checkpoint(o.checkpoint);
    cfg = state.config;
    if (!o.config.empty()) {
      const json j = load_config_json(o.config);
      if (j.contains("probe")) apply_overrides(cfg, json{{"probe", j["probe"]}});
    }
    if (o.seed) cfg.seed = *o.seed;
    layer = o.layer.value_or(cfg.probe.layer_index);
    const auto ext = external_features(o, cfg);
    std::vector<ad::Matrix> embs(manifest.entries.size());
    parallel_for(manifest.entries.size(), o.jobs, [&](std::size_t i) {
      const auto& e = manifest.entries[i];
      auto feats = clip_features(e, cfg, ptr(ext), {cfg.input_feature});
      ad::Matrix m = clip_embeddings(state, state.input_norm.apply(feats.at(cfg.input_feature)), layer);
      // Rounded to the float32 export precision so exported embeddings probe identically.
      for (double& v : m.data) v = static_cast<double>(static_cast<float>(v));
      embs[i] = std::move(m);
    });
    for (std::size_t i = 0; i < embs.size(); ++i) embeddings.emplace(manifest.entries[i].clip_id, std::move(embs[i]));
    rate = cfg.frame_rate;
    if (!o.export_embeddings.empty()) {
      FeatureCache exp;
      exp.meta_json = meta("embeddings", cfg, {{"layer_index", layer}});
      for (const auto& e : manifest.entries) {
        const ad::Matrix& m = embeddings.at(e.clip_id);
        FeatureMatrix f("embeddings", rate, m.rows, m.cols);
        std::transform(m.data.begin(), m.data.end(), f.data.begin(), [](double v) { return static_cast<float>(v); });
        exp.records.push_back(to_record(f, e.clip_id));
      }
      write_feature_cache(exp, o.export_embeddings);
    }
  }
  if (!o.task.empty()) cfg.probe.task = parse_task_kind(o.task);
  if (o.layer) cfg.probe.layer_index = *o.layer;
  const ProbeDataset data = make_probe_dataset(manifest, embeddings, rate, cfg.probe.task);
  const ProbeResult r = train_probe(data, cfg.probe, derive_seed(cfg.seed, "probe"));
  json config = to_json(cfg);
  const json report = {{"task", r.task},
                       {"metric", r.metric},
                       {"value", r.value},
                       {"per_class", r.per_class},
                       {"skipped_classes", r.skipped_classes},
                       {"train_items", r.train_items},
                       {"test_items", r.test_items},
                       {"config", config},
                       {"seed", cfg.seed}};
  if (o.out.empty()) {
    out << report.dump(2) << "\n";
  } else {
    std::ofstream f(o.out, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), Errc::io, "cannot write '" + o.out + "'");
    f << report.dump(2) << "\n";
    out << r.task << " " << r.metric << " " << fixed(r.value, 4) << "\n";
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"marq: masked token prediction pipeline for music audio", "marq"};
  app.require_subcommand(1);
  Options o;
  auto global = [&](CLI::App* a) {
    a->add_option("--config", o.config, "TOML config file");
    a->add_option("--preset", o.preset, "base | multi-codebook | multi-feature | high-rate | high-rate-fsq | desk");
    a->add_option("--seed", o.seed, "master seed");
    a->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
    a->add_flag("--force", o.force, "recompute existing records");
    a->add_option("--cache", o.cache, "feature cache (MARQFC01)");
  };
  auto* features = app.add_subcommand("features", "extract features into a cache");
  global(features);
  features->add_option("--manifest", o.manifest, "dataset manifest CSV");
  features->add_option("--out", o.out, "output cache (default $MARQ_CACHE_DIR/features.marqfc)");

  auto* tokenize = app.add_subcommand("tokenize", "quantize cached features into target tokens");
  global(tokenize);
  tokenize->add_option("--out", o.out, "output token cache (default $MARQ_CACHE_DIR/tokens.marqfc)");

  auto* stats = app.add_subcommand("codebook-stats", "codebook usage and perplexity");
  global(stats);
  stats->add_option("--tokens", o.tokens, "token cache (default $MARQ_CACHE_DIR/tokens.marqfc)");
  stats->add_option("--out", o.out, "CSV output");

  auto* pretrain = app.add_subcommand("pretrain", "masked token prediction pre-training");
  global(pretrain);
  pretrain->add_option("--manifest", o.manifest, "dataset manifest CSV");
  pretrain->add_option("--out", o.out, "checkpoint path (default checkpoint.marqck)");
  pretrain->add_option("--metrics", o.metrics, "metrics JSONL (default metrics.jsonl)");
  pretrain->add_option("--steps", o.steps, "override train.steps");
  pretrain->add_option("--stop-at", o.stop_at, "stop after this update");
  pretrain->add_option("--resume", o.resume, "continue from a checkpoint");

  auto* valid = app.add_subcommand("validate", "masked prediction accuracy on a split");
  global(valid);
  valid->add_option("--manifest", o.manifest, "training manifest CSV");
  valid->add_option("--checkpoint", o.checkpoint, "checkpoint");
  valid->add_option("--split", o.split, "train | valid | test");
  valid->add_option("--out", o.out, "JSON report path");

  auto* probe = app.add_subcommand("probe", "train and score a probe on frozen embeddings");
  global(probe);
  probe->add_option("--manifest", o.manifest, "probe manifest CSV with labels");
  probe->add_option("--checkpoint", o.checkpoint, "checkpoint");
  probe->add_option("--task", o.task, "probe task kind");
  probe->add_option("--layer", o.layer, "encoder layer (-1 = last)");
  probe->add_option("--embeddings", o.embeddings, "probe these exported embeddings instead");
  probe->add_option("--export-embeddings", o.export_embeddings, "write embeddings (MARQFC01)");
  probe->add_option("--out", o.out, "JSON report path");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*features) return cmd_features(o, out);
    if (*tokenize) return cmd_tokenize(o, out);
    if (*stats) return cmd_codebook_stats(o, out);
    if (*pretrain) return cmd_pretrain(o, out);
    if (*valid) return cmd_validate(o, out);
    if (*probe) return cmd_probe(o, out);
  } catch (const Error& e) {
    err << "marq: " << to_string(e.code()) << ": " << e.what() << "\n";
    return e.code() == Errc::usage ? 2 : 1;
  } catch (const std::exception& e) {
    err << "marq: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace marq
