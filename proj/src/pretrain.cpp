#include "marq/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "marq/error.hpp"
#include "marq/masking.hpp"
#include "marq/parallel.hpp"
#include "marq/rng.hpp"

namespace marq {

namespace {

// Re-raises an error with the clip named, keeping its category.
template <typename Fn>
auto for_clip(const std::string& clip_id, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    fail(e.code(), "clip '" + clip_id + "': " + e.what());
  }
}

constexpr double kEmaDecay = 0.98;

}  // namespace

FeatureMatrix extract_feature(const std::string& name, const AudioBuffer& audio, const PipelineConfig& cfg) {
  FeatureMatrix native;
  if (name == "mel") {
    native = mel_spectrogram(audio, cfg.mel);
  } else if (name == "cqt") {
    native = cqt(audio, cfg.cqt);
  } else if (name == "audio") {
    native = waveform_patches(audio, cfg.audio_patches);
  } else if (name == "enc") {
    fail(Errc::not_found, "feature 'enc' is only read from an external cache (set enc_cache)");
  } else {
    fail(Errc::invalid_argument, "unknown feature '" + name + "'");
  }
  return resample_frames(native, cfg.frame_rate);
}

void align_frames(std::map<std::string, FeatureMatrix>& feats) {
  std::size_t lo = SIZE_MAX, hi = 0;
  for (const auto& [n, f] : feats) {
    lo = std::min(lo, f.frames);
    hi = std::max(hi, f.frames);
  }
  require(hi - lo <= 2, Errc::dimension_mismatch,
          "feature frame counts diverge by " + std::to_string(hi - lo) + " frames");
  for (auto& [n, f] : feats) {
    if (f.frames > lo) f = f.slice(0, lo);
  }
}

std::map<std::string, FeatureMatrix> clip_features(const ManifestEntry& entry, const PipelineConfig& cfg,
                                                   const FeatureCache* external) {
  return clip_features(entry, cfg, external, cfg.feature_names());
}

std::map<std::string, FeatureMatrix> clip_features(const ManifestEntry& entry, const PipelineConfig& cfg,
                                                   const FeatureCache* external,
                                                   const std::vector<std::string>& names) {
  return for_clip(entry.clip_id, [&] {
    std::map<std::string, FeatureMatrix> out;
    std::optional<AudioBuffer> audio;
    for (const auto& name : names) {
      const FeatureCacheRecord* rec = external ? external->find(entry.clip_id, name) : nullptr;
      FeatureMatrix feat;
      if (rec) {
        feat = resample_frames(from_record(*rec), cfg.frame_rate);
      } else {
        if (!audio) audio = load_audio(entry.audio_path, cfg.sample_rate);
        feat = extract_feature(name, *audio, cfg);
      }
      require(feat.dims == feature_dims(cfg, name), Errc::dimension_mismatch,
              "feature '" + name + "' has " + std::to_string(feat.dims) + " dims, config expects " +
                  std::to_string(feature_dims(cfg, name)));
      require(feat.all_finite(), Errc::numeric, "feature '" + name + "' has non-finite values");
      out.emplace(name, std::move(feat));
    }
    align_frames(out);
    return out;
  });
}

QuantizerBank build_bank(const PipelineConfig& cfg) {
  QuantizerBank bank;
  bank.frame_rate = cfg.frame_rate;
  bank.normalize_input = cfg.quantizer.normalization != Normalization::none;
  for (std::size_t i = 0; i < cfg.quantizer.heads.size(); ++i) {
    const HeadSpec& spec = cfg.quantizer.heads[i];
    QuantizerHead head;
    head.feature_name = spec.feature;
    const std::uint64_t seed = derive_seed(cfg.seed, "codebook", i);
    const std::size_t dims = feature_dims(cfg, spec.feature);
    if (spec.fsq) {
      head.codebook = build_codebook(seed, dims, spec.fsq_config.channels, 1);
      head.fsq = spec.fsq_config;
    } else {
      head.codebook = build_codebook(seed, dims, cfg.quantizer.proj_dims, spec.codewords);
    }
    bank.heads.push_back(std::move(head));
  }
  bank.validate();
  return bank;
}

TargetNorm TargetNorm::fit(const std::vector<std::map<std::string, FeatureMatrix>>& corpus,
                           const PipelineConfig& cfg) {
  TargetNorm norm;
  if (cfg.quantizer.normalization != Normalization::global) return norm;
  require(!corpus.empty(), Errc::invalid_argument, "cannot fit target statistics on an empty corpus");
  for (const auto& head : cfg.quantizer.heads) {
    if (norm.per_feature.count(head.feature)) continue;
    std::vector<FeatureMatrix> mats;
    for (const auto& clip : corpus) mats.push_back(clip.at(head.feature));
    norm.per_feature.emplace(head.feature, Standardizer::fit(mats));
  }
  return norm;
}

std::map<std::string, FeatureMatrix> TargetNorm::apply(const std::map<std::string, FeatureMatrix>& feats) const {
  std::map<std::string, FeatureMatrix> out;
  for (const auto& [name, feat] : feats) {
    const auto it = per_feature.find(name);
    out.emplace(name, it == per_feature.end() ? feat : it->second.apply(feat));
  }
  return out;
}

std::vector<const PreparedClip*> Corpus::split(Split which) const {
  std::vector<const PreparedClip*> out;
  for (const auto& c : clips) {
    if (c.split == which) out.push_back(&c);
  }
  return out;
}

Corpus prepare_corpus(const DatasetManifest& manifest, const PipelineConfig& cfg, std::size_t jobs,
                      const FeatureCache* external, const Standardizer* input_norm) {
  require(!manifest.split(Split::train).empty(), Errc::invalid_argument, "manifest has no train clips");
  const auto& entries = manifest.entries;
  std::vector<std::map<std::string, FeatureMatrix>> feats(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) { feats[i] = clip_features(entries[i], cfg, external); });

  std::vector<std::map<std::string, FeatureMatrix>> train_feats;
  std::vector<FeatureMatrix> train_inputs;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split != Split::train) continue;
    train_feats.push_back(feats[i]);
    train_inputs.push_back(feats[i].at(cfg.input_feature));
  }
  const TargetNorm target_norm = TargetNorm::fit(train_feats, cfg);
  const QuantizerBank bank = build_bank(cfg);

  Corpus corpus;
  corpus.input_norm = input_norm ? *input_norm : Standardizer::fit(train_inputs);
  corpus.clips.resize(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) {
    for_clip(entries[i].clip_id, [&] {
      PreparedClip& c = corpus.clips[i];
      c.clip_id = entries[i].clip_id;
      c.split = entries[i].split;
      c.targets = tokenize_multi(target_norm.apply(feats[i]), bank);
      c.input = corpus.input_norm.apply(feats[i].at(cfg.input_feature));
      if (c.input.frames > c.targets.frames) c.input = c.input.slice(0, c.targets.frames);
    });
  });
  return corpus;
}

TrainState init_state(const PipelineConfig& cfg, const Corpus& corpus) {
  TrainState s;
  s.config = cfg;
  s.config.resolve();
  s.params = EncoderParams::initialize(s.config.encoder, derive_seed(cfg.seed, "encoder"));
  AdamWConfig acfg;
  acfg.weight_decay = cfg.train.weight_decay;
  s.optimizer = AdamW(acfg, s.params.size());
  s.input_norm = corpus.input_norm;
  s.acc_ema.assign(s.config.encoder.vocab_sizes.size(), 0.0);
  return s;
}

nlohmann::json MetricRecord::to_json() const {
  return {{"step", step}, {"lr", lr}, {"loss", loss}, {"acc", acc}, {"acc_mean", acc_mean}};
}

std::vector<TrainExample> assemble_batch(const Corpus& corpus, const PipelineConfig& cfg, std::uint64_t step) {
  const auto train = corpus.split(Split::train);
  require(!train.empty(), Errc::invalid_argument, "corpus has no train clips");
  const auto seg_frames = static_cast<std::size_t>(
      std::max(1.0, std::round(cfg.train.segment_seconds * cfg.frame_rate.value())));
  Rng rng(derive_seed(cfg.seed, "train/batch", step));
  std::vector<TrainExample> batch;
  for (std::size_t b = 0; b < cfg.train.batch_size; ++b) {
    const PreparedClip& clip = *train[rng.below(train.size())];
    const std::size_t frames = std::min(seg_frames, clip.input.frames);
    const std::size_t offset = rng.below(clip.input.frames - frames + 1);
    const std::uint64_t item = step * cfg.train.batch_size + b;
    TrainExample ex;
    ex.mask = make_mask(frames, cfg.frame_rate, derive_seed(cfg.seed, "train/mask", item),
                        cfg.masking.chunk_seconds, cfg.masking.fraction);
    ex.input = apply_mask(clip.input.slice(offset, frames), ex.mask, cfg.masking.strategy,
                          derive_seed(cfg.seed, "train/fill", item), cfg.masking.noise_std);
    ex.targets = clip.targets.slice(offset, frames);
    batch.push_back(std::move(ex));
  }
  return batch;
}

void train_until(TrainState& state, const Corpus& corpus, std::uint64_t stop_step, std::size_t jobs,
                 const std::function<void(const MetricRecord&)>& on_step) {
  const PipelineConfig& cfg = state.config;
  require(stop_step <= cfg.train.steps, Errc::invalid_argument,
          "stop step " + std::to_string(stop_step) + " beyond train.steps " + std::to_string(cfg.train.steps));
  require(stop_step >= state.step, Errc::invalid_argument, "stop step precedes the current step");
  for (std::uint64_t s = state.step + 1; s <= stop_step; ++s) {
    const auto batch = assemble_batch(corpus, cfg, s);
    LossResult r = loss_and_gradient(batch, state.params, cfg.encoder, derive_seed(cfg.seed, "train/dropout", s),
                                     true, true, jobs);
    require(std::isfinite(r.loss), Errc::numeric,
            "non-finite loss at step " + std::to_string(s) + "; lower train.max_lr or enable train.clip_norm");
    if (cfg.train.clip_norm > 0.0) clip_global_norm(r.grad, cfg.train.clip_norm);
    const double lr = lr_at(s, cfg.train);
    state.optimizer.update(state.params.flat(), r.grad, lr);
    state.step = s;
    const bool first = s == 1;
    state.loss_ema = first ? r.loss : kEmaDecay * state.loss_ema + (1.0 - kEmaDecay) * r.loss;
    for (std::size_t h = 0; h < r.head_accuracy.size(); ++h) {
      state.acc_ema[h] = first ? r.head_accuracy[h]
                               : kEmaDecay * state.acc_ema[h] + (1.0 - kEmaDecay) * r.head_accuracy[h];
    }
    if (on_step && s % cfg.train.log_every == 0) {
      MetricRecord rec;
      rec.step = s;
      rec.lr = lr;
      rec.loss = r.loss;
      rec.acc = r.head_accuracy;
      for (double a : rec.acc) rec.acc_mean += a;
      rec.acc_mean /= static_cast<double>(rec.acc.size());
      on_step(rec);
    }
  }
}

ValidationResult validate(const TrainState& state, const Corpus& corpus, Split which, std::size_t jobs) {
  const PipelineConfig& cfg = state.config;
  const auto clips = corpus.split(which);
  require(!clips.empty(), Errc::invalid_argument, std::string("corpus has no ") + to_string(which) + " clips");
  std::vector<TrainExample> batch(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    TrainExample& ex = batch[i];
    ex.mask = make_mask(clips[i]->input.frames, cfg.frame_rate, derive_seed(cfg.seed, "valid/mask", i),
                        cfg.masking.chunk_seconds, cfg.masking.fraction);
    ex.input = apply_mask(clips[i]->input, ex.mask, cfg.masking.strategy, derive_seed(cfg.seed, "valid/fill", i),
                          cfg.masking.noise_std);
    ex.targets = clips[i]->targets;
  }
  const LossResult r = loss_and_gradient(batch, state.params, cfg.encoder, cfg.seed, false, false, jobs);
  ValidationResult v;
  v.head_accuracy = r.head_accuracy;
  for (double a : v.head_accuracy) v.mean_accuracy += a;
  v.mean_accuracy /= static_cast<double>(v.head_accuracy.size());
  v.loss = r.loss;
  v.masked_frames = r.masked_frames;
  v.clips = clips.size();
  return v;
}

ad::Matrix clip_embeddings(const TrainState& state, const FeatureMatrix& standardized_input,
                           std::int64_t layer_index) {
  const auto& enc = state.config.encoder;
  const std::size_t layer = layer_index < 0 ? enc.layers : static_cast<std::size_t>(layer_index);
  return embeddings_for_probe(standardized_input, state.params, enc, layer);
}

}  // namespace marq
