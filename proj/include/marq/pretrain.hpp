#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "marq/audio_io.hpp"
#include "marq/checkpoint.hpp"
#include "marq/config.hpp"
#include "marq/feature_cache.hpp"
#include "marq/quantizers.hpp"

namespace marq {

// Computes one feature at its native rate and resamples it to the pipeline
// rate. "enc" is never computed; it must come from an external cache.
FeatureMatrix extract_feature(const std::string& name, const AudioBuffer& audio, const PipelineConfig& cfg);

// All features the config needs for one clip. `external` supplies "enc" and
// any other precomputed records; missing ones are computed from audio.
// Frame counts are truncated to the shortest feature (at most two frames of
// divergence are tolerated).
std::map<std::string, FeatureMatrix> clip_features(const ManifestEntry& entry, const PipelineConfig& cfg,
                                                   const FeatureCache* external);
std::map<std::string, FeatureMatrix> clip_features(const ManifestEntry& entry, const PipelineConfig& cfg,
                                                   const FeatureCache* external,
                                                   const std::vector<std::string>& names);

// Truncates every feature to the shortest one; more than two frames of
// divergence is an error.
void align_frames(std::map<std::string, FeatureMatrix>& feats);

// Head i draws its codebook from derive_seed(seed, "codebook", i).
QuantizerBank build_bank(const PipelineConfig& cfg);

// Per-feature target conditioning fitted on a corpus (global normalization).
struct TargetNorm {
  std::map<std::string, Standardizer> per_feature;

  static TargetNorm fit(const std::vector<std::map<std::string, FeatureMatrix>>& corpus,
                        const PipelineConfig& cfg);
  std::map<std::string, FeatureMatrix> apply(const std::map<std::string, FeatureMatrix>& feats) const;
};

struct PreparedClip {
  std::string clip_id;
  Split split = Split::train;
  FeatureMatrix input;  // standardized
  TargetTensor targets;
};

struct Corpus {
  std::vector<PreparedClip> clips;
  Standardizer input_norm;

  std::vector<const PreparedClip*> split(Split which) const;
};

// Loads audio, extracts features and tokenizes every clip of the manifest.
// Target statistics are fitted on the train split, as are input statistics
// unless `input_norm` is given.
Corpus prepare_corpus(const DatasetManifest& manifest, const PipelineConfig& cfg, std::size_t jobs,
                      const FeatureCache* external = nullptr, const Standardizer* input_norm = nullptr);

TrainState init_state(const PipelineConfig& cfg, const Corpus& corpus);

struct MetricRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::vector<double> acc;
  double acc_mean = 0.0;

  nlohmann::json to_json() const;
};

// The batch consumed at update `step` (1-based); a pure function of seed,
// step and corpus.
std::vector<TrainExample> assemble_batch(const Corpus& corpus, const PipelineConfig& cfg, std::uint64_t step);

// Runs updates state.step+1 .. stop_step. Aborts on a non-finite loss.
void train_until(TrainState& state, const Corpus& corpus, std::uint64_t stop_step, std::size_t jobs,
                 const std::function<void(const MetricRecord&)>& on_step = {});

struct ValidationResult {
  std::vector<double> head_accuracy;
  double mean_accuracy = 0.0;
  double loss = 0.0;
  std::size_t masked_frames = 0;
  std::size_t clips = 0;
};

// Inference-mode masked prediction over a split with masks drawn from
// derive_seed(seed, "valid/mask", i) for the i-th clip.
ValidationResult validate(const TrainState& state, const Corpus& corpus, Split which, std::size_t jobs);

// Inference-mode embeddings of clean (standardized) inputs. A negative
// layer index selects the last layer.
ad::Matrix clip_embeddings(const TrainState& state, const FeatureMatrix& standardized_input,
                           std::int64_t layer_index);

}  // namespace marq
