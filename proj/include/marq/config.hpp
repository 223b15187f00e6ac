#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "marq/encoder.hpp"
#include "marq/features.hpp"
#include "marq/masking.hpp"
#include "marq/optimizer.hpp"
#include "marq/probes.hpp"
#include "marq/quantizers.hpp"

namespace marq {

// How target features are conditioned before the random projection.
// global: per-dimension standardization fitted on the tokenized corpus.
// frame_l2: each frame scaled to unit length. none: raw values.
enum class Normalization { global, frame_l2, none };

struct HeadSpec {
  std::string feature = "mel";  // mel | cqt | audio | enc
  std::uint64_t codewords = 8192;
  bool fsq = false;
  FsqConfig fsq_config;
};

struct QuantizerSettings {
  std::vector<HeadSpec> heads{HeadSpec{}};
  std::size_t proj_dims = 16;
  Normalization normalization = Normalization::frame_l2;
};

struct MaskSettings {
  double chunk_seconds = 0.4;
  double fraction = 0.6;
  MaskStrategy strategy = MaskStrategy::gaussian_noise;
  double noise_std = 1.0;
};

struct PipelineConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::uint32_t sample_rate = 16000;
  Rational frame_rate{125, 8};
  std::string input_feature = "mel";
  MelConfig mel;
  CqtConfig cqt;
  PatchConfig audio_patches;
  std::string enc_cache;  // MARQFC01 file holding "enc" records
  std::size_t enc_dims = 128;
  QuantizerSettings quantizer;
  MaskSettings masking;
  EncoderConfig encoder;
  TrainConfig train;
  ProbeConfig probe;

  // Fills encoder input dims and vocabularies from the feature and
  // quantizer settings, then checks every section.
  void resolve();
  // Feature names the pipeline needs: the input and every target.
  std::vector<std::string> feature_names() const;
};

std::vector<std::string> preset_names();
// Throws Errc::usage for unknown names.
PipelineConfig preset_config(const std::string& name);

// Overlays keys from a JSON object onto a config. Unknown keys are errors.
void apply_overrides(PipelineConfig& cfg, const nlohmann::json& overrides);
// Loads a TOML file. The `preset` key (default "desk") selects the base.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config_toml(const std::string& text);
// The TOML document as JSON, before presets and validation.
nlohmann::json load_config_json(const std::filesystem::path& path);
nlohmann::json toml_text_to_json(const std::string& text);

// Every field, defaults materialized.
nlohmann::json to_json(const PipelineConfig& cfg);
PipelineConfig config_from_json(const nlohmann::json& j);

// Dimensionality of a feature under the current config.
std::size_t feature_dims(const PipelineConfig& cfg, const std::string& feature);

}  // namespace marq
