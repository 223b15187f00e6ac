#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace marq {

struct AudioBuffer {
  std::vector<float> samples;
  std::uint32_t sample_rate = 0;

  std::size_t size() const { return samples.size(); }
  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

bool supported_sample_rate(std::uint32_t rate);

// Reads a 16-bit PCM or 32-bit float WAV file (plain or WAVE_FORMAT_EXTENSIBLE),
// mean-downmixes to mono and resamples to target_rate.
AudioBuffer load_audio(const std::filesystem::path& path, std::uint32_t target_rate = 16000);

enum class WavEncoding { pcm16, float32 };
// Writes interleaved channels; `channels` must divide samples.size().
void write_wav(const std::filesystem::path& path, std::span<const float> interleaved,
               std::uint32_t sample_rate, std::uint16_t channels = 1,
               WavEncoding encoding = WavEncoding::pcm16);

// Band-limited resampling with a Hann-windowed sinc interpolator.
// Cutoff is 0.95 * min(in, out) / 2 and the kernel spans 32 zero crossings on
// each side of the cutoff, so the passband is flat to within ~0.1 dB up to
// 0.9 * min(in, out) / 2.
std::vector<float> resample(std::span<const float> samples, std::uint32_t from_rate,
                            std::uint32_t to_rate);

enum class Split { train, valid, test };
Split parse_split(const std::string& token);
const char* to_string(Split split);

struct LabelPayload {
  std::vector<std::string> tokens;

  bool empty() const { return tokens.empty(); }
  // Scalar regression target; throws unless exactly one decimal token.
  double scalar() const;
};

struct ManifestEntry {
  std::string clip_id;
  std::filesystem::path audio_path;
  Split split = Split::train;
  LabelPayload labels;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> split(Split which) const;
  const ManifestEntry* find(const std::string& clip_id) const;
};

// CSV with header `clip_id,audio_path,split,labels`. Relative audio paths are
// resolved against the manifest's directory. Labels are `;`-separated tokens.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

}  // namespace marq
