#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "marq/audio_io.hpp"
#include "marq/feature_cache.hpp"
#include "marq/rational.hpp"

namespace marq {

// Time-major matrix of per-frame feature vectors.
struct FeatureMatrix {
  std::string name;
  Rational frame_rate;
  std::size_t frames = 0;
  std::size_t dims = 0;
  std::vector<float> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::string feature_name, Rational rate, std::size_t n_frames, std::size_t n_dims)
      : name(std::move(feature_name)), frame_rate(rate), frames(n_frames), dims(n_dims),
        data(n_frames * n_dims, 0.0f) {}

  std::span<float> row(std::size_t t) { return {data.data() + t * dims, dims}; }
  std::span<const float> row(std::size_t t) const { return {data.data() + t * dims, dims}; }
  float& at(std::size_t t, std::size_t d) { return data[t * dims + d]; }
  float at(std::size_t t, std::size_t d) const { return data[t * dims + d]; }

  bool all_finite() const;
  // Rows [begin, begin + count).
  FeatureMatrix slice(std::size_t begin, std::size_t count) const;

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

FeatureCacheRecord to_record(const FeatureMatrix& feat, const std::string& clip_id);
FeatureMatrix from_record(const FeatureCacheRecord& record);

constexpr double kLogFloor = 1e-5;

struct MelConfig {
  std::size_t n_fft = 1024;
  std::size_t hop = 1024;
  std::size_t n_mels = 64;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = kLogFloor;

  void validate(std::uint32_t sample_rate) const;
};

struct CqtConfig {
  double fmin = 32.703195662574829;  // C1
  std::size_t bins_per_octave = 12;
  std::size_t n_bins = 84;
  std::size_t hop = 1024;
  double log_floor = kLogFloor;

  void validate(std::uint32_t sample_rate) const;
  double center_frequency(std::size_t bin) const;
};

struct PatchConfig {
  std::size_t patch_len = 640;
  std::size_t hop = 640;
};

// Complex STFT, frames x (n_fft / 2 + 1), row-major.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> data;

  std::complex<double> at(std::size_t t, std::size_t k) const { return data[t * bins + k]; }
};

// Periodic Hann window of length n.
std::vector<double> hann_window(std::size_t n);

// Centered frames with reflect padding of n_fft/2 on both sides;
// frames = 1 + samples / hop.
Spectrogram stft(const AudioBuffer& audio, std::size_t n_fft, std::size_t hop);

// Slaney mel scale (linear below 1 kHz, logarithmic above).
double hz_to_mel(double hz);
double mel_to_hz(double mel);
// n_mels x (n_fft/2 + 1) triangular filters, each row normalized to unit sum.
std::vector<std::vector<double>> mel_filterbank(std::uint32_t sample_rate, const MelConfig& cfg);
// Center frequency of each mel filter.
std::vector<double> mel_center_frequencies(const MelConfig& cfg);

// log(filterbank . |STFT|^2 + log_floor); frame_rate = sample_rate / hop.
FeatureMatrix mel_spectrogram(const AudioBuffer& audio, const MelConfig& cfg);

// Direct constant-Q transform: bin k is a Hann-windowed complex kernel of
// length ceil(Q * sample_rate / f_k) centered on the frame, Q = 1/(2^(1/B) - 1).
// Output is log(|X| + log_floor), frames = 1 + samples / hop (zero padded).
FeatureMatrix cqt(const AudioBuffer& audio, const CqtConfig& cfg);

// Row t = samples[t*hop, t*hop + patch_len); frames = (N - patch_len)/hop + 1.
FeatureMatrix waveform_patches(const AudioBuffer& audio, const PatchConfig& cfg);

FeatureMatrix load_external_features(const FeatureCache& cache, const std::string& clip_id,
                                     const std::string& feature_name = "enc");
FeatureMatrix load_external_features(const std::filesystem::path& cache_path,
                                     const std::string& clip_id,
                                     const std::string& feature_name = "enc");

// Nearest-frame resampling: out[t] = in[clamp(round(t * in_rate / target))],
// frames_out = round(frames_in * target / in_rate). Exact rational arithmetic.
FeatureMatrix resample_frames(const FeatureMatrix& feat, Rational target_rate);

// Per-dimension standardization fitted on a corpus.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> inv_std;

  static Standardizer fit(std::span<const FeatureMatrix> corpus, double std_floor = 1e-5);
  FeatureMatrix apply(const FeatureMatrix& feat) const;
  bool empty() const { return mean.empty(); }
};

}  // namespace marq
