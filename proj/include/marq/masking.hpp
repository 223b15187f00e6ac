#pragma once

#include <cstdint>
#include <vector>

#include "marq/features.hpp"

namespace marq {

struct MaskChunk {
  std::size_t start = 0;
  std::size_t length = 0;
};

// Chunked span mask. The sequence is tiled into ceil(frames / chunk_frames)
// aligned chunks (the last one may be short) and round(fraction * chunks) of
// them are drawn without replacement.
struct MaskPlan {
  std::size_t frames = 0;
  std::size_t chunk_frames = 1;
  double target_fraction = 0.6;
  std::uint64_t rng_seed = 0;
  std::vector<bool> mask;
  std::vector<MaskChunk> chunks;  // selected chunks in ascending order

  std::size_t masked_count() const;
  double masked_fraction() const;
};

// chunk_frames = max(1, round(chunk_seconds * frame_rate)).
std::size_t chunk_frames_for(double chunk_seconds, Rational frame_rate);

MaskPlan make_mask(std::size_t frames, Rational frame_rate, std::uint64_t seed,
                   double chunk_seconds = 0.4, double target_fraction = 0.6);

enum class MaskStrategy { gaussian_noise, waveform_shuffle };

// Masked rows are replaced, unmasked rows are copied bit-for-bit.
// gaussian_noise: i.i.d. N(0, noise_std^2). waveform_shuffle: each masked row
// takes a distinct other row of the input, chosen by a seeded permutation.
FeatureMatrix apply_mask(const FeatureMatrix& feat, const MaskPlan& plan, MaskStrategy strategy,
                         std::uint64_t seed, double noise_std = 1.0);

}  // namespace marq
