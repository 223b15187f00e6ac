#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "marq/config.hpp"
#include "marq/encoder.hpp"
#include "marq/features.hpp"
#include "marq/optimizer.hpp"

namespace marq {

// Everything needed to continue training bit-exactly. Per-step randomness is
// derived from (seed, step), so no generator state is stored.
struct TrainState {
  PipelineConfig config;
  EncoderParams params;
  AdamW optimizer;
  Standardizer input_norm;
  std::uint64_t step = 0;
  double loss_ema = 0.0;
  std::vector<double> acc_ema;  // per head

  friend bool operator==(const TrainState& a, const TrainState& b);
};

// MARQCK01 layout, little-endian:
//   magic "MARQCK01"
//   u64 config_len, config JSON (resolved, defaults materialized)
//   u64 P, P x f64 parameters in layout order
//   u64 D, D x f64 input mean, D x f64 input inverse std
//   u64 step, u64 optimizer step
//   P x f64 first moments, P x f64 second moments
//   f64 loss EMA, u64 H, H x f64 accuracy EMA
inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'R', 'Q', 'C', 'K', '0', '1'};

std::string encode_checkpoint(const TrainState& state);
TrainState decode_checkpoint(const std::string& bytes);

// Writes through a temporary file and a rename.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace marq
