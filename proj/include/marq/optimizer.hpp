#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace marq {

struct TrainConfig {
  std::uint64_t steps = 2000;
  std::uint64_t warmup_steps = 100;
  double max_lr = 1e-4;
  double weight_decay = 1e-2;
  std::size_t batch_size = 8;
  double segment_seconds = 4.0;
  double clip_norm = 0.0;  // global-norm clipping threshold; 0 disables
  std::uint64_t log_every = 1;

  void validate() const;
};

// Linear warm-up to max_lr, then cosine decay to zero at `steps`.
double lr_at(std::uint64_t step, const TrainConfig& cfg);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Adam with decoupled weight decay. `step` counts applied updates.
struct AdamW {
  AdamWConfig cfg;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  AdamW() = default;
  AdamW(AdamWConfig c, std::size_t size) : cfg(c), m(size, 0.0), v(size, 0.0) {}

  void update(std::span<double> params, std::span<const double> grad, double lr);
};

// Scales grad in place so its L2 norm is at most max_norm; returns the
// original norm.
double clip_global_norm(std::span<double> grad, double max_norm);

}  // namespace marq
