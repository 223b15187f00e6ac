#include "marq/optimizer.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "marq/error.hpp"

namespace marq {

void TrainConfig::validate() const {
  require(steps > 0, Errc::invalid_argument, "train.steps must be positive");
  require(warmup_steps < steps, Errc::invalid_argument, "train.warmup_steps must be below train.steps");
  require(max_lr > 0.0 && std::isfinite(max_lr), Errc::invalid_argument, "train.max_lr must be positive");
  require(weight_decay >= 0.0, Errc::invalid_argument, "train.weight_decay must be non-negative");
  require(batch_size > 0, Errc::invalid_argument, "train.batch_size must be positive");
  require(segment_seconds > 0.0, Errc::invalid_argument, "train.segment_seconds must be positive");
  require(clip_norm >= 0.0, Errc::invalid_argument, "train.clip_norm must be non-negative");
  require(log_every > 0, Errc::invalid_argument, "train.log_every must be positive");
}

double lr_at(std::uint64_t step, const TrainConfig& cfg) {
  require(step <= cfg.steps, Errc::invalid_argument,
          "step " + std::to_string(step) + " beyond schedule of " + std::to_string(cfg.steps));
  if (step < cfg.warmup_steps) {
    return cfg.max_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.steps - cfg.warmup_steps);
  return std::max(0.0, cfg.max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

void AdamW::update(std::span<double> params, std::span<const double> grad, double lr) {
  require(params.size() == m.size() && grad.size() == m.size(), Errc::dimension_mismatch,
          "optimizer state size differs from parameter count");
  ++step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    params[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * params[i]);
  }
}

double clip_global_norm(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grad) g *= s;
  }
  return norm;
}

}  // namespace marq
