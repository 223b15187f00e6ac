#include "marq/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "marq/error.hpp"
#include "marq/rng.hpp"

namespace marq {

std::size_t MaskPlan::masked_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

double MaskPlan::masked_fraction() const {
  return frames == 0 ? 0.0 : static_cast<double>(masked_count()) / static_cast<double>(frames);
}

std::size_t chunk_frames_for(double chunk_seconds, Rational frame_rate) {
  require(chunk_seconds > 0.0, Errc::invalid_argument, "chunk length must be positive");
  const double frames = std::round(chunk_seconds * frame_rate.value());
  return std::max<std::size_t>(1, static_cast<std::size_t>(frames));
}

MaskPlan make_mask(std::size_t frames, Rational frame_rate, std::uint64_t seed,
                   double chunk_seconds, double target_fraction) {
  require(frames >= 1, Errc::invalid_argument, "mask needs at least one frame");
  require(target_fraction > 0.0 && target_fraction < 1.0, Errc::invalid_argument,
          "mask fraction must lie in (0, 1)");
  MaskPlan plan;
  plan.frames = frames;
  plan.chunk_frames = chunk_frames_for(chunk_seconds, frame_rate);
  plan.target_fraction = target_fraction;
  plan.rng_seed = seed;
  plan.mask.assign(frames, false);

  const std::size_t num_chunks = (frames + plan.chunk_frames - 1) / plan.chunk_frames;
  const auto selected = static_cast<std::size_t>(std::round(target_fraction * static_cast<double>(num_chunks)));

  // Partial Fisher-Yates: the first `selected` slots are a uniform subset.
  std::vector<std::size_t> order(num_chunks);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "mask/chunks"));
  for (std::size_t i = 0; i < selected; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(num_chunks - i));
    std::swap(order[i], order[j]);
  }
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(selected));
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t c : chosen) {
    const std::size_t start = c * plan.chunk_frames;
    const std::size_t length = std::min(plan.chunk_frames, frames - start);
    plan.chunks.push_back({start, length});
    std::fill_n(plan.mask.begin() + static_cast<std::ptrdiff_t>(start), length, true);
  }
  return plan;
}

FeatureMatrix apply_mask(const FeatureMatrix& feat, const MaskPlan& plan, MaskStrategy strategy,
                         std::uint64_t seed, double noise_std) {
  require(feat.frames == plan.frames, Errc::dimension_mismatch,
          "mask covers " + std::to_string(plan.frames) + " frames, features have " +
              std::to_string(feat.frames));
  FeatureMatrix out = feat;
  if (strategy == MaskStrategy::gaussian_noise) {
    require(noise_std >= 0.0, Errc::invalid_argument, "noise std must be non-negative");
    Rng rng(derive_seed(seed, "mask/noise"));
    for (std::size_t t = 0; t < feat.frames; ++t) {
      if (!plan.mask[t]) continue;
      for (float& v : out.row(t)) v = static_cast<float>(noise_std * rng.normal());
    }
    return out;
  }

  std::vector<std::size_t> perm(feat.frames);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, "mask/shuffle"));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<bool> used(feat.frames, false);
  std::size_t cursor = 0;
  for (std::size_t t = 0; t < feat.frames; ++t) {
    if (!plan.mask[t]) continue;
    // Next unused source row other than t; falls back to t only for a 1-frame input.
    std::size_t src = t;
    for (std::size_t scan = 0; scan < perm.size(); ++scan) {
      const std::size_t candidate = perm[(cursor + scan) % perm.size()];
      if (!used[candidate] && candidate != t) {
        src = candidate;
        cursor = (cursor + scan + 1) % perm.size();
        break;
      }
    }
    used[src] = true;
    std::copy_n(feat.row(src).begin(), feat.dims, out.row(t).begin());
  }
  return out;
}

}  // namespace marq
