#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "marq/audio_io.hpp"
#include "marq/autodiff.hpp"
#include "marq/rng.hpp"

namespace marq::testing {

// Sum of sinusoids with fixed amplitude plus white noise.
std::vector<float> tone_mixture(std::span<const double> freqs, double seconds, std::uint32_t sr,
                                double amplitude, double noise_std, Rng& rng);

// Mixture of three random sinusoids (log-uniform 100 Hz .. 4 kHz) plus noise.
std::vector<float> random_sine_clip(double seconds, std::uint32_t sr, Rng& rng);

// Writes `n_train + n_valid` random sine clips as 16 kHz WAVs plus
// manifest.csv into dir and returns the manifest path.
std::filesystem::path write_sine_corpus(const std::filesystem::path& dir, std::size_t n_train,
                                        std::size_t n_valid, double seconds, std::uint64_t seed);

// Tone clips labelled by pitch class; each clip is a note from `freqs`
// with a random detune, a harmonic and noise.
std::filesystem::path write_tone_corpus(const std::filesystem::path& dir, std::span<const double> freqs,
                                        std::size_t per_class_train, std::size_t per_class_test,
                                        double seconds, std::uint64_t seed);

// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

std::string read_file(const std::filesystem::path& path);

// Exhaustive nearest codeword by squared distance in long double; ties to
// the lowest index. Also returns the gap to the runner-up.
struct NearestResult {
  std::size_t index = 0;
  long double best = 0;
  long double margin = 0;
};
NearestResult brute_force_nearest(std::span<const double> z, std::span<const double> codewords, std::size_t dims);

// Direct O(N^2) real-input DFT power |X_k|^2 for k = 0..N/2.
std::vector<double> direct_dft_power(std::span<const double> x);

// Central finite difference of f at coordinate i of x.
template <typename F>
double central_difference(F&& f, std::vector<double>& x, std::size_t i, double step) {
  const double keep = x[i];
  x[i] = keep + step;
  const double plus = f(x);
  x[i] = keep - step;
  const double minus = f(x);
  x[i] = keep;
  return (plus - minus) / (2.0 * step);
}

}  // namespace marq::testing
