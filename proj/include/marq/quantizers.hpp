#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marq/feature_cache.hpp"
#include "marq/features.hpp"

namespace marq {

// Frozen random-projection tokenizer head. The projection (input_dims x
// proj_dims, standard normal) and the codewords (num_codewords x proj_dims,
// uniform(-1, 1) then L2-normalized) are regenerated bit-exactly from
// (seed, shapes).
struct Codebook {
  std::uint64_t seed = 0;
  std::size_t input_dims = 0;
  std::size_t proj_dims = 0;
  std::size_t num_codewords = 0;
  std::vector<double> projection;    // row-major input_dims x proj_dims
  std::vector<double> codewords;     // row-major num_codewords x proj_dims
  std::vector<double> projection_t;  // proj_dims x input_dims, for contiguous dots

  std::span<const double> codeword(std::size_t k) const {
    return {codewords.data() + k * proj_dims, proj_dims};
  }
};

Codebook build_codebook(std::uint64_t seed, std::size_t input_dims, std::size_t proj_dims,
                        std::size_t num_codewords);

// 40-byte serialized form: seed, input_dims, proj_dims, num_codewords,
// fsq_levels (0 for nearest-neighbour heads), each u64 little-endian.
struct CodebookSpec {
  std::uint64_t seed = 0;
  std::uint64_t input_dims = 0;
  std::uint64_t proj_dims = 0;
  std::uint64_t num_codewords = 0;
  std::uint64_t fsq_levels = 0;

  std::array<std::uint8_t, 40> encode() const;
  static CodebookSpec decode(std::span<const std::uint8_t> bytes);
  friend bool operator==(const CodebookSpec&, const CodebookSpec&) = default;
};

// z = projection^T . x_hat, x_hat the L2-normalized frame when normalize_input.
// A zero-norm frame is left unnormalized.
std::vector<double> project_frame(std::span<const float> frame, const Codebook& cb,
                                  bool normalize_input);

// Nearest codeword to the L2-normalized projection; ties go to the lowest index.
std::vector<std::int32_t> tokenize(const FeatureMatrix& feat, const Codebook& cb,
                                   bool normalize_input = true);

struct FsqConfig {
  std::size_t channels = 5;
  std::size_t levels = 6;

  int half() const { return static_cast<int>(levels / 2); }
  // Attainable integer values per channel: 2 * floor(L/2) + 1.
  std::size_t values_per_channel() const { return 2 * (levels / 2) + 1; }
  std::uint64_t vocab() const;
  void validate() const;
};

struct FsqCode {
  std::vector<int> code;
  std::uint64_t index = 0;
};

// code[i] = round(floor(L/2) * tanh(z[i])) (halves away from zero);
// index = sum_i (code[i] + floor(L/2)) * (2 floor(L/2) + 1)^i.
FsqCode fsq_quantize(std::span<const double> z, const FsqConfig& cfg);
std::uint64_t fsq_index(std::span<const int> code, const FsqConfig& cfg);
std::vector<int> fsq_decode(std::uint64_t index, const FsqConfig& cfg);

// label[t] = fsq_quantize(projection^T . x_hat_t).index; needs proj_dims == channels.
std::vector<std::int32_t> fsq_tokenize(const FeatureMatrix& feat, const Codebook& cb,
                                       const FsqConfig& cfg, bool normalize_input = true);

struct QuantizerHead {
  std::string feature_name;
  Codebook codebook;
  std::optional<FsqConfig> fsq;

  std::uint64_t vocab() const { return fsq ? fsq->vocab() : codebook.num_codewords; }
  std::vector<std::int32_t> tokenize(const FeatureMatrix& feat, bool normalize_input) const;
};

struct QuantizerBank {
  std::vector<QuantizerHead> heads;
  Rational frame_rate{125, 8};
  bool normalize_input = true;

  // Head seeds pairwise distinct and at least one head.
  void validate() const;
  std::vector<std::uint64_t> vocab_sizes() const;
};

struct TargetTensor {
  std::size_t frames = 0;
  std::size_t heads = 0;
  std::vector<std::int32_t> labels;  // frames x heads
  std::vector<std::uint64_t> head_vocab_sizes;

  std::int32_t at(std::size_t t, std::size_t h) const { return labels[t * heads + h]; }
  std::int32_t& at(std::size_t t, std::size_t h) { return labels[t * heads + h]; }
  TargetTensor slice(std::size_t begin, std::size_t count) const;
  // Checks 0 <= label < vocab for every entry.
  void validate() const;

  friend bool operator==(const TargetTensor&, const TargetTensor&) = default;
};

// Column h = head h's labels on its feature; features must already share the
// bank frame rate and may differ by at most one frame (truncated to the shortest).
TargetTensor tokenize_multi(const std::map<std::string, FeatureMatrix>& feats,
                            const QuantizerBank& bank);

// Integer-payload MARQFC01 record (feature_name "tokens", dims = heads).
FeatureCacheRecord to_record(const TargetTensor& targets, const std::string& clip_id,
                             Rational frame_rate);
TargetTensor targets_from_record(const FeatureCacheRecord& record,
                                 std::vector<std::uint64_t> vocab_sizes);

struct HeadStats {
  std::uint64_t vocab = 0;
  std::uint64_t frames = 0;
  std::uint64_t distinct = 0;
  double usage_fraction = 0.0;
  double perplexity = 0.0;
  std::vector<std::uint64_t> histogram;
};

// Usage = distinct labels / vocab; perplexity = exp(entropy of the label histogram).
std::vector<HeadStats> codebook_stats(std::span<const TargetTensor> corpus);
std::vector<HeadStats> codebook_stats(const TargetTensor& labels);

}  // namespace marq
