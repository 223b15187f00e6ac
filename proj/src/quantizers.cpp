#include "marq/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "marq/error.hpp"
#include "marq/rng.hpp"
#include "marq/simd.hpp"

namespace marq {

Codebook build_codebook(std::uint64_t seed, std::size_t input_dims, std::size_t proj_dims,
                        std::size_t num_codewords) {
  require(input_dims > 0 && proj_dims > 0 && num_codewords > 0, Errc::invalid_argument,
          "codebook shapes must be positive");
  Codebook cb;
  cb.seed = seed;
  cb.input_dims = input_dims;
  cb.proj_dims = proj_dims;
  cb.num_codewords = num_codewords;

  Rng proj_rng(derive_seed(seed, "rq/projection"));
  cb.projection.resize(input_dims * proj_dims);
  for (double& w : cb.projection) w = proj_rng.normal();
  cb.projection_t.resize(proj_dims * input_dims);
  for (std::size_t i = 0; i < input_dims; ++i) {
    for (std::size_t j = 0; j < proj_dims; ++j) {
      cb.projection_t[j * input_dims + i] = cb.projection[i * proj_dims + j];
    }
  }

  Rng code_rng(derive_seed(seed, "rq/codewords"));
  cb.codewords.resize(num_codewords * proj_dims);
  for (std::size_t k = 0; k < num_codewords; ++k) {
    std::span<double> row(cb.codewords.data() + k * proj_dims, proj_dims);
    double norm_sq = 0.0;
    do {
      norm_sq = 0.0;
      for (double& v : row) {
        v = code_rng.uniform(-1.0, 1.0);
        norm_sq += v * v;
      }
    } while (norm_sq == 0.0);
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& v : row) v *= inv;
  }
  return cb;
}

namespace {

void put_u64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF);
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void normalize(std::span<double> v) {
  const double norm = std::sqrt(simd::dot(v, v));
  if (norm > 0.0) {
    for (double& x : v) x /= norm;
  }
}

}  // namespace

std::array<std::uint8_t, 40> CodebookSpec::encode() const {
  std::array<std::uint8_t, 40> out{};
  put_u64(out.data(), seed);
  put_u64(out.data() + 8, input_dims);
  put_u64(out.data() + 16, proj_dims);
  put_u64(out.data() + 24, num_codewords);
  put_u64(out.data() + 32, fsq_levels);
  return out;
}

CodebookSpec CodebookSpec::decode(std::span<const std::uint8_t> bytes) {
  require(bytes.size() == 40, Errc::format, "codebook spec must be 40 bytes");
  return {get_u64(bytes.data()), get_u64(bytes.data() + 8), get_u64(bytes.data() + 16),
          get_u64(bytes.data() + 24), get_u64(bytes.data() + 32)};
}

std::vector<double> project_frame(std::span<const float> frame, const Codebook& cb,
                                  bool normalize_input) {
  require(frame.size() == cb.input_dims, Errc::dimension_mismatch,
          "frame has " + std::to_string(frame.size()) + " dims, codebook expects " +
              std::to_string(cb.input_dims));
  std::vector<double> x(frame.begin(), frame.end());
  if (normalize_input) normalize(x);
  std::vector<double> z(cb.proj_dims);
  for (std::size_t j = 0; j < cb.proj_dims; ++j) {
    z[j] = simd::dot(x, std::span<const double>(cb.projection_t.data() + j * cb.input_dims, cb.input_dims));
  }
  return z;
}

std::vector<std::int32_t> tokenize(const FeatureMatrix& feat, const Codebook& cb,
                                   bool normalize_input) {
  require(feat.dims == cb.input_dims, Errc::dimension_mismatch,
          "feature '" + feat.name + "' has " + std::to_string(feat.dims) +
              " dims, codebook expects " + std::to_string(cb.input_dims));
  std::vector<std::int32_t> labels(feat.frames);
  for (std::size_t t = 0; t < feat.frames; ++t) {
    auto z = project_frame(feat.row(t), cb, normalize_input);
    normalize(z);
    std::size_t best = 0;
    double best_dist = simd::squared_distance(z, cb.codeword(0));
    for (std::size_t k = 1; k < cb.num_codewords; ++k) {
      const double d = simd::squared_distance(z, cb.codeword(k));
      if (d < best_dist) {
        best_dist = d;
        best = k;
      }
    }
    labels[t] = static_cast<std::int32_t>(best);
  }
  return labels;
}

std::uint64_t FsqConfig::vocab() const {
  std::uint64_t v = 1;
  for (std::size_t i = 0; i < channels; ++i) v *= values_per_channel();
  return v;
}

void FsqConfig::validate() const {
  require(channels >= 1 && levels >= 2, Errc::invalid_argument, "FSQ needs channels >= 1 and levels >= 2");
  require(std::pow(static_cast<double>(values_per_channel()), static_cast<double>(channels)) < 2147483647.0,
          Errc::invalid_argument, "FSQ vocabulary does not fit a 32-bit label");
}

FsqCode fsq_quantize(std::span<const double> z, const FsqConfig& cfg) {
  require(z.size() == cfg.channels, Errc::dimension_mismatch, "FSQ input length != channels");
  const int half = cfg.half();
  FsqCode out;
  out.code.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    require(!std::isnan(z[i]), Errc::numeric, "FSQ input is NaN");
    const double scaled = half * std::tanh(z[i]);
    out.code[i] = std::clamp(static_cast<int>(std::round(scaled)), -half, half);
  }
  out.index = fsq_index(out.code, cfg);
  return out;
}

std::uint64_t fsq_index(std::span<const int> code, const FsqConfig& cfg) {
  require(code.size() == cfg.channels, Errc::dimension_mismatch, "FSQ code length != channels");
  const int half = cfg.half();
  const std::uint64_t base = cfg.values_per_channel();
  std::uint64_t index = 0;
  std::uint64_t place = 1;
  for (int c : code) {
    require(c >= -half && c <= half, Errc::invalid_argument, "FSQ code value out of range");
    index += static_cast<std::uint64_t>(c + half) * place;
    place *= base;
  }
  return index;
}

std::vector<int> fsq_decode(std::uint64_t index, const FsqConfig& cfg) {
  require(index < cfg.vocab(), Errc::invalid_argument, "FSQ index out of range");
  const std::uint64_t base = cfg.values_per_channel();
  std::vector<int> code(cfg.channels);
  for (auto& c : code) {
    c = static_cast<int>(index % base) - cfg.half();
    index /= base;
  }
  return code;
}

std::vector<std::int32_t> fsq_tokenize(const FeatureMatrix& feat, const Codebook& cb,
                                       const FsqConfig& cfg, bool normalize_input) {
  cfg.validate();
  require(cb.proj_dims == cfg.channels, Errc::dimension_mismatch,
          "FSQ head needs proj_dims == channels");
  require(feat.dims == cb.input_dims, Errc::dimension_mismatch,
          "feature '" + feat.name + "' dims differ from the FSQ projection");
  std::vector<std::int32_t> labels(feat.frames);
  for (std::size_t t = 0; t < feat.frames; ++t) {
    const auto z = project_frame(feat.row(t), cb, normalize_input);
    labels[t] = static_cast<std::int32_t>(fsq_quantize(z, cfg).index);
  }
  return labels;
}

std::vector<std::int32_t> QuantizerHead::tokenize(const FeatureMatrix& feat, bool normalize_input) const {
  return fsq ? fsq_tokenize(feat, codebook, *fsq, normalize_input)
             : marq::tokenize(feat, codebook, normalize_input);
}

void QuantizerBank::validate() const {
  require(!heads.empty(), Errc::invalid_argument, "quantizer bank has no heads");
  require(frame_rate.positive(), Errc::invalid_argument, "bank frame rate must be positive");
  std::set<std::uint64_t> seeds;
  for (const auto& h : heads) {
    require(seeds.insert(h.codebook.seed).second, Errc::invalid_argument,
            "quantizer head seeds must be pairwise distinct");
    if (h.fsq) {
      h.fsq->validate();
      require(h.codebook.proj_dims == h.fsq->channels, Errc::invalid_argument,
              "FSQ head needs proj_dims == channels");
    }
  }
}

std::vector<std::uint64_t> QuantizerBank::vocab_sizes() const {
  std::vector<std::uint64_t> v;
  for (const auto& h : heads) v.push_back(h.vocab());
  return v;
}

TargetTensor TargetTensor::slice(std::size_t begin, std::size_t count) const {
  require(begin + count <= frames, Errc::invalid_argument, "target slice out of range");
  TargetTensor out;
  out.frames = count;
  out.heads = heads;
  out.head_vocab_sizes = head_vocab_sizes;
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin * heads),
                    labels.begin() + static_cast<std::ptrdiff_t>((begin + count) * heads));
  return out;
}

void TargetTensor::validate() const {
  require(labels.size() == frames * heads && head_vocab_sizes.size() == heads,
          Errc::dimension_mismatch, "target tensor shape mismatch");
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto v = at(t, h);
      require(v >= 0 && static_cast<std::uint64_t>(v) < head_vocab_sizes[h], Errc::invalid_argument,
              "target label out of vocabulary range");
    }
  }
}

TargetTensor tokenize_multi(const std::map<std::string, FeatureMatrix>& feats,
                            const QuantizerBank& bank) {
  bank.validate();
  std::size_t min_frames = std::numeric_limits<std::size_t>::max();
  std::size_t max_frames = 0;
  for (const auto& head : bank.heads) {
    const auto it = feats.find(head.feature_name);
    require(it != feats.end(), Errc::not_found, "missing feature '" + head.feature_name + "'");
    require(it->second.frame_rate == bank.frame_rate, Errc::invalid_argument,
            "feature '" + head.feature_name + "' at " + it->second.frame_rate.str() +
                " Hz, bank expects " + bank.frame_rate.str() + " Hz");
    min_frames = std::min(min_frames, it->second.frames);
    max_frames = std::max(max_frames, it->second.frames);
  }
  require(max_frames - min_frames <= 1, Errc::dimension_mismatch,
          "feature frame counts diverge by more than one frame");

  TargetTensor out;
  out.frames = min_frames;
  out.heads = bank.heads.size();
  out.head_vocab_sizes = bank.vocab_sizes();
  out.labels.resize(out.frames * out.heads);
  for (std::size_t h = 0; h < bank.heads.size(); ++h) {
    const auto& head = bank.heads[h];
    const FeatureMatrix& feat = feats.at(head.feature_name);
    const auto column = head.tokenize(feat.frames == min_frames ? feat : feat.slice(0, min_frames),
                                      bank.normalize_input);
    for (std::size_t t = 0; t < out.frames; ++t) out.at(t, h) = column[t];
  }
  return out;
}

FeatureCacheRecord to_record(const TargetTensor& targets, const std::string& clip_id,
                             Rational frame_rate) {
  FeatureCacheRecord r;
  r.clip_id = clip_id;
  r.feature_name = "tokens";
  r.frame_rate = frame_rate;
  r.frames = targets.frames;
  r.dims = targets.heads;
  r.type = PayloadType::int32;
  r.i32 = targets.labels;
  return r;
}

TargetTensor targets_from_record(const FeatureCacheRecord& record,
                                 std::vector<std::uint64_t> vocab_sizes) {
  require(record.type == PayloadType::int32, Errc::format, "token record must have an int32 payload");
  require(vocab_sizes.size() == record.dims, Errc::dimension_mismatch,
          "vocabulary list does not match the token record heads");
  TargetTensor t;
  t.frames = record.frames;
  t.heads = record.dims;
  t.labels = record.i32;
  t.head_vocab_sizes = std::move(vocab_sizes);
  t.validate();
  return t;
}

std::vector<HeadStats> codebook_stats(std::span<const TargetTensor> corpus) {
  require(!corpus.empty(), Errc::invalid_argument, "codebook statistics need labels");
  const std::size_t heads = corpus.front().heads;
  std::vector<HeadStats> stats(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    stats[h].vocab = corpus.front().head_vocab_sizes.at(h);
    stats[h].histogram.assign(stats[h].vocab, 0);
  }
  for (const auto& tensor : corpus) {
    require(tensor.heads == heads, Errc::dimension_mismatch, "token tensors disagree on head count");
    tensor.validate();
    for (std::size_t t = 0; t < tensor.frames; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        require(tensor.head_vocab_sizes[h] == stats[h].vocab, Errc::dimension_mismatch,
                "token tensors disagree on vocabulary size");
        ++stats[h].histogram[static_cast<std::size_t>(tensor.at(t, h))];
      }
    }
  }
  for (auto& s : stats) {
    for (auto c : s.histogram) {
      s.frames += c;
      if (c > 0) ++s.distinct;
    }
    require(s.frames > 0, Errc::invalid_argument, "codebook statistics need at least one frame");
    double entropy = 0.0;
    for (auto c : s.histogram) {
      if (c == 0) continue;
      const double p = static_cast<double>(c) / static_cast<double>(s.frames);
      entropy -= p * std::log(p);
    }
    s.usage_fraction = static_cast<double>(s.distinct) / static_cast<double>(s.vocab);
    s.perplexity = std::exp(entropy);
  }
  return stats;
}

std::vector<HeadStats> codebook_stats(const TargetTensor& labels) {
  return codebook_stats(std::span<const TargetTensor>(&labels, 1));
}

}  // namespace marq
