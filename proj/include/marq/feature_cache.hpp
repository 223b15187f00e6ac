#pragma once

// MARQFC01 feature cache. All integers little-endian.
//
//   magic      8 bytes   "MARQFC01"
//   count      u64       number of records (> 0)
//   meta_len   u32       length of the metadata blob
//   meta       bytes     UTF-8 JSON echo of the producing config (may be empty)
//   count x record:
//     id_len   u16 + clip_id bytes
//     name_len u16 + feature_name bytes
//     dtype    u8        0 = float32, 1 = int32
//     rate_num u64, rate_den u64   frame rate in Hz as a reduced fraction
//     frames   u64, dims u64
//     payload  frames * dims * 4 bytes, row-major (time-major)

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "marq/rational.hpp"

namespace marq {

enum class PayloadType : std::uint8_t { float32 = 0, int32 = 1 };

struct FeatureCacheRecord {
  std::string clip_id;
  std::string feature_name;
  Rational frame_rate;
  std::uint64_t frames = 0;
  std::uint64_t dims = 0;
  PayloadType type = PayloadType::float32;
  std::vector<float> f32;
  std::vector<std::int32_t> i32;

  friend bool operator==(const FeatureCacheRecord&, const FeatureCacheRecord&) = default;
};

struct FeatureCache {
  std::string meta_json;
  std::vector<FeatureCacheRecord> records;

  const FeatureCacheRecord* find(const std::string& clip_id, const std::string& feature_name) const;
  // Replaces a record with the same (clip_id, feature_name) or appends.
  void upsert(FeatureCacheRecord record);
};

inline constexpr char kFeatureCacheMagic[8] = {'M', 'A', 'R', 'Q', 'F', 'C', '0', '1'};

std::string encode_feature_cache(const FeatureCache& cache);
FeatureCache decode_feature_cache(const std::string& bytes);

void write_feature_cache(const FeatureCache& cache, const std::filesystem::path& path);
void write_feature_cache(const std::vector<FeatureCacheRecord>& records,
                         const std::filesystem::path& path);
FeatureCache read_feature_cache(const std::filesystem::path& path);

}  // namespace marq
