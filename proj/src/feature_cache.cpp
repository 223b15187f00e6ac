#include "marq/feature_cache.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "marq/error.hpp"

namespace marq {
namespace {

class Writer {
 public:
  explicit Writer(std::string& out) : out_(out) {}
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void str16(const std::string& s) {
    require(s.size() <= std::numeric_limits<std::uint16_t>::max(), Errc::invalid_argument,
            "string too long for feature cache");
    uint<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    out_ += s;
  }

 private:
  std::string& out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  std::size_t remaining() const { return in_.size() - pos_; }
  const char* take(std::size_t n) {
    require(n <= remaining(), Errc::format, "truncated feature cache");
    const char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <typename T>
  T uint() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(sizeof(T)));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
    return v;
  }
  std::string str16() {
    const auto n = uint<std::uint16_t>();
    return std::string(take(n), n);
  }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

std::uint64_t element_count(std::uint64_t frames, std::uint64_t dims) {
  require(dims > 0, Errc::invalid_argument, "feature cache record with zero dims");
  require(frames <= std::numeric_limits<std::uint64_t>::max() / 4 / dims, Errc::format,
          "frames x dims overflows");
  return frames * dims;
}

void check_rates(const std::vector<FeatureCacheRecord>& records) {
  std::map<std::string, Rational> rates;
  for (const auto& r : records) {
    auto [it, inserted] = rates.emplace(r.feature_name, r.frame_rate);
    require(inserted || it->second == r.frame_rate, Errc::format,
            "inconsistent frame rate for feature '" + r.feature_name + "'");
  }
}

}  // namespace

const FeatureCacheRecord* FeatureCache::find(const std::string& clip_id,
                                             const std::string& feature_name) const {
  for (const auto& r : records) {
    if (r.clip_id == clip_id && r.feature_name == feature_name) return &r;
  }
  return nullptr;
}

void FeatureCache::upsert(FeatureCacheRecord record) {
  for (auto& r : records) {
    if (r.clip_id == record.clip_id && r.feature_name == record.feature_name) {
      r = std::move(record);
      return;
    }
  }
  records.push_back(std::move(record));
}

std::string encode_feature_cache(const FeatureCache& cache) {
  require(!cache.records.empty(), Errc::invalid_argument, "feature cache needs at least one record");
  check_rates(cache.records);
  std::string out;
  Writer w(out);
  w.bytes(kFeatureCacheMagic, sizeof kFeatureCacheMagic);
  w.uint<std::uint64_t>(cache.records.size());
  require(cache.meta_json.size() <= std::numeric_limits<std::uint32_t>::max(), Errc::invalid_argument,
          "metadata too large");
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(cache.meta_json.size()));
  out += cache.meta_json;
  for (const auto& r : cache.records) {
    const std::uint64_t n = element_count(r.frames, r.dims);
    require(r.frame_rate.positive(), Errc::invalid_argument, "frame rate must be positive");
    w.str16(r.clip_id);
    w.str16(r.feature_name);
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(r.type));
    w.uint<std::uint64_t>(r.frame_rate.num);
    w.uint<std::uint64_t>(r.frame_rate.den);
    w.uint<std::uint64_t>(r.frames);
    w.uint<std::uint64_t>(r.dims);
    if (r.type == PayloadType::float32) {
      require(r.f32.size() == n, Errc::dimension_mismatch, "payload length != frames x dims");
      for (float v : r.f32) w.uint<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
    } else {
      require(r.i32.size() == n, Errc::dimension_mismatch, "payload length != frames x dims");
      for (std::int32_t v : r.i32) w.uint<std::uint32_t>(static_cast<std::uint32_t>(v));
    }
  }
  return out;
}

FeatureCache decode_feature_cache(const std::string& bytes) {
  Reader rd(bytes);
  require(bytes.size() >= sizeof kFeatureCacheMagic &&
              std::memcmp(bytes.data(), kFeatureCacheMagic, sizeof kFeatureCacheMagic) == 0,
          Errc::format, "feature cache magic mismatch");
  rd.take(sizeof kFeatureCacheMagic);
  FeatureCache cache;
  const auto count = rd.uint<std::uint64_t>();
  const auto meta_len = rd.uint<std::uint32_t>();
  cache.meta_json.assign(rd.take(meta_len), meta_len);
  for (std::uint64_t i = 0; i < count; ++i) {
    FeatureCacheRecord r;
    r.clip_id = rd.str16();
    r.feature_name = rd.str16();
    const auto type = rd.uint<std::uint8_t>();
    require(type <= 1, Errc::format, "unknown payload type " + std::to_string(type));
    r.type = static_cast<PayloadType>(type);
    const auto num = rd.uint<std::uint64_t>();
    const auto den = rd.uint<std::uint64_t>();
    require(num > 0 && den > 0, Errc::format, "non-positive frame rate in feature cache");
    r.frame_rate = Rational(num, den);
    r.frames = rd.uint<std::uint64_t>();
    r.dims = rd.uint<std::uint64_t>();
    const std::uint64_t n = element_count(r.frames, r.dims);
    require(n * 4 <= rd.remaining(), Errc::format, "truncated payload for record '" + r.clip_id + "'");
    const auto* p = reinterpret_cast<const unsigned char*>(rd.take(n * 4));
    auto word = [p](std::uint64_t k) {
      return static_cast<std::uint32_t>(p[4 * k]) | (static_cast<std::uint32_t>(p[4 * k + 1]) << 8) |
             (static_cast<std::uint32_t>(p[4 * k + 2]) << 16) |
             (static_cast<std::uint32_t>(p[4 * k + 3]) << 24);
    };
    if (r.type == PayloadType::float32) {
      r.f32.resize(n);
      for (std::uint64_t k = 0; k < n; ++k) r.f32[k] = std::bit_cast<float>(word(k));
    } else {
      r.i32.resize(n);
      for (std::uint64_t k = 0; k < n; ++k) r.i32[k] = static_cast<std::int32_t>(word(k));
    }
    cache.records.push_back(std::move(r));
  }
  require(rd.remaining() == 0, Errc::format, "trailing bytes after feature cache records");
  check_rates(cache.records);
  return cache;
}

void write_feature_cache(const FeatureCache& cache, const std::filesystem::path& path) {
  const std::string bytes = encode_feature_cache(cache);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), Errc::io, "short write to " + path.string());
}

void write_feature_cache(const std::vector<FeatureCacheRecord>& records,
                         const std::filesystem::path& path) {
  write_feature_cache(FeatureCache{{}, records}, path);
}

FeatureCache read_feature_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_feature_cache(ss.str());
}

}  // namespace marq
