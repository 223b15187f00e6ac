#include "marq/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "marq/error.hpp"

namespace marq {
namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_f64s(std::string& out, const std::vector<double>& v) {
  for (double x : v) put_f64(out, x);
}

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  const char* take(std::size_t n) {
    require(n <= in_.size() - pos_, Errc::format, "truncated checkpoint");
    const char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t u64() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::vector<double> f64s(std::uint64_t n) {
    require(n <= (in_.size() - pos_) / 8, Errc::format, "truncated checkpoint");
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

bool operator==(const TrainState& a, const TrainState& b) {
  return to_json(a.config) == to_json(b.config) && a.params == b.params && a.optimizer.m == b.optimizer.m &&
         a.optimizer.v == b.optimizer.v && a.optimizer.step == b.optimizer.step &&
         a.input_norm.mean == b.input_norm.mean && a.input_norm.inv_std == b.input_norm.inv_std &&
         a.step == b.step && std::bit_cast<std::uint64_t>(a.loss_ema) == std::bit_cast<std::uint64_t>(b.loss_ema) &&
         a.acc_ema == b.acc_ema;
}

std::string encode_checkpoint(const TrainState& s) {
  require(s.optimizer.m.size() == s.params.size() && s.optimizer.v.size() == s.params.size(),
          Errc::dimension_mismatch, "optimizer state does not match parameter count");
  require(s.input_norm.mean.size() == s.input_norm.inv_std.size(), Errc::dimension_mismatch,
          "input normalizer is inconsistent");
  std::string out(kCheckpointMagic, 8);
  const std::string cfg = to_json(s.config).dump();
  put_u64(out, cfg.size());
  out += cfg;
  put_u64(out, s.params.size());
  put_f64s(out, s.params.flatten());
  put_u64(out, s.input_norm.mean.size());
  put_f64s(out, s.input_norm.mean);
  put_f64s(out, s.input_norm.inv_std);
  put_u64(out, s.step);
  put_u64(out, s.optimizer.step);
  put_f64s(out, s.optimizer.m);
  put_f64s(out, s.optimizer.v);
  put_f64(out, s.loss_ema);
  put_u64(out, s.acc_ema.size());
  put_f64s(out, s.acc_ema);
  return out;
}

TrainState decode_checkpoint(const std::string& bytes) {
  require(bytes.size() >= 8 && bytes.compare(0, 8, kCheckpointMagic, 8) == 0, Errc::format,
          "not a MARQCK01 checkpoint");
  Reader r(bytes);
  r.take(8);
  const auto cfg_len = r.u64();
  require(cfg_len <= bytes.size(), Errc::format, "truncated checkpoint");
  const std::string cfg_text(r.take(cfg_len), cfg_len);
  TrainState s;
  try {
    s.config = config_from_json(nlohmann::json::parse(cfg_text));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  s.params = EncoderParams(s.config.encoder);
  const auto p = r.u64();
  require(p == s.params.size(), Errc::format,
          "checkpoint holds " + std::to_string(p) + " parameters, config implies " +
              std::to_string(s.params.size()));
  s.params.unflatten(r.f64s(p));
  const auto d = r.u64();
  s.input_norm.mean = r.f64s(d);
  s.input_norm.inv_std = r.f64s(d);
  s.step = r.u64();
  AdamWConfig acfg;
  acfg.weight_decay = s.config.train.weight_decay;
  s.optimizer = AdamW(acfg, p);
  s.optimizer.step = r.u64();
  s.optimizer.m = r.f64s(p);
  s.optimizer.v = r.f64s(p);
  s.loss_ema = r.f64();
  s.acc_ema = r.f64s(r.u64());
  require(r.done(), Errc::format, "trailing bytes after checkpoint");
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(state);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), Errc::io, "cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), Errc::io, "write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

}  // namespace marq
