#include "marq/audio_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "marq/error.hpp"

namespace marq {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct WavFormat {
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t sample_rate = 0;
  std::uint16_t bits = 0;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(field);
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  require(!quoted, Errc::format, "unterminated quote in manifest row");
  fields.push_back(field);
  return fields;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

bool supported_sample_rate(std::uint32_t rate) {
  return rate == 8000 || rate == 16000 || rate == 22050 || rate == 24000 || rate == 44100;
}

AudioBuffer load_audio(const std::filesystem::path& path, std::uint32_t target_rate) {
  require(supported_sample_rate(target_rate), Errc::invalid_argument,
          "unsupported target sample rate " + std::to_string(target_rate));
  const std::string bytes = read_file(path);
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
  require(bytes.size() >= 12 && std::memcmp(data, "RIFF", 4) == 0 &&
              std::memcmp(data + 8, "WAVE", 4) == 0,
          Errc::format, path.string() + " is not a RIFF/WAVE file");

  WavFormat fmt;
  bool have_fmt = false;
  const unsigned char* payload = nullptr;
  std::size_t payload_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t chunk_size = read_u32(data + pos + 4);
    const std::size_t body = pos + 8;
    const std::size_t available = std::min<std::size_t>(chunk_size, bytes.size() - body);
    if (std::memcmp(data + pos, "fmt ", 4) == 0) {
      require(available >= 16, Errc::format, "short fmt chunk in " + path.string());
      fmt.format = read_u16(data + body);
      fmt.channels = read_u16(data + body + 2);
      fmt.sample_rate = read_u32(data + body + 4);
      fmt.bits = read_u16(data + body + 14);
      if (fmt.format == kFormatExtensible) {
        require(available >= 26, Errc::format, "short extensible fmt chunk in " + path.string());
        fmt.format = read_u16(data + body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(data + pos, "data", 4) == 0) {
      payload = data + body;
      payload_size = available;
    }
    pos = body + chunk_size + (chunk_size & 1);
  }
  require(have_fmt && payload != nullptr, Errc::format, "missing fmt or data chunk in " + path.string());
  require(fmt.channels > 0 && fmt.sample_rate > 0, Errc::format, "invalid fmt chunk in " + path.string());
  const bool pcm16 = fmt.format == kFormatPcm && fmt.bits == 16;
  const bool f32 = fmt.format == kFormatFloat && fmt.bits == 32;
  require(pcm16 || f32, Errc::format,
          "unsupported encoding in " + path.string() + " (need 16-bit PCM or 32-bit float)");

  const std::size_t bytes_per_sample = fmt.bits / 8;
  const std::size_t frames = payload_size / (bytes_per_sample * fmt.channels);
  require(frames > 0, Errc::format, "zero-length audio in " + path.string());

  std::vector<float> mono(frames);
  const double inv_channels = 1.0 / fmt.channels;
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < fmt.channels; ++c) {
      const unsigned char* p = payload + (i * fmt.channels + c) * bytes_per_sample;
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      } else {
        const std::uint32_t bits = read_u32(p);
        float v;
        std::memcpy(&v, &bits, sizeof v);
        require(std::isfinite(v), Errc::format, "non-finite sample in " + path.string());
        acc += std::clamp(v, -1.0f, 1.0f);
      }
    }
    mono[i] = static_cast<float>(acc * inv_channels);
  }

  AudioBuffer out;
  out.sample_rate = target_rate;
  out.samples = fmt.sample_rate == target_rate ? std::move(mono)
                                               : resample(mono, fmt.sample_rate, target_rate);
  require(!out.samples.empty(), Errc::format, "zero-length audio after resampling " + path.string());
  return out;
}

void write_wav(const std::filesystem::path& path, std::span<const float> interleaved,
               std::uint32_t sample_rate, std::uint16_t channels, WavEncoding encoding) {
  require(channels > 0 && interleaved.size() % channels == 0, Errc::invalid_argument,
          "sample count not divisible by channel count");
  const std::uint16_t bits = encoding == WavEncoding::pcm16 ? 16 : 32;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(interleaved.size() * (bits / 8));
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, encoding == WavEncoding::pcm16 ? kFormatPcm : kFormatFloat);
  put_u16(out, channels);
  put_u32(out, sample_rate);
  put_u32(out, sample_rate * channels * (bits / 8));
  put_u16(out, static_cast<std::uint16_t>(channels * (bits / 8)));
  put_u16(out, bits);
  out += "data";
  put_u32(out, data_bytes);
  for (float v : interleaved) {
    if (encoding == WavEncoding::pcm16) {
      // Same 1/32768 scale as the reader; +1.0 clips to 32767.
      const double scaled = std::clamp(std::round(static_cast<double>(v) * 32768.0), -32768.0, 32767.0);
      put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
    } else {
      std::uint32_t bits32;
      std::memcpy(&bits32, &v, sizeof v);
      put_u32(out, bits32);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), Errc::io, "cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  require(static_cast<bool>(f), Errc::io, "short write to " + path.string());
}

std::vector<float> resample(std::span<const float> samples, std::uint32_t from_rate,
                            std::uint32_t to_rate) {
  require(from_rate > 0 && to_rate > 0, Errc::invalid_argument, "sample rates must be positive");
  if (from_rate == to_rate) return {samples.begin(), samples.end()};
  const std::size_t n_in = samples.size();
  const std::size_t n_out = static_cast<std::size_t>(
      static_cast<std::uint64_t>(n_in) * to_rate / from_rate);
  // Cutoff in cycles per input sample.
  const double cutoff = 0.5 * std::min(1.0, static_cast<double>(to_rate) / from_rate) * 0.95;
  const double half_width = 32.0 / (2.0 * cutoff);
  const double step = static_cast<double>(from_rate) / to_rate;

  std::vector<float> out(n_out);
  for (std::size_t n = 0; n < n_out; ++n) {
    const double center = static_cast<double>(n) * step;
    const auto lo = static_cast<std::ptrdiff_t>(std::ceil(center - half_width));
    const auto hi = static_cast<std::ptrdiff_t>(std::floor(center + half_width));
    double acc = 0.0;
    for (std::ptrdiff_t i = std::max<std::ptrdiff_t>(lo, 0);
         i <= std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(n_in) - 1); ++i) {
      const double x = center - static_cast<double>(i);
      const double arg = 2.0 * cutoff * x;
      const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
      const double window = 0.5 * (1.0 + std::cos(std::numbers::pi * x / half_width));
      acc += samples[static_cast<std::size_t>(i)] * 2.0 * cutoff * sinc * window;
    }
    out[n] = static_cast<float>(std::clamp(acc, -1.0, 1.0));
  }
  return out;
}

Split parse_split(const std::string& token) {
  if (token == "train") return Split::train;
  if (token == "valid") return Split::valid;
  if (token == "test") return Split::test;
  fail(Errc::format, "unknown split token '" + token + "'");
}

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

double LabelPayload::scalar() const {
  require(tokens.size() == 1, Errc::format, "expected a single scalar label");
  const std::string& t = tokens.front();
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  require(ec == std::errc() && ptr == t.data() + t.size() && std::isfinite(value), Errc::format,
          "label '" + t + "' is not a decimal number");
  return value;
}

std::vector<const ManifestEntry*> DatasetManifest::split(Split which) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == which) out.push_back(&e);
  }
  return out;
}

const ManifestEntry* DatasetManifest::find(const std::string& clip_id) const {
  for (const auto& e : entries) {
    if (e.clip_id == clip_id) return &e;
  }
  return nullptr;
}

DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Errc::format, "empty manifest");
  const auto header = split_csv_line(trim(line));
  const std::vector<std::string> expected{"clip_id", "audio_path", "split", "labels"};
  std::vector<std::string> header_trimmed;
  for (const auto& h : header) header_trimmed.push_back(trim(h));
  require(header_trimmed == expected, Errc::format,
          "manifest header must be clip_id,audio_path,split,labels");

  DatasetManifest manifest;
  std::set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() == 3) fields.emplace_back();
    require(fields.size() == 4, Errc::format,
            "malformed manifest row at line " + std::to_string(line_no));
    ManifestEntry entry;
    entry.clip_id = trim(fields[0]);
    require(!entry.clip_id.empty(), Errc::format, "empty clip_id at line " + std::to_string(line_no));
    require(seen.insert(entry.clip_id).second, Errc::format, "duplicate clip_id '" + entry.clip_id + "'");
    std::filesystem::path audio = trim(fields[1]);
    require(!audio.empty(), Errc::format, "empty audio_path at line " + std::to_string(line_no));
    entry.audio_path = audio.is_absolute() ? audio : base_dir / audio;
    entry.split = parse_split(trim(fields[2]));
    std::istringstream labels(fields[3]);
    std::string token;
    while (std::getline(labels, token, ';')) {
      token = trim(token);
      if (!token.empty()) entry.labels.tokens.push_back(token);
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_file(path), path.parent_path());
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write " + path.string());
  out << "clip_id,audio_path,split,labels\n";
  for (const auto& e : manifest.entries) {
    out << e.clip_id << ',' << e.audio_path.string() << ',' << to_string(e.split) << ',';
    for (std::size_t i = 0; i < e.labels.tokens.size(); ++i) {
      if (i) out << ';';
      out << e.labels.tokens[i];
    }
    out << '\n';
  }
}

}  // namespace marq
