#include "marq/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <mutex>
#include <numbers>

#include "marq/error.hpp"
#include "marq/simd.hpp"

namespace marq {

Rational Rational::parse(const std::string& text) {
  const auto slash = text.find('/');
  if (slash != std::string::npos) {
    std::uint64_t n = 0, d = 0;
    const auto* b = text.data();
    const auto r1 = std::from_chars(b, b + slash, n);
    const auto r2 = std::from_chars(b + slash + 1, b + text.size(), d);
    require(r1.ec == std::errc() && r1.ptr == b + slash && r2.ec == std::errc() &&
                r2.ptr == b + text.size() && n > 0 && d > 0,
            Errc::invalid_argument, "malformed rate '" + text + "'");
    return {n, d};
  }
  double v = 0.0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  require(r.ec == std::errc() && r.ptr == text.data() + text.size(), Errc::invalid_argument,
          "malformed rate '" + text + "'");
  return from_double(v);
}

Rational Rational::from_double(double hz) {
  require(std::isfinite(hz) && hz > 0.0, Errc::invalid_argument, "rate must be positive");
  for (std::uint64_t den = 1; den <= 1000000; den *= 10) {
    for (std::uint64_t d : {den, den * 2, den * 4, den * 8}) {
      const double scaled = hz * static_cast<double>(d);
      if (scaled == std::floor(scaled) && scaled < 1e15) return {static_cast<std::uint64_t>(scaled), d};
    }
  }
  fail(Errc::invalid_argument, "rate " + std::to_string(hz) + " is not an exact decimal");
}

bool FeatureMatrix::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
}

FeatureMatrix FeatureMatrix::slice(std::size_t begin, std::size_t count) const {
  require(begin + count <= frames, Errc::invalid_argument, "slice out of range");
  FeatureMatrix out(name, frame_rate, count, dims);
  std::copy(data.begin() + static_cast<std::ptrdiff_t>(begin * dims),
            data.begin() + static_cast<std::ptrdiff_t>((begin + count) * dims), out.data.begin());
  return out;
}

FeatureCacheRecord to_record(const FeatureMatrix& feat, const std::string& clip_id) {
  FeatureCacheRecord r;
  r.clip_id = clip_id;
  r.feature_name = feat.name;
  r.frame_rate = feat.frame_rate;
  r.frames = feat.frames;
  r.dims = feat.dims;
  r.type = PayloadType::float32;
  r.f32 = feat.data;
  return r;
}

FeatureMatrix from_record(const FeatureCacheRecord& record) {
  require(record.type == PayloadType::float32, Errc::format,
          "record '" + record.clip_id + "/" + record.feature_name + "' is not a float payload");
  FeatureMatrix m(record.feature_name, record.frame_rate, record.frames, record.dims);
  m.data = record.f32;
  return m;
}

void MelConfig::validate(std::uint32_t sample_rate) const {
  require(n_fft >= 2 && std::has_single_bit(n_fft), Errc::invalid_argument, "n_fft must be a power of two");
  require(hop >= 1 && hop <= n_fft, Errc::invalid_argument, "mel hop must be in [1, n_fft]");
  require(n_mels >= 1, Errc::invalid_argument, "n_mels must be positive");
  require(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0, Errc::invalid_argument,
          "mel range must satisfy 0 <= fmin < fmax <= sample_rate/2");
  require(log_floor > 0.0, Errc::invalid_argument, "log_floor must be positive");
}

void CqtConfig::validate(std::uint32_t sample_rate) const {
  require(fmin > 0.0 && bins_per_octave >= 1 && n_bins >= 1 && hop >= 1, Errc::invalid_argument,
          "invalid CQT config");
  require(fmin * std::exp2(static_cast<double>(n_bins) / bins_per_octave) <= sample_rate / 2.0,
          Errc::invalid_argument, "CQT bins exceed the Nyquist frequency");
  require(log_floor > 0.0, Errc::invalid_argument, "log_floor must be positive");
}

double CqtConfig::center_frequency(std::size_t bin) const {
  return fmin * std::exp2(static_cast<double>(bin) / static_cast<double>(bins_per_octave));
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

namespace {

// FFTW planning is not thread-safe; execution with fftw_execute_dft_r2c is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

std::size_t reflect_index(std::ptrdiff_t j, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  j %= period;
  if (j < 0) j += period;
  if (j >= static_cast<std::ptrdiff_t>(n)) j = period - j;
  return static_cast<std::size_t>(j);
}

}  // namespace

Spectrogram stft(const AudioBuffer& audio, std::size_t n_fft, std::size_t hop) {
  require(n_fft >= 2 && std::has_single_bit(n_fft), Errc::invalid_argument, "n_fft must be a power of two");
  require(hop >= 1, Errc::invalid_argument, "hop must be at least 1");
  const std::size_t n = audio.samples.size();
  require(n >= hop, Errc::invalid_argument, "audio shorter than one hop");

  Spectrogram out;
  out.frames = 1 + n / hop;
  out.bins = n_fft / 2 + 1;
  out.data.resize(out.frames * out.bins);

  const auto window = hann_window(n_fft);
  double* in = fftw_alloc_real(n_fft);
  fftw_complex* spec = fftw_alloc_complex(out.bins);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), in, spec, FFTW_ESTIMATE);
  }
  const auto pad = static_cast<std::ptrdiff_t>(n_fft / 2);
  for (std::size_t t = 0; t < out.frames; ++t) {
    const auto start = static_cast<std::ptrdiff_t>(t * hop) - pad;
    for (std::size_t i = 0; i < n_fft; ++i) {
      in[i] = window[i] * audio.samples[reflect_index(start + static_cast<std::ptrdiff_t>(i), n)];
    }
    fftw_execute_dft_r2c(plan, in, spec);
    for (std::size_t k = 0; k < out.bins; ++k) out.data[t * out.bins + k] = {spec[k][0], spec[k][1]};
  }
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(spec);
  return out;
}

double hz_to_mel(double hz) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  constexpr double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return hz < min_log_hz ? hz / f_sp : min_log_mel + std::log(hz / min_log_hz) / logstep;
}

double mel_to_hz(double mel) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  constexpr double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return mel < min_log_mel ? mel * f_sp : min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

namespace {

std::vector<double> mel_edges(const MelConfig& cfg) {
  const double lo = hz_to_mel(cfg.fmin);
  const double hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  }
  return edges;
}

}  // namespace

std::vector<double> mel_center_frequencies(const MelConfig& cfg) {
  const auto edges = mel_edges(cfg);
  return {edges.begin() + 1, edges.end() - 1};
}

std::vector<std::vector<double>> mel_filterbank(std::uint32_t sample_rate, const MelConfig& cfg) {
  cfg.validate(sample_rate);
  const std::size_t bins = cfg.n_fft / 2 + 1;
  const auto edges = mel_edges(cfg);
  std::vector<std::vector<double>> fb(cfg.n_mels, std::vector<double>(bins, 0.0));
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    double total = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(cfg.n_fft);
      const double rise = (f - left) / (center - left);
      const double fall = (right - f) / (right - center);
      const double w = std::max(0.0, std::min(rise, fall));
      fb[m][k] = w;
      total += w;
    }
    if (total > 0.0) {
      for (double& w : fb[m]) w /= total;
    }
  }
  return fb;
}

FeatureMatrix mel_spectrogram(const AudioBuffer& audio, const MelConfig& cfg) {
  cfg.validate(audio.sample_rate);
  const auto fb = mel_filterbank(audio.sample_rate, cfg);
  const Spectrogram spec = stft(audio, cfg.n_fft, cfg.hop);
  FeatureMatrix out("mel", Rational(audio.sample_rate, cfg.hop), spec.frames, cfg.n_mels);
  std::vector<double> power(spec.bins);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    for (std::size_t k = 0; k < spec.bins; ++k) power[k] = std::norm(spec.at(t, k));
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      out.at(t, m) = static_cast<float>(std::log(simd::dot(fb[m], power) + cfg.log_floor));
    }
  }
  return out;
}

FeatureMatrix cqt(const AudioBuffer& audio, const CqtConfig& cfg) {
  cfg.validate(audio.sample_rate);
  const double sr = audio.sample_rate;
  const double q = 1.0 / (std::exp2(1.0 / static_cast<double>(cfg.bins_per_octave)) - 1.0);

  struct Kernel {
    std::vector<double> re;
    std::vector<double> im;
  };
  std::vector<Kernel> kernels(cfg.n_bins);
  std::size_t longest = 0;
  for (std::size_t k = 0; k < cfg.n_bins; ++k) {
    const double f = cfg.center_frequency(k);
    const auto len = static_cast<std::size_t>(std::ceil(q * sr / f));
    longest = std::max(longest, len);
    const auto w = hann_window(len);
    kernels[k].re.resize(len);
    kernels[k].im.resize(len);
    const double half = static_cast<double>(len) / 2.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double phase = 2.0 * std::numbers::pi * f * (static_cast<double>(i) - half) / sr;
      kernels[k].re[i] = w[i] * std::cos(phase) / static_cast<double>(len);
      kernels[k].im[i] = -w[i] * std::sin(phase) / static_cast<double>(len);
    }
  }
  const std::size_t n = audio.samples.size();
  require(n >= longest, Errc::invalid_argument,
          "audio shorter than the longest CQT kernel (" + std::to_string(longest) + " samples)");

  std::vector<double> signal(audio.samples.begin(), audio.samples.end());
  FeatureMatrix out("cqt", Rational(audio.sample_rate, cfg.hop), 1 + n / cfg.hop, cfg.n_bins);
  for (std::size_t t = 0; t < out.frames; ++t) {
    const auto center = static_cast<std::ptrdiff_t>(t * cfg.hop);
    for (std::size_t k = 0; k < cfg.n_bins; ++k) {
      const auto& ker = kernels[k];
      const auto len = static_cast<std::ptrdiff_t>(ker.re.size());
      const std::ptrdiff_t start = center - len / 2;
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -start);
      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(len, static_cast<std::ptrdiff_t>(n) - start);
      double re = 0.0, im = 0.0;
      if (hi > lo) {
        const auto count = static_cast<std::size_t>(hi - lo);
        std::span<const double> x(signal.data() + start + lo, count);
        re = simd::dot(x, std::span<const double>(ker.re.data() + lo, count));
        im = simd::dot(x, std::span<const double>(ker.im.data() + lo, count));
      }
      out.at(t, k) = static_cast<float>(std::log(std::hypot(re, im) + cfg.log_floor));
    }
  }
  return out;
}

FeatureMatrix waveform_patches(const AudioBuffer& audio, const PatchConfig& cfg) {
  require(cfg.hop >= 1 && cfg.patch_len >= cfg.hop, Errc::invalid_argument,
          "waveform patches need patch_len >= hop >= 1");
  const std::size_t n = audio.samples.size();
  require(n >= cfg.patch_len, Errc::invalid_argument, "audio shorter than patch_len");
  const std::size_t frames = (n - cfg.patch_len) / cfg.hop + 1;
  FeatureMatrix out("audio", Rational(audio.sample_rate, cfg.hop), frames, cfg.patch_len);
  for (std::size_t t = 0; t < frames; ++t) {
    std::copy_n(audio.samples.begin() + static_cast<std::ptrdiff_t>(t * cfg.hop), cfg.patch_len,
                out.row(t).begin());
  }
  return out;
}

FeatureMatrix load_external_features(const FeatureCache& cache, const std::string& clip_id,
                                     const std::string& feature_name) {
  const FeatureCacheRecord* r = cache.find(clip_id, feature_name);
  require(r != nullptr, Errc::not_found,
          "missing feature record '" + feature_name + "' for clip '" + clip_id + "'");
  return from_record(*r);
}

FeatureMatrix load_external_features(const std::filesystem::path& cache_path,
                                     const std::string& clip_id, const std::string& feature_name) {
  return load_external_features(read_feature_cache(cache_path), clip_id, feature_name);
}

FeatureMatrix resample_frames(const FeatureMatrix& feat, Rational target_rate) {
  require(target_rate.positive(), Errc::invalid_argument, "target rate must be positive");
  require(feat.frames > 0, Errc::invalid_argument, "cannot resample an empty feature matrix");
  if (feat.frame_rate == target_rate) return feat;
  const Rational in = feat.frame_rate;
  // frames_out = round(frames * (t.num/t.den) / (in.num/in.den))
  const std::uint64_t out_frames =
      round_div(feat.frames * target_rate.num * in.den, target_rate.den * in.num);
  require(out_frames > 0, Errc::invalid_argument, "resampling leaves no frames");
  FeatureMatrix out(feat.name, target_rate, out_frames, feat.dims);
  for (std::uint64_t t = 0; t < out_frames; ++t) {
    // round(t * in_rate / target_rate)
    const std::uint64_t src =
        std::min<std::uint64_t>(round_div(t * in.num * target_rate.den, in.den * target_rate.num),
                                feat.frames - 1);
    std::copy_n(feat.row(src).begin(), feat.dims, out.row(t).begin());
  }
  return out;
}

Standardizer Standardizer::fit(std::span<const FeatureMatrix> corpus, double std_floor) {
  require(!corpus.empty(), Errc::invalid_argument, "cannot fit a standardizer on an empty corpus");
  const std::size_t dims = corpus.front().dims;
  std::vector<double> sum(dims, 0.0), sum_sq(dims, 0.0);
  std::size_t count = 0;
  for (const auto& m : corpus) {
    require(m.dims == dims, Errc::dimension_mismatch, "standardizer corpus dims differ");
    for (std::size_t t = 0; t < m.frames; ++t) {
      for (std::size_t d = 0; d < dims; ++d) {
        const double v = m.at(t, d);
        sum[d] += v;
        sum_sq[d] += v * v;
      }
    }
    count += m.frames;
  }
  require(count > 0, Errc::invalid_argument, "standardizer corpus has no frames");
  Standardizer s;
  s.mean.resize(dims);
  s.inv_std.resize(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    const double mean = sum[d] / static_cast<double>(count);
    const double var = std::max(0.0, sum_sq[d] / static_cast<double>(count) - mean * mean);
    s.mean[d] = mean;
    s.inv_std[d] = 1.0 / std::max(std::sqrt(var), std_floor);
  }
  return s;
}

FeatureMatrix Standardizer::apply(const FeatureMatrix& feat) const {
  require(feat.dims == mean.size(), Errc::dimension_mismatch, "standardizer dims differ from features");
  FeatureMatrix out = feat;
  for (std::size_t t = 0; t < out.frames; ++t) {
    for (std::size_t d = 0; d < out.dims; ++d) {
      out.at(t, d) = static_cast<float>((out.at(t, d) - mean[d]) * inv_std[d]);
    }
  }
  return out;
}

}  // namespace marq
