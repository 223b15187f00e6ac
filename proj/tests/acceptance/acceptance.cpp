// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. `acceptance N ...` runs only the listed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "marq/cli.hpp"
#include "marq/config.hpp"
#include "marq/encoder.hpp"
#include "marq/features.hpp"
#include "marq/masking.hpp"
#include "marq/pretrain.hpp"
#include "marq/probes.hpp"
#include "marq/quantizers.hpp"
#include "marq/rng.hpp"
#include "synth.hpp"

namespace fs = std::filesystem;
using namespace marq;
using marq::testing::brute_force_nearest;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int rc = run_cli(args, out, err);
  if (rc != 0) std::fprintf(stderr, "marq %s failed (%d): %s\n", args.front().c_str(), rc, err.str().c_str());
  return rc;
}

// 1. Quantizer vs exhaustive scan.
Outcome quantizer_oracle() {
  struct Shape {
    std::size_t in, proj, codewords;
  };
  const Shape shapes[] = {{64, 16, 256}, {84, 16, 1024}, {128, 16, 8192}};
  std::size_t checked = 0, agree = 0, excluded = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (const auto& s : shapes) {
      const Codebook cb = build_codebook(derive_seed(seed, "acceptance/codebook"), s.in, s.proj, s.codewords);
      Rng rng(derive_seed(seed, "acceptance/frames", s.codewords));
      FeatureMatrix feat("x", Rational(25, 1), 1000, s.in);
      for (float& v : feat.data) v = static_cast<float>(rng.normal());
      const auto labels = tokenize(feat, cb, true);
      for (std::size_t t = 0; t < feat.frames; ++t) {
        // Independent projection: long double, unnormalized input (the
        // projection is normalized afterwards, so input scale cancels).
        std::vector<long double> z(s.proj, 0.0L);
        for (std::size_t i = 0; i < s.in; ++i) {
          for (std::size_t j = 0; j < s.proj; ++j) z[j] += static_cast<long double>(feat.at(t, i)) * cb.projection[i * s.proj + j];
        }
        long double norm = 0;
        for (auto v : z) norm += v * v;
        norm = std::sqrt(norm);
        std::vector<double> zd(s.proj);
        for (std::size_t j = 0; j < s.proj; ++j) zd[j] = static_cast<double>(z[j] / norm);
        const auto nn = brute_force_nearest(zd, cb.codewords, s.proj);
        if (nn.margin < 1e-6L) {
          ++excluded;
          continue;
        }
        ++checked;
        if (static_cast<std::size_t>(labels[t]) == nn.index) ++agree;
      }
    }
  }
  return {checked > 0 && agree == checked,
          std::to_string(agree) + "/" + std::to_string(checked) + " agree, " + std::to_string(excluded) +
              " near-ties excluded"};
}

// 2. FSQ lattice bijection.
Outcome fsq_bijection() {
  const FsqConfig cfg{5, 6};
  bool ok = cfg.vocab() == 16807;
  std::set<std::vector<int>> seen;
  for (std::uint64_t idx = 0; idx < cfg.vocab(); ++idx) {
    const auto code = fsq_decode(idx, cfg);
    ok = ok && code.size() == 5;
    for (int c : code) ok = ok && c >= -3 && c <= 3;
    ok = ok && fsq_index(code, cfg) == idx;
    // Quantizing the code's own lattice point through tanh^-1 lands back on it.
    std::vector<double> z(5);
    for (std::size_t i = 0; i < 5; ++i) z[i] = std::atanh(std::clamp(code[i] / 3.0, -0.999999, 0.999999));
    ok = ok && fsq_quantize(z, cfg).index == idx;
    seen.insert(code);
  }
  const std::vector<double> zero(5, 0.0);
  const auto q0 = fsq_quantize(zero, cfg);
  const bool zero_ok = std::all_of(q0.code.begin(), q0.code.end(), [](int c) { return c == 0; });
  return {ok && seen.size() == 16807 && zero_ok,
          std::to_string(seen.size()) + " distinct codes, zero -> index " + std::to_string(q0.index)};
}

// 3. Masking statistics.
Outcome masking_stats() {
  const Rational rate(125, 8);
  double lo = 1.0, hi = 0.0;
  bool runs_ok = true;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const MaskPlan p = make_mask(468, rate, derive_seed(7, "acceptance/mask", i));
    lo = std::min(lo, p.masked_fraction());
    hi = std::max(hi, p.masked_fraction());
    int odd_runs = 0;
    for (std::size_t t = 0; t < p.frames;) {
      if (!p.mask[t]) {
        ++t;
        continue;
      }
      std::size_t end = t;
      while (end < p.frames && p.mask[end]) ++end;
      if ((end - t) % 6 != 0) {
        if (end != p.frames) runs_ok = false;
        ++odd_runs;
      }
      t = end;
    }
    if (odd_runs > 1) runs_ok = false;
  }
  return {lo >= 0.55 && hi <= 0.65 && runs_ok,
          "fraction in [" + fmt("%.4f", lo) + ", " + fmt("%.4f", hi) + "], runs " + (runs_ok ? "ok" : "bad")};
}

// 4. Finite-difference gradient check.
Outcome gradient_check() {
  EncoderConfig cfg;
  cfg.input_dims = 16;
  cfg.layers = 2;
  cfg.model_dims = 64;
  cfg.heads = 4;
  cfg.vocab_sizes = {32, 32};
  EncoderParams params = EncoderParams::initialize(cfg, 11);
  // Move away from the tiny init so every coordinate carries a visible gradient.
  Rng jitter(derive_seed(11, "acceptance/jitter"));
  for (double& v : params.flat()) v += 0.05 * jitter.normal();

  Rng rng(derive_seed(11, "acceptance/batch"));
  std::vector<TrainExample> batch;
  for (std::size_t b = 0; b < 2; ++b) {
    TrainExample ex;
    ex.input = FeatureMatrix("x", Rational(125, 8), 12, cfg.input_dims);
    for (float& v : ex.input.data) v = static_cast<float>(rng.normal());
    ex.targets.frames = 12;
    ex.targets.heads = 2;
    ex.targets.head_vocab_sizes = {32, 32};
    for (std::size_t i = 0; i < 24; ++i) ex.targets.labels.push_back(static_cast<std::int32_t>(rng.below(32)));
    ex.mask = make_mask(12, Rational(125, 8), derive_seed(11, "acceptance/mask", b));
    batch.push_back(std::move(ex));
  }
  const std::uint64_t seed = 5;
  const LossResult ref = loss_and_gradient(batch, params, cfg, seed, true, true);
  std::vector<double> flat = params.flatten();
  auto loss_at = [&](const std::vector<double>& x) {
    EncoderParams p(cfg);
    p.unflatten(x);
    return loss_and_gradient(batch, p, cfg, seed, true, false).loss;
  };
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t k = rng.below(flat.size());
    const double fd = marq::testing::central_difference(loss_at, flat, k, 1e-4);
    const double g = ref.grad[k];
    const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6});
    worst = std::max(worst, rel);
  }
  return {worst < 1e-4, "max relative error " + fmt("%.3e", worst) + " over 200 coordinates"};
}

// Shared state for criteria 5, 6 and 8.
struct Sanity {
  fs::path dir;
  fs::path manifest;
  std::optional<TrainState> state;
  std::optional<Corpus> corpus;
};
Sanity& sanity() {
  static Sanity s;
  if (s.dir.empty()) {
    s.dir = marq::testing::scratch_dir("acceptance_sanity");
    s.manifest = marq::testing::write_sine_corpus(s.dir, 64, 8, 6.0, 2024);
  }
  return s;
}

// 5. Masked-prediction sanity training.
Outcome sanity_training() {
  Sanity& s = sanity();
  PipelineConfig cfg = preset_config("desk");
  cfg.seed = 3;
  cfg.resolve();
  s.corpus = prepare_corpus(load_manifest(s.manifest), cfg, 1);
  s.state = init_state(cfg, *s.corpus);
  train_until(*s.state, *s.corpus, cfg.train.steps, 1);
  const ValidationResult v = validate(*s.state, *s.corpus, Split::valid, 1);
  const double chance = 1.0 / 256.0;
  save_checkpoint(*s.state, s.dir / "sanity.marqck");
  return {v.mean_accuracy >= 10.0 * chance,
          "held-out masked accuracy " + fmt("%.4f", v.mean_accuracy) + " (chance " + fmt("%.4f", chance) +
              ", " + std::to_string(v.masked_frames) + " frames)"};
}

// 6. Codebook usage trend.
Outcome usage_trend() {
  Sanity& s = sanity();
  PipelineConfig base = preset_config("desk");
  const DatasetManifest manifest = load_manifest(s.manifest);
  std::vector<std::map<std::string, FeatureMatrix>> feats;
  for (const auto& e : manifest.entries) feats.push_back(clip_features(e, base, nullptr));
  std::vector<double> usage;
  std::string detail;
  for (std::size_t heads : {1, 4, 16}) {
    PipelineConfig cfg = base;
    cfg.quantizer.heads.assign(heads, HeadSpec{"mel", 4096 / heads, false, {}});
    cfg.resolve();
    const TargetNorm norm = TargetNorm::fit(feats, cfg);
    const QuantizerBank bank = build_bank(cfg);
    std::vector<TargetTensor> tokens;
    for (const auto& f : feats) tokens.push_back(tokenize_multi(norm.apply(f), bank));
    double u = 0.0;
    for (const auto& st : codebook_stats(tokens)) u += 100.0 * st.usage_fraction;
    usage.push_back(u / static_cast<double>(heads));
    detail += (detail.empty() ? "" : " -> ") + std::to_string(heads) + "x" + std::to_string(4096 / heads) + " " +
              fmt("%.2f%%", usage.back());
  }
  return {usage[0] < usage[1] && usage[1] < usage[2], detail};
}

// 7. ROPE relative-position property.
Outcome rope_property() {
  Rng rng(derive_seed(1, "acceptance/rope"));
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t d = 2 * (1 + rng.below(16));
    ad::Matrix q(1, d), k(1, d);
    for (auto& v : q.data) v = rng.normal();
    for (auto& v : k.data) v = rng.normal();
    const double m = static_cast<double>(rng.below(2048));
    const double n = static_cast<double>(rng.below(2048));
    const double sh = static_cast<double>(rng.below(2048));
    auto dot = [&](double a, double b) {
      const double pa[] = {a}, pb[] = {b};
      const auto rq = rope_rotate(q, pa), rk = rope_rotate(k, pb);
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += rq.data[j] * rk.data[j];
      return s;
    };
    const double x = dot(m, n), y = dot(m + sh, n + sh);
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-300}));
  }
  return {worst <= 1e-5, "max relative difference " + fmt("%.3e", worst)};
}

// 8. Probe pipeline end to end.
Outcome probe_pipeline() {
  Sanity& s = sanity();
  const fs::path ckpt = s.dir / "sanity.marqck";
  if (!fs::exists(ckpt)) return {false, "needs the criterion 5 checkpoint"};
  const double pitches[] = {220.0, 311.13, 440.0};
  const fs::path tones = marq::testing::write_tone_corpus(s.dir / "tones", pitches, 24, 12, 3.0, 99);
  const fs::path report = s.dir / "probe.json";
  if (cli({"probe", "--checkpoint", ckpt.string(), "--manifest", tones.string(), "--task", "track_multiclass", "--out",
           report.string()}) != 0) {
    return {false, "probe command failed"};
  }
  const auto j = nlohmann::json::parse(marq::testing::read_file(report));
  const double acc = j.at("value").get<double>();

  ad::Matrix scores(4, 1), truths(4, 1);
  const double sc[] = {0.9, 0.8, 0.7, 0.6}, tr[] = {1, 0, 1, 0};
  for (int i = 0; i < 4; ++i) {
    scores(i, 0) = sc[i];
    truths(i, 0) = tr[i];
  }
  const double ap = mean_average_precision(scores, truths);
  const double refs[] = {1.0, 2.0}, preds[] = {1.05, 3.0};
  const double f = event_f_measure(preds, refs, 0.07);
  const bool ok = acc >= 0.95 && ap == (1.0 + 2.0 / 3.0) / 2.0 && f == 0.5;
  return {ok, "pitch probe accuracy " + fmt("%.4f", acc) + ", AP " + fmt("%.4f", ap) + ", F " + fmt("%.4f", f)};
}

// 9. Determinism and persistence through the CLI.
Outcome determinism() {
  const fs::path dir = marq::testing::scratch_dir("acceptance_determinism");
  const fs::path manifest = marq::testing::write_sine_corpus(dir / "data", 8, 2, 3.0, 77);
  {
    std::ofstream cfg(dir / "run.toml");
    cfg << "preset = \"desk\"\n[train]\nsteps = 60\nwarmup_steps = 10\nbatch_size = 4\nsegment_seconds = 2.0\n";
  }
  const std::string config = (dir / "run.toml").string();
  auto run = [&](const std::string& tag) {
    const fs::path d = dir / tag;
    fs::create_directories(d);
    const std::vector<std::vector<std::string>> cmds = {
        {"features", "--config", config, "--seed", "7", "--manifest", manifest.string(), "--out",
         (d / "features.marqfc").string()},
        {"tokenize", "--config", config, "--seed", "7", "--cache", (d / "features.marqfc").string(), "--out",
         (d / "tokens.marqfc").string()},
        {"pretrain", "--config", config, "--seed", "7", "--manifest", manifest.string(), "--out",
         (d / "ckpt.marqck").string(), "--metrics", (d / "metrics.jsonl").string()}};
    for (const auto& c : cmds) {
      if (cli(c) != 0) return false;
    }
    return true;
  };
  if (!run("a") || !run("b")) return {false, "pipeline command failed"};
  auto same = [&](const char* file) {
    return marq::testing::read_file(dir / "a" / file) == marq::testing::read_file(dir / "b" / file);
  };
  const bool repeat = same("tokens.marqfc") && same("metrics.jsonl") && same("ckpt.marqck");

  const fs::path r = dir / "resume";
  fs::create_directories(r);
  bool resumed = cli({"pretrain", "--config", config, "--seed", "7", "--manifest", manifest.string(), "--stop-at", "50",
                      "--out", (r / "ckpt50.marqck").string(), "--metrics", (r / "metrics.jsonl").string()}) == 0 &&
                 cli({"pretrain", "--resume", (r / "ckpt50.marqck").string(), "--manifest", manifest.string(), "--out",
                      (r / "ckpt.marqck").string(), "--metrics", (r / "metrics.jsonl").string()}) == 0;
  resumed = resumed &&
            marq::testing::read_file(r / "ckpt.marqck") == marq::testing::read_file(dir / "a" / "ckpt.marqck") &&
            marq::testing::read_file(r / "metrics.jsonl") == marq::testing::read_file(dir / "a" / "metrics.jsonl");
  return {repeat && resumed, std::string("repeat runs ") + (repeat ? "identical" : "differ") + ", resume at 50 -> 60 " +
                                 (resumed ? "identical" : "differs")};
}

// Independent Slaney mel triangles over a direct DFT.
std::size_t oracle_mel_argmax(std::span<const double> frame) {
  const std::size_t n = frame.size();
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = frame[i] * (0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n));
  const auto power = marq::testing::direct_dft_power(w);
  auto mel = [](double f) { return f < 1000.0 ? 3.0 * f / 200.0 : 15.0 + std::log(f / 1000.0) * 27.0 / std::log(6.4); };
  auto hz = [](double m) { return m < 15.0 ? 200.0 * m / 3.0 : 1000.0 * std::exp((m - 15.0) * std::log(6.4) / 27.0); };
  const double top = mel(8000.0);
  std::size_t best = 0;
  double best_v = -1.0;
  for (std::size_t m = 0; m < 64; ++m) {
    const double l = hz(top * m / 65.0), c = hz(top * (m + 1) / 65.0), r = hz(top * (m + 2) / 65.0);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < power.size(); ++k) {
      const double f = 16000.0 * k / n;
      const double tri = std::max(0.0, std::min((f - l) / (c - l), (r - f) / (r - c)));
      num += tri * power[k];
      den += tri;
    }
    if (den > 0 && num / den > best_v) {
      best_v = num / den;
      best = m;
    }
  }
  return best;
}

// 10. DSP correctness.
Outcome dsp() {
  AudioBuffer audio;
  audio.sample_rate = 16000;
  for (std::size_t t = 0; t < 32000; ++t) {
    audio.samples.push_back(static_cast<float>(0.5 * std::sin(2.0 * std::numbers::pi * 440.0 * t / 16000.0)));
  }
  const FeatureMatrix mel = mel_spectrogram(audio, MelConfig{});
  const std::size_t frame = 10;  // interior frame, no padding involved
  const auto row = mel.row(frame);
  const auto mel_arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  const std::size_t start = frame * 1024 - 512;
  std::vector<double> raw(audio.samples.begin() + start, audio.samples.begin() + start + 1024);
  const std::size_t oracle = oracle_mel_argmax(raw);

  const FeatureMatrix c = cqt(audio, CqtConfig{});
  std::vector<double> mean(c.dims, 0.0);
  for (std::size_t t = 0; t < c.frames; ++t) {
    for (std::size_t d = 0; d < c.dims; ++d) mean[d] += c.at(t, d);
  }
  const auto cqt_arg = static_cast<std::size_t>(std::max_element(mean.begin(), mean.end()) - mean.begin());

  // Parseval on the same interior frame: windowed energy vs one-sided spectrum.
  const Spectrogram spec = stft(audio, 1024, 1024);
  const auto win = hann_window(1024);
  double time_energy = 0.0;
  for (std::size_t i = 0; i < 1024; ++i) time_energy += (raw[i] * win[i]) * (raw[i] * win[i]);
  double freq_energy = 0.0;
  for (std::size_t k = 0; k < spec.bins; ++k) {
    const double p = std::norm(spec.at(frame, k));
    freq_energy += (k == 0 || k == 512) ? p : 2.0 * p;
  }
  freq_energy /= 1024.0;
  const double parseval = std::abs(time_energy - freq_energy) / time_energy;
  return {mel_arg == oracle && cqt_arg == 45 && parseval < 1e-3,
          "mel argmax " + std::to_string(mel_arg) + " (oracle " + std::to_string(oracle) + "), CQT argmax " +
              std::to_string(cqt_arg) + ", Parseval error " + fmt("%.2e", parseval)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "quantizer oracle equivalence", 10, quantizer_oracle},
      {2, "FSQ lattice bijection", 5, fsq_bijection},
      {3, "masking statistics", 5, masking_stats},
      {4, "gradient correctness", 60, gradient_check},
      {5, "masked-prediction sanity training", 1200, sanity_training},
      {6, "codebook-usage trend", 120, usage_trend},
      {7, "ROPE relative-position property", 1, rope_property},
      {8, "probe pipeline end-to-end", 300, probe_pipeline},
      {9, "determinism and persistence", 300, determinism},
      {10, "DSP correctness", 5, dsp},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs <= c.budget_seconds;
    const bool pass = o.pass && in_budget;
    failed += pass ? 0 : 1;
    std::printf("%s [%d] %s: %s; %.2f s (budget %.0f s)%s\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                secs, c.budget_seconds, in_budget ? "" : " OVER BUDGET");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
