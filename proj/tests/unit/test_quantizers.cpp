#include <doctest.h>

#include <cmath>
#include <set>

#include "marq/error.hpp"
#include "marq/masking.hpp"
#include "marq/quantizers.hpp"
#include "marq/rng.hpp"
#include "synth.hpp"

using namespace marq;

namespace {
FeatureMatrix random_features(std::size_t frames, std::size_t dims, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix f("mel", Rational(125, 8), frames, dims);
  for (auto& v : f.data) v = static_cast<float>(rng.normal());
  return f;
}

TargetTensor targets(std::vector<std::int32_t> labels, std::uint64_t vocab) {
  TargetTensor t;
  t.frames = labels.size();
  t.heads = 1;
  t.labels = std::move(labels);
  t.head_vocab_sizes = {vocab};
  return t;
}
}  // namespace

TEST_SUITE("quantizers") {
  TEST_CASE("codebooks are regenerated bit-exactly from the seed") {
    const auto a = build_codebook(11, 64, 16, 256);
    const auto b = build_codebook(11, 64, 16, 256);
    CHECK(a.projection == b.projection);
    CHECK(a.codewords == b.codewords);
    const auto c = build_codebook(12, 64, 16, 256);
    std::size_t differ = 0;
    for (std::size_t i = 0; i < a.projection.size(); ++i) differ += a.projection[i] != c.projection[i];
    CHECK(differ >= a.projection.size() * 99 / 100);
  }

  TEST_CASE("codewords have unit norm and the projection is standard normal") {
    const auto cb = build_codebook(3, 128, 16, 1024);
    for (std::size_t k = 0; k < cb.num_codewords; ++k) {
      double n = 0;
      for (double v : cb.codeword(k)) n += v * v;
      CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
    }
    double s = 0, sq = 0;
    for (double v : cb.projection) {
      s += v;
      sq += v * v;
    }
    const double n = static_cast<double>(cb.projection.size());
    CHECK(std::abs(s / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
  }

  TEST_CASE("tokens agree with an exhaustive long double search") {
    const auto cb = build_codebook(5, 32, 8, 512);
    const auto f = random_features(300, 32, 9);
    const auto tok = tokenize(f, cb);
    for (std::size_t t = 0; t < f.frames; ++t) {
      auto z = project_frame(f.row(t), cb, true);
      double n = 0;
      for (double v : z) n += v * v;
      for (double& v : z) v /= std::sqrt(n);
      const auto r = marq::testing::brute_force_nearest(z, cb.codewords, cb.proj_dims);
      if (r.margin > 1e-9) CHECK(tok[t] == static_cast<std::int32_t>(r.index));
    }
  }

  TEST_CASE("tokens are invariant to positive frame scaling") {
    const auto cb = build_codebook(5, 32, 8, 512);
    auto f = random_features(200, 32, 10);
    const auto base = tokenize(f, cb);
    for (auto& v : f.data) v *= 37.5f;
    CHECK(tokenize(f, cb) == base);
    CHECK(tokenize(f, cb, false) == base);
  }

  TEST_CASE("FSQ examples") {
    const FsqConfig cfg;
    CHECK(cfg.vocab() == 16807);
    CHECK(cfg.values_per_channel() == 7);
    const double zero[5] = {0, 0, 0, 0, 0};
    auto q = fsq_quantize(zero, cfg);
    CHECK(q.code == std::vector<int>{0, 0, 0, 0, 0});
    CHECK(q.index == 8403);
    const double big[5] = {100, -100, 100, -100, 0};
    q = fsq_quantize(big, cfg);
    CHECK(q.code == std::vector<int>{3, -3, 3, -3, 0});
    CHECK(q.index == 6 + 0 * 7 + 6 * 49 + 0 * 343 + 3 * 2401);
    const double mid[5] = {0.5, -0.5, 1.0, 0.1, -2.0};
    q = fsq_quantize(mid, cfg);
    // 3 tanh(z) = 1.386, -1.386, 2.285, 0.299, -2.892.
    CHECK(q.code == std::vector<int>{1, -1, 2, 0, -3});
  }

  TEST_CASE("FSQ is odd symmetric, saturates and decodes its own index") {
    const FsqConfig cfg;
    Rng rng(4);
    for (int trial = 0; trial < 500; ++trial) {
      double z[5], nz[5];
      for (int i = 0; i < 5; ++i) {
        z[i] = rng.normal() * 2.0;
        nz[i] = -z[i];
      }
      const auto a = fsq_quantize(z, cfg);
      const auto b = fsq_quantize(nz, cfg);
      for (int i = 0; i < 5; ++i) {
        CHECK(b.code[i] == -a.code[i]);
        CHECK(std::abs(a.code[i]) <= 3);
      }
      CHECK(fsq_decode(a.index, cfg) == a.code);
      CHECK(fsq_index(a.code, cfg) == a.index);
    }
    CHECK_THROWS_AS(fsq_decode(16807, cfg), Error);
    CHECK_THROWS_AS((FsqConfig{0, 6}.validate()), Error);
  }

  TEST_CASE("codebook spec round trips and rejects short input") {
    const CodebookSpec s{0x0123456789abcdefULL, 64, 16, 8192, 0};
    const auto bytes = s.encode();
    CHECK(bytes[0] == 0xef);
    CHECK(CodebookSpec::decode(bytes) == s);
    CHECK_THROWS_AS(CodebookSpec::decode(std::span<const std::uint8_t>(bytes.data(), 39)), Error);
  }

  TEST_CASE("codebook statistics") {
    const auto stats = codebook_stats(targets({0, 0, 1, 1}, 4));
    REQUIRE(stats.size() == 1);
    CHECK(stats[0].distinct == 2);
    CHECK(stats[0].usage_fraction == doctest::Approx(0.5));
    CHECK(stats[0].perplexity == doctest::Approx(2.0));
    const auto one = codebook_stats(targets({3, 3, 3}, 8));
    CHECK(one[0].perplexity == doctest::Approx(1.0));
    CHECK(one[0].usage_fraction == doctest::Approx(1.0 / 8));
    const auto uniform = codebook_stats(targets({0, 1, 2, 3, 4, 5, 6, 7}, 8));
    CHECK(uniform[0].perplexity == doctest::Approx(8.0));
  }

  TEST_CASE("target tensors validate labels and round trip through records") {
    auto t = targets({0, 5, 2}, 4);
    CHECK_THROWS_AS(t.validate(), Error);
    t.labels[1] = 3;
    t.validate();
    const auto rec = to_record(t, "c", Rational(125, 8));
    CHECK(targets_from_record(rec, {4}) == t);
  }

  TEST_CASE("multi-head banks reject duplicate seeds") {
    QuantizerBank bank;
    bank.heads.push_back({"mel", build_codebook(1, 8, 4, 16), std::nullopt});
    bank.heads.push_back({"mel", build_codebook(1, 8, 4, 16), std::nullopt});
    CHECK_THROWS_AS(bank.validate(), Error);
    bank.heads[1].codebook = build_codebook(2, 8, 4, 16);
    bank.validate();
    std::map<std::string, FeatureMatrix> feats;
    feats.emplace("mel", random_features(50, 8, 3));
    const auto tt = tokenize_multi(feats, bank);
    CHECK(tt.frames == 50);
    CHECK(tt.heads == 2);
    tt.validate();
  }
}

TEST_SUITE("masking") {
  TEST_CASE("chunk length at the default rate is six frames") {
    CHECK(chunk_frames_for(0.4, Rational(125, 8)) == 6);
    CHECK(chunk_frames_for(0.4, Rational(25, 1)) == 10);
    CHECK(chunk_frames_for(0.001, Rational(125, 8)) == 1);
  }

  TEST_CASE("masked count follows the chunk arithmetic") {
    const auto p = make_mask(100, Rational(10, 1), 1, 1.0, 0.6);
    CHECK(p.chunk_frames == 10);
    CHECK(p.masked_count() == 60);
    CHECK(p.chunks.size() == 6);
    for (std::size_t i = 1; i < p.chunks.size(); ++i) CHECK(p.chunks[i - 1].start < p.chunks[i].start);
    for (const auto& c : p.chunks) CHECK(c.start % 10 == 0);
  }

  TEST_CASE("masks replay from the seed and vary across seeds") {
    CHECK(make_mask(250, Rational(125, 8), 4).mask == make_mask(250, Rational(125, 8), 4).mask);
    CHECK(make_mask(250, Rational(125, 8), 4).mask != make_mask(250, Rational(125, 8), 5).mask);
  }

  TEST_CASE("mean masked fraction is near the target") {
    double sum = 0;
    for (std::uint64_t s = 0; s < 200; ++s) sum += make_mask(250, Rational(125, 8), s).masked_fraction();
    CHECK(std::abs(sum / 200 - 0.6) < 0.02);
  }

  TEST_CASE("an empty mask leaves the input unchanged") {
    const auto f = random_features(40, 5, 1);
    MaskPlan p;
    p.frames = 40;
    p.chunk_frames = 6;
    p.mask.assign(40, false);
    CHECK(p.masked_count() == 0);
    CHECK_THROWS_AS(make_mask(40, Rational(125, 8), 1, 0.4, 0.0), Error);
    CHECK(apply_mask(f, p, MaskStrategy::gaussian_noise, 3) == f);
  }

  TEST_CASE("gaussian fill has the requested moments and keeps unmasked rows") {
    const auto f = random_features(2000, 8, 2);
    const auto p = make_mask(2000, Rational(125, 8), 7);
    const auto g = apply_mask(f, p, MaskStrategy::gaussian_noise, 9, 2.0);
    double s = 0, sq = 0, n = 0;
    for (std::size_t t = 0; t < f.frames; ++t) {
      for (std::size_t d = 0; d < f.dims; ++d) {
        if (!p.mask[t]) {
          CHECK(g.at(t, d) == f.at(t, d));
          continue;
        }
        s += g.at(t, d);
        sq += g.at(t, d) * g.at(t, d);
        n += 1;
      }
    }
    CHECK(std::abs(s / n) < 0.1);
    CHECK(std::abs(sq / n - 4.0) < 0.2);
  }

  TEST_CASE("shuffle fill takes distinct other rows") {
    FeatureMatrix f("x", Rational(125, 8), 120, 1);
    for (std::size_t t = 0; t < 120; ++t) f.at(t, 0) = static_cast<float>(t);
    const auto p = make_mask(120, Rational(125, 8), 3);
    const auto g = apply_mask(f, p, MaskStrategy::waveform_shuffle, 5);
    std::set<float> used;
    for (std::size_t t = 0; t < 120; ++t) {
      if (!p.mask[t]) {
        CHECK(g.at(t, 0) == f.at(t, 0));
        continue;
      }
      CHECK(g.at(t, 0) != static_cast<float>(t));
      CHECK(used.insert(g.at(t, 0)).second);
    }
  }
}
