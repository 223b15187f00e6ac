#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "marq/encoder.hpp"
#include "marq/error.hpp"
#include "marq/rng.hpp"
#include "synth.hpp"

using namespace marq;

namespace {
EncoderConfig small_config(std::vector<std::uint64_t> vocab = {16, 24}) {
  EncoderConfig c;
  c.input_dims = 8;
  c.layers = 2;
  c.model_dims = 16;
  c.heads = 2;
  c.conv_kernel = 5;
  c.dropout = 0.1;
  c.vocab_sizes = std::move(vocab);
  return c;
}

FeatureMatrix random_input(std::size_t frames, std::size_t dims, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix f("mel", Rational(125, 8), frames, dims);
  for (auto& v : f.data) v = static_cast<float>(rng.normal());
  return f;
}

TrainExample example(const EncoderConfig& cfg, std::size_t frames, std::uint64_t seed) {
  TrainExample ex;
  ex.input = random_input(frames, cfg.input_dims, seed);
  ex.mask = make_mask(frames, Rational(125, 8), seed);
  ex.targets.frames = frames;
  ex.targets.heads = cfg.vocab_sizes.size();
  ex.targets.head_vocab_sizes = cfg.vocab_sizes;
  Rng rng(seed + 100);
  for (std::size_t t = 0; t < frames; ++t) {
    for (auto v : cfg.vocab_sizes) ex.targets.labels.push_back(static_cast<std::int32_t>(rng.below(v)));
  }
  return ex;
}

void jitter(EncoderParams& p, double s, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& v : p.flat()) v += s * rng.normal();
}
}  // namespace

TEST_SUITE("encoder") {
  TEST_CASE("config validation") {
    auto c = small_config();
    c.validate();
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
    c = small_config();
    c.conv_kernel = 4;
    CHECK_THROWS_AS(c.validate(), Error);
    c = small_config();
    c.vocab_sizes.clear();
    CHECK_THROWS_AS(c.validate(), Error);
  }

  TEST_CASE("initialization follows the seeded per-tensor recipe") {
    const auto cfg = small_config();
    const auto p = EncoderParams::initialize(cfg, 42);
    std::size_t residual = 0;
    for (const auto& info : p.layout()) {
      const auto t = p.tensor(info.name);
      REQUIRE(t.size() == info.size());
      if (info.role == TensorRole::bias || info.role == TensorRole::norm_bias) {
        for (double v : t) CHECK(v == 0.0);
        continue;
      }
      if (info.role == TensorRole::norm_gain) {
        for (double v : t) CHECK(v == 1.0);
        continue;
      }
      Rng rng(derive_seed(42, "init/" + info.name));
      const double beta = info.role == TensorRole::residual_weight ? cfg.deepnorm_beta : 1.0;
      residual += info.role == TensorRole::residual_weight;
      for (double v : t) CHECK(v == cfg.init_std * rng.normal() * beta);
    }
    // Two per half-FFN, value and output in attention, three in the conv module.
    CHECK(residual == cfg.layers * 9);
    CHECK(p.info("layer0.attn.wv").role == TensorRole::residual_weight);
    CHECK(p.info("layer1.attn.wq").role == TensorRole::weight);
    CHECK_THROWS_AS(p.info("missing"), Error);
  }

  TEST_CASE("flatten and unflatten round trip") {
    const auto cfg = small_config();
    auto p = EncoderParams::initialize(cfg, 1);
    const auto q = EncoderParams::initialize(cfg, 2);
    p.unflatten(q.flatten());
    CHECK(p == q);
    CHECK_THROWS_AS(p.unflatten(std::vector<double>(3)), Error);
  }

  TEST_CASE("zero heads give uniform logits and ln V loss") {
    const auto cfg = small_config();
    auto p = EncoderParams::initialize(cfg, 3);
    for (std::size_t h = 0; h < cfg.vocab_sizes.size(); ++h) {
      for (auto n : {"w", "b"}) {
        for (auto& v : p.tensor("head" + std::to_string(h) + "." + n)) v = 0.0;
      }
    }
    const TrainExample batch[] = {example(cfg, 30, 1)};
    const auto r = loss_and_gradient(batch, p, cfg, 9, false, false);
    CHECK(r.head_loss[0] == doctest::Approx(std::log(16.0)));
    CHECK(r.head_loss[1] == doctest::Approx(std::log(24.0)));
    CHECK(r.loss == doctest::Approx(0.5 * (std::log(16.0) + std::log(24.0))));
  }

  TEST_CASE("forward passes are deterministic and dropout depends on the seed") {
    const auto cfg = small_config();
    const auto p = EncoderParams::initialize(cfg, 4);
    const auto x = random_input(20, 8, 2);
    CHECK(encode(x, p, cfg, true, 5).embeddings == encode(x, p, cfg, true, 5).embeddings);
    CHECK(encode(x, p, cfg, true, 5).embeddings != encode(x, p, cfg, true, 6).embeddings);
    CHECK(encode(x, p, cfg, false, 5).embeddings == encode(x, p, cfg, false, 6).embeddings);
  }

  TEST_CASE("probe embeddings equal the traced layer outputs") {
    const auto cfg = small_config();
    const auto p = EncoderParams::initialize(cfg, 4);
    const auto x = random_input(20, 8, 2);
    const auto trace = encode(x, p, cfg, false, 0);
    REQUIRE(trace.layer_outputs.size() == cfg.layers + 1);
    for (std::size_t l = 0; l <= cfg.layers; ++l) CHECK(embeddings_for_probe(x, p, cfg, l) == trace.layer_outputs[l]);
    CHECK_THROWS_AS(embeddings_for_probe(x, p, cfg, cfg.layers + 1), Error);
  }

  TEST_CASE("batch gradients are the masked-frame weighted item gradients") {
    const auto cfg = small_config();
    auto p = EncoderParams::initialize(cfg, 6);
    jitter(p, 0.05, 1);
    const TrainExample a[] = {example(cfg, 24, 1)};
    const TrainExample b[] = {example(cfg, 36, 2)};
    const TrainExample ab[] = {a[0], b[0]};
    const auto ra = loss_and_gradient(a, p, cfg, 0, false);
    const auto rb = loss_and_gradient(b, p, cfg, 0, false);
    const auto rab = loss_and_gradient(ab, p, cfg, 0, false);
    const double na = static_cast<double>(ra.masked_frames), nb = static_cast<double>(rb.masked_frames);
    CHECK(rab.masked_frames == ra.masked_frames + rb.masked_frames);
    CHECK(rab.loss == doctest::Approx((na * ra.loss + nb * rb.loss) / (na + nb)).epsilon(1e-12));
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(std::abs(rab.grad[i] - (na * ra.grad[i] + nb * rb.grad[i]) / (na + nb)) <= 1e-12);
    }
  }

  TEST_CASE("parallel items give bit-identical results") {
    const auto cfg = small_config();
    const auto p = EncoderParams::initialize(cfg, 6);
    std::vector<TrainExample> batch;
    for (std::uint64_t i = 0; i < 5; ++i) batch.push_back(example(cfg, 24, i));
    const auto r1 = loss_and_gradient(batch, p, cfg, 3, true, true, 1);
    const auto r4 = loss_and_gradient(batch, p, cfg, 3, true, true, 4);
    CHECK(r1.loss == r4.loss);
    CHECK(r1.grad == r4.grad);
  }

  TEST_CASE("labels of unmasked frames do not matter") {
    const auto cfg = small_config();
    const auto p = EncoderParams::initialize(cfg, 6);
    auto ex = example(cfg, 30, 3);
    const TrainExample before[] = {ex};
    for (std::size_t t = 0; t < ex.input.frames; ++t) {
      if (!ex.mask.mask[t]) ex.targets.at(t, 0) = (ex.targets.at(t, 0) + 1) % 16;
    }
    const TrainExample after[] = {ex};
    const auto r0 = loss_and_gradient(before, p, cfg, 1);
    const auto r1 = loss_and_gradient(after, p, cfg, 1);
    CHECK(r0.loss == r1.loss);
    CHECK(r0.grad == r1.grad);
  }

  TEST_CASE("swapping heads permutes the head losses") {
    const auto cfg = small_config({16, 16});
    auto p = EncoderParams::initialize(cfg, 7);
    jitter(p, 0.05, 2);
    auto ex = example(cfg, 30, 4);
    const TrainExample batch[] = {ex};
    const auto r = loss_and_gradient(batch, p, cfg, 0, false, false);
    for (std::size_t t = 0; t < ex.targets.frames; ++t) std::swap(ex.targets.at(t, 0), ex.targets.at(t, 1));
    auto q = p;
    for (auto n : {".w", ".b"}) {
      auto h0 = q.tensor(std::string("head0") + n);
      auto h1 = q.tensor(std::string("head1") + n);
      std::swap_ranges(h0.begin(), h0.end(), h1.begin());
    }
    const TrainExample swapped[] = {ex};
    const auto s = loss_and_gradient(swapped, q, cfg, 0, false, false);
    CHECK(s.head_loss[0] == doctest::Approx(r.head_loss[1]).epsilon(1e-13));
    CHECK(s.head_loss[1] == doctest::Approx(r.head_loss[0]).epsilon(1e-13));
    CHECK(s.loss == doctest::Approx(r.loss).epsilon(1e-13));
  }

  TEST_CASE("a batch without masked frames is rejected") {
    const auto cfg = small_config();
    const auto p = EncoderParams::initialize(cfg, 6);
    auto ex = example(cfg, 12, 1);
    std::fill(ex.mask.mask.begin(), ex.mask.mask.end(), false);
    ex.mask.chunks.clear();
    const TrainExample batch[] = {ex};
    CHECK_THROWS_AS(loss_and_gradient(batch, p, cfg, 0), Error);
    CHECK_THROWS_AS(loss_and_gradient(std::span<const TrainExample>{}, p, cfg, 0), Error);
  }

  TEST_CASE("analytic gradient matches finite differences on a small model") {
    auto cfg = small_config({8});
    cfg.layers = 1;
    cfg.dropout = 0.0;
    auto p = EncoderParams::initialize(cfg, 8);
    jitter(p, 0.05, 3);
    const TrainExample batch[] = {example(cfg, 12, 5)};
    const auto r = loss_and_gradient(batch, p, cfg, 0, false);
    Rng pick(1);
    double worst = 0;
    for (int k = 0; k < 60; ++k) {
      const std::size_t i = pick.below(p.size());
      auto x = p.flatten();
      auto f = [&](std::vector<double>& v) {
        EncoderParams q = p;
        q.unflatten(v);
        return loss_and_gradient(batch, q, cfg, 0, false, false).loss;
      };
      const double fd = marq::testing::central_difference(f, x, i, 1e-5);
      worst = std::max(worst, std::abs(fd - r.grad[i]) / std::max({std::abs(fd), std::abs(r.grad[i]), 1e-6}));
    }
    CHECK(worst < 1e-4);
  }

  TEST_CASE("rotary embedding") {
    Rng rng(2);
    ad::Matrix x(6, 8);
    for (auto& v : x.data) v = rng.normal();
    const std::vector<double> zeros(6, 0.0);
    CHECK(rope_rotate(x, zeros) == x);
    std::vector<double> pos{0, 1, 2, 3, 4, 5};
    const auto y = rope_rotate(x, pos);
    for (std::size_t t = 0; t < 6; ++t) {
      double a = 0, b = 0;
      for (std::size_t j = 0; j < 8; ++j) {
        a += x(t, j) * x(t, j);
        b += y(t, j) * y(t, j);
      }
      CHECK(b == doctest::Approx(a).epsilon(1e-12));
    }
    // Dot products depend only on the position difference.
    ad::Matrix q(2, 8), k(2, 8);
    for (std::size_t j = 0; j < 8; ++j) {
      q(0, j) = q(1, j) = rng.normal();
      k(0, j) = k(1, j) = rng.normal();
    }
    const double qp[] = {3, 10}, kp[] = {1, 8};
    const auto rq = rope_rotate(q, qp), rk = rope_rotate(k, kp);
    double d0 = 0, d1 = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      d0 += rq(0, j) * rk(0, j);
      d1 += rq(1, j) * rk(1, j);
    }
    CHECK(d0 == doctest::Approx(d1).epsilon(1e-10));
    CHECK_THROWS_AS(rope_rotate(ad::Matrix(2, 3), std::vector<double>{0, 1}), Error);
  }

  TEST_CASE("huge logits keep the loss finite") {
    const auto cfg = small_config({8});
    auto p = EncoderParams::initialize(cfg, 9);
    for (auto& v : p.tensor("head0.w")) v *= 1e5;
    const TrainExample batch[] = {example(cfg, 24, 2)};
    const auto r = loss_and_gradient(batch, p, cfg, 0, false);
    CHECK(std::isfinite(r.loss));
    CHECK(std::all_of(r.grad.begin(), r.grad.end(), [](double g) { return std::isfinite(g); }));
  }

  TEST_CASE("input shape and values are checked") {
    const auto cfg = small_config();
    const auto p = EncoderParams::initialize(cfg, 1);
    CHECK_THROWS_AS(encode(random_input(10, 7, 1), p, cfg, false, 0), Error);
    auto bad = random_input(10, 8, 1);
    bad.data[3] = std::nanf("");
    CHECK_THROWS_AS(encode(bad, p, cfg, false, 0), Error);
  }
}
