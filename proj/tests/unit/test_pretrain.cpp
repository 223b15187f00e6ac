#include <doctest.h>

#include <cmath>
#include <numeric>

#include "marq/checkpoint.hpp"
#include "marq/config.hpp"
#include "marq/error.hpp"
#include "marq/optimizer.hpp"
#include "marq/pretrain.hpp"
#include "synth.hpp"

using namespace marq;

namespace {
PipelineConfig tiny_config() {
  PipelineConfig c = preset_config("desk");
  c.seed = 5;
  c.encoder.layers = 1;
  c.encoder.model_dims = 32;
  c.encoder.heads = 2;
  c.train.steps = 8;
  c.train.warmup_steps = 2;
  c.train.batch_size = 2;
  c.train.segment_seconds = 2.0;
  c.resolve();
  return c;
}

// Small shared corpus: 6 train and 2 valid clips of 3 s.
const Corpus& tiny_corpus() {
  static const Corpus corpus = [] {
    const auto dir = marq::testing::scratch_dir("pretrain_unit");
    const auto manifest = load_manifest(marq::testing::write_sine_corpus(dir, 6, 2, 3.0, 17));
    return prepare_corpus(manifest, tiny_config(), 2);
  }();
  return corpus;
}
}  // namespace

TEST_SUITE("pretrain") {
  TEST_CASE("learning-rate schedule examples") {
    TrainConfig t;
    CHECK(t.max_lr == 1e-4);
    t.max_lr = 1e-3;
    CHECK(lr_at(0, t) == 0.0);
    CHECK(lr_at(50, t) == doctest::Approx(5e-4));
    CHECK(lr_at(100, t) == doctest::Approx(1e-3));
    CHECK(lr_at(1050, t) == doctest::Approx(5e-4));
    CHECK(lr_at(2000, t) == doctest::Approx(0.0));
    CHECK_THROWS_AS(lr_at(2001, t), Error);
    for (std::uint64_t s = 0; s < t.steps; ++s) {
      CHECK(std::abs(lr_at(s + 1, t) - lr_at(s, t)) <= t.max_lr / t.warmup_steps + 1e-15);
    }
  }

  TEST_CASE("first AdamW step moves every coordinate by lr against the gradient") {
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0}, 3);
    std::vector<double> p{1.0, -2.0, 0.5};
    const std::vector<double> g{0.3, -4.0, 1e-3};
    opt.update(p, g, 0.01);
    CHECK(p[0] == doctest::Approx(0.99));
    CHECK(p[1] == doctest::Approx(-1.99));
    CHECK(p[2] == doctest::Approx(0.49).epsilon(1e-6));
    CHECK(opt.step == 1);
  }

  TEST_CASE("decoupled weight decay shrinks parameters with zero gradient") {
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.1}, 1);
    std::vector<double> p{2.0};
    const std::vector<double> g{0.0};
    opt.update(p, g, 0.5);
    CHECK(p[0] == doctest::Approx(2.0 - 0.5 * 0.1 * 2.0));
  }

  TEST_CASE("AdamW descends a quadratic") {
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0}, 4);
    std::vector<double> p{3, -1, 2, 0.5}, g(4);
    auto loss = [&] { return std::inner_product(p.begin(), p.end(), p.begin(), 0.0); };
    const double start = loss();
    for (int i = 0; i < 200; ++i) {
      for (int k = 0; k < 4; ++k) g[k] = 2 * p[k];
      opt.update(p, g, 1e-2);
    }
    CHECK(loss() < 0.5 * start);
  }

  TEST_CASE("one small step lowers the encoder loss on the same batch") {
    const auto state = init_state(tiny_config(), tiny_corpus());
    const auto batch = assemble_batch(tiny_corpus(), state.config, 1);
    const auto& enc = state.config.encoder;
    auto params = state.params;
    const auto before = loss_and_gradient(batch, params, enc, 0, false);
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0}, params.size());
    opt.update(params.flat(), before.grad, 1e-6);
    CHECK(loss_and_gradient(batch, params, enc, 0, false, false).loss < before.loss);
  }

  TEST_CASE("global norm clipping") {
    std::vector<double> g{3, 4};
    CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
    CHECK(g[0] == doctest::Approx(0.6));
    CHECK(g[1] == doctest::Approx(0.8));
    std::vector<double> h{0.3, 0.4};
    clip_global_norm(h, 1.0);
    CHECK(h == std::vector<double>{0.3, 0.4});
  }

  TEST_CASE("tiny corpus has the expected splits and token ranges") {
    const auto& c = tiny_corpus();
    CHECK(c.split(Split::train).size() == 6);
    CHECK(c.split(Split::valid).size() == 2);
    for (const auto& clip : c.clips) {
      clip.targets.validate();
      CHECK(clip.targets.frames == clip.input.frames);
      CHECK(clip.input.dims == 64);
    }
  }

  TEST_CASE("batches are a pure function of the step") {
    const auto cfg = tiny_config();
    const auto a = assemble_batch(tiny_corpus(), cfg, 3);
    const auto b = assemble_batch(tiny_corpus(), cfg, 3);
    REQUIRE(a.size() == 2);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].input == b[i].input);
      CHECK(a[i].targets == b[i].targets);
      CHECK(a[i].mask.mask == b[i].mask.mask);
      CHECK(a[i].input.frames == 31);
    }
    CHECK(assemble_batch(tiny_corpus(), cfg, 4)[0].input != a[0].input);
  }

  TEST_CASE("initial loss is near ln V and the untrained model is at chance") {
    const auto state = init_state(tiny_config(), tiny_corpus());
    const auto batch = assemble_batch(tiny_corpus(), state.config, 1);
    const auto r = loss_and_gradient(batch, state.params, state.config.encoder, 0, false, false);
    CHECK(std::abs(r.loss - std::log(256.0)) < 0.05);
    const auto v = validate(state, tiny_corpus(), Split::train, 2);
    // Chance is at most the share of the most common token; allow three sigma.
    const double n = static_cast<double>(v.masked_frames);
    std::map<std::int32_t, std::size_t> counts;
    std::size_t total = 0;
    for (const auto* clip : tiny_corpus().split(Split::train)) {
      for (auto l : clip->targets.labels) ++counts[l], ++total;
    }
    std::size_t top = 0;
    for (auto [k, c] : counts) top = std::max(top, c);
    const double p = static_cast<double>(top) / static_cast<double>(total);
    CHECK(v.mean_accuracy <= p + 3 * std::sqrt(p * (1 - p) / n));
  }

  TEST_CASE("same seed gives identical logs and resume continues exactly") {
    auto run = [](std::uint64_t stop, TrainState& s, std::vector<nlohmann::json>& log) {
      train_until(s, tiny_corpus(), stop, 2, [&](const MetricRecord& m) { log.push_back(m.to_json()); });
    };
    TrainState a = init_state(tiny_config(), tiny_corpus());
    TrainState b = a;
    std::vector<nlohmann::json> la, lb;
    run(8, a, la);
    run(8, b, lb);
    CHECK(la.size() == 8);
    CHECK(la == lb);
    CHECK(a == b);
    TrainState c = init_state(tiny_config(), tiny_corpus());
    std::vector<nlohmann::json> lc;
    run(4, c, lc);
    TrainState d = decode_checkpoint(encode_checkpoint(c));
    run(8, d, lc);
    CHECK(lc == la);
    CHECK(d == a);
  }

  TEST_CASE("checkpoints round trip and reject damage") {
    TrainState s = init_state(tiny_config(), tiny_corpus());
    train_until(s, tiny_corpus(), 2, 2);
    const auto bytes = encode_checkpoint(s);
    CHECK(bytes.substr(0, 8) == "MARQCK01");
    CHECK(decode_checkpoint(bytes) == s);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), Error);
    CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), Error);
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), Error);
    const auto path = marq::testing::scratch_dir("ckpt") / "s.marqck";
    save_checkpoint(s, path);
    CHECK(load_checkpoint(path) == s);
  }

  TEST_CASE("a model overfits constant targets") {
    EncoderConfig cfg;
    cfg.input_dims = 8;
    cfg.layers = 1;
    cfg.model_dims = 16;
    cfg.heads = 2;
    cfg.vocab_sizes = {8};
    auto params = EncoderParams::initialize(cfg, 1);
    TrainExample ex;
    ex.input = FeatureMatrix("mel", Rational(125, 8), 30, 8);
    Rng rng(2);
    for (auto& v : ex.input.data) v = static_cast<float>(rng.normal());
    ex.mask = make_mask(30, Rational(125, 8), 3);
    ex.targets.frames = 30;
    ex.targets.heads = 1;
    ex.targets.head_vocab_sizes = {8};
    ex.targets.labels.assign(30, 5);
    const TrainExample batch[] = {ex};
    AdamW opt(AdamWConfig{}, params.size());
    for (int s = 0; s < 60; ++s) {
      auto r = loss_and_gradient(batch, params, cfg, s, true);
      opt.update(params.flat(), r.grad, 1e-2);
    }
    CHECK(loss_and_gradient(batch, params, cfg, 0, false, false).head_accuracy[0] > 0.9);
  }

  TEST_CASE("non-finite losses abort training") {
    TrainState s = init_state(tiny_config(), tiny_corpus());
    for (auto& v : s.params.tensor("head0.b")) v = std::nan("");
    try {
      train_until(s, tiny_corpus(), 1, 1);
      FAIL("expected a numeric error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::numeric);
    }
  }

  TEST_CASE("an empty manifest is rejected") {
    CHECK_THROWS_AS(prepare_corpus(DatasetManifest{}, tiny_config(), 1), Error);
  }

  TEST_CASE("target norm is only fitted for global normalization") {
    auto cfg = tiny_config();
    std::vector<std::map<std::string, FeatureMatrix>> corpus(1);
    corpus[0].emplace("mel", FeatureMatrix("mel", Rational(125, 8), 4, 64));
    CHECK(TargetNorm::fit(corpus, cfg).per_feature.empty());
    cfg.quantizer.normalization = Normalization::global;
    CHECK(TargetNorm::fit(corpus, cfg).per_feature.size() == 1);
  }
}
