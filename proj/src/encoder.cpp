#include "marq/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "marq/error.hpp"
#include "marq/parallel.hpp"
#include "marq/rng.hpp"

namespace marq {

std::size_t EncoderConfig::ffn_dims() const {
  return static_cast<std::size_t>(std::llround(ffn_expansion * static_cast<double>(model_dims)));
}

void EncoderConfig::validate() const {
  require(input_dims > 0 && model_dims > 0 && heads > 0, Errc::invalid_argument,
          "encoder dims and heads must be positive");
  require(model_dims % heads == 0, Errc::invalid_argument, "model_dims must be divisible by heads");
  require(head_dims() % 2 == 0, Errc::invalid_argument, "rotary embedding needs even head dims");
  require(conv_kernel % 2 == 1, Errc::invalid_argument, "conv_kernel must be odd");
  require(dropout >= 0.0 && dropout < 1.0, Errc::invalid_argument, "dropout must be in [0, 1)");
  require(ffn_dims() > 0, Errc::invalid_argument, "ffn_expansion too small");
  require(!vocab_sizes.empty(), Errc::invalid_argument, "encoder needs at least one classifier head");
  for (auto v : vocab_sizes) require(v > 0, Errc::invalid_argument, "vocab size must be positive");
}

std::vector<TensorInfo> parameter_layout(const EncoderConfig& cfg) {
  cfg.validate();
  std::vector<TensorInfo> out;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols, TensorRole role) {
    out.push_back({std::move(name), rows, cols, offset, role});
    offset += rows * cols;
  };
  const std::size_t d = cfg.model_dims;
  const std::size_t f = cfg.ffn_dims();
  auto norm = [&](const std::string& prefix) {
    add(prefix + ".g", 1, d, TensorRole::norm_gain);
    add(prefix + ".b", 1, d, TensorRole::norm_bias);
  };
  auto ffn = [&](const std::string& p) {
    add(p + ".w1", d, f, TensorRole::residual_weight);
    add(p + ".b1", 1, f, TensorRole::bias);
    add(p + ".w2", f, d, TensorRole::residual_weight);
    add(p + ".b2", 1, d, TensorRole::bias);
    norm(p + ".ln");
  };

  add("input.w", cfg.input_dims, d, TensorRole::weight);
  add("input.b", 1, d, TensorRole::bias);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    ffn(p + ".ffn1");
    add(p + ".attn.wq", d, d, TensorRole::weight);
    add(p + ".attn.bq", 1, d, TensorRole::bias);
    add(p + ".attn.wk", d, d, TensorRole::weight);
    add(p + ".attn.bk", 1, d, TensorRole::bias);
    add(p + ".attn.wv", d, d, TensorRole::residual_weight);
    add(p + ".attn.bv", 1, d, TensorRole::bias);
    add(p + ".attn.wo", d, d, TensorRole::residual_weight);
    add(p + ".attn.bo", 1, d, TensorRole::bias);
    norm(p + ".attn.ln");
    add(p + ".conv.pw1.w", d, 2 * d, TensorRole::residual_weight);
    add(p + ".conv.pw1.b", 1, 2 * d, TensorRole::bias);
    add(p + ".conv.dw.w", cfg.conv_kernel, d, TensorRole::residual_weight);
    add(p + ".conv.dw.b", 1, d, TensorRole::bias);
    norm(p + ".conv.norm");
    add(p + ".conv.pw2.w", d, d, TensorRole::residual_weight);
    add(p + ".conv.pw2.b", 1, d, TensorRole::bias);
    norm(p + ".conv.ln");
    ffn(p + ".ffn2");
  }
  for (std::size_t h = 0; h < cfg.vocab_sizes.size(); ++h) {
    const std::string p = "head" + std::to_string(h);
    add(p + ".w", d, static_cast<std::size_t>(cfg.vocab_sizes[h]), TensorRole::weight);
    add(p + ".b", 1, static_cast<std::size_t>(cfg.vocab_sizes[h]), TensorRole::bias);
  }
  return out;
}

EncoderParams::EncoderParams(const EncoderConfig& cfg) : layout_(parameter_layout(cfg)) {
  std::size_t total = 0;
  for (const auto& t : layout_) total += t.size();
  flat_.assign(total, 0.0);
}

EncoderParams EncoderParams::initialize(const EncoderConfig& cfg, std::uint64_t seed) {
  EncoderParams p(cfg);
  for (const auto& t : p.layout_) {
    std::span<double> values(p.flat_.data() + t.offset, t.size());
    switch (t.role) {
      case TensorRole::weight:
      case TensorRole::residual_weight: {
        Rng rng(derive_seed(seed, "init/" + t.name));
        const double scale = t.role == TensorRole::residual_weight ? cfg.deepnorm_beta : 1.0;
        for (double& v : values) v = cfg.init_std * rng.normal() * scale;
        break;
      }
      case TensorRole::norm_gain:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case TensorRole::bias:
      case TensorRole::norm_bias:
        std::fill(values.begin(), values.end(), 0.0);
        break;
    }
  }
  return p;
}

const TensorInfo& EncoderParams::info(const std::string& name) const {
  for (const auto& t : layout_) {
    if (t.name == name) return t;
  }
  fail(Errc::not_found, "no parameter tensor named '" + name + "'");
}

std::span<double> EncoderParams::tensor(const std::string& name) {
  const auto& t = info(name);
  return {flat_.data() + t.offset, t.size()};
}

std::span<const double> EncoderParams::tensor(const std::string& name) const {
  const auto& t = info(name);
  return {flat_.data() + t.offset, t.size()};
}

ad::Matrix EncoderParams::matrix(const TensorInfo& t) const {
  ad::Matrix m(t.rows, t.cols);
  std::copy_n(flat_.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), m.data.begin());
  return m;
}

void EncoderParams::unflatten(std::span<const double> values) {
  require(values.size() == flat_.size(), Errc::dimension_mismatch,
          "flat parameter vector has " + std::to_string(values.size()) + " entries, expected " +
              std::to_string(flat_.size()));
  std::copy(values.begin(), values.end(), flat_.begin());
}

ad::Matrix rope_rotate(const ad::Matrix& x, std::span<const double> positions, double base) {
  ad::Matrix out = x;
  ad::rope_rows(out, positions, base, false);
  return out;
}

ad::Matrix to_matrix(const FeatureMatrix& feat) {
  ad::Matrix m(feat.frames, feat.dims);
  std::copy(feat.data.begin(), feat.data.end(), m.data.begin());
  return m;
}

namespace {

// Builds the encoder forward pass into a graph.
class ForwardBuilder {
 public:
  ForwardBuilder(ad::Graph& g, const EncoderParams& params, const EncoderConfig& cfg, bool track_grads,
                 bool train_mode, std::uint64_t dropout_seed)
      : g_(g), cfg_(cfg), train_(train_mode), rng_(derive_seed(dropout_seed, "dropout")) {
    for (const auto& t : params.layout()) {
      const ad::Var v = track_grads ? g_.parameter(params.matrix(t)) : g_.constant(params.matrix(t));
      vars_.emplace(t.name, v);
      order_.push_back({t.offset, v});
    }
  }

  ad::Var p(const std::string& name) const { return vars_.at(name); }

  ad::Var linear(ad::Var x, const std::string& w, const std::string& b) {
    return g_.add_row(g_.matmul(x, p(w)), p(b));
  }

  ad::Var drop(ad::Var x) { return train_ ? g_.dropout(x, cfg_.dropout, rng_) : x; }

  ad::Var residual(ad::Var h, ad::Var branch, const std::string& ln) {
    return g_.layer_norm(g_.add(g_.scale(h, cfg_.deepnorm_alpha), branch), p(ln + ".g"), p(ln + ".b"));
  }

  ad::Var ffn(ad::Var h, const std::string& pre) {
    ad::Var inner = drop(g_.swish(linear(h, pre + ".w1", pre + ".b1")));
    return g_.scale(drop(linear(inner, pre + ".w2", pre + ".b2")), 0.5);
  }

  ad::Var attention(ad::Var h, const std::string& pre) {
    const ad::Var q = linear(h, pre + ".wq", pre + ".bq");
    const ad::Var k = linear(h, pre + ".wk", pre + ".bk");
    const ad::Var v = linear(h, pre + ".wv", pre + ".bv");
    const std::size_t dh = cfg_.head_dims();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> outs;
    for (std::size_t head = 0; head < cfg_.heads; ++head) {
      const ad::Var qh = g_.rope(g_.slice_cols(q, head * dh, dh), cfg_.rope_base);
      const ad::Var kh = g_.rope(g_.slice_cols(k, head * dh, dh), cfg_.rope_base);
      const ad::Var vh = g_.slice_cols(v, head * dh, dh);
      const ad::Var weights = g_.softmax_rows(g_.scale(g_.matmul_nt(qh, kh), scale));
      outs.push_back(g_.matmul(weights, vh));
    }
    const ad::Var merged = outs.size() == 1 ? outs.front() : g_.concat_cols(outs);
    return drop(linear(merged, pre + ".wo", pre + ".bo"));
  }

  ad::Var conv(ad::Var h, const std::string& pre) {
    ad::Var x = g_.glu(linear(h, pre + ".pw1.w", pre + ".pw1.b"));
    x = g_.depthwise_conv(x, p(pre + ".dw.w"), p(pre + ".dw.b"));
    x = g_.swish(g_.layer_norm(x, p(pre + ".norm.g"), p(pre + ".norm.b")));
    return drop(linear(x, pre + ".pw2.w", pre + ".pw2.b"));
  }

  // Returns the per-layer outputs (input projection first).
  std::vector<ad::Var> body(ad::Var x, std::size_t stop_layer) {
    std::vector<ad::Var> outs;
    ad::Var h = linear(x, "input.w", "input.b");
    outs.push_back(h);
    for (std::size_t l = 0; l < stop_layer; ++l) {
      const std::string pre = "layer" + std::to_string(l);
      h = residual(h, ffn(h, pre + ".ffn1"), pre + ".ffn1.ln");
      h = residual(h, attention(h, pre + ".attn"), pre + ".attn.ln");
      h = residual(h, conv(h, pre + ".conv"), pre + ".conv.ln");
      h = residual(h, ffn(h, pre + ".ffn2"), pre + ".ffn2.ln");
      outs.push_back(h);
    }
    return outs;
  }

  std::vector<ad::Var> heads(ad::Var h) {
    std::vector<ad::Var> out;
    for (std::size_t i = 0; i < cfg_.vocab_sizes.size(); ++i) {
      const std::string pre = "head" + std::to_string(i);
      out.push_back(linear(h, pre + ".w", pre + ".b"));
    }
    return out;
  }

  // Scatters parameter gradients into flat order.
  void collect_grads(std::vector<double>& flat) const {
    for (const auto& [offset, v] : order_) {
      const auto& gm = g_.grad(v);
      std::copy(gm.data.begin(), gm.data.end(), flat.begin() + static_cast<std::ptrdiff_t>(offset));
    }
  }

 private:
  ad::Graph& g_;
  const EncoderConfig& cfg_;
  bool train_;
  Rng rng_;
  std::map<std::string, ad::Var> vars_;
  std::vector<std::pair<std::size_t, ad::Var>> order_;
};

void check_input(const FeatureMatrix& feat, const EncoderConfig& cfg) {
  require(feat.dims == cfg.input_dims, Errc::dimension_mismatch,
          "encoder expects " + std::to_string(cfg.input_dims) + " input dims, got " +
              std::to_string(feat.dims));
  require(feat.frames > 0, Errc::invalid_argument, "encoder input has no frames");
  require(feat.all_finite(), Errc::numeric, "encoder input contains non-finite values");
}

}  // namespace

ForwardTrace encode(const FeatureMatrix& feat, const EncoderParams& params, const EncoderConfig& cfg,
                    bool train_mode, std::uint64_t dropout_seed) {
  check_input(feat, cfg);
  ad::Graph g;
  ForwardBuilder fb(g, params, cfg, false, train_mode, dropout_seed);
  const auto layers = fb.body(g.constant(to_matrix(feat)), cfg.layers);
  const auto logits = fb.heads(layers.back());
  ForwardTrace trace;
  trace.dropout_seed = dropout_seed;
  trace.train_mode = train_mode;
  for (ad::Var v : layers) trace.layer_outputs.push_back(g.value(v));
  for (ad::Var v : logits) trace.logits.push_back(g.value(v));
  trace.embeddings = trace.layer_outputs.back();
  return trace;
}

ad::Matrix embeddings_for_probe(const FeatureMatrix& feat, const EncoderParams& params,
                                const EncoderConfig& cfg, std::size_t layer_index) {
  require(layer_index <= cfg.layers, Errc::invalid_argument,
          "layer index " + std::to_string(layer_index) + " out of range [0, " +
              std::to_string(cfg.layers) + "]");
  check_input(feat, cfg);
  ad::Graph g;
  ForwardBuilder fb(g, params, cfg, false, false, 0);
  const auto layers = fb.body(g.constant(to_matrix(feat)), layer_index);
  return g.value(layers.back());
}

LossResult loss_and_gradient(std::span<const TrainExample> batch, const EncoderParams& params,
                             const EncoderConfig& cfg, std::uint64_t seed, bool train_mode,
                             bool want_grad, std::size_t jobs) {
  require(!batch.empty(), Errc::invalid_argument, "empty batch");
  const std::size_t heads = cfg.vocab_sizes.size();
  std::size_t masked = 0;
  for (const auto& ex : batch) {
    check_input(ex.input, cfg);
    require(ex.targets.heads == heads, Errc::dimension_mismatch, "target heads differ from encoder heads");
    require(ex.targets.frames == ex.input.frames && ex.mask.frames == ex.input.frames,
            Errc::dimension_mismatch, "features, targets and mask disagree on frame count");
    for (std::size_t h = 0; h < heads; ++h) {
      require(ex.targets.head_vocab_sizes[h] == cfg.vocab_sizes[h], Errc::dimension_mismatch,
              "target vocabulary differs from encoder head");
    }
    masked += ex.mask.masked_count();
  }
  require(masked > 0, Errc::invalid_argument, "no masked frames in batch");
  const double inv_masked = 1.0 / static_cast<double>(masked);
  const double inv_heads = 1.0 / static_cast<double>(heads);

  struct ItemResult {
    std::vector<double> grad;
    std::vector<double> head_loss;
    std::vector<std::uint64_t> correct;
  };
  std::vector<ItemResult> items(batch.size());

  parallel_for(batch.size(), jobs, [&](std::size_t i) {
    const TrainExample& ex = batch[i];
    ad::Graph g;
    ForwardBuilder fb(g, params, cfg, want_grad, train_mode, derive_seed(seed, "dropout", i));
    const auto layers = fb.body(g.constant(to_matrix(ex.input)), cfg.layers);
    const auto logits = fb.heads(layers.back());
    std::vector<double> weights(ex.input.frames, 0.0);
    for (std::size_t t = 0; t < ex.input.frames; ++t) weights[t] = ex.mask.mask[t] ? inv_masked : 0.0;

    ItemResult& out = items[i];
    out.head_loss.resize(heads);
    out.correct.assign(heads, 0);
    std::vector<ad::Var> terms;
    std::vector<std::int32_t> labels(ex.input.frames);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < ex.input.frames; ++t) labels[t] = ex.targets.at(t, h);
      const ad::Var ce = g.cross_entropy(logits[h], labels, weights);
      out.head_loss[h] = g.value(ce).data[0];
      terms.push_back(g.scale(ce, inv_heads));
      const ad::Matrix& lg = g.value(logits[h]);
      for (std::size_t t = 0; t < ex.input.frames; ++t) {
        if (!ex.mask.mask[t]) continue;
        const auto row = lg.row(t);
        const auto best = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == labels[t]) ++out.correct[h];
      }
    }
    if (want_grad) {
      const ad::Var total = g.sum(terms);
      g.backward(total);
      out.grad.assign(params.size(), 0.0);
      fb.collect_grads(out.grad);
    }
  });

  LossResult result;
  result.masked_frames = masked;
  result.head_loss.assign(heads, 0.0);
  result.head_correct.assign(heads, 0);
  if (want_grad) result.grad.assign(params.size(), 0.0);
  for (const auto& item : items) {
    for (std::size_t h = 0; h < heads; ++h) {
      result.head_loss[h] += item.head_loss[h];
      result.head_correct[h] += item.correct[h];
    }
    if (want_grad) {
      for (std::size_t k = 0; k < result.grad.size(); ++k) result.grad[k] += item.grad[k];
    }
  }
  // Summed in sorted order so the total does not depend on head order.
  std::vector<double> sorted = result.head_loss;
  std::sort(sorted.begin(), sorted.end());
  for (double v : sorted) result.loss += v;
  result.loss *= inv_heads;
  result.head_accuracy.resize(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    result.head_accuracy[h] = static_cast<double>(result.head_correct[h]) * inv_masked;
  }
  return result;
}

}  // namespace marq
