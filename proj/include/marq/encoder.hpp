#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "marq/autodiff.hpp"
#include "marq/features.hpp"
#include "marq/masking.hpp"
#include "marq/quantizers.hpp"

namespace marq {

struct EncoderConfig {
  std::size_t input_dims = 64;
  std::size_t layers = 2;
  std::size_t model_dims = 64;
  std::size_t heads = 4;
  std::size_t conv_kernel = 15;
  double ffn_expansion = 4.0;
  double dropout = 0.2;
  double deepnorm_alpha = 2.632;
  double deepnorm_beta = 0.022;
  double init_std = 0.02;
  double rope_base = 10000.0;
  std::vector<std::uint64_t> vocab_sizes{256};

  std::size_t head_dims() const { return model_dims / heads; }
  std::size_t ffn_dims() const;
  void validate() const;
};

enum class TensorRole {
  weight,           // N(0, init_std^2)
  residual_weight,  // N(0, init_std^2) * deepnorm_beta
  bias,             // zeros
  norm_gain,        // ones
  norm_bias,        // zeros
};

struct TensorInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  TensorRole role = TensorRole::weight;

  std::size_t size() const { return rows * cols; }
};

// Parameter layout for a config, in flat-vector order.
std::vector<TensorInfo> parameter_layout(const EncoderConfig& cfg);

// All trainable tensors. The flat vector is the storage; named tensors are
// views into it at the offsets of `layout`.
class EncoderParams {
 public:
  EncoderParams() = default;
  explicit EncoderParams(const EncoderConfig& cfg);

  // Seeded init: tensor `name` draws init_std * N(0,1) from
  // Rng(derive_seed(seed, "init/" + name)); residual-branch weights are then
  // multiplied by deepnorm_beta. Biases and norm offsets are zero, gains one.
  static EncoderParams initialize(const EncoderConfig& cfg, std::uint64_t seed);

  const std::vector<TensorInfo>& layout() const { return layout_; }
  const TensorInfo& info(const std::string& name) const;
  std::span<double> tensor(const std::string& name);
  std::span<const double> tensor(const std::string& name) const;
  ad::Matrix matrix(const TensorInfo& info) const;

  std::size_t size() const { return flat_.size(); }
  const std::vector<double>& flatten() const { return flat_; }
  std::vector<double>& flat() { return flat_; }
  void unflatten(std::span<const double> values);

  friend bool operator==(const EncoderParams& a, const EncoderParams& b) { return a.flat_ == b.flat_; }

 private:
  std::vector<TensorInfo> layout_;
  std::vector<double> flat_;
};

// Rotates pairs (x[2i], x[2i+1]) of each row by positions[t] * base^(-2i/d).
ad::Matrix rope_rotate(const ad::Matrix& x, std::span<const double> positions, double base = 10000.0);

struct ForwardTrace {
  std::vector<ad::Matrix> layer_outputs;  // layers + 1 entries; [0] is the input projection
  std::vector<ad::Matrix> logits;         // one frames x vocab matrix per head
  ad::Matrix embeddings;                  // == layer_outputs.back()
  std::uint64_t dropout_seed = 0;
  bool train_mode = false;
};

ad::Matrix to_matrix(const FeatureMatrix& feat);

// Conformer block: half-FFN -> ROPE self-attention -> conv module -> half-FFN,
// each sub-block H <- LayerNorm(alpha * H + f(H)). Dropout only in train_mode.
ForwardTrace encode(const FeatureMatrix& feat, const EncoderParams& params, const EncoderConfig& cfg,
                    bool train_mode, std::uint64_t dropout_seed);

// Inference-mode activations after `layer_index` blocks (0 = input projection).
ad::Matrix embeddings_for_probe(const FeatureMatrix& feat, const EncoderParams& params,
                                const EncoderConfig& cfg, std::size_t layer_index);

struct TrainExample {
  FeatureMatrix input;  // corrupted, standardized features
  TargetTensor targets;
  MaskPlan mask;
};

struct LossResult {
  double loss = 0.0;
  std::vector<double> grad;             // empty unless requested
  std::vector<double> head_loss;        // mean masked cross-entropy per head
  std::vector<double> head_accuracy;    // masked argmax accuracy per head
  std::size_t masked_frames = 0;
  std::vector<std::uint64_t> head_correct;
};

// loss = mean over heads of the mean masked-frame cross-entropy over the whole
// batch. Items run independently (up to `jobs` at a time) and their gradients
// are reduced in batch order. Dropout for item i uses derive_seed(seed, "dropout", i).
LossResult loss_and_gradient(std::span<const TrainExample> batch, const EncoderParams& params,
                             const EncoderConfig& cfg, std::uint64_t seed, bool train_mode = true,
                             bool want_grad = true, std::size_t jobs = 1);

}  // namespace marq
