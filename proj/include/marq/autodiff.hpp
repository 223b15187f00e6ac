#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
// Nodes are appended in evaluation order, so the tape order is a topological
// order and backward() walks it in reverse.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "marq/rng.hpp"

namespace marq::ad {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

struct Var {
  std::size_t id = 0;
};

class Graph {
 public:
  Var constant(Matrix value);
  // Leaf whose gradient is kept after backward().
  Var parameter(Matrix value);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  // Gradient of the last backward() root with respect to v (zeros if unused).
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);       // a . b
  Var matmul_nt(Var a, Var b);    // a . b^T
  Var add(Var a, Var b);
  Var add_row(Var x, Var bias);   // bias is 1 x cols, broadcast over rows
  Var scale(Var x, double s);
  Var mul(Var a, Var b);          // elementwise
  Var sigmoid(Var x);
  Var swish(Var x);
  Var relu(Var x);
  Var glu(Var x);                 // first half * sigmoid(second half), over columns
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var softmax_rows(Var x);
  Var slice_cols(Var x, std::size_t begin, std::size_t count);
  Var concat_cols(std::span<const Var> parts);
  // Rotary embedding on every row t (position t + offset).
  Var rope(Var x, double base = 10000.0, std::size_t offset = 0);
  // Same-length depthwise 1-D convolution over rows; w is kernel x cols.
  Var depthwise_conv(Var x, Var w, Var bias);
  // Inverted dropout with a mask drawn from rng (identity when p == 0).
  Var dropout(Var x, double p, Rng& rng);

  // Scalar losses (1 x 1).
  // sum_t weight[t] * (logsumexp(logits[t]) - logits[t, label[t]]); rows with
  // zero weight are skipped.
  Var cross_entropy(Var logits, std::span<const std::int32_t> labels, std::span<const double> weights);
  // weight * sum of elementwise binary cross-entropy with logits.
  Var bce_with_logits(Var logits, const Matrix& targets, double weight);
  // weight * sum of squared errors.
  Var squared_error(Var pred, const Matrix& targets, double weight);
  Var sum(std::span<const Var> scalars);

  void backward(Var root);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void(Graph&)> backprop;
  };

  Var push(Matrix value, bool needs_grad, std::function<void(Graph&)> backprop);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  Matrix& g(Var v) { return nodes_[v.id].grad; }
  const Matrix& val(Var v) const { return nodes_[v.id].value; }

  std::vector<Node> nodes_;
};

// Free helpers shared with the graph ops.
void rope_rows(Matrix& x, std::span<const double> positions, double base, bool inverse);
double log_sum_exp(std::span<const double> row);

}  // namespace marq::ad
