#include "marq/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "marq/error.hpp"
#include "marq/simd.hpp"

namespace marq::ad {
namespace {

double sigm(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void same_shape(const Matrix& a, const Matrix& b, const char* op) {
  require(a.rows == b.rows && a.cols == b.cols, Errc::dimension_mismatch,
          std::string(op) + ": shape " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
              " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
}

}  // namespace

double log_sum_exp(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

void rope_rows(Matrix& x, std::span<const double> positions, double base, bool inverse) {
  require(x.cols % 2 == 0, Errc::invalid_argument, "rotary embedding needs an even head dimension");
  require(positions.size() == x.rows, Errc::dimension_mismatch, "one position per row required");
  const std::size_t half = x.cols / 2;
  std::vector<double> theta(half);
  for (std::size_t i = 0; i < half; ++i) {
    theta[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(x.cols));
  }
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t t = 0; t < x.rows; ++t) {
    auto r = x.row(t);
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = positions[t] * theta[i];
      const double c = std::cos(angle);
      const double s = sign * std::sin(angle);
      const double a = r[2 * i], b = r[2 * i + 1];
      r[2 * i] = a * c - b * s;
      r[2 * i + 1] = a * s + b * c;
    }
  }
}

Var Graph::push(Matrix value, bool needs_grad, std::function<void(Graph&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Graph::parameter(Matrix value) { return push(std::move(value), true, nullptr); }

Var Graph::matmul(Var a, Var b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  require(A.cols == B.rows, Errc::dimension_mismatch, "matmul inner dimensions differ");
  Matrix C(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    auto crow = C.row(i);
    for (std::size_t p = 0; p < A.cols; ++p) {
      const double aip = A(i, p);
      if (aip != 0.0) simd::axpy(aip, B.row(p), crow);
    }
  }
  Var out{nodes_.size()};
  return push(std::move(C), needs(a) || needs(b), [a, b, out](Graph& gr) {
    const Matrix& A = gr.val(a);
    const Matrix& B = gr.val(b);
    const Matrix& G = gr.g(out);
    if (gr.needs(a)) {
      Matrix& dA = gr.g(a);
      for (std::size_t i = 0; i < A.rows; ++i) {
        for (std::size_t p = 0; p < A.cols; ++p) dA(i, p) += simd::dot(G.row(i), B.row(p));
      }
    }
    if (gr.needs(b)) {
      Matrix& dB = gr.g(b);
      for (std::size_t i = 0; i < A.rows; ++i) {
        for (std::size_t p = 0; p < A.cols; ++p) {
          const double aip = A(i, p);
          if (aip != 0.0) simd::axpy(aip, G.row(i), dB.row(p));
        }
      }
    }
  });
}

Var Graph::matmul_nt(Var a, Var b) {
  const Matrix& A = val(a);
  const Matrix& B = val(b);
  require(A.cols == B.cols, Errc::dimension_mismatch, "matmul_nt inner dimensions differ");
  Matrix C(A.rows, B.rows);
  for (std::size_t i = 0; i < A.rows; ++i) {
    for (std::size_t j = 0; j < B.rows; ++j) C(i, j) = simd::dot(A.row(i), B.row(j));
  }
  Var out{nodes_.size()};
  return push(std::move(C), needs(a) || needs(b), [a, b, out](Graph& gr) {
    const Matrix& A = gr.val(a);
    const Matrix& B = gr.val(b);
    const Matrix& G = gr.g(out);
    for (std::size_t i = 0; i < A.rows; ++i) {
      for (std::size_t j = 0; j < B.rows; ++j) {
        const double gij = G(i, j);
        if (gij == 0.0) continue;
        if (gr.needs(a)) simd::axpy(gij, B.row(j), gr.g(a).row(i));
        if (gr.needs(b)) simd::axpy(gij, A.row(i), gr.g(b).row(j));
      }
    }
  });
}

Var Graph::add(Var a, Var b) {
  same_shape(val(a), val(b), "add");
  Matrix C = val(a);
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += val(b).data[i];
  Var out{nodes_.size()};
  return push(std::move(C), needs(a) || needs(b), [a, b, out](Graph& gr) {
    const Matrix& G = gr.g(out);
    for (Var v : {a, b}) {
      if (!gr.needs(v)) continue;
      Matrix& d = gr.g(v);
      for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i];
    }
  });
}

Var Graph::add_row(Var x, Var bias) {
  const Matrix& X = val(x);
  const Matrix& B = val(bias);
  require(B.rows == 1 && B.cols == X.cols, Errc::dimension_mismatch, "bias must be 1 x cols");
  Matrix C = X;
  for (std::size_t r = 0; r < C.rows; ++r) {
    auto row = C.row(r);
    for (std::size_t c = 0; c < C.cols; ++c) row[c] += B.data[c];
  }
  Var out{nodes_.size()};
  return push(std::move(C), needs(x) || needs(bias), [x, bias, out](Graph& gr) {
    const Matrix& G = gr.g(out);
    if (gr.needs(x)) {
      Matrix& d = gr.g(x);
      for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i];
    }
    if (gr.needs(bias)) {
      auto db = gr.g(bias).row(0);
      for (std::size_t r = 0; r < G.rows; ++r) simd::axpy(1.0, G.row(r), db);
    }
  });
}

Var Graph::scale(Var x, double s) {
  Matrix C = val(x);
  for (double& v : C.data) v *= s;
  Var out{nodes_.size()};
  return push(std::move(C), needs(x), [x, s, out](Graph& gr) {
    simd::axpy(s, gr.g(out).data, gr.g(x).data);
  });
}

Var Graph::mul(Var a, Var b) {
  same_shape(val(a), val(b), "mul");
  Matrix C = val(a);
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] *= val(b).data[i];
  Var out{nodes_.size()};
  return push(std::move(C), needs(a) || needs(b), [a, b, out](Graph& gr) {
    const Matrix& G = gr.g(out);
    if (gr.needs(a)) {
      Matrix& d = gr.g(a);
      for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i] * gr.val(b).data[i];
    }
    if (gr.needs(b)) {
      Matrix& d = gr.g(b);
      for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i] * gr.val(a).data[i];
    }
  });
}

Var Graph::sigmoid(Var x) {
  Matrix C = val(x);
  for (double& v : C.data) v = sigm(v);
  Var out{nodes_.size()};
  return push(std::move(C), needs(x), [x, out](Graph& gr) {
    const Matrix& Y = gr.val(out);
    const Matrix& G = gr.g(out);
    Matrix& d = gr.g(x);
    for (std::size_t i = 0; i < G.size(); ++i) d.data[i] += G.data[i] * Y.data[i] * (1.0 - Y.data[i]);
  });
}

Var Graph::swish(Var x) {
  Matrix C = val(x);
  for (double& v : C.data) v = v * sigm(v);
  Var out{nodes_.size()};
  return push(std::move(C), needs(x), [x, out](Graph& gr) {
    const Matrix& X = gr.val(x);
    const Matrix& G = gr.g(out);
    Matrix& d = gr.g(x);
    for (std::size_t i = 0; i < G.size(); ++i) {
      const double s = sigm(X.data[i]);
      d.data[i] += G.data[i] * (s + X.data[i] * s * (1.0 - s));
    }
  });
}

Var Graph::relu(Var x) {
  Matrix C = val(x);
  for (double& v : C.data) v = v > 0.0 ? v : 0.0;
  Var out{nodes_.size()};
  return push(std::move(C), needs(x), [x, out](Graph& gr) {
    const Matrix& X = gr.val(x);
    const Matrix& G = gr.g(out);
    Matrix& d = gr.g(x);
    for (std::size_t i = 0; i < G.size(); ++i) {
      if (X.data[i] > 0.0) d.data[i] += G.data[i];
    }
  });
}

Var Graph::glu(Var x) {
  const Matrix& X = val(x);
  require(X.cols % 2 == 0, Errc::dimension_mismatch, "glu needs an even column count");
  const std::size_t half = X.cols / 2;
  Matrix C(X.rows, half);
  for (std::size_t r = 0; r < X.rows; ++r) {
    for (std::size_t c = 0; c < half; ++c) C(r, c) = X(r, c) * sigm(X(r, c + half));
  }
  Var out{nodes_.size()};
  return push(std::move(C), needs(x), [x, half, out](Graph& gr) {
    const Matrix& X = gr.val(x);
    const Matrix& G = gr.g(out);
    Matrix& d = gr.g(x);
    for (std::size_t r = 0; r < X.rows; ++r) {
      for (std::size_t c = 0; c < half; ++c) {
        const double s = sigm(X(r, c + half));
        d(r, c) += G(r, c) * s;
        d(r, c + half) += G(r, c) * X(r, c) * s * (1.0 - s);
      }
    }
  });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& X = val(x);
  const Matrix& Gm = val(gamma);
  const Matrix& Bt = val(beta);
  require(Gm.rows == 1 && Gm.cols == X.cols && Bt.rows == 1 && Bt.cols == X.cols,
          Errc::dimension_mismatch, "layer norm affine parameters must be 1 x cols");
  const std::size_t n = X.cols;
  Matrix normed(X.rows, n);
  std::vector<double> inv_std(X.rows);
  Matrix Y(X.rows, n);
  for (std::size_t r = 0; r < X.rows; ++r) {
    const auto row = X.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      normed(r, c) = (row[c] - mean) * inv_std[r];
      Y(r, c) = normed(r, c) * Gm.data[c] + Bt.data[c];
    }
  }
  Var out{nodes_.size()};
  return push(std::move(Y), needs(x) || needs(gamma) || needs(beta),
              [x, gamma, beta, out, normed = std::move(normed), inv_std = std::move(inv_std)](Graph& gr) {
                const Matrix& G = gr.g(out);
                const Matrix& Gm = gr.val(gamma);
                const std::size_t n = G.cols;
                if (gr.needs(gamma) || gr.needs(beta)) {
                  for (std::size_t r = 0; r < G.rows; ++r) {
                    for (std::size_t c = 0; c < n; ++c) {
                      if (gr.needs(gamma)) gr.g(gamma).data[c] += G(r, c) * normed(r, c);
                      if (gr.needs(beta)) gr.g(beta).data[c] += G(r, c);
                    }
                  }
                }
                if (!gr.needs(x)) return;
                Matrix& d = gr.g(x);
                std::vector<double> dn(n);
                for (std::size_t r = 0; r < G.rows; ++r) {
                  double mean_dn = 0.0, mean_dn_x = 0.0;
                  for (std::size_t c = 0; c < n; ++c) {
                    dn[c] = G(r, c) * Gm.data[c];
                    mean_dn += dn[c];
                    mean_dn_x += dn[c] * normed(r, c);
                  }
                  mean_dn /= static_cast<double>(n);
                  mean_dn_x /= static_cast<double>(n);
                  for (std::size_t c = 0; c < n; ++c) {
                    d(r, c) += inv_std[r] * (dn[c] - mean_dn - normed(r, c) * mean_dn_x);
                  }
                }
              });
}

Var Graph::softmax_rows(Var x) {
  Matrix Y = val(x);
  for (std::size_t r = 0; r < Y.rows; ++r) {
    auto row = Y.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v - m);
      s += v;
    }
    for (double& v : row) v /= s;
  }
  Var out{nodes_.size()};
  return push(std::move(Y), needs(x), [x, out](Graph& gr) {
    const Matrix& Y = gr.val(out);
    const Matrix& G = gr.g(out);
    Matrix& d = gr.g(x);
    for (std::size_t r = 0; r < Y.rows; ++r) {
      const double inner = simd::dot(G.row(r), Y.row(r));
      for (std::size_t c = 0; c < Y.cols; ++c) d(r, c) += Y(r, c) * (G(r, c) - inner);
    }
  });
}

Var Graph::slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Matrix& X = val(x);
  require(begin + count <= X.cols, Errc::dimension_mismatch, "column slice out of range");
  Matrix C(X.rows, count);
  for (std::size_t r = 0; r < X.rows; ++r) {
    std::copy_n(X.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count, C.row(r).begin());
  }
  Var out{nodes_.size()};
  return push(std::move(C), needs(x), [x, begin, out](Graph& gr) {
    const Matrix& G = gr.g(out);
    Matrix& d = gr.g(x);
    for (std::size_t r = 0; r < G.rows; ++r) {
      simd::axpy(1.0, G.row(r), d.row(r).subspan(begin, G.cols));
    }
  });
}

Var Graph::concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), Errc::invalid_argument, "concat of nothing");
  const std::size_t rows = val(parts[0]).rows;
  std::size_t cols = 0;
  bool any = false;
  for (Var p : parts) {
    require(val(p).rows == rows, Errc::dimension_mismatch, "concat row counts differ");
    cols += val(p).cols;
    any = any || needs(p);
  }
  Matrix C(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Matrix& P = val(p);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(P.row(r).begin(), P.row(r).end(), C.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    }
    offset += P.cols;
  }
  Var out{nodes_.size()};
  std::vector<Var> inputs(parts.begin(), parts.end());
  return push(std::move(C), any, [inputs, out](Graph& gr) {
    const Matrix& G = gr.g(out);
    std::size_t offset = 0;
    for (Var p : inputs) {
      const std::size_t w = gr.val(p).cols;
      if (gr.needs(p)) {
        Matrix& d = gr.g(p);
        for (std::size_t r = 0; r < G.rows; ++r) simd::axpy(1.0, G.row(r).subspan(offset, w), d.row(r));
      }
      offset += w;
    }
  });
}

Var Graph::rope(Var x, double base, std::size_t offset) {
  Matrix C = val(x);
  std::vector<double> positions(C.rows);
  for (std::size_t t = 0; t < C.rows; ++t) positions[t] = static_cast<double>(t + offset);
  rope_rows(C, positions, base, false);
  Var out{nodes_.size()};
  return push(std::move(C), needs(x), [x, base, out, positions = std::move(positions)](Graph& gr) {
    Matrix back = gr.g(out);
    rope_rows(back, positions, base, true);
    simd::axpy(1.0, back.data, gr.g(x).data);
  });
}

Var Graph::depthwise_conv(Var x, Var w, Var bias) {
  const Matrix& X = val(x);
  const Matrix& W = val(w);
  const Matrix& B = val(bias);
  require(W.cols == X.cols && B.rows == 1 && B.cols == X.cols, Errc::dimension_mismatch,
          "depthwise conv weights must be kernel x channels");
  require(W.rows % 2 == 1, Errc::invalid_argument, "depthwise conv kernel must be odd");
  const auto half = static_cast<std::ptrdiff_t>(W.rows / 2);
  const auto T = static_cast<std::ptrdiff_t>(X.rows);
  const std::size_t C = X.cols;
  Matrix Y(X.rows, C);
  for (std::ptrdiff_t t = 0; t < T; ++t) {
    auto y = Y.row(static_cast<std::size_t>(t));
    std::copy(B.data.begin(), B.data.end(), y.begin());
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(W.rows); ++j) {
      const std::ptrdiff_t src = t + j - half;
      if (src < 0 || src >= T) continue;
      const auto xs = X.row(static_cast<std::size_t>(src));
      const auto wj = W.row(static_cast<std::size_t>(j));
      for (std::size_t c = 0; c < C; ++c) y[c] += wj[c] * xs[c];
    }
  }
  Var out{nodes_.size()};
  return push(std::move(Y), needs(x) || needs(w) || needs(bias), [x, w, bias, out](Graph& gr) {
    const Matrix& X = gr.val(x);
    const Matrix& W = gr.val(w);
    const Matrix& G = gr.g(out);
    const auto half = static_cast<std::ptrdiff_t>(W.rows / 2);
    const auto T = static_cast<std::ptrdiff_t>(X.rows);
    const std::size_t C = X.cols;
    if (gr.needs(bias)) {
      for (std::size_t t = 0; t < G.rows; ++t) simd::axpy(1.0, G.row(t), gr.g(bias).row(0));
    }
    for (std::ptrdiff_t t = 0; t < T; ++t) {
      const auto gt = G.row(static_cast<std::size_t>(t));
      for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(W.rows); ++j) {
        const std::ptrdiff_t src = t + j - half;
        if (src < 0 || src >= T) continue;
        const auto s = static_cast<std::size_t>(src);
        const auto jj = static_cast<std::size_t>(j);
        if (gr.needs(x)) {
          auto dx = gr.g(x).row(s);
          const auto wj = W.row(jj);
          for (std::size_t c = 0; c < C; ++c) dx[c] += wj[c] * gt[c];
        }
        if (gr.needs(w)) {
          auto dw = gr.g(w).row(jj);
          const auto xs = X.row(s);
          for (std::size_t c = 0; c < C; ++c) dw[c] += xs[c] * gt[c];
        }
      }
    }
  });
}

Var Graph::dropout(Var x, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, Errc::invalid_argument, "dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  const Matrix& X = val(x);
  Matrix keep(X.rows, X.cols);
  const double scale = 1.0 / (1.0 - p);
  for (double& k : keep.data) k = rng.uniform() >= p ? scale : 0.0;
  return mul(x, constant(std::move(keep)));
}

Var Graph::cross_entropy(Var logits, std::span<const std::int32_t> labels,
                         std::span<const double> weights) {
  const Matrix& L = val(logits);
  require(labels.size() == L.rows && weights.size() == L.rows, Errc::dimension_mismatch,
          "cross entropy needs one label and weight per row");
  double total = 0.0;
  for (std::size_t r = 0; r < L.rows; ++r) {
    if (weights[r] == 0.0) continue;
    require(labels[r] >= 0 && static_cast<std::size_t>(labels[r]) < L.cols, Errc::invalid_argument,
            "label out of range for logits");
    total += weights[r] * (log_sum_exp(L.row(r)) - L(r, static_cast<std::size_t>(labels[r])));
  }
  Var out{nodes_.size()};
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  std::vector<double> wts(weights.begin(), weights.end());
  return push(Matrix(1, 1, total), needs(logits),
              [logits, out, lab = std::move(lab), wts = std::move(wts)](Graph& gr) {
                const double g = gr.g(out).data[0];
                const Matrix& L = gr.val(logits);
                Matrix& d = gr.g(logits);
                for (std::size_t r = 0; r < L.rows; ++r) {
                  if (wts[r] == 0.0) continue;
                  const double lse = log_sum_exp(L.row(r));
                  const double coeff = g * wts[r];
                  for (std::size_t c = 0; c < L.cols; ++c) d(r, c) += coeff * std::exp(L(r, c) - lse);
                  d(r, static_cast<std::size_t>(lab[r])) -= coeff;
                }
              });
}

Var Graph::bce_with_logits(Var logits, const Matrix& targets, double weight) {
  const Matrix& L = val(logits);
  same_shape(L, targets, "bce_with_logits");
  double total = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    const double x = L.data[i];
    total += std::max(x, 0.0) - x * targets.data[i] + std::log1p(std::exp(-std::abs(x)));
  }
  Var out{nodes_.size()};
  return push(Matrix(1, 1, weight * total), needs(logits), [logits, out, targets, weight](Graph& gr) {
    const double g = gr.g(out).data[0] * weight;
    const Matrix& L = gr.val(logits);
    Matrix& d = gr.g(logits);
    for (std::size_t i = 0; i < L.size(); ++i) d.data[i] += g * (sigm(L.data[i]) - targets.data[i]);
  });
}

Var Graph::squared_error(Var pred, const Matrix& targets, double weight) {
  const Matrix& P = val(pred);
  same_shape(P, targets, "squared_error");
  double total = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double e = P.data[i] - targets.data[i];
    total += e * e;
  }
  Var out{nodes_.size()};
  return push(Matrix(1, 1, weight * total), needs(pred), [pred, out, targets, weight](Graph& gr) {
    const double g = gr.g(out).data[0] * weight;
    const Matrix& P = gr.val(pred);
    Matrix& d = gr.g(pred);
    for (std::size_t i = 0; i < P.size(); ++i) d.data[i] += 2.0 * g * (P.data[i] - targets.data[i]);
  });
}

Var Graph::sum(std::span<const Var> scalars) {
  double total = 0.0;
  bool any = false;
  for (Var s : scalars) {
    require(val(s).rows == 1 && val(s).cols == 1, Errc::dimension_mismatch, "sum expects 1x1 inputs");
    total += val(s).data[0];
    any = any || needs(s);
  }
  Var out{nodes_.size()};
  std::vector<Var> inputs(scalars.begin(), scalars.end());
  return push(Matrix(1, 1, total), any, [inputs, out](Graph& gr) {
    const double g = gr.g(out).data[0];
    for (Var s : inputs) {
      if (gr.needs(s)) gr.g(s).data[0] += g;
    }
  });
}

void Graph::backward(Var root) {
  require(root.id < nodes_.size(), Errc::invalid_argument, "backward root not in graph");
  require(val(root).rows == 1 && val(root).cols == 1, Errc::invalid_argument, "backward root must be a scalar");
  for (auto& n : nodes_) {
    if (n.needs_grad) {
      n.grad = Matrix(n.value.rows, n.value.cols);
    } else {
      n.grad = Matrix();
    }
  }
  if (!nodes_[root.id].needs_grad) return;
  nodes_[root.id].grad.data[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    if (nodes_[i].backprop) nodes_[i].backprop(*this);
  }
}

}  // namespace marq::ad
