#include "marq/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "marq/error.hpp"
#include "marq/optimizer.hpp"
#include "marq/rng.hpp"

namespace marq {

namespace {

constexpr const char* kTaskNames[] = {"track_multilabel", "track_regression", "track_multiclass",
                                      "frame_multiclass", "frame_binary_events"};

bool is_frame_task(TaskKind k) {
  return k == TaskKind::frame_multiclass || k == TaskKind::frame_binary_events;
}

double parse_number(const std::string& token, const std::string& clip) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(token, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == token.size() && !token.empty() && std::isfinite(v), Errc::format,
          "clip '" + clip + "': label '" + token + "' is not a number");
  return v;
}

std::size_t frame_of(double seconds, Rational rate, std::size_t frames) {
  const double f = std::floor(seconds * rate.value() + 0.5);
  if (f <= 0.0) return 0;
  return std::min(frames - 1, static_cast<std::size_t>(f));
}

struct Segment {
  double start, end;
  std::string name;
};

Segment parse_segment(const std::string& token, const std::string& clip) {
  const auto a = token.find(':');
  const auto b = a == std::string::npos ? a : token.find(':', a + 1);
  require(b != std::string::npos, Errc::format,
          "clip '" + clip + "': segment '" + token + "' is not start:end:class");
  Segment s{parse_number(token.substr(0, a), clip), parse_number(token.substr(a + 1, b - a - 1), clip),
            token.substr(b + 1)};
  require(s.end > s.start && !s.name.empty(), Errc::format, "clip '" + clip + "': bad segment '" + token + "'");
  return s;
}

// Sample matrix plus targets, one row per track or frame.
struct Samples {
  ad::Matrix x;
  std::vector<std::int32_t> labels;  // multiclass
  ad::Matrix y;                      // multilabel / regression / events
};

Samples gather(const ProbeDataset& data, const std::vector<const ProbeItem*>& items) {
  const std::size_t dims = items.front()->embeddings.cols;
  std::size_t rows = 0;
  for (const auto* it : items) rows += is_frame_task(data.task) ? it->embeddings.rows : 1;
  Samples s;
  s.x = ad::Matrix(rows, dims);
  const bool dense = data.task == TaskKind::track_multilabel || data.task == TaskKind::track_regression ||
                     data.task == TaskKind::frame_binary_events;
  if (dense) s.y = ad::Matrix(rows, data.outputs);
  std::size_t r = 0;
  for (const auto* it : items) {
    require(it->embeddings.cols == dims, Errc::dimension_mismatch,
            "clip '" + it->clip_id + "' has embeddings of a different width");
    if (!is_frame_task(data.task)) {
      const auto pooled = pool_track(it->embeddings);
      std::copy(pooled.begin(), pooled.end(), s.x.row(r).begin());
      switch (data.task) {
        case TaskKind::track_multiclass:
          s.labels.push_back(it->classes.at(0));
          break;
        case TaskKind::track_multilabel:
          for (auto c : it->classes) s.y(r, static_cast<std::size_t>(c)) = 1.0;
          break;
        default:
          for (std::size_t o = 0; o < data.outputs; ++o) s.y(r, o) = it->targets.at(o);
      }
      ++r;
      continue;
    }
    const std::size_t frames = it->embeddings.rows;
    for (std::size_t t = 0; t < frames; ++t) {
      const auto src = it->embeddings.row(t);
      std::copy(src.begin(), src.end(), s.x.row(r + t).begin());
    }
    if (data.task == TaskKind::frame_multiclass) {
      s.labels.insert(s.labels.end(), it->frame_labels.begin(), it->frame_labels.end());
    } else {
      for (double e : it->event_times) s.y(r + frame_of(e, data.frame_rate, frames), 0) = 1.0;
    }
    r += frames;
  }
  return s;
}

struct Mlp {
  std::size_t in = 0, hidden = 0, out = 0;
  std::vector<double> flat;

  std::size_t w1() const { return 0; }
  std::size_t b1() const { return in * hidden; }
  std::size_t w2() const { return b1() + hidden; }
  std::size_t b2() const { return w2() + hidden * out; }

  ad::Matrix slice(std::size_t offset, std::size_t rows, std::size_t cols) const {
    ad::Matrix m(rows, cols);
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), rows * cols, m.data.begin());
    return m;
  }
};

struct MlpVars {
  ad::Var w1, b1, w2, b2, out;
};

MlpVars forward(ad::Graph& g, const Mlp& mlp, ad::Matrix x, bool params) {
  auto make = [&](ad::Matrix m) { return params ? g.parameter(std::move(m)) : g.constant(std::move(m)); };
  MlpVars v;
  v.w1 = make(mlp.slice(mlp.w1(), mlp.in, mlp.hidden));
  v.b1 = make(mlp.slice(mlp.b1(), 1, mlp.hidden));
  v.w2 = make(mlp.slice(mlp.w2(), mlp.hidden, mlp.out));
  v.b2 = make(mlp.slice(mlp.b2(), 1, mlp.out));
  const ad::Var h = g.relu(g.add_row(g.matmul(g.constant(std::move(x)), v.w1), v.b1));
  v.out = g.add_row(g.matmul(h, v.w2), v.b2);
  return v;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

TaskKind parse_task_kind(const std::string& name) {
  for (std::size_t i = 0; i < std::size(kTaskNames); ++i) {
    if (name == kTaskNames[i]) return static_cast<TaskKind>(i);
  }
  fail(Errc::usage, "unknown probe task '" + name + "'");
}

const char* to_string(TaskKind kind) { return kTaskNames[static_cast<std::size_t>(kind)]; }

void ProbeConfig::validate() const {
  require(hidden_units > 0, Errc::invalid_argument, "probe hidden_units must be positive");
  require(epochs > 0 && batch_size > 0, Errc::invalid_argument, "probe epochs and batch_size must be positive");
  require(lr > 0.0, Errc::invalid_argument, "probe lr must be positive");
  require(threshold >= 0.0 && threshold <= 1.0, Errc::invalid_argument, "probe threshold must be in [0, 1]");
  require(min_gap >= 0.0 && tolerance >= 0.0, Errc::invalid_argument, "probe time windows must be non-negative");
}

void ProbeDataset::validate() const {
  require(!items.empty(), Errc::invalid_argument, "probe dataset is empty");
  require(outputs > 0, Errc::invalid_argument, "probe dataset has no outputs");
  for (const auto& it : items) {
    require(it.embeddings.rows > 0, Errc::invalid_argument, "clip '" + it.clip_id + "' has no embedding frames");
    switch (task) {
      case TaskKind::track_multiclass:
        require(it.classes.size() == 1, Errc::invalid_argument, "clip '" + it.clip_id + "' needs one class");
        break;
      case TaskKind::track_regression:
        require(it.targets.size() == outputs, Errc::dimension_mismatch,
                "clip '" + it.clip_id + "' has the wrong number of regression targets");
        break;
      case TaskKind::frame_multiclass:
        require(it.frame_labels.size() == it.embeddings.rows, Errc::dimension_mismatch,
                "clip '" + it.clip_id + "': frame labels and embeddings differ in length");
        break;
      default:
        break;
    }
    for (auto c : it.classes) {
      require(c >= 0 && static_cast<std::size_t>(c) < outputs, Errc::invalid_argument,
              "clip '" + it.clip_id + "' has an out-of-range class");
    }
    for (auto c : it.frame_labels) {
      require(c >= 0 && static_cast<std::size_t>(c) < outputs, Errc::invalid_argument,
              "clip '" + it.clip_id + "' has an out-of-range frame class");
    }
  }
}

std::vector<double> pool_track(const ad::Matrix& embeddings) {
  require(embeddings.rows > 0, Errc::invalid_argument, "cannot pool an empty embedding sequence");
  std::vector<double> out(embeddings.cols, 0.0);
  for (std::size_t t = 0; t < embeddings.rows; ++t) {
    for (std::size_t d = 0; d < embeddings.cols; ++d) out[d] += embeddings(t, d);
  }
  const double inv = 1.0 / static_cast<double>(embeddings.rows);
  for (double& v : out) v *= inv;
  return out;
}

double mean_average_precision(const ad::Matrix& scores, const ad::Matrix& truths,
                              std::vector<double>* per_class, std::vector<std::size_t>* skipped) {
  require(scores.rows > 0 && scores.cols > 0, Errc::invalid_argument, "mAP needs a non-empty score matrix");
  require(scores.rows == truths.rows && scores.cols == truths.cols, Errc::dimension_mismatch,
          "scores and truths differ in shape");
  double total = 0.0;
  std::size_t counted = 0;
  std::vector<std::size_t> order(scores.rows);
  for (std::size_t c = 0; c < scores.cols; ++c) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores(a, c) > scores(b, c); });
    std::size_t hits = 0;
    double ap = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (truths(order[k], c) > 0.5) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(k + 1);
      }
    }
    if (hits == 0) {
      if (skipped) skipped->push_back(c);
      continue;
    }
    ap /= static_cast<double>(hits);
    if (per_class) per_class->push_back(ap);
    total += ap;
    ++counted;
  }
  require(counted > 0, Errc::invalid_argument, "no class has a positive item");
  return total / static_cast<double>(counted);
}

double event_f_measure(std::span<const double> predicted, std::span<const double> reference,
                       double tolerance) {
  if (predicted.empty() && reference.empty()) return 1.0;
  if (predicted.empty() || reference.empty()) return 0.0;
  std::size_t i = 0, j = 0, matched = 0;
  while (i < predicted.size() && j < reference.size()) {
    const double d = predicted[i] - reference[j];
    if (std::abs(d) <= tolerance + 1e-12) {
      ++matched;
      ++i;
      ++j;
    } else if (d < 0) {
      ++i;
    } else {
      ++j;
    }
  }
  if (matched == 0) return 0.0;
  const double p = static_cast<double>(matched) / static_cast<double>(predicted.size());
  const double r = static_cast<double>(matched) / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

std::vector<double> frame_events_to_times(std::span<const double> probabilities, Rational frame_rate,
                                          double threshold, double min_gap) {
  require(frame_rate.positive(), Errc::invalid_argument, "frame rate must be positive");
  std::vector<std::size_t> peaks;
  const std::size_t n = probabilities.size();
  for (std::size_t t = 0; t < n; ++t) {
    const double p = probabilities[t];
    if (p < threshold || p <= 0.0) continue;
    const bool left = t == 0 || p > probabilities[t - 1];
    const bool right = t + 1 == n || p >= probabilities[t + 1];
    if (left && right) peaks.push_back(t);
  }
  std::stable_sort(peaks.begin(), peaks.end(),
                   [&](std::size_t a, std::size_t b) { return probabilities[a] > probabilities[b]; });
  const double rate = frame_rate.value();
  std::vector<double> kept;
  for (std::size_t t : peaks) {
    const double time = static_cast<double>(t) / rate;
    const bool close = std::any_of(kept.begin(), kept.end(),
                                   [&](double k) { return std::abs(k - time) < min_gap - 1e-12; });
    if (!close) kept.push_back(time);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

ProbeDataset make_probe_dataset(const DatasetManifest& manifest,
                                const std::map<std::string, ad::Matrix>& embeddings,
                                Rational frame_rate, TaskKind task) {
  ProbeDataset data;
  data.task = task;
  data.frame_rate = frame_rate;
  std::set<std::string> names;
  if (task == TaskKind::frame_multiclass) names.insert("none");
  for (const auto& e : manifest.entries) {
    for (const auto& tok : e.labels.tokens) {
      if (task == TaskKind::track_multiclass || task == TaskKind::track_multilabel) names.insert(tok);
      if (task == TaskKind::frame_multiclass) names.insert(parse_segment(tok, e.clip_id).name);
    }
  }
  data.class_names.assign(names.begin(), names.end());
  auto class_id = [&](const std::string& n) {
    return static_cast<std::int32_t>(std::lower_bound(data.class_names.begin(), data.class_names.end(), n) -
                                     data.class_names.begin());
  };
  switch (task) {
    case TaskKind::track_regression:
    case TaskKind::frame_binary_events:
      data.outputs = 1;
      break;
    default:
      data.outputs = data.class_names.size();
  }

  for (const auto& e : manifest.entries) {
    const auto found = embeddings.find(e.clip_id);
    require(found != embeddings.end(), Errc::not_found, "no embeddings for clip '" + e.clip_id + "'");
    ProbeItem item;
    item.clip_id = e.clip_id;
    item.split = e.split;
    item.embeddings = found->second;
    const auto& toks = e.labels.tokens;
    switch (task) {
      case TaskKind::track_multiclass:
        require(toks.size() == 1, Errc::format, "clip '" + e.clip_id + "' needs exactly one class label");
        item.classes.push_back(class_id(toks[0]));
        break;
      case TaskKind::track_multilabel:
        for (const auto& t : std::set<std::string>(toks.begin(), toks.end())) item.classes.push_back(class_id(t));
        break;
      case TaskKind::track_regression:
        item.targets.push_back(e.labels.scalar());
        break;
      case TaskKind::frame_multiclass: {
        item.frame_labels.assign(item.embeddings.rows, class_id("none"));
        const double rate = frame_rate.value();
        for (const auto& tok : toks) {
          const Segment s = parse_segment(tok, e.clip_id);
          for (std::size_t t = 0; t < item.frame_labels.size(); ++t) {
            const double center = (static_cast<double>(t) + 0.5) / rate;
            if (center >= s.start && center < s.end) item.frame_labels[t] = class_id(s.name);
          }
        }
        break;
      }
      case TaskKind::frame_binary_events:
        for (const auto& tok : toks) item.event_times.push_back(parse_number(tok, e.clip_id));
        std::sort(item.event_times.begin(), item.event_times.end());
        break;
    }
    data.items.push_back(std::move(item));
  }
  data.validate();
  return data;
}

ProbeResult train_probe(const ProbeDataset& data, const ProbeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  data.validate();
  std::vector<const ProbeItem*> train, test, valid;
  for (const auto& it : data.items) {
    (it.split == Split::train ? train : it.split == Split::test ? test : valid).push_back(&it);
  }
  if (test.empty()) test = valid;
  require(!train.empty(), Errc::invalid_argument, "probe needs a non-empty train split");
  require(!test.empty(), Errc::invalid_argument, "probe needs a non-empty test or valid split");

  Samples tr = gather(data, train);
  Samples te = gather(data, test);
  const std::size_t dims = tr.x.cols;

  // Standardize inputs with train statistics.
  std::vector<double> mean(dims, 0.0), inv(dims, 0.0);
  for (std::size_t r = 0; r < tr.x.rows; ++r) {
    for (std::size_t d = 0; d < dims; ++d) mean[d] += tr.x(r, d);
  }
  for (double& m : mean) m /= static_cast<double>(tr.x.rows);
  for (std::size_t r = 0; r < tr.x.rows; ++r) {
    for (std::size_t d = 0; d < dims; ++d) inv[d] += (tr.x(r, d) - mean[d]) * (tr.x(r, d) - mean[d]);
  }
  for (double& v : inv) {
    const double sd = std::sqrt(v / static_cast<double>(tr.x.rows));
    v = sd > 1e-8 ? 1.0 / sd : 1.0;
  }
  for (ad::Matrix* x : {&tr.x, &te.x}) {
    for (std::size_t r = 0; r < x->rows; ++r) {
      for (std::size_t d = 0; d < dims; ++d) (*x)(r, d) = ((*x)(r, d) - mean[d]) * inv[d];
    }
  }

  Mlp mlp;
  mlp.in = dims;
  mlp.hidden = cfg.hidden_units;
  mlp.out = data.outputs;
  mlp.flat.assign(mlp.b2() + mlp.out, 0.0);
  {
    Rng r1(derive_seed(seed, "probe/init/w1"));
    const double s1 = std::sqrt(2.0 / static_cast<double>(dims));
    for (std::size_t i = 0; i < dims * mlp.hidden; ++i) mlp.flat[mlp.w1() + i] = s1 * r1.normal();
    Rng r2(derive_seed(seed, "probe/init/w2"));
    const double s2 = std::sqrt(1.0 / static_cast<double>(mlp.hidden));
    for (std::size_t i = 0; i < mlp.hidden * mlp.out; ++i) mlp.flat[mlp.w2() + i] = s2 * r2.normal();
  }

  AdamWConfig acfg;
  acfg.weight_decay = cfg.weight_decay;
  AdamW opt(acfg, mlp.flat.size());
  const std::size_t n = tr.x.rows;
  std::vector<std::size_t> order(n);
  std::vector<double> grad(mlp.flat.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "probe/shuffle", epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, n - start);
      ad::Matrix xb(b, dims);
      ad::Matrix yb(b, tr.y.cols);
      std::vector<std::int32_t> lb;
      for (std::size_t k = 0; k < b; ++k) {
        const std::size_t src = order[start + k];
        std::copy(tr.x.row(src).begin(), tr.x.row(src).end(), xb.row(k).begin());
        if (tr.y.cols) std::copy(tr.y.row(src).begin(), tr.y.row(src).end(), yb.row(k).begin());
        if (!tr.labels.empty()) lb.push_back(tr.labels[src]);
      }
      ad::Graph g;
      const MlpVars v = forward(g, mlp, std::move(xb), true);
      const double inv_b = 1.0 / static_cast<double>(b);
      ad::Var loss{};
      switch (data.task) {
        case TaskKind::track_multiclass:
        case TaskKind::frame_multiclass:
          loss = g.cross_entropy(v.out, lb, std::vector<double>(b, inv_b));
          break;
        case TaskKind::track_regression:
          loss = g.squared_error(v.out, yb, inv_b / static_cast<double>(mlp.out));
          break;
        default:
          loss = g.bce_with_logits(v.out, yb, inv_b / static_cast<double>(mlp.out));
      }
      g.backward(loss);
      const std::pair<ad::Var, std::size_t> parts[] = {
          {v.w1, mlp.w1()}, {v.b1, mlp.b1()}, {v.w2, mlp.w2()}, {v.b2, mlp.b2()}};
      for (const auto& [var, off] : parts) {
        const auto& gm = g.grad(var);
        std::copy(gm.data.begin(), gm.data.end(), grad.begin() + static_cast<std::ptrdiff_t>(off));
      }
      opt.update(mlp.flat, grad, cfg.lr);
    }
  }

  ad::Graph g;
  const ad::Matrix out = g.value(forward(g, mlp, te.x, false).out);
  ProbeResult res;
  res.task = to_string(data.task);
  res.train_items = train.size();
  res.test_items = test.size();
  switch (data.task) {
    case TaskKind::track_multiclass:
    case TaskKind::frame_multiclass: {
      std::size_t correct = 0;
      for (std::size_t r = 0; r < out.rows; ++r) {
        const auto row = out.row(r);
        const auto best = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == te.labels[r]) ++correct;
      }
      res.metric = "accuracy";
      res.value = static_cast<double>(correct) / static_cast<double>(out.rows);
      break;
    }
    case TaskKind::track_regression: {
      double se = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) se += (out.data[i] - te.y.data[i]) * (out.data[i] - te.y.data[i]);
      res.metric = "mse";
      res.value = se / static_cast<double>(out.size());
      break;
    }
    case TaskKind::track_multilabel: {
      std::vector<std::size_t> skipped;
      res.metric = "map";
      res.value = mean_average_precision(out, te.y, &res.per_class, &skipped);
      for (auto c : skipped) res.skipped_classes.push_back(data.class_names[c]);
      break;
    }
    case TaskKind::frame_binary_events: {
      double total = 0.0;
      std::size_t r = 0;
      for (const auto* it : test) {
        std::vector<double> probs(it->embeddings.rows);
        for (auto& p : probs) p = sigmoid(out(r++, 0));
        const auto times = frame_events_to_times(probs, data.frame_rate, cfg.threshold, cfg.min_gap);
        total += event_f_measure(times, it->event_times, cfg.tolerance);
      }
      res.metric = "f_measure";
      res.value = total / static_cast<double>(test.size());
      break;
    }
  }
  return res;
}

}  // namespace marq
