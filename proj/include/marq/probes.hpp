#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "marq/audio_io.hpp"
#include "marq/autodiff.hpp"
#include "marq/rational.hpp"

namespace marq {

enum class TaskKind {
  track_multilabel,     // tags -> mAP
  track_regression,     // scalar -> MSE
  track_multiclass,     // one class per clip -> accuracy
  frame_multiclass,     // class per frame -> accuracy
  frame_binary_events,  // event times -> tolerance-window F-measure
};

TaskKind parse_task_kind(const std::string& name);
const char* to_string(TaskKind kind);

struct ProbeConfig {
  TaskKind task = TaskKind::track_multiclass;
  std::size_t hidden_units = 512;
  std::int64_t layer_index = -1;  // -1 selects the last encoder layer
  std::size_t epochs = 100;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
  double threshold = 0.5;   // event peak picking
  double min_gap = 0.3;     // seconds between kept peaks
  double tolerance = 0.07;  // event matching window in seconds

  void validate() const;
};

// One clip's frozen embeddings plus its labels for the configured task.
struct ProbeItem {
  std::string clip_id;
  Split split = Split::train;
  ad::Matrix embeddings;                 // frames x dims
  std::vector<std::int32_t> classes;     // track classes or tags
  std::vector<double> targets;           // regression targets
  std::vector<std::int32_t> frame_labels;
  std::vector<double> event_times;       // seconds, ascending
};

struct ProbeDataset {
  TaskKind task = TaskKind::track_multiclass;
  Rational frame_rate{125, 8};
  std::vector<std::string> class_names;  // class vocabulary (classification tasks)
  std::size_t outputs = 0;
  std::vector<ProbeItem> items;

  void validate() const;
};

struct ProbeResult {
  std::string task;
  std::string metric;  // map | mse | accuracy | f_measure
  double value = 0.0;
  std::vector<double> per_class;             // per-class AP for mAP
  std::vector<std::string> skipped_classes;  // classes without test positives
  std::size_t train_items = 0;
  std::size_t test_items = 0;
};

// Mean over frames.
std::vector<double> pool_track(const ad::Matrix& embeddings);

// Macro mAP. Items are ranked by descending score, ties in item order. Classes
// without positives are skipped and their indices appended to `skipped`.
double mean_average_precision(const ad::Matrix& scores, const ad::Matrix& truths,
                              std::vector<double>* per_class = nullptr,
                              std::vector<std::size_t>* skipped = nullptr);

// Greedy one-to-one matching of two ascending time lists within +-tolerance.
double event_f_measure(std::span<const double> predicted, std::span<const double> reference,
                       double tolerance = 0.07);

// Local maxima at or above threshold; peaks closer than min_gap to a higher
// kept peak are dropped.
std::vector<double> frame_events_to_times(std::span<const double> probabilities, Rational frame_rate,
                                          double threshold, double min_gap);

// Builds a dataset from manifest labels. Label tokens per kind:
// track_multiclass one class name; track_multilabel tag names;
// track_regression one number; frame_multiclass `start:end:class` segments in
// seconds (uncovered frames get class `none`); frame_binary_events times in
// seconds.
ProbeDataset make_probe_dataset(const DatasetManifest& manifest,
                                const std::map<std::string, ad::Matrix>& embeddings,
                                Rational frame_rate, TaskKind task);

// Trains dims -> hidden -> ReLU -> outputs on the train split with AdamW and
// scores the test split (valid if there is no test split).
ProbeResult train_probe(const ProbeDataset& data, const ProbeConfig& cfg, std::uint64_t seed);

}  // namespace marq
