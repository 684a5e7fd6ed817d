#pragma once

// Data ingestion, windowing, training, evaluation and the scaling benchmark.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dema/model.hpp"
#include "dema/series.hpp"

namespace dema::pipeline {

// ---------------------------------------------------------------- data

struct Dataset {
  std::vector<std::string> columns;  // variate names
  SeriesWindow series;               // N variates x T rows
  std::vector<double> labels;        // per row; empty without a label column
  std::vector<double> observed;      // N*T, 1 = present; empty unless missing cells were allowed
};

struct CsvOptions {
  std::string label_column = "label";
  // Treat empty and NaN cells as missing (stored as 0, observed = 0) instead of failing.
  bool allow_missing = false;
};

// Header row, first column a timestamp (ignored), remaining columns numeric.
// Errors name the 1-based data row and 1-based file column.
Dataset parse_csv(std::istream& in, const CsvOptions& options = {});
Dataset load_csv(const std::string& path, const CsvOptions& options = {});

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct Split {
  SeriesWindow series;
  std::vector<double> labels;
  std::size_t offset = 0;  // first row in the full dataset
};

struct Splits {
  Split train, val, test;
};

// Chronological, non-overlapping: floor(train * T), floor(val * T), rest.
Splits split_dataset(const Dataset& data, const SplitRatios& ratios);

// Per-variate z-score fitted on the training split.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stdev;

  static Standardizer fit(const SeriesWindow& series);
  SeriesWindow apply(const SeriesWindow& series) const;
  SeriesWindow invert(const SeriesWindow& series) const;
  std::string encode() const;
  static Standardizer decode(const std::string& text);
};

// ---------------------------------------------------------------- windows

struct Sample {
  SeriesWindow input;   // N x T
  SeriesWindow target;  // forecast N x S; impute/anomaly N x T (= input); classify empty
  int label = -1;       // classify: label of the window's last row
  std::size_t start = 0;
};

struct Windows {
  std::vector<Sample> samples;
  std::string warning;  // set when the split is too short for a single window
};

Windows make_windows(const Split& split, const model::ModelConfig& config, std::size_t stride = 1);

struct Masked {
  SeriesWindow window;           // masked points zeroed
  std::vector<double> observed;  // 1 = observed, 0 = masked
};

// Exactly floor(ratio * N * T) uniformly chosen points are masked.
Masked apply_mask(const SeriesWindow& window, double ratio, std::uint64_t seed);

// ---------------------------------------------------------------- config

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch = 32;
  std::size_t epochs = 50;
  std::uint64_t seed = 1;
  SplitRatios splits;
  double mask_ratio = 0.25;     // impute
  double anomaly_ratio = 0.01;  // anomaly threshold
  bool point_adjust = false;
  std::string data;             // CSV path, optional
  std::string label_column = "label";
};

struct RunConfig {
  model::ModelConfig model;
  TrainConfig train;
};

std::vector<std::pair<std::string, std::string>> train_entries(const TrainConfig& config);
bool apply_train_entry(TrainConfig& config, const std::string& key, const std::string& value);

// Flat "key = value" lines, '#' comments. Unknown keys are a config error.
// alpha/beta take the task defaults unless given.
RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);
void apply_entry(RunConfig& config, const std::string& key, const std::string& value);
void finalize(RunConfig& config, bool alpha_given, bool beta_given);

// ---------------------------------------------------------------- training

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  model::Model model;  // best-validation parameters
  Standardizer standardizer;
  std::vector<EpochLog> log;
  double threshold = 0.0;  // anomaly only
  bool diverged = false;
  std::string message;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// The dataset's variate count overrides config.model.n_vars.
TrainResult train(const RunConfig& config, const Dataset& data, const EpochCallback& on_epoch = {});

// Mean task loss over a sample set, without recording gradients.
double dataset_loss(const model::Model& model, const std::vector<Sample>& samples,
                    const TrainConfig& config, std::uint64_t mask_seed);

using Metrics = std::map<std::string, double>;

// Metrics on the test split: mse/mae (+ last-value baseline for forecasting),
// accuracy, or precision/recall/f1 at `threshold`.
Metrics evaluate(const model::Model& model, const Standardizer& standardizer, const Dataset& data,
                 const RunConfig& config, double threshold = 0.0);

// Per-timestep anomaly scores of a standardized series, reconstructed in
// consecutive windows (the last one aligned to the end).
std::vector<double> series_scores(const model::Model& model, const SeriesWindow& series);

// Precision, recall, F1 of flags against labels; optional point adjustment
// marks a whole labelled segment detected when any point in it is flagged.
Metrics detection_metrics(const std::vector<int>& flags, const std::vector<double>& labels,
                          bool point_adjust);

std::string metrics_json(const Metrics& metrics);

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const std::string& path, model::Model& model, const RunConfig& config,
                     const Standardizer& standardizer, double threshold);

struct Checkpoint {
  model::Model model;
  RunConfig config;
  Standardizer standardizer;
  double threshold = 0.0;
};

Checkpoint load_checkpoint(const std::string& path);

// Task-specific predictions as CSV text, in the data's original units:
//   forecast  the S steps after the last row, one column per variate
//   impute    the whole series with missing cells filled
//   anomaly   per-row score and 0/1 flag
//   classify  per window (consecutive, last one aligned to the end): end row,
//             predicted class, class probabilities
std::string predict_csv(const Checkpoint& checkpoint, const Dataset& data);

// ---------------------------------------------------------------- benchmark

struct BenchRow {
  std::size_t length = 0;
  double ms = 0.0;             // median forward time
  std::size_t bytes = 0;       // peak live bytes above the pre-forward level
  std::size_t largest = 0;     // largest single allocation during the forward
  std::size_t n_tokens = 0;
};

// Inference forward passes at each lookback, `repeats` timings each.
std::vector<BenchRow> bench_scaling(const std::vector<std::size_t>& lengths,
                                    const model::ModelConfig& base, std::size_t repeats = 5,
                                    std::uint64_t seed = 1);

std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace dema::pipeline
