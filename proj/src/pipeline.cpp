#include "dema/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "dema/alloc.hpp"

namespace dema::pipeline {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

// ---------------------------------------------------------------- csv

Dataset parse_csv(std::istream& in, const CsvOptions& options) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Format, "csv: missing header row");
  const auto header = split_fields(line);
  if (header.size() < 2)
    fail(ErrorKind::Format, "csv: need a timestamp column and at least one variate, got " +
                                std::to_string(header.size()) + " column(s)");

  std::size_t label_col = 0;  // 0 = none
  Dataset data;
  std::vector<std::size_t> value_cols;
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (!options.label_column.empty() && header[c] == options.label_column) {
      label_col = c;
    } else {
      value_cols.push_back(c);
      data.columns.push_back(header[c]);
    }
  }
  if (value_cols.empty()) fail(ErrorKind::Format, "csv: no variate columns");

  std::vector<std::vector<double>> cols(value_cols.size());
  std::vector<std::vector<double>> seen(value_cols.size());
  bool any_missing = false;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      fail(ErrorKind::Format, "csv: row " + std::to_string(row) + " has " +
                                  std::to_string(fields.size()) + " fields, header has " +
                                  std::to_string(header.size()));
    auto parse = [&](std::size_t c, bool& missing) {
      const std::string& f = fields[c];
      const std::string where = "(" + std::to_string(row) + "," + std::to_string(c + 1) + ")";
      char* end = nullptr;
      const double v = f.empty() ? std::nan("") : std::strtod(f.c_str(), &end);
      if (!f.empty() && end != f.c_str() + f.size())
        fail(ErrorKind::Format, "csv: non-numeric cell '" + f + "' at " + where);
      missing = !std::isfinite(v);
      if (missing && !options.allow_missing)
        fail(ErrorKind::Format, "csv: missing or non-finite value at " + where);
      return missing ? 0.0 : v;
    };
    for (std::size_t i = 0; i < value_cols.size(); ++i) {
      bool missing = false;
      cols[i].push_back(parse(value_cols[i], missing));
      seen[i].push_back(missing ? 0.0 : 1.0);
      any_missing = any_missing || missing;
    }
    if (label_col) {
      bool missing = false;
      const double v = parse(label_col, missing);
      if (missing) fail(ErrorKind::Format, "csv: missing label at row " + std::to_string(row));
      data.labels.push_back(v);
    }
  }
  if (row == 0) fail(ErrorKind::EmptyInput, "csv: no data rows");

  data.series = SeriesWindow(value_cols.size(), row);
  for (std::size_t i = 0; i < value_cols.size(); ++i)
    std::copy(cols[i].begin(), cols[i].end(), data.series.row(i).begin());
  if (any_missing) {
    data.observed.reserve(value_cols.size() * row);
    for (const auto& s : seen) data.observed.insert(data.observed.end(), s.begin(), s.end());
  }
  return data;
}

Dataset load_csv(const std::string& path, const CsvOptions& options) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path + "'");
  return parse_csv(in, options);
}

// ---------------------------------------------------------------- splits

namespace {

Split slice(const Dataset& data, std::size_t begin, std::size_t count) {
  Split s;
  s.offset = begin;
  s.series = SeriesWindow(data.series.n_vars, count);
  for (std::size_t n = 0; n < data.series.n_vars; ++n)
    for (std::size_t t = 0; t < count; ++t) s.series.at(n, t) = data.series.at(n, begin + t);
  if (!data.labels.empty())
    s.labels.assign(data.labels.begin() + static_cast<long>(begin),
                    data.labels.begin() + static_cast<long>(begin + count));
  return s;
}

}  // namespace

Splits split_dataset(const Dataset& data, const SplitRatios& r) {
  expect(r.train > 0 && r.val >= 0 && r.test >= 0, ErrorKind::Config,
         "split ratios must be non-negative with a positive train share");
  const double total = r.train + r.val + r.test;
  expect(total <= 1.0 + 1e-9, ErrorKind::Config, "split ratios sum to more than 1");
  const std::size_t len = data.series.length;
  auto rows = [len](double ratio) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(len) + 1e-9));
  };
  const std::size_t n_train = rows(r.train);
  const std::size_t n_val = rows(r.val);
  const std::size_t n_test =
      std::abs(total - 1.0) < 1e-9 ? len - n_train - n_val : std::min(rows(r.test), len - n_train - n_val);
  return {slice(data, 0, n_train), slice(data, n_train, n_val), slice(data, n_train + n_val, n_test)};
}

Standardizer Standardizer::fit(const SeriesWindow& s) {
  expect(s.length >= 1, ErrorKind::EmptyInput, "standardizer: empty training split");
  Standardizer z;
  for (std::size_t n = 0; n < s.n_vars; ++n) {
    const auto row = s.row(n);
    const double m = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(s.length);
    double var = 0;
    for (double v : row) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / static_cast<double>(s.length));
    z.mean.push_back(m);
    z.stdev.push_back(sd > 1e-12 ? sd : 1.0);
  }
  return z;
}

SeriesWindow Standardizer::apply(const SeriesWindow& s) const {
  expect(s.n_vars == mean.size(), ErrorKind::Dimension, "standardizer: variate count mismatch");
  SeriesWindow out = s;
  for (std::size_t n = 0; n < s.n_vars; ++n)
    for (auto& v : out.row(n)) v = (v - mean[n]) / stdev[n];
  return out;
}

SeriesWindow Standardizer::invert(const SeriesWindow& s) const {
  expect(s.n_vars == mean.size(), ErrorKind::Dimension, "standardizer: variate count mismatch");
  SeriesWindow out = s;
  for (std::size_t n = 0; n < s.n_vars; ++n)
    for (auto& v : out.row(n)) v = v * stdev[n] + mean[n];
  return out;
}

std::string Standardizer::encode() const {
  std::string out;
  for (std::size_t n = 0; n < mean.size(); ++n) {
    if (n) out += ';';
    out += fmt(mean[n]) + ':' + fmt(stdev[n]);
  }
  return out;
}

Standardizer Standardizer::decode(const std::string& text) {
  Standardizer z;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ';')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) fail(ErrorKind::Format, "standardizer: bad entry '" + item + "'");
    z.mean.push_back(std::stod(item.substr(0, colon)));
    z.stdev.push_back(std::stod(item.substr(colon + 1)));
  }
  return z;
}

// ---------------------------------------------------------------- windows

Windows make_windows(const Split& split, const model::ModelConfig& c, std::size_t stride) {
  expect(stride >= 1, ErrorKind::Config, "make_windows: stride must be >= 1");
  const std::size_t span = c.lookback + (c.task == model::Task::Forecast ? c.horizon : 0);
  const auto& s = split.series;
  Windows out;
  if (s.length < span) {
    out.warning = "split of " + std::to_string(s.length) + " rows is shorter than the window span " +
                  std::to_string(span) + "; no windows";
    return out;
  }
  if (c.task == model::Task::Classify)
    expect(split.labels.size() == s.length, ErrorKind::Format,
           "classify needs a label column");
  for (std::size_t start = 0; start + span <= s.length; start += stride) {
    Sample sample;
    sample.start = start;
    sample.input = SeriesWindow(s.n_vars, c.lookback);
    for (std::size_t n = 0; n < s.n_vars; ++n)
      for (std::size_t t = 0; t < c.lookback; ++t) sample.input.at(n, t) = s.at(n, start + t);
    switch (c.task) {
      case model::Task::Forecast:
        sample.target = SeriesWindow(s.n_vars, c.horizon);
        for (std::size_t n = 0; n < s.n_vars; ++n)
          for (std::size_t t = 0; t < c.horizon; ++t)
            sample.target.at(n, t) = s.at(n, start + c.lookback + t);
        break;
      case model::Task::Impute:
      case model::Task::Anomaly:
        sample.target = sample.input;
        break;
      case model::Task::Classify: {
        const double label = split.labels[start + c.lookback - 1];
        sample.label = static_cast<int>(std::lround(label));
        expect(sample.label >= 0 && static_cast<std::size_t>(sample.label) < c.n_classes,
               ErrorKind::Format, "label " + fmt(label) + " outside [0, n_classes)");
        break;
      }
    }
    out.samples.push_back(std::move(sample));
  }
  return out;
}

Masked apply_mask(const SeriesWindow& window, double ratio, std::uint64_t seed) {
  expect(ratio >= 0 && ratio < 1, ErrorKind::Config, "mask ratio must lie in [0, 1)");
  const std::size_t total = window.values.size();
  const auto count =
      static_cast<std::size_t>(std::floor(ratio * static_cast<double>(total) + 1e-9));
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `count` entries are the masked points.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  Masked out{window, std::vector<double>(total, 1.0)};
  for (std::size_t i = 0; i < count; ++i) {
    out.window.values[idx[i]] = 0.0;
    out.observed[idx[i]] = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------- config

std::vector<std::pair<std::string, std::string>> train_entries(const TrainConfig& c) {
  std::vector<std::pair<std::string, std::string>> out{
      {"lr", fmt(c.lr)},
      {"batch", std::to_string(c.batch)},
      {"epochs", std::to_string(c.epochs)},
      {"seed", std::to_string(c.seed)},
      {"train_ratio", fmt(c.splits.train)},
      {"val_ratio", fmt(c.splits.val)},
      {"test_ratio", fmt(c.splits.test)},
      {"mask_ratio", fmt(c.mask_ratio)},
      {"anomaly_ratio", fmt(c.anomaly_ratio)},
      {"point_adjust", c.point_adjust ? "true" : "false"},
      {"label_column", c.label_column},
  };
  if (!c.data.empty()) out.emplace_back("data", c.data);
  return out;
}

namespace {

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    fail(ErrorKind::Config, "config key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const auto out = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || v[0] == '-' || end != v.c_str() + v.size())
    fail(ErrorKind::Config, "config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

}  // namespace

bool apply_train_entry(TrainConfig& c, const std::string& key, const std::string& v) {
  if (key == "lr") c.lr = to_double(key, v);
  else if (key == "batch") c.batch = to_uint(key, v);
  else if (key == "epochs") c.epochs = to_uint(key, v);
  else if (key == "seed") c.seed = to_uint(key, v);
  else if (key == "train_ratio") c.splits.train = to_double(key, v);
  else if (key == "val_ratio") c.splits.val = to_double(key, v);
  else if (key == "test_ratio") c.splits.test = to_double(key, v);
  else if (key == "mask_ratio") c.mask_ratio = to_double(key, v);
  else if (key == "anomaly_ratio") c.anomaly_ratio = to_double(key, v);
  else if (key == "point_adjust") {
    if (v != "true" && v != "false" && v != "1" && v != "0")
      fail(ErrorKind::Config, "config key 'point_adjust' expects true/false, got '" + v + "'");
    c.point_adjust = v == "true" || v == "1";
  } else if (key == "data") c.data = v;
  else if (key == "label_column") c.label_column = v;
  else return false;
  return true;
}

void apply_entry(RunConfig& c, const std::string& key, const std::string& value) {
  if (model::apply_config_entry(c.model, key, value)) return;
  if (apply_train_entry(c.train, key, value)) return;
  fail(ErrorKind::Config, "unknown config key '" + key + "'");
}

void finalize(RunConfig& c, bool alpha_given, bool beta_given) {
  const auto [alpha, beta] = model::ModelConfig::default_fusion(c.model.task);
  if (!alpha_given) c.model.alpha = alpha;
  if (!beta_given) c.model.beta = beta;
  expect(c.train.lr >= 0, ErrorKind::Config, "lr must be >= 0");
  expect(c.train.batch >= 1, ErrorKind::Config, "batch must be >= 1");
  expect(c.train.anomaly_ratio > 0 && c.train.anomaly_ratio < 1, ErrorKind::Config,
         "anomaly_ratio must lie in (0, 1)");
  expect(c.train.mask_ratio >= 0 && c.train.mask_ratio < 1, ErrorKind::Config,
         "mask_ratio must lie in [0, 1)");
}

RunConfig parse_config(std::istream& in) {
  RunConfig c;
  bool alpha_given = false, beta_given = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::Config, "config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    apply_entry(c, key, value);
    alpha_given = alpha_given || key == "alpha";
    beta_given = beta_given || key == "beta";
  }
  finalize(c, alpha_given, beta_given);
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open config '" + path + "'");
  return parse_config(in);
}

// ---------------------------------------------------------------- training

namespace {

constexpr std::uint64_t kEvalEpoch = 0xE7A1;

Tensor sample_loss(const model::Model& m, const Sample& s, const TrainConfig& tc,
                   std::uint64_t mask_seed) {
  const auto& c = m.config();
  switch (c.task) {
    case model::Task::Forecast: {
      const Tensor pred = m.forward(s.input);
      return mse(pred, Tensor::from({c.n_vars, c.horizon}, s.target.values));
    }
    case model::Task::Impute: {
      const auto masked = apply_mask(s.input, tc.mask_ratio, mask_seed);
      const Tensor pred = m.forward(masked.window, masked.observed);
      std::vector<double> weight(masked.observed.size());
      for (std::size_t i = 0; i < weight.size(); ++i) weight[i] = 1.0 - masked.observed[i];
      return mse(pred, Tensor::from({c.n_vars, c.lookback}, s.target.values), weight);
    }
    case model::Task::Anomaly: {
      const Tensor pred = m.forward(s.input);
      return mse(pred, Tensor::from({c.n_vars, c.lookback}, s.target.values));
    }
    case model::Task::Classify: {
      const Tensor probs = m.forward(s.input);
      std::vector<double> onehot(c.n_classes, 0.0);
      onehot[static_cast<std::size_t>(s.label)] = 1.0;
      return mse(probs, Tensor::from({c.n_classes}, onehot));
    }
  }
  fail(ErrorKind::Contract, "unknown task");
}

std::vector<std::vector<double>> snapshot(const nn::ParamList& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor->data().begin(), p.tensor->data().end());
  return out;
}

void restore(nn::ParamList& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i)
    std::copy(values[i].begin(), values[i].end(), params[i].tensor->mutable_data().begin());
}

struct Adam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;

  explicit Adam(double rate, const nn::ParamList& params) : lr(rate) {
    for (const auto& p : params) {
      m.emplace_back(p.tensor->numel(), 0.0);
      v.emplace_back(p.tensor->numel(), 0.0);
    }
  }

  void update(nn::ParamList& params) {
    ++step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* t = params[i].tensor;
      if (!t->has_grad()) continue;
      const auto g = t->grad();
      auto w = t->mutable_data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[i][k] = b1 * m[i][k] + (1 - b1) * g[k];
        v[i][k] = b2 * v[i][k] + (1 - b2) * g[k] * g[k];
        w[k] -= lr * (m[i][k] / c1) / (std::sqrt(v[i][k] / c2) + eps);
      }
    }
  }
};

}  // namespace

double dataset_loss(const model::Model& m, const std::vector<Sample>& samples,
                    const TrainConfig& tc, std::uint64_t mask_seed) {
  expect(!samples.empty(), ErrorKind::EmptyInput, "dataset_loss: no samples");
  NoGradGuard guard;
  double total = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    total += sample_loss(m, samples[i], tc, mix_seed(mask_seed, kEvalEpoch, i)).item();
  return total / static_cast<double>(samples.size());
}

TrainResult train(const RunConfig& cfg, const Dataset& data, const EpochCallback& on_epoch) {
  RunConfig c = cfg;
  c.model.n_vars = data.series.n_vars;
  c.model.validate();
  const auto& tc = c.train;

  const Splits splits = split_dataset(data, tc.splits);
  TrainResult result;
  result.standardizer = Standardizer::fit(splits.train.series);
  Split train_split = splits.train, val_split = splits.val;
  train_split.series = result.standardizer.apply(train_split.series);
  val_split.series = result.standardizer.apply(val_split.series);
  const auto train_w = make_windows(train_split, c.model);
  const auto val_w = make_windows(val_split, c.model);
  expect(!train_w.samples.empty(), ErrorKind::EmptyInput, "train split: " + train_w.warning);

  result.model = model::Model(c.model, tc.seed);
  if (c.model.global_priors) {
    const std::size_t lag = c.model.max_lag ? c.model.max_lag : c.model.lookback / 4;
    result.model.set_fixed_priors(delay::delay_matrix(train_split.series, lag, c.model.patch_len));
  }
  auto params = result.model.parameters();
  Adam adam(tc.lr, params);
  auto best = snapshot(params);
  double best_val = std::numeric_limits<double>::infinity();
  std::mt19937_64 shuffle_rng(mix_seed(tc.seed, 0x5EED, 0));
  std::vector<std::size_t> order(train_w.samples.size());

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_total = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch) {
      const std::size_t stop = std::min(order.size(), start + tc.batch);
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (auto& p : params) p.tensor->zero_grad();
      double batch_total = 0;
      for (std::size_t i = start; i < stop; ++i) {
        const Tensor loss =
            sample_loss(result.model, train_w.samples[order[i]], tc, mix_seed(tc.seed, epoch, order[i]));
        batch_total += loss.item();
        backward(scale(loss, inv));
      }
      if (!std::isfinite(batch_total)) {
        restore(params, best);
        result.diverged = true;
        result.message = "non-finite training loss in epoch " + std::to_string(epoch) +
                         "; kept the last good parameters";
        return result;
      }
      adam.update(params);
      epoch_total += batch_total;
    }
    EpochLog entry{epoch, epoch_total / static_cast<double>(order.size()), 0.0};
    entry.val_loss = val_w.samples.empty() ? dataset_loss(result.model, train_w.samples, tc, tc.seed)
                                           : dataset_loss(result.model, val_w.samples, tc, tc.seed);
    if (entry.val_loss < best_val) {
      best_val = entry.val_loss;
      best = snapshot(params);
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  restore(params, best);
  for (auto& p : params) p.tensor->zero_grad();

  if (c.model.task == model::Task::Anomaly)
    result.threshold =
        model::select_threshold(series_scores(result.model, train_split.series), tc.anomaly_ratio);
  return result;
}

// ---------------------------------------------------------------- evaluation

std::vector<double> series_scores(const model::Model& m, const SeriesWindow& series) {
  const std::size_t T = m.config().lookback;
  expect(series.length >= T, ErrorKind::EmptyInput,
         "series of " + std::to_string(series.length) + " rows is shorter than the lookback " +
             std::to_string(T));
  NoGradGuard guard;
  std::vector<double> scores(series.length, 0.0);
  std::size_t covered = 0;
  while (covered < series.length) {
    const std::size_t start = std::min(covered, series.length - T);
    SeriesWindow w(series.n_vars, T);
    for (std::size_t n = 0; n < series.n_vars; ++n)
      for (std::size_t t = 0; t < T; ++t) w.at(n, t) = series.at(n, start + t);
    const Tensor recon = m.forward(w);
    const SeriesWindow r(series.n_vars, T,
                         std::vector<double>(recon.data().begin(), recon.data().end()));
    const auto s = model::anomaly_score(w, r);
    for (std::size_t t = covered - start; t < T; ++t) scores[start + t] = s[t];
    covered = start + T;
  }
  return scores;
}

Metrics detection_metrics(const std::vector<int>& flags_in, const std::vector<double>& labels,
                          bool point_adjust) {
  expect(flags_in.size() == labels.size(), ErrorKind::Dimension,
         "detection_metrics: flags and labels differ in length");
  std::vector<int> flags = flags_in;
  if (point_adjust) {
    std::size_t i = 0;
    while (i < labels.size()) {
      if (labels[i] <= 0.5) {
        ++i;
        continue;
      }
      std::size_t j = i;
      bool hit = false;
      for (; j < labels.size() && labels[j] > 0.5; ++j)
        if (flags[j]) hit = true;
      if (hit) std::fill(flags.begin() + static_cast<long>(i), flags.begin() + static_cast<long>(j), 1);
      i = j;
    }
  }
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    const bool truth = labels[i] > 0.5;
    if (flags[i] && truth) ++tp;
    else if (flags[i]) ++fp;
    else if (truth) ++fn;
  }
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  return {{"precision", precision}, {"recall", recall}, {"f1", f1}};
}

Metrics evaluate(const model::Model& m, const Standardizer& z, const Dataset& data,
                 const RunConfig& cfg, double threshold) {
  const auto& c = m.config();
  expect(c.task == cfg.model.task, ErrorKind::Contract,
         std::string("evaluate: checkpoint task '") + model::task_name(c.task) +
             "' does not match requested task '" + model::task_name(cfg.model.task) + "'");
  expect(data.series.n_vars == c.n_vars, ErrorKind::Dimension,
         "evaluate: dataset has " + std::to_string(data.series.n_vars) + " variates, model " +
             std::to_string(c.n_vars));
  Split test = split_dataset(data, cfg.train.splits).test;
  test.series = z.apply(test.series);
  NoGradGuard guard;
  Metrics out;

  if (c.task == model::Task::Anomaly) {
    const auto scores = series_scores(m, test.series);
    out["score_mean"] = std::accumulate(scores.begin(), scores.end(), 0.0) /
                        static_cast<double>(scores.size());
    out["threshold"] = threshold;
    if (!test.labels.empty()) {
      std::vector<int> flags(scores.size());
      for (std::size_t i = 0; i < scores.size(); ++i) flags[i] = scores[i] > threshold;
      const auto det = detection_metrics(flags, test.labels, cfg.train.point_adjust);
      out.insert(det.begin(), det.end());
    }
    return out;
  }

  const auto windows = make_windows(test, c);
  expect(!windows.samples.empty(), ErrorKind::EmptyInput, "test split: " + windows.warning);
  out["windows"] = static_cast<double>(windows.samples.size());

  if (c.task == model::Task::Classify) {
    double correct = 0;
    for (const auto& s : windows.samples) {
      const auto probs = m.forward(s.input).data();
      const auto best = std::max_element(probs.begin(), probs.end()) - probs.begin();
      correct += best == s.label;
    }
    out["accuracy"] = correct / static_cast<double>(windows.samples.size());
    return out;
  }

  double se = 0, ae = 0, count = 0, base_se = 0, base_ae = 0;
  for (std::size_t i = 0; i < windows.samples.size(); ++i) {
    const auto& s = windows.samples[i];
    if (c.task == model::Task::Forecast) {
      const Tensor pred = m.forward(s.input);
      for (std::size_t n = 0; n < c.n_vars; ++n) {
        const double last = s.input.at(n, c.lookback - 1);
        for (std::size_t t = 0; t < c.horizon; ++t) {
          const double y = s.target.at(n, t);
          const double d = pred.data()[n * c.horizon + t] - y;
          se += d * d;
          ae += std::abs(d);
          base_se += (last - y) * (last - y);
          base_ae += std::abs(last - y);
          count += 1;
        }
      }
    } else {
      const auto masked = apply_mask(s.input, cfg.train.mask_ratio,
                                     mix_seed(cfg.train.seed, kEvalEpoch, i));
      const Tensor pred = m.forward(masked.window, masked.observed);
      for (std::size_t k = 0; k < masked.observed.size(); ++k) {
        if (masked.observed[k] != 0.0) continue;
        const double d = pred.data()[k] - s.target.values[k];
        se += d * d;
        ae += std::abs(d);
        count += 1;
      }
    }
  }
  expect(count > 0, ErrorKind::EmptyInput, "evaluate: no scored points");
  out["mse"] = se / count;
  out["mae"] = ae / count;
  if (c.task == model::Task::Forecast) {
    out["baseline_mse"] = base_se / count;
    out["baseline_mae"] = base_ae / count;
  }
  return out;
}

std::string metrics_json(const Metrics& metrics) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : metrics) j[k] = v;
  return j.dump(2);
}

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const std::string& path, model::Model& m, const RunConfig& cfg,
                     const Standardizer& z, double threshold) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::Io, "cannot write checkpoint '" + path + "'");
  auto extra = train_entries(cfg.train);
  extra.emplace_back("standardizer", z.encode());
  extra.emplace_back("threshold", fmt(threshold));
  m.save(os, extra);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open checkpoint '" + path + "'");
  std::vector<std::pair<std::string, std::string>> extra;
  Checkpoint ck;
  ck.model = model::Model::load(is, &extra);
  ck.config.model = ck.model.config();
  for (const auto& [k, v] : extra) {
    if (k == "standardizer") ck.standardizer = Standardizer::decode(v);
    else if (k == "threshold") ck.threshold = to_double(k, v);
    else if (!apply_train_entry(ck.config.train, k, v))
      fail(ErrorKind::Format, "checkpoint: unknown metadata key '" + k + "'");
  }
  expect(ck.standardizer.mean.size() == ck.config.model.n_vars, ErrorKind::Format,
         "checkpoint: standardizer does not match the variate count");
  return ck;
}

// ---------------------------------------------------------------- prediction

namespace {

SeriesWindow window_at(const SeriesWindow& s, std::size_t start, std::size_t len) {
  SeriesWindow w(s.n_vars, len);
  for (std::size_t n = 0; n < s.n_vars; ++n)
    for (std::size_t t = 0; t < len; ++t) w.at(n, t) = s.at(n, start + t);
  return w;
}

// Starts of consecutive windows covering `length`, the last aligned to the end.
std::vector<std::size_t> tiling(std::size_t length, std::size_t window) {
  std::vector<std::size_t> out;
  for (std::size_t covered = 0; covered < length;) {
    const std::size_t start = std::min(covered, length - window);
    out.push_back(start);
    covered = start + window;
  }
  return out;
}

void write_series(std::ostringstream& os, const std::vector<std::string>& columns,
                  const SeriesWindow& s) {
  for (std::size_t n = 0; n < columns.size(); ++n) os << (n ? "," : "") << columns[n];
  os << '\n';
  for (std::size_t t = 0; t < s.length; ++t) {
    for (std::size_t n = 0; n < s.n_vars; ++n) os << (n ? "," : "") << fmt(s.at(n, t));
    os << '\n';
  }
}

}  // namespace

std::string predict_csv(const Checkpoint& ck, const Dataset& data) {
  const auto& c = ck.model.config();
  const std::size_t T = c.lookback;
  expect(data.series.n_vars == c.n_vars, ErrorKind::Dimension,
         "predict: data has " + std::to_string(data.series.n_vars) + " variates, model " +
             std::to_string(c.n_vars));
  expect(data.series.length >= T, ErrorKind::EmptyInput,
         "predict: need at least " + std::to_string(T) + " rows, got " +
             std::to_string(data.series.length));
  NoGradGuard guard;
  SeriesWindow series = ck.standardizer.apply(data.series);
  std::ostringstream os;

  switch (c.task) {
    case model::Task::Forecast: {
      const Tensor pred = ck.model.forward(window_at(series, series.length - T, T));
      SeriesWindow out(c.n_vars, c.horizon,
                       std::vector<double>(pred.data().begin(), pred.data().end()));
      write_series(os, data.columns, ck.standardizer.invert(out));
      break;
    }
    case model::Task::Impute: {
      std::vector<double> observed = data.observed;
      if (observed.empty()) observed.assign(series.values.size(), 1.0);
      for (std::size_t i = 0; i < observed.size(); ++i)
        if (observed[i] == 0.0) series.values[i] = 0.0;
      SeriesWindow filled = series;
      for (const std::size_t start : tiling(series.length, T)) {
        const SeriesWindow w = window_at(series, start, T);
        std::vector<double> mask(c.n_vars * T);
        for (std::size_t n = 0; n < c.n_vars; ++n)
          for (std::size_t t = 0; t < T; ++t)
            mask[n * T + t] = observed[n * series.length + start + t];
        const Tensor pred = ck.model.forward(w, mask);
        for (std::size_t n = 0; n < c.n_vars; ++n)
          for (std::size_t t = 0; t < T; ++t)
            if (mask[n * T + t] == 0.0) filled.at(n, start + t) = pred.data()[n * T + t];
      }
      write_series(os, data.columns, ck.standardizer.invert(filled));
      break;
    }
    case model::Task::Anomaly: {
      const auto scores = series_scores(ck.model, series);
      os << "score,anomaly\n";
      for (double s : scores) os << fmt(s) << ',' << (s > ck.threshold ? 1 : 0) << '\n';
      break;
    }
    case model::Task::Classify: {
      os << "end_row,class";
      for (std::size_t k = 0; k < c.n_classes; ++k) os << ",p" << k;
      os << '\n';
      for (const std::size_t start : tiling(series.length, T)) {
        const auto probs = ck.model.forward(window_at(series, start, T)).data();
        const auto best = std::max_element(probs.begin(), probs.end()) - probs.begin();
        os << start + T - 1 << ',' << best;
        for (double p : probs) os << ',' << fmt(p);
        os << '\n';
      }
      break;
    }
  }
  return os.str();
}

// ---------------------------------------------------------------- benchmark

std::vector<BenchRow> bench_scaling(const std::vector<std::size_t>& lengths,
                                    const model::ModelConfig& base, std::size_t repeats,
                                    std::uint64_t seed) {
  expect(repeats >= 1, ErrorKind::Config, "bench: repeats must be >= 1");
  expect(std::is_sorted(lengths.begin(), lengths.end()), ErrorKind::Config,
         "bench: lengths must be ascending");
  std::vector<BenchRow> rows;
  for (const std::size_t T : lengths) {
    model::ModelConfig c = base;
    c.lookback = T;
    const model::Model m(c, seed);
    // Delayed noisy copies of one signal: every variate pair is positively
    // correlated, so the attention visits all pairs at every length.
    std::mt19937_64 rng(seed + T);
    std::normal_distribution<double> noise(0.0, 0.1);
    const std::size_t spread = 3 * c.n_vars;
    std::vector<double> common(T + spread);
    for (std::size_t t = 0; t < common.size(); ++t)
      common[t] = std::sin(0.05 * static_cast<double>(t)) + 0.5 * std::sin(0.013 * static_cast<double>(t));
    SeriesWindow w(c.n_vars, T);
    for (std::size_t n = 0; n < c.n_vars; ++n)
      for (std::size_t t = 0; t < T; ++t) w.at(n, t) = common[t + spread - 3 * n] + noise(rng);

    NoGradGuard guard;
    (void)m.forward(w);  // warm-up
    std::vector<double> times;
    BenchRow row{T, 0.0, 0, 0, c.n_tokens()};
    for (std::size_t r = 0; r < repeats; ++r) {
      reset_alloc_peak();
      const std::size_t live = alloc_stats().live_bytes;
      const auto t0 = std::chrono::steady_clock::now();
      {
        const Tensor out = m.forward(w);
        (void)out;
      }
      const auto t1 = std::chrono::steady_clock::now();
      const auto stats = alloc_stats();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      row.bytes = std::max(row.bytes, stats.peak_bytes - live);
      row.largest = std::max(row.largest, stats.largest_bytes);
    }
    std::sort(times.begin(), times.end());
    row.ms = times[times.size() / 2];
    rows.push_back(row);
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "T,ms,bytes\n";
  for (const auto& r : rows) os << r.length << ',' << fmt(r.ms) << ',' << r.bytes << '\n';
  return os.str();
}

}  // namespace dema::pipeline
