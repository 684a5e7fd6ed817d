// dema command-line front end. Talks to the library only through dema.h.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dema/dema.h"

namespace fs = std::filesystem;

namespace {

struct CliError {
  dema_status status;
  std::string message;
};

void check(dema_status st, const std::string& what) {
  if (st != DEMA_OK)
    throw CliError{st, what + ": " + dema_status_name(st) + ": " + dema_last_error()};
}

struct ConfigHandle {
  dema_config* ptr = nullptr;
  ~ConfigHandle() { dema_config_free(ptr); }
};

struct ModelHandle {
  dema_model* ptr = nullptr;
  ~ModelHandle() { dema_model_free(ptr); }
};

struct OwnedString {
  char* ptr = nullptr;
  ~OwnedString() { dema_string_free(ptr); }
  std::string str() const { return ptr ? ptr : ""; }
};

struct Options {
  std::string config;
  std::string data;
  std::string out = ".";
  std::string checkpoint;
  std::vector<std::string> sets;  // key=value overrides
  long long seed = -1;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw CliError{DEMA_ERR_IO, "cannot write " + path.string()};
  os << text;
}

void apply_overrides(dema_config* c, const Options& o) {
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw CliError{DEMA_ERR_CONFIG, "--set expects key=value, got " + kv};
    check(dema_config_set(c, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()), "--set " + kv);
  }
  if (o.seed >= 0) check(dema_config_set(c, "seed", std::to_string(o.seed).c_str()), "--seed");
}

ConfigHandle make_config(const Options& o) {
  ConfigHandle c;
  if (!o.config.empty())
    check(dema_config_load(o.config.c_str(), &c.ptr), "loading " + o.config);
  else
    check(dema_config_new(&c.ptr), "config");
  apply_overrides(c.ptr, o);
  return c;
}

fs::path out_dir(const Options& o) {
  fs::path dir(o.out);
  fs::create_directories(dir);
  return dir;
}

std::string checkpoint_path(const Options& o) {
  return o.checkpoint.empty() ? (fs::path(o.out) / "checkpoint.dema").string() : o.checkpoint;
}

std::string require_data(const Options& o) {
  if (o.data.empty()) throw CliError{DEMA_ERR_ARGUMENT, "--data is required"};
  return o.data;
}

int run_train(const Options& o) {
  auto c = make_config(o);
  const auto dir = out_dir(o);
  const std::string ckpt = (dir / "checkpoint.dema").string();
  const std::string log = (dir / "train_log.csv").string();
  OwnedString metrics;
  check(dema_train(c.ptr, require_data(o).c_str(), ckpt.c_str(), log.c_str(), &metrics.ptr), "train");
  write_file(dir / "metrics.json", metrics.str() + "\n");
  {
    // n_vars comes from the data
    ModelHandle m;
    check(dema_model_load(ckpt.c_str(), &m.ptr), "loading checkpoint");
    std::size_t n_vars = 0;
    check(dema_model_info(m.ptr, nullptr, &n_vars, nullptr, nullptr), "model info");
    check(dema_config_set(c.ptr, "n_vars", std::to_string(n_vars).c_str()), "config");
  }
  OwnedString dump;
  check(dema_config_dump(c.ptr, &dump.ptr), "config");
  write_file(dir / "config.txt", dump.str());
  std::cout << metrics.str() << "\n";
  std::cerr << "checkpoint: " << ckpt << "\n";
  return 0;
}

int run_evaluate(const Options& o) {
  ModelHandle m;
  check(dema_model_load(checkpoint_path(o).c_str(), &m.ptr), "loading checkpoint");
  OwnedString metrics;
  check(dema_evaluate(m.ptr, require_data(o).c_str(), &metrics.ptr), "evaluate");
  write_file(out_dir(o) / "metrics.json", metrics.str() + "\n");
  std::cout << metrics.str() << "\n";
  return 0;
}

int run_predict(const Options& o, dema_task expected, const char* name) {
  ModelHandle m;
  check(dema_model_load(checkpoint_path(o).c_str(), &m.ptr), "loading checkpoint");
  dema_task task;
  check(dema_model_info(m.ptr, &task, nullptr, nullptr, nullptr), "model info");
  if (task != expected)
    throw CliError{DEMA_ERR_CONTRACT, std::string("checkpoint was not trained for '") + name + "'"};
  OwnedString csv;
  check(dema_predict(m.ptr, require_data(o).c_str(), &csv.ptr), name);
  const auto path = out_dir(o) / "predictions.csv";
  write_file(path, csv.str());
  std::cerr << "predictions: " << path.string() << "\n";
  return 0;
}

int run_decompose(const Options& o, double theta) {
  check(dema_decompose_file(require_data(o).c_str(), theta, out_dir(o).string().c_str()), "decompose");
  std::cerr << "wrote cross_time.csv, cross_var.csv, selected.json to " << o.out << "\n";
  return 0;
}

int run_priors(const Options& o, std::size_t max_lag, std::size_t patch_len) {
  OwnedString json;
  const auto dir = out_dir(o);
  check(dema_priors_file(require_data(o).c_str(), max_lag, patch_len, dir.string().c_str(), &json.ptr),
        "priors");
  write_file(dir / "priors.json", json.str() + "\n");
  std::cout << json.str() << "\n";
  std::cerr << "wrote tau.csv, rho.csv, token_shift.csv, priors.json to " << o.out << "\n";
  return 0;
}

int run_bench(const Options& o, const std::vector<std::size_t>& lengths, std::size_t repeats) {
  ConfigHandle c;
  if (!o.config.empty()) {
    check(dema_config_load(o.config.c_str(), &c.ptr), "loading " + o.config);
  } else {
    check(dema_config_new(&c.ptr), "config");
    check(dema_config_set(c.ptr, "d_model", "256"), "config");
    check(dema_config_set(c.ptr, "n_vars", "7"), "config");
    check(dema_config_set(c.ptr, "n_blocks", "2"), "config");
  }
  apply_overrides(c.ptr, o);
  std::vector<double> ms(lengths.size());
  std::vector<std::size_t> bytes(lengths.size());
  check(dema_bench(c.ptr, lengths.data(), lengths.size(), repeats, ms.data(), bytes.data()), "bench");
  std::string csv = "T,ms,bytes\n";
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    char line[128];
    std::snprintf(line, sizeof line, "%zu,%.3f,%zu\n", lengths[i], ms[i], bytes[i]);
    csv += line;
  }
  write_file(out_dir(o) / "bench.csv", csv);
  std::cout << csv;
  return 0;
}

void add_common(CLI::App* cmd, Options& o, bool config, bool data, bool checkpoint) {
  if (config) cmd->add_option("--config", o.config, "key = value config file");
  if (data) cmd->add_option("--data", o.data, "CSV file: timestamp column, then variates");
  cmd->add_option("--out", o.out, "output directory")->capture_default_str();
  if (checkpoint)
    cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file (default <out>/checkpoint.dema)");
  if (config) {
    cmd->add_option("--seed", o.seed, "random seed (overrides the config)");
    cmd->add_option("--set", o.sets, "config override key=value (repeatable)");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dema: dual-path delay-aware state-space models for multivariate series"};
  app.require_subcommand(1);
  Options o;
  double theta = 0.4;
  std::size_t max_lag = 0, patch_len = 8, repeats = 5;
  std::vector<std::size_t> lengths{384, 768, 1536, 3072};

  auto* train = app.add_subcommand("train", "train a model and write checkpoint, log and metrics");
  add_common(train, o, true, true, false);
  auto* evaluate = app.add_subcommand("evaluate", "test-split metrics of a checkpoint");
  add_common(evaluate, o, false, true, true);
  auto* forecast = app.add_subcommand("forecast", "forecast the steps after the data");
  add_common(forecast, o, false, true, true);
  auto* impute = app.add_subcommand("impute", "fill empty or NaN cells");
  add_common(impute, o, false, true, true);
  auto* detect = app.add_subcommand("detect", "per-row anomaly scores and flags");
  add_common(detect, o, false, true, true);
  auto* classify = app.add_subcommand("classify", "class of consecutive windows");
  add_common(classify, o, false, true, true);
  auto* decompose = app.add_subcommand("decompose", "spectral split of a CSV window");
  add_common(decompose, o, false, true, false);
  decompose->add_option("--theta", theta, "kept frequency fraction")->capture_default_str();
  auto* priors = app.add_subcommand("priors", "pairwise lag priors of a CSV window");
  add_common(priors, o, false, true, false);
  priors->add_option("--max-lag", max_lag, "largest lag searched (0 = T/4)")->capture_default_str();
  priors->add_option("--patch-len", patch_len, "patch length for token shifts")->capture_default_str();
  auto* bench = app.add_subcommand("bench", "forward time and memory against lookback length");
  add_common(bench, o, true, false, false);
  bench->add_option("--lengths", lengths, "lookback lengths, ascending")->delimiter(',');
  bench->add_option("--repeats", repeats, "timed runs per length")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return run_train(o);
    if (*evaluate) return run_evaluate(o);
    if (*forecast) return run_predict(o, DEMA_TASK_FORECAST, "forecast");
    if (*impute) return run_predict(o, DEMA_TASK_IMPUTE, "impute");
    if (*detect) return run_predict(o, DEMA_TASK_ANOMALY, "detect");
    if (*classify) return run_predict(o, DEMA_TASK_CLASSIFY, "classify");
    if (*decompose) return run_decompose(o, theta);
    if (*priors) return run_priors(o, max_lag, patch_len);
    if (*bench) return run_bench(o, lengths, repeats);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.message << "\n";
    return static_cast<int>(e.status);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
