#include "dema/dema.h"

#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <new>
#include <sstream>
#include <string>

#include "dema/delay.hpp"
#include "dema/pipeline.hpp"
#include "dema/spectral.hpp"

#include <json.hpp>

struct dema_config {
  dema::pipeline::RunConfig run;
  bool alpha_given = false;
  bool beta_given = false;
};

struct dema_model {
  dema::pipeline::Checkpoint checkpoint;
};

namespace {

thread_local std::string g_last_error;

dema_status status_of(dema::ErrorKind kind) {
  switch (kind) {
    case dema::ErrorKind::Dimension: return DEMA_ERR_DIMENSION;
    case dema::ErrorKind::Config: return DEMA_ERR_CONFIG;
    case dema::ErrorKind::Format: return DEMA_ERR_FORMAT;
    case dema::ErrorKind::Numeric: return DEMA_ERR_NUMERIC;
    case dema::ErrorKind::Contract: return DEMA_ERR_CONTRACT;
    case dema::ErrorKind::Io: return DEMA_ERR_IO;
    case dema::ErrorKind::EmptyInput: return DEMA_ERR_EMPTY_INPUT;
  }
  return DEMA_ERR_INTERNAL;
}

template <class F>
dema_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return DEMA_OK;
  } catch (const dema::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return DEMA_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DEMA_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

dema::pipeline::RunConfig finalized(const dema_config* c) {
  dema::pipeline::RunConfig run = c->run;
  dema::pipeline::finalize(run, c->alpha_given, c->beta_given);
  return run;
}

dema::pipeline::CsvOptions csv_options(const dema::pipeline::RunConfig& run, bool allow_missing) {
  dema::pipeline::CsvOptions o;
  o.label_column = run.train.label_column;
  o.allow_missing = allow_missing;
  return o;
}

}  // namespace

#define DEMA_ARG(cond)                                      \
  do {                                                      \
    if (!(cond)) {                                          \
      g_last_error = "invalid argument: " #cond;            \
      return DEMA_ERR_ARGUMENT;                             \
    }                                                       \
  } while (0)

extern "C" {

const char* dema_last_error(void) { return g_last_error.c_str(); }

const char* dema_status_name(dema_status status) {
  switch (status) {
    case DEMA_OK: return "ok";
    case DEMA_ERR_DIMENSION: return "dimension error";
    case DEMA_ERR_CONFIG: return "config error";
    case DEMA_ERR_FORMAT: return "format error";
    case DEMA_ERR_NUMERIC: return "numeric error";
    case DEMA_ERR_CONTRACT: return "contract error";
    case DEMA_ERR_IO: return "io error";
    case DEMA_ERR_EMPTY_INPUT: return "empty input";
    case DEMA_ERR_ARGUMENT: return "invalid argument";
    case DEMA_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void dema_string_free(char* text) { delete[] text; }

dema_status dema_config_new(dema_config** out) {
  DEMA_ARG(out);
  return guarded([&] { *out = new dema_config(); });
}

dema_status dema_config_load(const char* path, dema_config** out) {
  DEMA_ARG(path && out);
  return guarded([&] {
    std::ifstream in(path);
    if (!in) throw dema::Error(dema::ErrorKind::Io, std::string("cannot open config '") + path + "'");
    auto c = std::make_unique<dema_config>();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw dema::Error(dema::ErrorKind::Config,
                          "config line " + std::to_string(lineno) + ": expected key = value");
      auto strip = [](std::string s) {
        const auto first = s.find_first_not_of(" \t\r");
        if (first == std::string::npos) return std::string();
        return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
      };
      const auto key = strip(line.substr(0, eq));
      dema::pipeline::apply_entry(c->run, key, strip(line.substr(eq + 1)));
      c->alpha_given = c->alpha_given || key == "alpha";
      c->beta_given = c->beta_given || key == "beta";
    }
    (void)finalized(c.get());
    *out = c.release();
  });
}

dema_status dema_config_set(dema_config* config, const char* key, const char* value) {
  DEMA_ARG(config && key && value);
  return guarded([&] {
    dema::pipeline::apply_entry(config->run, key, value);
    config->alpha_given = config->alpha_given || std::strcmp(key, "alpha") == 0;
    config->beta_given = config->beta_given || std::strcmp(key, "beta") == 0;
  });
}

dema_status dema_config_dump(const dema_config* config, char** text) {
  DEMA_ARG(config && text);
  return guarded([&] {
    const auto run = finalized(config);
    std::ostringstream os;
    for (const auto& [k, v] : dema::model::config_entries(run.model)) os << k << " = " << v << '\n';
    for (const auto& [k, v] : dema::pipeline::train_entries(run.train)) os << k << " = " << v << '\n';
    *text = dup_string(os.str());
  });
}

void dema_config_free(dema_config* config) { delete config; }

dema_status dema_train(const dema_config* config, const char* csv_path, const char* checkpoint_path,
                       const char* log_path, char** metrics_json) {
  DEMA_ARG(config && csv_path && checkpoint_path);
  dema_status diverged = DEMA_OK;
  const dema_status st = guarded([&] {
    const auto run = finalized(config);
    const auto data = dema::pipeline::load_csv(csv_path, csv_options(run, false));
    std::ofstream log;
    if (log_path) {
      log.open(log_path);
      if (!log) throw dema::Error(dema::ErrorKind::Io, std::string("cannot write '") + log_path + "'");
      log << "epoch,train_loss,val_loss\n";
      log.precision(10);
    }
    auto result = dema::pipeline::train(run, data, [&](const dema::pipeline::EpochLog& e) {
      if (log) log << e.epoch << ',' << e.train_loss << ',' << e.val_loss << '\n' << std::flush;
    });
    dema::pipeline::RunConfig saved = run;
    saved.model = result.model.config();
    dema::pipeline::save_checkpoint(checkpoint_path, result.model, saved, result.standardizer,
                                    result.threshold);
    if (result.diverged) {
      g_last_error = result.message;
      diverged = DEMA_ERR_NUMERIC;
      return;
    }
    if (metrics_json) {
      const auto metrics = dema::pipeline::evaluate(result.model, result.standardizer, data, saved,
                                                    result.threshold);
      *metrics_json = dup_string(dema::pipeline::metrics_json(metrics));
    }
  });
  return st != DEMA_OK ? st : diverged;
}

dema_status dema_model_load(const char* checkpoint_path, dema_model** out) {
  DEMA_ARG(checkpoint_path && out);
  return guarded([&] {
    auto m = std::make_unique<dema_model>();
    m->checkpoint = dema::pipeline::load_checkpoint(checkpoint_path);
    *out = m.release();
  });
}

void dema_model_free(dema_model* model) { delete model; }

dema_status dema_model_info(const dema_model* model, dema_task* task, size_t* n_vars,
                            size_t* lookback, size_t* output_len) {
  DEMA_ARG(model);
  return guarded([&] {
    const auto& c = model->checkpoint.model.config();
    if (task) *task = static_cast<dema_task>(c.task);
    if (n_vars) *n_vars = c.n_vars;
    if (lookback) *lookback = c.lookback;
    if (output_len) {
      switch (c.task) {
        case dema::model::Task::Forecast: *output_len = c.horizon; break;
        case dema::model::Task::Classify: *output_len = c.n_classes; break;
        default: *output_len = c.lookback; break;
      }
    }
  });
}

dema_status dema_evaluate(const dema_model* model, const char* csv_path, char** metrics_json) {
  DEMA_ARG(model && csv_path && metrics_json);
  return guarded([&] {
    const auto& ck = model->checkpoint;
    const auto data = dema::pipeline::load_csv(csv_path, csv_options(ck.config, false));
    const auto metrics =
        dema::pipeline::evaluate(ck.model, ck.standardizer, data, ck.config, ck.threshold);
    *metrics_json = dup_string(dema::pipeline::metrics_json(metrics));
  });
}

dema_status dema_predict(const dema_model* model, const char* csv_path, char** csv_text) {
  DEMA_ARG(model && csv_path && csv_text);
  return guarded([&] {
    const auto& ck = model->checkpoint;
    const bool impute = ck.model.config().task == dema::model::Task::Impute;
    const auto data = dema::pipeline::load_csv(csv_path, csv_options(ck.config, impute));
    *csv_text = dup_string(dema::pipeline::predict_csv(ck, data));
  });
}

dema_status dema_forward(const dema_model* model, const double* window, const double* observed,
                         double* out, size_t out_len) {
  DEMA_ARG(model && window && out);
  return guarded([&] {
    const auto& ck = model->checkpoint;
    const auto& c = ck.model.config();
    const std::size_t n = c.n_vars * c.lookback;
    dema::SeriesWindow w(c.n_vars, c.lookback, std::vector<double>(window, window + n));
    w = ck.standardizer.apply(w);
    std::vector<double> mask;
    if (observed) {
      mask.assign(observed, observed + n);
      for (std::size_t i = 0; i < n; ++i)
        if (mask[i] == 0.0) w.values[i] = 0.0;
    }
    dema::NoGradGuard guard;
    const auto y = ck.model.forward(w, mask);
    dema::expect(y.numel() == out_len, dema::ErrorKind::Dimension,
                 "dema_forward: out_len does not match the model output");
    if (c.task == dema::model::Task::Classify) {
      std::copy(y.data().begin(), y.data().end(), out);
      return;
    }
    const std::size_t len = y.numel() / c.n_vars;
    dema::SeriesWindow pred(c.n_vars, len, std::vector<double>(y.data().begin(), y.data().end()));
    pred = ck.standardizer.invert(pred);
    std::copy(pred.values.begin(), pred.values.end(), out);
  });
}

dema_status dema_decompose(const double* window, size_t n_vars, size_t length, double theta,
                           double* cross_time, double* cross_variate, size_t* selected,
                           size_t* n_selected) {
  DEMA_ARG(window && cross_time && cross_variate);
  return guarded([&] {
    const dema::SeriesWindow w(n_vars, length, std::vector<double>(window, window + n_vars * length));
    const auto split = dema::spectral::decompose(w, theta);
    std::copy(split.cross_time.values.begin(), split.cross_time.values.end(), cross_time);
    std::copy(split.cross_variate.values.begin(), split.cross_variate.values.end(), cross_variate);
    if (selected) std::copy(split.selected.begin(), split.selected.end(), selected);
    if (n_selected) *n_selected = split.selected.size();
  });
}

dema_status dema_delay_priors(const double* window, size_t n_vars, size_t length, size_t max_lag,
                              size_t patch_len, int* tau, double* rho, int* token_shift) {
  DEMA_ARG(window);
  return guarded([&] {
    const dema::SeriesWindow w(n_vars, length, std::vector<double>(window, window + n_vars * length));
    const auto p = dema::delay::delay_matrix(w, max_lag, patch_len);
    if (tau) std::copy(p.tau.begin(), p.tau.end(), tau);
    if (rho) std::copy(p.rho.begin(), p.rho.end(), rho);
    if (token_shift) std::copy(p.delta_tok.begin(), p.delta_tok.end(), token_shift);
  });
}

dema_status dema_decompose_file(const char* csv_path, double theta, const char* out_dir) {
  DEMA_ARG(csv_path && out_dir);
  return guarded([&] {
    const auto data = dema::pipeline::load_csv(csv_path, {"", false});
    const auto split = dema::spectral::decompose(data.series, theta);
    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    auto write = [&](const std::string& name, const dema::SeriesWindow& s) {
      std::ofstream os(dir / name);
      if (!os) throw dema::Error(dema::ErrorKind::Io, "cannot write " + (dir / name).string());
      os.precision(17);
      for (std::size_t n = 0; n < data.columns.size(); ++n) os << (n ? "," : "") << data.columns[n];
      os << '\n';
      for (std::size_t t = 0; t < s.length; ++t) {
        for (std::size_t n = 0; n < s.n_vars; ++n) os << (n ? "," : "") << s.at(n, t);
        os << '\n';
      }
    };
    write("cross_time.csv", split.cross_time);
    write("cross_var.csv", split.cross_variate);
    nlohmann::json j;
    j["theta"] = theta;
    j["length"] = data.series.length;
    j["selected"] = split.selected;
    std::ofstream os(dir / "selected.json");
    if (!os) throw dema::Error(dema::ErrorKind::Io, "cannot write selected.json");
    os << j.dump(2) << '\n';
  });
}

dema_status dema_priors_file(const char* csv_path, size_t max_lag, size_t patch_len,
                             const char* out_dir, char** json) {
  DEMA_ARG(csv_path && (out_dir || json));
  return guarded([&] {
    const auto data = dema::pipeline::load_csv(csv_path, {"", false});
    const auto p = dema::delay::delay_matrix(data.series, max_lag, patch_len);
    const std::size_t n = p.n_vars;
    if (out_dir) {
      const std::filesystem::path dir(out_dir);
      std::filesystem::create_directories(dir);
      auto write = [&](const std::string& name, const auto& flat) {
        std::ofstream os(dir / name);
        if (!os) throw dema::Error(dema::ErrorKind::Io, "cannot write " + (dir / name).string());
        os.precision(17);
        os << "variate";
        for (const auto& c : data.columns) os << ',' << c;
        os << '\n';
        for (std::size_t a = 0; a < n; ++a) {
          os << data.columns[a];
          for (std::size_t b = 0; b < n; ++b) os << ',' << flat[a * n + b];
          os << '\n';
        }
      };
      write("tau.csv", p.tau);
      write("rho.csv", p.rho);
      write("token_shift.csv", p.delta_tok);
    }
    if (json) {
      nlohmann::json j;
      j["variates"] = data.columns;
      j["max_lag"] = p.max_lag;
      j["patch_len"] = p.patch_len;
      auto matrix = [n](const auto& flat) {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t a = 0; a < n; ++a)
          rows.push_back(std::vector<std::decay_t<decltype(flat[0])>>(flat.begin() + a * n,
                                                                       flat.begin() + (a + 1) * n));
        return rows;
      };
      j["tau"] = matrix(p.tau);
      j["rho"] = matrix(p.rho);
      j["token_shift"] = matrix(p.delta_tok);
      *json = dup_string(j.dump(2));
    }
  });
}

dema_status dema_bench(const dema_config* config, const size_t* lengths, size_t count,
                       size_t repeats, double* ms, size_t* bytes) {
  DEMA_ARG(config && lengths && count > 0 && ms && bytes);
  return guarded([&] {
    const auto run = finalized(config);
    const auto rows = dema::pipeline::bench_scaling(std::vector<std::size_t>(lengths, lengths + count),
                                                    run.model, repeats, run.train.seed);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      ms[i] = rows[i].ms;
      bytes[i] = rows[i].bytes;
    }
  });
}

}  // extern "C"
