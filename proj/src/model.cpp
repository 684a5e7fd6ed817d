#include "dema/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace dema::model {

const char* task_name(Task task) {
  switch (task) {
    case Task::Forecast: return "forecast";
    case Task::Impute: return "impute";
    case Task::Anomaly: return "anomaly";
    case Task::Classify: return "classify";
  }
  return "forecast";
}

Task parse_task(const std::string& name) {
  if (name == "forecast") return Task::Forecast;
  if (name == "impute") return Task::Impute;
  if (name == "anomaly") return Task::Anomaly;
  if (name == "classify") return Task::Classify;
  fail(ErrorKind::Config, "unknown task '" + name + "'");
}

std::size_t ModelConfig::n_tokens() const {
  return embedding::patch_count(lookback, patch_len, stride);
}

std::pair<double, double> ModelConfig::default_fusion(Task task) {
  if (task == Task::Impute || task == Task::Anomaly) return {0.2, 0.8};
  return {0.6, 0.4};
}

void ModelConfig::validate() const {
  expect(n_vars >= 1, ErrorKind::Config, "n_vars must be >= 1");
  expect(lookback >= 2, ErrorKind::Config, "lookback must be >= 2");
  expect(patch_len >= 1 && stride >= 1 && patch_len <= lookback, ErrorKind::Config,
         "patch_len/stride must be >= 1 and patch_len <= lookback");
  expect(d_model >= 1 && d_state >= 1 && conv_kernel >= 1 && chunk >= 1 && ffn_mult >= 1,
         ErrorKind::Config, "model widths, conv_kernel and chunk must be >= 1");
  expect(inner() % 2 == 0, ErrorKind::Config, "d_inner must be even for rotary encoding");
  expect(n_blocks >= 1, ErrorKind::Config, "n_blocks must be >= 1");
  expect(alpha >= 0 && alpha <= 1 && beta >= 0 && beta <= 1, ErrorKind::Config,
         "alpha and beta must lie in [0, 1]");
  expect(theta > 0 && theta <= 1, ErrorKind::Config, "theta must lie in (0, 1]");
  expect(kernel_power >= 1, ErrorKind::Config, "kernel_power must be >= 1");
  expect(attention_eps > 0 && revin_eps > 0, ErrorKind::Config, "eps values must be positive");
  if (task == Task::Forecast) expect(horizon >= 1, ErrorKind::Config, "horizon must be >= 1");
  if (task == Task::Classify) expect(n_classes >= 2, ErrorKind::Config, "classify needs n_classes >= 2");
}

// ---------------------------------------------------------------- block

DuoMNetBlock::DuoMNetBlock(const ModelConfig& c, nn::Rng& rng)
    : temporal({c.d_model, c.inner(), c.d_state, c.conv_kernel, c.chunk}, rng),
      variate({c.d_model, c.inner(), c.kernel_power,
               {c.attention_eps, c.rotated_denominator, c.rope_base}},
              rng),
      ln_time(c.d_model),
      ln_var(c.d_model),
      ln_out(c.d_model),
      ffn_in(c.d_model, c.ffn_mult * c.d_model, rng),
      ffn_out(c.ffn_mult * c.d_model, c.d_model, rng),
      alpha(c.alpha),
      beta(c.beta) {}

BlockOutput DuoMNetBlock::forward(const embedding::TokenGrid& x_time,
                                  const embedding::TokenGrid& x_var,
                                  const delay::DelayPriors& priors) const {
  expect(x_time.layout == embedding::Layout::TimeMajor &&
             x_var.layout == embedding::Layout::VariateMajor,
         ErrorKind::Contract, "DuoMNetBlock: expected time-major and variate-major grids");
  expect(x_time.n_vars() == x_var.n_vars() && x_time.n_tokens() == x_var.n_tokens() &&
             x_time.width() == x_var.width(),
         ErrorKind::Contract, "DuoMNetBlock: the two grids disagree on N, L or D");

  const auto y_time = temporal.forward(x_time);
  const auto y_var = variate.forward(x_var, priors);

  BlockOutput out;
  out.x_time = {embedding::Layout::TimeMajor, sub(x_time.tokens, y_time.tokens), x_time.patch_len,
                x_time.stride};
  out.x_var = {embedding::Layout::VariateMajor, sub(x_var.tokens, y_var.tokens), x_var.patch_len,
               x_var.stride};

  const Tensor y_var_time = embedding::to_time_major(y_var).tokens;
  const Tensor fused = add(scale(ln_time(y_time.tokens), alpha), scale(ln_var(y_var_time), beta));
  out.z = ln_out(add(fused, ffn_out(gelu(ffn_in(fused)))));
  return out;
}

void DuoMNetBlock::collect(nn::ParamList& out, const std::string& prefix) {
  temporal.collect(out, prefix + ".temporal");
  variate.collect(out, prefix + ".variate");
  ln_time.collect(out, prefix + ".ln_time");
  ln_var.collect(out, prefix + ".ln_var");
  ln_out.collect(out, prefix + ".ln_out");
  ffn_in.collect(out, prefix + ".ffn_in");
  ffn_out.collect(out, prefix + ".ffn_out");
}

// ---------------------------------------------------------------- heads

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, nn::Rng& rng) {
  if (hidden == 0) {
    layers.emplace_back(in, out, rng);
  } else {
    layers.emplace_back(in, hidden, rng);
    layers.emplace_back(hidden, out, rng);
  }
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = gelu(h);
  }
  return h;
}

void Mlp::collect(nn::ParamList& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(out, prefix + "." + std::to_string(i));
}

// ---------------------------------------------------------------- model

namespace {

std::size_t head_outputs(const ModelConfig& c) {
  switch (c.task) {
    case Task::Forecast: return c.horizon;
    case Task::Impute:
    case Task::Anomaly: return c.lookback;
    case Task::Classify: return c.n_classes;
  }
  return c.horizon;
}

std::size_t encoder_features(const ModelConfig& c) {
  return c.mask_channel ? 2 * c.patch_len : c.patch_len;
}

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  nn::Rng rng(seed);
  time_encoder_ = embedding::PatchEncoder(encoder_features(config_), config_.d_model, rng);
  var_encoder_ = embedding::PatchEncoder(encoder_features(config_), config_.d_model, rng);
  for (std::size_t b = 0; b < config_.n_blocks; ++b) blocks_.emplace_back(config_, rng);
  const std::size_t head_in =
      config_.task == Task::Classify ? config_.d_model : config_.n_tokens() * config_.d_model;
  head_ = Mlp(head_in, config_.head_hidden, head_outputs(config_), rng);
}

Model::Model(Model&& other) noexcept
    : config_(std::move(other.config_)),
      time_encoder_(std::move(other.time_encoder_)),
      var_encoder_(std::move(other.var_encoder_)),
      blocks_(std::move(other.blocks_)),
      head_(std::move(other.head_)),
      fixed_priors_(std::move(other.fixed_priors_)),
      block_calls_(other.block_calls_.load()) {}

Model& Model::operator=(Model&& other) noexcept {
  config_ = std::move(other.config_);
  time_encoder_ = std::move(other.time_encoder_);
  var_encoder_ = std::move(other.var_encoder_);
  blocks_ = std::move(other.blocks_);
  head_ = std::move(other.head_);
  fixed_priors_ = std::move(other.fixed_priors_);
  block_calls_.store(other.block_calls_.load());
  return *this;
}

BackboneOutput Model::backbone_forward(const SeriesWindow& window, bool trace,
                                       std::span<const double> observed) const {
  const auto& c = config_;
  expect(window.n_vars == c.n_vars && window.length == c.lookback, ErrorKind::Dimension,
         "backbone_forward: window is " + std::to_string(window.n_vars) + "x" +
             std::to_string(window.length) + ", model expects " + std::to_string(c.n_vars) + "x" +
             std::to_string(c.lookback));
  require_finite(window.values, "backbone_forward");

  BackboneOutput out;
  auto norm = embedding::revin_normalize(window, c.revin_eps, observed);
  out.stats = norm.stats;
  const auto split = spectral::decompose(norm.window, c.theta);

  Tensor patches_time = embedding::patchify(split.cross_time, c.patch_len, c.stride);
  Tensor patches_var = embedding::patchify(split.cross_variate, c.patch_len, c.stride);
  if (c.mask_channel) {
    SeriesWindow mask(c.n_vars, c.lookback, 1.0);
    if (!observed.empty()) std::copy(observed.begin(), observed.end(), mask.values.begin());
    const Tensor mask_patches = embedding::patchify(mask, c.patch_len, c.stride);
    patches_time = concat_last(patches_time, mask_patches);
    patches_var = concat_last(patches_var, mask_patches);
  }
  auto x_time = time_encoder_(patches_time, c.patch_len, c.stride);
  auto x_var = embedding::to_variate_major(var_encoder_(patches_var, c.patch_len, c.stride));

  out.priors = c.global_priors && fixed_priors_ ? *fixed_priors_
                                                : delay::delay_matrix(window, c.max_lag, c.patch_len);
  const auto priors = delay::attention_priors(out.priors, c.delay_ablation);

  for (const auto& block : blocks_) {
    block_calls_.fetch_add(1);
    auto step = block.forward(x_time, x_var, priors);
    out.z = out.z.defined() ? add(out.z, step.z) : step.z;
    if (trace) out.block_z.push_back(step.z);
    x_time = std::move(step.x_time);
    x_var = std::move(step.x_var);
  }
  return out;
}

Tensor Model::head(const BackboneOutput& bb) const {
  const auto& c = config_;
  if (c.task == Task::Classify) {
    const Tensor pooled = reshape(mean_rows(bb.z), {1, c.d_model});
    return reshape(softmax(head_(pooled)), {c.n_classes});
  }
  const Tensor flat = reshape(bb.z, {c.n_vars, c.n_tokens() * c.d_model});
  return embedding::revin_denormalize(head_(flat), bb.stats);
}

Tensor Model::forward(const SeriesWindow& window, std::span<const double> observed) const {
  return head(backbone_forward(window, false, observed));
}

nn::ParamList Model::parameters() {
  nn::ParamList out;
  time_encoder_.collect(out, "time_encoder");
  var_encoder_.collect(out, "var_encoder");
  for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(out, "block" + std::to_string(b));
  head_.collect(out, "head");
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += p.tensor->numel();
  return n;
}

// ---------------------------------------------------------------- config io

std::vector<std::pair<std::string, std::string>> config_entries(const ModelConfig& c) {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  auto u = [](std::size_t v) { return std::to_string(v); };
  auto flag = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"task", task_name(c.task)},
      {"n_vars", u(c.n_vars)},
      {"lookback", u(c.lookback)},
      {"horizon", u(c.horizon)},
      {"n_classes", u(c.n_classes)},
      {"patch_len", u(c.patch_len)},
      {"stride", u(c.stride)},
      {"d_model", u(c.d_model)},
      {"d_inner", u(c.d_inner)},
      {"d_state", u(c.d_state)},
      {"conv_kernel", u(c.conv_kernel)},
      {"chunk", u(c.chunk)},
      {"n_blocks", u(c.n_blocks)},
      {"ffn_mult", u(c.ffn_mult)},
      {"head_hidden", u(c.head_hidden)},
      {"alpha", num(c.alpha)},
      {"beta", num(c.beta)},
      {"theta", num(c.theta)},
      {"kernel_power", num(c.kernel_power)},
      {"max_lag", u(c.max_lag)},
      {"rope_base", num(c.rope_base)},
      {"attention_eps", num(c.attention_eps)},
      {"rotated_denominator", flag(c.rotated_denominator)},
      {"delay_ablation", flag(c.delay_ablation)},
      {"mask_channel", flag(c.mask_channel)},
      {"global_priors", flag(c.global_priors)},
      {"revin_eps", num(c.revin_eps)},
  };
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-')
    fail(ErrorKind::Config, "config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(out);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    fail(ErrorKind::Config, "config key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::Config, "config key '" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace

bool apply_config_entry(ModelConfig& c, const std::string& key, const std::string& v) {
  const std::map<std::string, std::size_t*> sizes{
      {"n_vars", &c.n_vars},       {"lookback", &c.lookback},     {"horizon", &c.horizon},
      {"n_classes", &c.n_classes}, {"patch_len", &c.patch_len},   {"stride", &c.stride},
      {"d_model", &c.d_model},     {"d_inner", &c.d_inner},       {"d_state", &c.d_state},
      {"conv_kernel", &c.conv_kernel}, {"chunk", &c.chunk},       {"n_blocks", &c.n_blocks},
      {"ffn_mult", &c.ffn_mult},   {"head_hidden", &c.head_hidden}, {"max_lag", &c.max_lag},
  };
  const std::map<std::string, double*> reals{
      {"alpha", &c.alpha},         {"beta", &c.beta},
      {"theta", &c.theta},         {"kernel_power", &c.kernel_power},
      {"rope_base", &c.rope_base}, {"attention_eps", &c.attention_eps},
      {"revin_eps", &c.revin_eps},
  };
  const std::map<std::string, bool*> flags{
      {"rotated_denominator", &c.rotated_denominator},
      {"delay_ablation", &c.delay_ablation},
      {"mask_channel", &c.mask_channel},
      {"global_priors", &c.global_priors},
  };
  if (key == "task") {
    c.task = parse_task(v);
  } else if (auto it = sizes.find(key); it != sizes.end()) {
    *it->second = parse_size(key, v);
  } else if (auto it = reals.find(key); it != reals.end()) {
    *it->second = parse_double(key, v);
  } else if (auto it = flags.find(key); it != flags.end()) {
    *it->second = parse_bool(key, v);
  } else {
    return false;
  }
  return true;
}

// ---------------------------------------------------------------- checkpoint
//
// Little-endian binary container:
//   "DEMACKPT" | u32 version | u32 n_meta | n_meta x (str key, str value)
//   | u32 n_params | n_params x (str name, u32 rank, rank x u64 dim, f64 data...)
// where str is u32 length followed by the bytes.

namespace {

constexpr char kMagic[8] = {'D', 'E', 'M', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    fail(ErrorKind::Format, "checkpoint: unexpected end of file");
  return v;
}

std::string get_str(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 30)) fail(ErrorKind::Format, "checkpoint: string field too long");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) fail(ErrorKind::Format, "checkpoint: unexpected end of file");
  return s;
}

// "n;max_lag;patch_len;tau,...;rho,..." with rho at full precision.
std::string encode_priors(const delay::DelayPriors& p) {
  std::ostringstream os;
  os.precision(17);
  os << p.n_vars << ';' << p.max_lag << ';' << p.patch_len << ';';
  for (std::size_t i = 0; i < p.tau.size(); ++i) os << (i ? "," : "") << p.tau[i];
  os << ';';
  for (std::size_t i = 0; i < p.rho.size(); ++i) os << (i ? "," : "") << p.rho[i];
  return os.str();
}

delay::DelayPriors decode_priors(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ';');) parts.push_back(part);
  if (parts.size() != 5) fail(ErrorKind::Format, "checkpoint: malformed priors entry");
  try {
    delay::DelayPriors p = delay::DelayPriors::identity(std::stoul(parts[0]), std::stoul(parts[2]));
    p.max_lag = std::stoul(parts[1]);
    const std::size_t n2 = p.n_vars * p.n_vars;
    std::stringstream tau(parts[3]), rho(parts[4]);
    std::string cell;
    for (std::size_t i = 0; i < n2; ++i) {
      if (!std::getline(tau, cell, ',')) fail(ErrorKind::Format, "checkpoint: short priors tau");
      p.tau[i] = std::stoi(cell);
      if (!std::getline(rho, cell, ',')) fail(ErrorKind::Format, "checkpoint: short priors rho");
      p.rho[i] = std::stod(cell);
      p.delta_tok[i] = delay::token_shift(p.tau[i], p.patch_len);
    }
    return p;
  } catch (const std::logic_error&) {
    fail(ErrorKind::Format, "checkpoint: malformed priors entry");
  }
}

}  // namespace

void Model::set_fixed_priors(delay::DelayPriors priors) {
  expect(priors.n_vars == config_.n_vars, ErrorKind::Dimension,
         "set_fixed_priors: priors cover " + std::to_string(priors.n_vars) + " variates, model has " +
             std::to_string(config_.n_vars));
  fixed_priors_ = std::move(priors);
}

void Model::save(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& extra) {
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  auto meta = config_entries(config_);
  if (fixed_priors_) meta.emplace_back("priors", encode_priors(*fixed_priors_));
  meta.insert(meta.end(), extra.begin(), extra.end());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    put_str(os, k);
    put_str(os, v);
  }
  auto params = parameters();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_str(os, p.name);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor->rank()));
    for (auto d : p.tensor->shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.tensor->data().data()),
             static_cast<std::streamsize>(p.tensor->numel() * sizeof(double)));
  }
  if (!os) fail(ErrorKind::Io, "checkpoint: write failed");
}

Model Model::load(std::istream& is, std::vector<std::pair<std::string, std::string>>* extra) {
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail(ErrorKind::Format, "checkpoint: bad magic");
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion)
    fail(ErrorKind::Format, "checkpoint: unsupported version " + std::to_string(version));
  ModelConfig config;
  std::optional<delay::DelayPriors> priors;
  const auto n_meta = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto key = get_str(is);
    auto value = get_str(is);
    if (key == "priors")
      priors = decode_priors(value);
    else if (!apply_config_entry(config, key, value) && extra)
      extra->emplace_back(key, value);
  }
  Model model(config, 0);
  if (priors) model.set_fixed_priors(std::move(*priors));
  auto params = model.parameters();
  std::map<std::string, Tensor*> by_name;
  for (auto& p : params) by_name[p.name] = p.tensor;
  const auto n_params = get<std::uint32_t>(is);
  if (n_params != params.size())
    fail(ErrorKind::Format, "checkpoint: holds " + std::to_string(n_params) +
                                " tensors, config implies " + std::to_string(params.size()));
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const auto name = get_str(is);
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorKind::Format, "checkpoint: unknown tensor '" + name + "'");
    const auto rank = get<std::uint32_t>(is);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::uint64_t>(is));
    if (shape != it->second->shape())
      fail(ErrorKind::Format, "checkpoint: tensor '" + name + "' has shape " + shape_string(shape));
    auto data = it->second->mutable_data();
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(double))))
      fail(ErrorKind::Format, "checkpoint: truncated tensor '" + name + "'");
  }
  return model;
}

// ---------------------------------------------------------------- anomaly

std::vector<double> anomaly_score(const SeriesWindow& x, const SeriesWindow& recon) {
  expect(x.n_vars == recon.n_vars && x.length == recon.length, ErrorKind::Dimension,
         "anomaly_score: shape mismatch");
  std::vector<double> score(x.length, 0.0);
  for (std::size_t t = 0; t < x.length; ++t) {
    for (std::size_t n = 0; n < x.n_vars; ++n) {
      const double d = x.at(n, t) - recon.at(n, t);
      score[t] += d * d;
    }
    score[t] /= static_cast<double>(x.n_vars);
  }
  return score;
}

double select_threshold(std::vector<double> scores, double ratio) {
  expect(!scores.empty(), ErrorKind::EmptyInput, "select_threshold: no scores");
  expect(ratio > 0 && ratio < 1, ErrorKind::Config, "select_threshold: ratio must lie in (0, 1)");
  std::sort(scores.begin(), scores.end());
  const auto above = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(scores.size())));
  const std::size_t idx = scores.size() - std::min(above, scores.size() - 1) - 1;
  return scores[idx];
}

}  // namespace dema::model
