#pragma once

// Dual-path backbone: spectral split, two token grids, stacked blocks that pair
// the temporal SSD path with the delay-aware variate path, and task heads.

#include <atomic>
#include <cstdint>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dema/dala.hpp"
#include "dema/delay.hpp"
#include "dema/embedding.hpp"
#include "dema/nn.hpp"
#include "dema/series.hpp"
#include "dema/spectral.hpp"
#include "dema/ssd.hpp"

namespace dema::model {

enum class Task { Forecast, Impute, Anomaly, Classify };

const char* task_name(Task task);
Task parse_task(const std::string& name);

struct ModelConfig {
  Task task = Task::Forecast;
  std::size_t n_vars = 1;
  std::size_t lookback = 96;  // T
  std::size_t horizon = 96;   // S (forecast only)
  std::size_t n_classes = 2;  // classify only
  std::size_t patch_len = 8;
  std::size_t stride = 8;
  std::size_t d_model = 64;
  std::size_t d_inner = 0;  // 0 -> 2 * d_model
  std::size_t d_state = 16;
  std::size_t conv_kernel = 4;
  std::size_t chunk = 16;
  std::size_t n_blocks = 2;
  std::size_t ffn_mult = 4;
  std::size_t head_hidden = 0;  // 0 -> single linear layer
  double alpha = 0.6;
  double beta = 0.4;
  double theta = 0.4;
  double kernel_power = 3.0;
  std::size_t max_lag = 0;  // 0 -> lookback / 4
  double rope_base = 10000.0;
  double attention_eps = 1e-6;
  bool rotated_denominator = false;
  bool delay_ablation = false;  // zero every off-diagonal rho
  bool mask_channel = false;    // impute: feed the observation mask to the encoders
  bool global_priors = false;   // use one prior set fitted on the training split
  double revin_eps = 1e-5;

  std::size_t inner() const { return d_inner ? d_inner : 2 * d_model; }
  std::size_t n_tokens() const;
  // (alpha, beta) defaults per task: (0.6, 0.4) forecast/classify, (0.2, 0.8) impute/anomaly.
  static std::pair<double, double> default_fusion(Task task);
  void validate() const;
};

struct BlockOutput {
  embedding::TokenGrid x_time;  // input for the next block
  embedding::TokenGrid x_var;
  Tensor z;                     // [N, L, D]
};

struct DuoMNetBlock {
  ssd::MambaSSD temporal;
  dala::MambaDALA variate;
  nn::LayerNorm ln_time;
  nn::LayerNorm ln_var;
  nn::LayerNorm ln_out;
  nn::Linear ffn_in;
  nn::Linear ffn_out;
  double alpha = 0.6;
  double beta = 0.4;

  DuoMNetBlock() = default;
  DuoMNetBlock(const ModelConfig& config, nn::Rng& rng);

  BlockOutput forward(const embedding::TokenGrid& x_time, const embedding::TokenGrid& x_var,
                      const delay::DelayPriors& priors) const;
  void collect(nn::ParamList& out, const std::string& prefix);
};

struct BackboneOutput {
  Tensor z;                        // [N, L, D], sum over blocks
  std::vector<Tensor> block_z;     // filled when tracing
  embedding::InstanceStats stats;  // for de-normalizing regression heads
  delay::DelayPriors priors;       // raw priors of the window
};

struct Mlp {
  std::vector<nn::Linear> layers;  // GELU between layers

  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, nn::Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(nn::ParamList& out, const std::string& prefix);
};

class Model {
 public:
  Model() = default;
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(Model&& other) noexcept;
  Model& operator=(Model&& other) noexcept;

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }

  // `observed` (N*T, 1 = observed) marks imputation inputs; masked points must
  // already be zero in `window`.
  BackboneOutput backbone_forward(const SeriesWindow& window, bool trace = false,
                                  std::span<const double> observed = {}) const;

  // Forecast [N, S]; impute/anomaly [N, T] (both de-normalized); classify
  // probabilities [C].
  Tensor forward(const SeriesWindow& window, std::span<const double> observed = {}) const;
  Tensor head(const BackboneOutput& backbone) const;

  nn::ParamList parameters();
  std::size_t parameter_count();

  std::size_t block_forward_count() const { return block_calls_.load(); }

  // With global_priors set, these replace the per-window estimate. Until set,
  // priors are still estimated per window.
  void set_fixed_priors(delay::DelayPriors priors);
  const std::optional<delay::DelayPriors>& fixed_priors() const { return fixed_priors_; }

  std::vector<DuoMNetBlock>& blocks() { return blocks_; }
  Mlp& head_mlp() { return head_; }

  void save(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& extra = {});
  // Extra key/value metadata stored alongside the parameters is returned.
  static Model load(std::istream& is, std::vector<std::pair<std::string, std::string>>* extra = nullptr);

 private:
  ModelConfig config_;
  embedding::PatchEncoder time_encoder_;
  embedding::PatchEncoder var_encoder_;
  std::vector<DuoMNetBlock> blocks_;
  Mlp head_;
  std::optional<delay::DelayPriors> fixed_priors_;
  mutable std::atomic<std::size_t> block_calls_{0};
};

// Flat key=value serialization of a config, shared by checkpoints and the CLI.
std::vector<std::pair<std::string, std::string>> config_entries(const ModelConfig& config);
// Applies one key; returns false for an unknown key.
bool apply_config_entry(ModelConfig& config, const std::string& key, const std::string& value);

// Per-timestep mean squared reconstruction error over variates.
std::vector<double> anomaly_score(const SeriesWindow& x, const SeriesWindow& recon);
// (1 - ratio) quantile of training scores: about ratio * n points lie above it.
double select_threshold(std::vector<double> scores, double ratio);

}  // namespace dema::model
