#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mist/features.hpp"
#include "mist/ista.hpp"
#include "mist/numerics.hpp"
#include "mist/params.hpp"

namespace mist {

/// Everything one training run depends on. The config file uses exactly
/// these field names as keys; T is derived as frames / K.
struct TrainConfig {
  ModelKind kind = ModelKind::mist;
  Ablation ablation = Ablation::none;
  std::size_t K = 8, frames = 32, N = 16, D = 32, M = 8, A = 4;
  std::size_t top_k = 2, top_j = 12, layers = 2, heads = 4;
  SelectorKind segment_selector = SelectorKind::gumbel_with_replacement;
  SelectorKind region_selector = SelectorKind::gumbel_without_replacement;
  bool residual_norm = true;
  bool straight_through = true;
  bool cosine_answer = false;
  PoolMode frame_pool = PoolMode::mean;
  PoolMode question_pool = PoolMode::mean;
  bool words_in_attention = true;

  TaskKind task = TaskKind::single_event;
  double noise_std = 0.1;
  std::size_t event_patches = 2;
  std::size_t clutter_patches = 6;
  double clutter_scale = 0.5;
  std::uint64_t task_seed = 0;

  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t steps = 1500;
  std::size_t batch_size = 8;
  double temperature_start = 1.0;
  double temperature_end = 0.5;
  std::uint64_t seed = 0;
  std::size_t eval_samples = 200;
  std::uint64_t eval_seed = 1000003;
  /// Steps between evaluation rows of the metrics log; 0 evaluates only at the end.
  std::size_t eval_every = 0;
};

ModelConfig model_config(const TrainConfig& tc);
SynthConfig synth_config(const TrainConfig& tc);
/// Checks the whole config; throws std::invalid_argument naming the key.
void validate(const TrainConfig& tc);

nlohmann::json to_json(const TrainConfig& tc);
/// Absent keys keep their defaults; unknown keys and ill-typed values are
/// rejected with every offending key named.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Temperature at `step` of a `steps`-step run (linear anneal).
double temperature_at(const TrainConfig& tc, std::size_t step);

// ---------------------------------------------------------------------------
// Forward dispatch over every architecture.

namespace ad {

/// Dense baselines. The trace of the result is empty.
ForwardResult baseline_forward(ParamBinder& params, const ModelConfig& cfg, const SampleView& sample);
/// Any architecture: mist (with its ablation) or one of the baselines.
ForwardResult model_forward(ParamBinder& params, const ModelConfig& cfg, const SampleView& sample,
                            const ForwardOptions& options);

}  // namespace ad

/// Fused D-vector of a dense baseline.
Tensor baseline_forward(ModelKind kind, const SampleView& sample, const ParamStore& params, const ModelConfig& cfg);
/// Fused D-vector of an ablated mist model.
Tensor ablation_forward(Ablation variant, const SampleView& sample, const ParamStore& params, const ModelConfig& cfg,
                        const ForwardOptions& options = {});

/// Loss of one labelled sample as a function of the parameters, for
/// training and gradient checks.
LossFn sample_loss(const ModelConfig& cfg, const SampleView& sample, std::size_t label, const ForwardOptions& options);

/// End-to-end gradient check of the config's model on one synthetic sample:
/// training-mode selection with frozen Gumbel noise and the soft relaxation
/// in the forward value, so finite differences see a smooth loss.
GradCheckReport model_grad_check(const TrainConfig& tc, const GradCheckOptions& options = {});

/// The small config used for end-to-end gradient checks.
TrainConfig tiny_gradcheck_config();

// ---------------------------------------------------------------------------
// Training and evaluation.

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> acc;
  std::optional<double> hit_rate;
  /// Cumulative forward multiply-accumulates of training so far, in millions.
  double mmacs = 0.0;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;
  std::size_t eval_samples = 0;
  std::optional<double> accuracy;
  /// Only for variants with segment selection.
  std::optional<double> hit_rate;
  double eval_loss = 0.0;
  double wall_seconds = 0.0;
  std::uint64_t macs = 0;
};

/// step,loss,acc,hit_rate,mmacs; metrics that were not measured are empty.
void write_metrics_csv(const MetricsLog& log, std::ostream& out);

struct TrainResult {
  ParamStore params;
  MetricsLog log;
};

/// Worker count: MIST_THREADS when set (at least 1), else the hardware
/// concurrency.
std::size_t worker_threads();

/// AdamW on freshly generated batches. Throws std::runtime_error when the
/// loss stops being finite.
TrainResult train(const TrainConfig& tc, const std::function<void(const MetricsRow&)>& on_row = {});

/// Eval-mode accuracy and planted-segment hit rate on `n_samples` samples
/// generated from `seed`.
MetricsLog evaluate(const ParamStore& params, const TrainConfig& tc, std::size_t n_samples, std::uint64_t seed);

/// Whether the planted answer segment is among the segments any layer picked.
bool planted_hit(const AttentionTrace& trace, const PlantedInfo& planted);

// ---------------------------------------------------------------------------
// Cost accounting.

struct AttentionSite {
  std::string name;
  std::size_t tokens = 0;
  std::size_t count = 1;
};

struct CostReport {
  ModelKind kind = ModelKind::mist;
  Ablation ablation = Ablation::none;
  std::vector<AttentionSite> sites;
  std::uint64_t projection_macs = 0;  // every linear map and score product
  std::uint64_t attention_macs = 0;   // 4nD² + 2n²D per self-attention site
  std::uint64_t quadratic_macs = 0;   // the 2n²D part alone
  std::uint64_t total_macs = 0;
  /// Relative to a single dense trans_patch forward pass at the same dims.
  double ratio_vs_dense = 0.0;
  double quadratic_ratio_vs_dense = 0.0;
};

CostReport cost_estimate(const ModelConfig& cfg);
nlohmann::json to_json(const CostReport& r);

struct MeasuredCost {
  std::uint64_t macs = 0;
  std::vector<std::size_t> attention_sites;
};

/// Runs one eval-mode forward pass on a synthetic sample with the MAC
/// counter of the tape.
MeasuredCost measure_cost(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Sweeps.

enum class SweepAxis { top_k, top_j, layers, K, frames };

std::string to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(const std::string& s);

/// The config with one axis set; validates the result.
TrainConfig with_axis(TrainConfig tc, SweepAxis axis, std::size_t value);

struct SweepRow {
  SweepAxis axis = SweepAxis::layers;
  std::size_t value = 0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  double acc = 0.0;
  std::optional<double> hit_rate;
  double mmacs = 0.0;
};

/// Trains and evaluates every (value, seed) pair. Every value is validated
/// before any training starts.
std::vector<SweepRow> sweep(const TrainConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                            const std::vector<std::uint64_t>& seeds,
                            const std::function<void(const SweepRow&)>& on_row = {});

/// axis,value,seed,loss,acc,hit_rate,mmacs
void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out);

double median(std::vector<double> v);

// ---------------------------------------------------------------------------
// Parameter files: "MISTPARM", u32 LE header length, JSON header
// {version, config, tensors:[{name, shape}]}, then f64 LE payloads in
// header order.

void save_params(const ParamStore& params, const TrainConfig& tc, const std::filesystem::path& path);

struct ParamFile {
  ParamStore params;
  TrainConfig config;
};

ParamFile load_params(const std::filesystem::path& path);

}  // namespace mist
