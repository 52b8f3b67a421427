#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mist/autodiff.hpp"
#include "mist/features.hpp"
#include "mist/params.hpp"
#include "mist/selection.hpp"

namespace mist {

enum class ModelKind { mist, meanpool, trans_frame, trans_patch, divided_sta };
enum class Ablation { none, no_ss, no_rs, no_sta };

std::string to_string(ModelKind kind);
std::string to_string(Ablation ablation);
ModelKind model_kind_from_string(const std::string& s);
Ablation ablation_from_string(const std::string& s);

/// Architecture of one model. Dimensions follow the video hierarchy: K
/// segments of T frames of N patches of width D, M question words and A
/// candidate answers.
struct ModelConfig {
  ModelKind kind = ModelKind::mist;
  Ablation ablation = Ablation::none;
  std::size_t K = 8, T = 4, N = 16, D = 32, M = 8, A = 4;
  std::size_t top_k = 2, top_j = 12, layers = 2, heads = 4;
  SelectorKind segment_selector = SelectorKind::gumbel_with_replacement;
  SelectorKind region_selector = SelectorKind::gumbel_without_replacement;
  /// Wraps every attention block as LayerNorm(x + MultiHead(x)).
  bool residual_norm = true;
  bool straight_through = true;
  bool cosine_answer = false;
  PoolMode frame_pool = PoolMode::mean;
  PoolMode question_pool = PoolMode::mean;
  /// Dense baselines only: whether question words join the attention or
  /// only the final pooling.
  bool words_in_attention = true;
};

void validate(const ModelConfig& cfg);

/// Token count of the joint self-attention of one ISTA layer.
std::size_t ista_tokens(const ModelConfig& cfg);

/// Scaled-uniform (fan-in) linear weights, zero biases (none on key-side
/// maps), N(0, 0.02²) embedding tables, unit LayerNorm gains.
ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardOptions {
  bool training = false;
  double temperature = 1.0;
  /// Root of the per-sample random streams.
  std::uint64_t seed = 0;
  /// Overrides the config; the gradient checker turns it off.
  bool straight_through = true;
};

struct SpatialTrace {
  std::size_t frame = 0;  // global frame index k·T + t of the source frame
  Tensor weights;
  std::vector<std::size_t> selected;
};

struct LayerTrace {
  Tensor temporal_weights;
  std::vector<std::size_t> temporal_selected;
  std::vector<SpatialTrace> spatial;
};

using AttentionTrace = std::vector<LayerTrace>;

struct SampleView {
  const VideoFeatures* video = nullptr;
  const QuestionFeatures* question = nullptr;
  const AnswerBank* answers = nullptr;
};

inline SampleView view_of(const SynthSample& s) { return SampleView{&s.video, &s.question, &s.answers}; }
inline SampleView view_of(const FeatureBundle& b) { return SampleView{&b.video, &b.question, &b.answers}; }

struct ForwardResult {
  Var x_o;     // 1×D fused feature
  Var scores;  // 1×A answer similarities
  AttentionTrace trace;
};

namespace ad {

struct LayerState {
  Var segments;  // K×D
  Var words;     // M×D
};

struct LayerOutput {
  Var tokens;  // output tokens of the layer (pooled into X_o)
  LayerState next;
  LayerTrace trace;
};

/// One ISTA layer (or its ablated variant per cfg.ablation) over patch rows
/// `video` of shape (K·T·N)×D that already carry position embeddings.
LayerOutput ista_layer(ParamBinder& params, const ModelConfig& cfg, std::size_t layer, const LayerState& state,
                       Var video, const ForwardOptions& options);

/// Adds φ_t rows to (K·T·N)×D patch rows.
Var add_positions(ParamBinder& params, const ModelConfig& cfg, Var video);

ForwardResult mist_forward(ParamBinder& params, const ModelConfig& cfg, const SampleView& sample,
                           const ForwardOptions& options);

}  // namespace ad

// Tensor-level surface of the layer and the full model.

struct IstaState {
  Tensor segments;
  Tensor words;
  std::vector<Tensor> outputs;
};

struct IstaLayerResult {
  Tensor tokens;
  IstaState state;
  LayerTrace trace;
};

IstaLayerResult ista_layer(const IstaState& state, const VideoFeatures& video, const ModelConfig& cfg,
                           const ParamStore& params, std::size_t layer, const ForwardOptions& options);

struct MistOutput {
  Tensor x_o;
  Tensor scores;
  AttentionTrace trace;
};

MistOutput mist_forward(const SampleView& sample, const ParamStore& params, const ModelConfig& cfg,
                        const ForwardOptions& options);

/// {layers:[{temporal:{weights,selected}, spatial:[{frame,weights,selected}]}]}
nlohmann::json trace_to_json(const AttentionTrace& trace);
/// Empty string when valid, else the first violation. Temporal arrays may
/// be empty for variants without segment selection.
std::string validate_trace_json(const nlohmann::json& j, const ModelConfig& cfg);

}  // namespace mist
