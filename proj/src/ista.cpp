#include "mist/ista.hpp"

#include <cmath>
#include <stdexcept>

#include "mist/answer.hpp"
#include "mist/numerics.hpp"
#include "mist/rng.hpp"

namespace mist {

using nlohmann::json;

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::mist: return "mist";
    case ModelKind::meanpool: return "meanpool";
    case ModelKind::trans_frame: return "trans_frame";
    case ModelKind::trans_patch: return "trans_patch";
    case ModelKind::divided_sta: return "divided_sta";
  }
  return "?";
}

std::string to_string(Ablation ablation) {
  switch (ablation) {
    case Ablation::none: return "none";
    case Ablation::no_ss: return "no_ss";
    case Ablation::no_rs: return "no_rs";
    case Ablation::no_sta: return "no_sta";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
  for (ModelKind k : {ModelKind::mist, ModelKind::meanpool, ModelKind::trans_frame, ModelKind::trans_patch,
                      ModelKind::divided_sta}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown model kind '" + s + "'");
}

Ablation ablation_from_string(const std::string& s) {
  for (Ablation a : {Ablation::none, Ablation::no_ss, Ablation::no_rs, Ablation::no_sta}) {
    if (to_string(a) == s) return a;
  }
  throw std::invalid_argument("unknown ablation '" + s + "'");
}

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

void validate(const ModelConfig& c) {
  require(c.K > 0 && c.T > 0 && c.N > 0 && c.D > 0 && c.M > 0, "model dims must be positive");
  require(c.A >= 2, "A must be >= 2");
  require(c.heads > 0 && c.D % c.heads == 0,
          "D = " + std::to_string(c.D) + " must be divisible by heads = " + std::to_string(c.heads));
  require(c.top_k >= 1 && c.top_j >= 1 && c.layers >= 1, "top_k, top_j and layers must be >= 1");
  require(c.ablation == Ablation::none || c.kind == ModelKind::mist, "ablations apply to the mist model only");
  if (c.segment_selector != SelectorKind::gumbel_with_replacement) {
    require(c.top_k <= c.K, "top_k = " + std::to_string(c.top_k) + " exceeds K = " + std::to_string(c.K) + " for " +
                                to_string(c.segment_selector) + " selection");
  }
  if (c.region_selector != SelectorKind::gumbel_with_replacement) {
    require(c.top_j <= c.N, "top_j = " + std::to_string(c.top_j) + " exceeds N = " + std::to_string(c.N) + " for " +
                                to_string(c.region_selector) + " selection");
  }
  if (c.kind == ModelKind::mist && c.segment_selector == SelectorKind::nonparametric) {
    require(c.layers == 1, "the nonparametric selector runs a single ISTA layer (layers must be 1)");
  }
}

std::size_t ista_tokens(const ModelConfig& c) {
  switch (c.ablation) {
    case Ablation::none: return c.K + c.top_k * c.T * c.top_j + c.M;
    case Ablation::no_ss: return c.K * c.T * c.top_j + c.M;
    case Ablation::no_rs: return c.K + c.top_k * c.T * c.N + c.M;
    case Ablation::no_sta: return 0;
  }
  return 0;
}

namespace {

class Initializer {
 public:
  Initializer(ParamStore& store, std::uint64_t seed) : store_(store), rng_(derive_seed(seed, {0x696e6974ull})) {}

  void linear(const std::string& name, std::size_t in, std::size_t out, bool bias = true) {
    Tensor w = Tensor::matrix(out, in);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : w.values()) v = bound * (2.0 * rng_.uniform() - 1.0);
    store_[name + ".weight"] = std::move(w);
    if (bias) store_[name + ".bias"] = Tensor({out}, 0.0);
  }

  /// Key-side maps feed a softmax, which cancels any bias, so they have none.
  void key_map(const std::string& name, std::size_t in, std::size_t out) { linear(name, in, out, false); }

  void embedding(const std::string& name, std::size_t rows, std::size_t cols) {
    Tensor t = Tensor::matrix(rows, cols);
    for (double& v : t.values()) v = 0.02 * rng_.normal();
    store_[name] = std::move(t);
  }

  void layer_norm(const std::string& name, std::size_t d) {
    store_[name + ".gamma"] = Tensor({d}, 1.0);
    store_[name + ".beta"] = Tensor({d}, 0.0);
  }

  void mha(const std::string& name, std::size_t d) {
    linear(name + ".q", d, d);
    key_map(name + ".k", d, d);
    linear(name + ".v", d, d);
    linear(name + ".o", d, d);
  }

 private:
  ParamStore& store_;
  Rng rng_;
};

}  // namespace

ParamStore init_params(const ModelConfig& c, std::uint64_t seed) {
  validate(c);
  ParamStore store;
  Initializer init(store, seed);
  const std::size_t D = c.D;
  init.embedding("pos.temporal", c.K * c.T + 1, D);
  switch (c.kind) {
    case ModelKind::mist: {
      init.embedding("pos.type", 3, D);
      for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        const bool seg = c.ablation != Ablation::no_ss;
        const bool reg = c.ablation != Ablation::no_rs;
        if (seg && c.segment_selector != SelectorKind::nonparametric) {
          init.linear(p + "g_q", D, D);
          init.key_map(p + "g_s", D, D);
        }
        if (reg && c.region_selector != SelectorKind::nonparametric) {
          init.linear(p + "h_q", D, D);
          init.key_map(p + "h_x", D, D);
        }
        if (seg) init.linear(p + "phi_s", D, D);
        init.linear(p + "phi_x", D, D);
        if (c.ablation != Ablation::no_sta) {
          init.linear(p + "phi_w", D, D);
          init.mha(p + "mha", D);
          if (c.residual_norm) init.layer_norm(p + "ln", D);
        }
      }
      break;
    }
    case ModelKind::meanpool:
      init.linear("base.pool_proj", D, D);
      break;
    case ModelKind::trans_frame:
    case ModelKind::trans_patch:
      init.linear(c.kind == ModelKind::trans_frame ? "base.frame_proj" : "base.patch_proj", D, D);
      init.linear("base.word_proj", D, D);
      init.mha("base.mha", D);
      if (c.residual_norm) init.layer_norm("base.ln", D);
      break;
    case ModelKind::divided_sta:
      init.linear("base.patch_proj", D, D);
      init.linear("base.word_proj", D, D);
      init.mha("base.temporal.mha", D);
      init.mha("base.spatial.mha", D);
      if (c.residual_norm) init.layer_norm("base.spatial.ln", D);
      break;
  }
  return store;
}

namespace ad {

Var add_positions(ParamBinder& params, const ModelConfig& c, Var video) {
  std::vector<std::size_t> rows;
  rows.reserve(c.K * c.T * c.N);
  for (std::size_t k = 0; k < c.K; ++k) {
    for (std::size_t t = 0; t < c.T; ++t) {
      for (std::size_t n = 0; n < c.N; ++n) rows.push_back(position_row(k, t, c.T));
    }
  }
  return add(video, gather_rows(params.get("pos.temporal"), std::move(rows)));
}

LayerOutput ista_layer(ParamBinder& params, const ModelConfig& c, std::size_t layer, const LayerState& state,
                       Var video, const ForwardOptions& options) {
  const std::size_t K = c.K, T = c.T, N = c.N, D = c.D, M = c.M;
  if (video.rows() != K * T * N || video.cols() != D) throw std::invalid_argument("ista_layer: video rows mismatch");
  const std::string p = "layer" + std::to_string(layer) + ".";
  const SelectOptions sel_opts{options.training, options.straight_through};
  const SelectorMode seg_mode{c.segment_selector, options.temperature};
  const SelectorMode reg_mode{c.region_selector, options.temperature};

  const Var q = c.question_pool == PoolMode::mean ? mean_rows(state.words) : slice_rows(state.words, 0, 1);

  LayerOutput out;
  Var frame_rows = video;
  std::vector<std::size_t> frame_ids;
  if (c.ablation != Ablation::no_ss) {
    const Var scores = c.segment_selector == SelectorKind::nonparametric
                           ? nonparametric_scores(q, state.segments)
                           : cross_modal_scores(q, state.segments, params.linear(p + "g_q"), params.linear(p + "g_s"));
    Rng rng(derive_seed(options.seed, {layer, 0}));
    TapeSelection sel = gumbel_topk(scores, reshape(video, {K, T * N * D}), c.top_k, seg_mode, rng, sel_opts);
    frame_rows = reshape(sel.selected, {c.top_k * T * N, D});
    for (std::size_t s = 0; s < c.top_k; ++s) {
      for (std::size_t t = 0; t < T; ++t) frame_ids.push_back(sel.indices[s] * T + t);
    }
    out.trace.temporal_weights = std::move(sel.soft_weights);
    out.trace.temporal_selected = std::move(sel.indices);
  } else {
    for (std::size_t f = 0; f < K * T; ++f) frame_ids.push_back(f);
  }

  Var regions = frame_rows;
  if (c.ablation != Ablation::no_rs) {
    std::optional<Var> query;
    std::optional<LinearVars> key_map;
    if (c.region_selector != SelectorKind::nonparametric) {
      query = linear(q, params.linear(p + "h_q"));
      key_map = params.linear(p + "h_x");
    }
    std::vector<Var> parts;
    parts.reserve(frame_ids.size());
    for (std::size_t f = 0; f < frame_ids.size(); ++f) {
      const Var patches = slice_rows(frame_rows, f * N, N);
      const Var scores = query ? projected_scores(*query, patches, *key_map) : nonparametric_scores(q, patches);
      Rng rng(derive_seed(options.seed, {layer, 1, f}));
      TapeSelection sel = gumbel_topk(scores, patches, c.top_j, reg_mode, rng, sel_opts);
      parts.push_back(sel.selected);
      out.trace.spatial.push_back(SpatialTrace{frame_ids[f], std::move(sel.soft_weights), std::move(sel.indices)});
    }
    regions = concat_rows(parts);
  }

  const Var types = params.get("pos.type");
  std::vector<Var> token_parts;
  if (c.ablation != Ablation::no_ss) {
    token_parts.push_back(add_row(linear(state.segments, params.linear(p + "phi_s")), slice_rows(types, 0, 1)));
  }
  token_parts.push_back(add_row(linear(regions, params.linear(p + "phi_x")), slice_rows(types, 1, 1)));

  if (c.ablation == Ablation::no_sta) {
    out.tokens = concat_rows(token_parts);
    out.next = state;
    return out;
  }

  token_parts.push_back(add_row(linear(state.words, params.linear(p + "phi_w")), slice_rows(types, 2, 1)));
  const Var tokens = concat_rows(token_parts);
  if (tokens.rows() != ista_tokens(c)) {
    throw std::logic_error("ISTA token-count law violated: " + std::to_string(tokens.rows()) + " tokens, expected " +
                           std::to_string(ista_tokens(c)));
  }
  std::optional<LayerNormVars> norm;
  if (c.residual_norm) norm = params.layer_norm(p + "ln");
  out.tokens = attention_block(tokens, params.mha(p + "mha"), c.heads, norm);
  out.next.segments = c.ablation == Ablation::no_ss ? state.segments : slice_rows(out.tokens, 0, K);
  out.next.words = slice_rows(out.tokens, out.tokens.rows() - M, M);
  return out;
}

namespace {

void check_sample(const ModelConfig& c, const SampleView& s) {
  if (!s.video || !s.question || !s.answers) throw std::invalid_argument("sample view is incomplete");
  validate(*s.video);
  const auto& x = s.video->x;
  if (x.extent(0) != c.K || x.extent(1) != c.T || x.extent(2) != c.N || x.extent(3) != c.D) {
    throw std::invalid_argument("video shape " + shape_string(x.shape()) + " does not match the model config");
  }
  if (s.video->positions_added) throw std::logic_error("position embeddings already added to these features");
  if (s.question->w.rows() != c.M || s.question->w.cols() != c.D) {
    throw std::invalid_argument("question shape does not match the model config");
  }
  if (s.answers->a.rows() != c.A || s.answers->a.cols() != c.D) {
    throw std::invalid_argument("answer bank shape does not match the model config");
  }
}

}  // namespace

ForwardResult mist_forward(ParamBinder& params, const ModelConfig& c, const SampleView& sample,
                           const ForwardOptions& options) {
  validate(c);
  check_sample(c, sample);
  Tape& tape = params.tape();
  Var video = tape.constant(sample.video->x.reshaped({c.K * c.T * c.N, c.D}));
  video = add_positions(params, c, video);
  Var frames;
  if (c.frame_pool == PoolMode::mean) {
    frames = group_mean_rows(video, c.N);
  } else {
    if (!sample.video->has_cls_patch) throw std::invalid_argument("first_token pooling requires a CLS patch slot");
    std::vector<std::size_t> first;
    for (std::size_t f = 0; f < c.K * c.T; ++f) first.push_back(f * c.N);
    frames = gather_rows(video, std::move(first));
  }
  LayerState state{group_mean_rows(frames, c.T), tape.constant(sample.question->w)};

  ForwardResult result;
  std::vector<Var> pooled;
  for (std::size_t l = 0; l < c.layers; ++l) {
    LayerOutput out = ista_layer(params, c, l, state, video, options);
    pooled.push_back(mean_rows(out.tokens));
    result.trace.push_back(std::move(out.trace));
    state = out.next;
  }
  result.x_o = mean_rows(concat_rows(pooled));
  result.scores = score_answers(result.x_o, tape.constant(sample.answers->a), c.cosine_answer);
  return result;
}

}  // namespace ad

IstaLayerResult ista_layer(const IstaState& state, const VideoFeatures& video, const ModelConfig& cfg,
                           const ParamStore& params, std::size_t layer, const ForwardOptions& options) {
  validate(cfg);
  Tape tape;
  ParamBinder binder(tape, params);
  const ad::LayerState in{tape.constant(state.segments), tape.constant(state.words)};
  const Var v = tape.constant(video.x.reshaped({cfg.K * cfg.T * cfg.N, cfg.D}));
  ad::LayerOutput out = ad::ista_layer(binder, cfg, layer, in, v, options);
  IstaLayerResult r;
  r.tokens = out.tokens.value();
  r.state.segments = out.next.segments.value();
  r.state.words = out.next.words.value();
  r.state.outputs = state.outputs;
  r.state.outputs.push_back(r.tokens);
  r.trace = std::move(out.trace);
  return r;
}

MistOutput mist_forward(const SampleView& sample, const ParamStore& params, const ModelConfig& cfg,
                        const ForwardOptions& options) {
  Tape tape;
  ParamBinder binder(tape, params);
  ForwardResult f = ad::mist_forward(binder, cfg, sample, options);
  return MistOutput{f.x_o.value().reshaped({cfg.D}), f.scores.value().reshaped({cfg.A}), std::move(f.trace)};
}

namespace {

std::vector<double> to_vec(const Tensor& t) { return std::vector<double>(t.values().begin(), t.values().end()); }

}  // namespace

json trace_to_json(const AttentionTrace& trace) {
  json layers = json::array();
  for (const LayerTrace& l : trace) {
    json spatial = json::array();
    for (const SpatialTrace& s : l.spatial) {
      spatial.push_back({{"frame", s.frame}, {"weights", to_vec(s.weights)}, {"selected", s.selected}});
    }
    json temporal = {{"weights", l.temporal_weights.empty() ? std::vector<double>{} : to_vec(l.temporal_weights)},
                     {"selected", l.temporal_selected}};
    layers.push_back({{"temporal", temporal}, {"spatial", spatial}});
  }
  return json{{"layers", layers}};
}

namespace {

std::string check_distribution(const json& w, std::size_t n, const std::string& where) {
  if (!w.is_array() || w.size() != n) return where + ": expected " + std::to_string(n) + " weights";
  double sum = 0.0;
  for (const auto& v : w) {
    if (!v.is_number()) return where + ": weight is not a number";
    const double x = v.get<double>();
    if (!(x >= 0.0)) return where + ": negative or NaN weight";
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) return where + ": weights sum to " + std::to_string(sum);
  return {};
}

std::string check_indices(const json& s, std::size_t count, std::size_t bound, const std::string& where) {
  if (!s.is_array() || s.size() != count) return where + ": expected " + std::to_string(count) + " indices";
  for (const auto& v : s) {
    if (!v.is_number_unsigned() || v.get<std::size_t>() >= bound) return where + ": index out of bounds";
  }
  return {};
}

}  // namespace

std::string validate_trace_json(const json& j, const ModelConfig& c) {
  if (!j.is_object() || !j.contains("layers") || !j["layers"].is_array()) return "trace: missing layers array";
  if (j["layers"].size() != c.layers) return "trace: expected " + std::to_string(c.layers) + " layers";
  const bool has_temporal = c.ablation != Ablation::no_ss;
  const bool has_spatial = c.ablation != Ablation::no_rs;
  const std::size_t frames = has_temporal ? c.top_k * c.T : c.K * c.T;
  for (std::size_t l = 0; l < j["layers"].size(); ++l) {
    const json& layer = j["layers"][l];
    const std::string at = "trace.layers[" + std::to_string(l) + "]";
    if (!layer.is_object() || !layer.contains("temporal") || !layer.contains("spatial")) {
      return at + ": needs temporal and spatial";
    }
    const json& tmp = layer["temporal"];
    if (!tmp.is_object() || !tmp.contains("weights") || !tmp.contains("selected")) {
      return at + ".temporal: needs weights and selected";
    }
    if (has_temporal) {
      if (auto e = check_distribution(tmp["weights"], c.K, at + ".temporal.weights"); !e.empty()) return e;
      if (auto e = check_indices(tmp["selected"], c.top_k, c.K, at + ".temporal.selected"); !e.empty()) return e;
    } else if (!tmp["weights"].empty() || !tmp["selected"].empty()) {
      return at + ".temporal: must be empty without segment selection";
    }
    const json& sp = layer["spatial"];
    if (!sp.is_array()) return at + ".spatial: not an array";
    if (sp.size() != (has_spatial ? frames : 0)) return at + ".spatial: wrong frame count";
    for (std::size_t f = 0; f < sp.size(); ++f) {
      const json& e = sp[f];
      const std::string fat = at + ".spatial[" + std::to_string(f) + "]";
      if (!e.is_object() || !e.contains("frame") || !e["frame"].is_number_unsigned() ||
          e["frame"].get<std::size_t>() >= c.K * c.T) {
        return fat + ".frame: missing or out of bounds";
      }
      if (!e.contains("weights") || !e.contains("selected")) return fat + ": needs weights and selected";
      if (auto err = check_distribution(e["weights"], c.N, fat + ".weights"); !err.empty()) return err;
      if (auto err = check_indices(e["selected"], c.top_j, c.N, fat + ".selected"); !err.empty()) return err;
    }
  }
  return {};
}

}  // namespace mist
