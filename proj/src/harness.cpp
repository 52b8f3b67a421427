#include "mist/harness.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mist/answer.hpp"
#include "mist/rng.hpp"

namespace mist {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config.

ModelConfig model_config(const TrainConfig& tc) {
  ModelConfig c;
  c.kind = tc.kind;
  c.ablation = tc.ablation;
  c.K = tc.K;
  c.T = tc.K == 0 ? 0 : tc.frames / tc.K;
  c.N = tc.N;
  c.D = tc.D;
  c.M = tc.M;
  c.A = tc.A;
  c.top_k = tc.top_k;
  c.top_j = tc.top_j;
  c.layers = tc.layers;
  c.heads = tc.heads;
  c.segment_selector = tc.segment_selector;
  c.region_selector = tc.region_selector;
  c.residual_norm = tc.residual_norm;
  c.straight_through = tc.straight_through;
  c.cosine_answer = tc.cosine_answer;
  c.frame_pool = tc.frame_pool;
  c.question_pool = tc.question_pool;
  c.words_in_attention = tc.words_in_attention;
  // The nonparametric selector runs a single ISTA layer.
  if (c.kind == ModelKind::mist && c.segment_selector == SelectorKind::nonparametric) c.layers = 1;
  return c;
}

SynthConfig synth_config(const TrainConfig& tc) {
  SynthConfig s;
  s.K = tc.K;
  s.T = tc.K == 0 ? 0 : tc.frames / tc.K;
  s.N = tc.N;
  s.D = tc.D;
  s.M = tc.M;
  s.A = tc.A;
  s.task = tc.task;
  s.noise_std = tc.noise_std;
  s.event_patches = tc.event_patches;
  s.clutter_patches = tc.clutter_patches;
  s.clutter_scale = tc.clutter_scale;
  s.task_seed = tc.task_seed;
  return s;
}

void validate(const TrainConfig& tc) {
  auto bad = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("config key '" + key + "': " + why);
  };
  if (tc.K == 0) bad("K", "must be positive");
  if (tc.frames == 0 || tc.frames % tc.K != 0) {
    bad("frames", std::to_string(tc.frames) + " is not a positive multiple of K = " + std::to_string(tc.K));
  }
  if (!(tc.learning_rate > 0.0)) bad("learning_rate", "must be positive");
  if (!(tc.weight_decay >= 0.0)) bad("weight_decay", "must be nonnegative");
  if (!(tc.beta1 >= 0.0 && tc.beta1 < 1.0)) bad("beta1", "must lie in [0, 1)");
  if (!(tc.beta2 >= 0.0 && tc.beta2 < 1.0)) bad("beta2", "must lie in [0, 1)");
  if (!(tc.adam_eps > 0.0)) bad("adam_eps", "must be positive");
  if (tc.batch_size == 0) bad("batch_size", "must be positive");
  if (!(tc.temperature_start > 0.0)) bad("temperature_start", "must be positive");
  if (!(tc.temperature_end > 0.0)) bad("temperature_end", "must be positive");
  if (!(tc.noise_std >= 0.0)) bad("noise_std", "must be nonnegative");
  validate(model_config(tc));
  validate(synth_config(tc));
}

namespace {

std::string to_string(PoolMode m) { return m == PoolMode::mean ? "mean" : "first_token"; }

PoolMode pool_mode_from_string(const std::string& s) {
  if (s == "mean") return PoolMode::mean;
  if (s == "first_token") return PoolMode::first_token;
  throw std::invalid_argument("unknown pool mode '" + s + "'");
}

void decode(const json& j, std::size_t& out) {
  if (j.is_number_unsigned()) {
    out = j.get<std::size_t>();
  } else if (j.is_number_integer() && j.get<long long>() >= 0) {
    out = static_cast<std::size_t>(j.get<long long>());
  } else {
    throw std::invalid_argument("expected a nonnegative integer");
  }
}
void decode(const json& j, double& out) {
  if (!j.is_number()) throw std::invalid_argument("expected a number");
  out = j.get<double>();
}
void decode(const json& j, bool& out) {
  if (!j.is_boolean()) throw std::invalid_argument("expected true or false");
  out = j.get<bool>();
}
std::string decode_string(const json& j) {
  if (!j.is_string()) throw std::invalid_argument("expected a string");
  return j.get<std::string>();
}
void decode(const json& j, ModelKind& out) { out = model_kind_from_string(decode_string(j)); }
void decode(const json& j, Ablation& out) { out = ablation_from_string(decode_string(j)); }
void decode(const json& j, SelectorKind& out) { out = selector_kind_from_string(decode_string(j)); }
void decode(const json& j, PoolMode& out) { out = pool_mode_from_string(decode_string(j)); }
void decode(const json& j, TaskKind& out) { out = task_kind_from_string(decode_string(j)); }

json encode(std::size_t v) { return v; }
json encode(double v) { return v; }
json encode(bool v) { return v; }
json encode(ModelKind v) { return mist::to_string(v); }
json encode(Ablation v) { return mist::to_string(v); }
json encode(SelectorKind v) { return mist::to_string(v); }
json encode(PoolMode v) { return to_string(v); }
json encode(TaskKind v) { return mist::to_string(v); }

struct Field {
  std::function<json(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const json&)> set;
};

template <class T>
Field field(T TrainConfig::*member) {
  return Field{[member](const TrainConfig& c) { return encode(c.*member); },
               [member](TrainConfig& c, const json& j) { decode(j, c.*member); }};
}

// std::uint64_t and std::size_t are the same type on the supported targets.
static_assert(std::is_same_v<std::uint64_t, std::size_t>);

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"kind", field(&TrainConfig::kind)},
      {"ablation", field(&TrainConfig::ablation)},
      {"K", field(&TrainConfig::K)},
      {"frames", field(&TrainConfig::frames)},
      {"N", field(&TrainConfig::N)},
      {"D", field(&TrainConfig::D)},
      {"M", field(&TrainConfig::M)},
      {"A", field(&TrainConfig::A)},
      {"top_k", field(&TrainConfig::top_k)},
      {"top_j", field(&TrainConfig::top_j)},
      {"layers", field(&TrainConfig::layers)},
      {"heads", field(&TrainConfig::heads)},
      {"segment_selector", field(&TrainConfig::segment_selector)},
      {"region_selector", field(&TrainConfig::region_selector)},
      {"residual_norm", field(&TrainConfig::residual_norm)},
      {"straight_through", field(&TrainConfig::straight_through)},
      {"cosine_answer", field(&TrainConfig::cosine_answer)},
      {"frame_pool", field(&TrainConfig::frame_pool)},
      {"question_pool", field(&TrainConfig::question_pool)},
      {"words_in_attention", field(&TrainConfig::words_in_attention)},
      {"task", field(&TrainConfig::task)},
      {"noise_std", field(&TrainConfig::noise_std)},
      {"event_patches", field(&TrainConfig::event_patches)},
      {"clutter_patches", field(&TrainConfig::clutter_patches)},
      {"clutter_scale", field(&TrainConfig::clutter_scale)},
      {"task_seed", field(&TrainConfig::task_seed)},
      {"learning_rate", field(&TrainConfig::learning_rate)},
      {"weight_decay", field(&TrainConfig::weight_decay)},
      {"beta1", field(&TrainConfig::beta1)},
      {"beta2", field(&TrainConfig::beta2)},
      {"adam_eps", field(&TrainConfig::adam_eps)},
      {"steps", field(&TrainConfig::steps)},
      {"batch_size", field(&TrainConfig::batch_size)},
      {"temperature_start", field(&TrainConfig::temperature_start)},
      {"temperature_end", field(&TrainConfig::temperature_end)},
      {"seed", field(&TrainConfig::seed)},
      {"eval_samples", field(&TrainConfig::eval_samples)},
      {"eval_seed", field(&TrainConfig::eval_seed)},
      {"eval_every", field(&TrainConfig::eval_every)},
  };
  return table;
}

}  // namespace

json to_json(const TrainConfig& tc) {
  json j = json::object();
  for (const auto& [name, f] : fields()) j[name] = f.get(tc);
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  TrainConfig tc;
  std::vector<std::string> unknown, invalid;
  for (const auto& [key, value] : j.items()) {
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& e) { return e.first == key; });
    if (it == table.end()) {
      unknown.push_back(key);
      continue;
    }
    try {
      it->second.set(tc, value);
    } catch (const std::exception& e) {
      invalid.push_back(key + " (" + e.what() + ")");
    }
  }
  if (!unknown.empty() || !invalid.empty()) {
    std::string msg = "invalid config:";
    auto list = [](const std::vector<std::string>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
      return s;
    };
    if (!unknown.empty()) msg += " unknown keys [" + list(unknown) + "]";
    if (!invalid.empty()) msg += " invalid keys [" + list(invalid) + "]";
    throw std::invalid_argument(msg);
  }
  validate(tc);
  return tc;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

double temperature_at(const TrainConfig& tc, std::size_t step) {
  if (tc.steps <= 1) return tc.temperature_start;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(tc.steps - 1));
  return tc.temperature_start + (tc.temperature_end - tc.temperature_start) * frac;
}

// ---------------------------------------------------------------------------
// Baselines.

namespace ad {

namespace {

Var pool_frames(const ModelConfig& c, const VideoFeatures& v, Var video) {
  if (c.frame_pool == PoolMode::mean) return group_mean_rows(video, c.N);
  if (!v.has_cls_patch) throw std::invalid_argument("first_token pooling requires a CLS patch slot");
  std::vector<std::size_t> first;
  for (std::size_t f = 0; f < c.K * c.T; ++f) first.push_back(f * c.N);
  return gather_rows(video, std::move(first));
}

void expect_tokens(Var tokens, std::size_t expected, const char* site) {
  if (tokens.rows() != expected) {
    throw std::logic_error(std::string("token-count law violated at ") + site + ": " + std::to_string(tokens.rows()) +
                           " tokens, expected " + std::to_string(expected));
  }
}

std::optional<LayerNormVars> maybe_norm(ParamBinder& p, const ModelConfig& c, const std::string& prefix) {
  if (!c.residual_norm) return std::nullopt;
  return p.layer_norm(prefix);
}

// Joint attention over visual tokens and projected words, or attention over
// the visual tokens with the words joining only the final mean.
Var dense_fusion(ParamBinder& p, const ModelConfig& c, Var visual, Var words) {
  const Var w = linear(words, p.linear("base.word_proj"));
  const auto norm = maybe_norm(p, c, "base.ln");
  if (c.words_in_attention) {
    const Var tokens = concat_rows(std::vector<Var>{visual, w});
    expect_tokens(tokens, visual.rows() + c.M, "base.mha");
    return mean_rows(attention_block(tokens, p.mha("base.mha"), c.heads, norm));
  }
  const Var out = attention_block(visual, p.mha("base.mha"), c.heads, norm);
  return mean_rows(concat_rows(std::vector<Var>{out, w}));
}

Var divided_sta(ParamBinder& p, const ModelConfig& c, Var video, Var words) {
  const std::size_t F = c.K * c.T, N = c.N;
  const Var x = linear(video, p.linear("base.patch_proj"));
  const MhaVars temporal = p.mha("base.temporal.mha");
  std::vector<Var> tracks;
  tracks.reserve(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<std::size_t> rows(F);
    for (std::size_t f = 0; f < F; ++f) rows[f] = f * N + n;
    const Var track = gather_rows(x, std::move(rows));
    expect_tokens(track, F, "base.temporal.mha");
    tracks.push_back(add(track, multi_head_attention(track, temporal, c.heads)));
  }
  // Back from patch-major to frame-major row order.
  std::vector<std::size_t> order(F * N);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t n = 0; n < N; ++n) order[f * N + n] = n * F + f;
  }
  const Var y = gather_rows(concat_rows(tracks), std::move(order));
  const MhaVars spatial = p.mha("base.spatial.mha");
  const auto norm = maybe_norm(p, c, "base.spatial.ln");
  std::vector<Var> frames;
  frames.reserve(F + 1);
  for (std::size_t f = 0; f < F; ++f) {
    const Var patches = slice_rows(y, f * N, N);
    frames.push_back(attention_block(patches, spatial, c.heads, norm));
  }
  frames.push_back(linear(words, p.linear("base.word_proj")));
  return mean_rows(concat_rows(frames));
}

}  // namespace

ForwardResult baseline_forward(ParamBinder& p, const ModelConfig& c, const SampleView& s) {
  validate(c);
  if (c.kind == ModelKind::mist) throw std::invalid_argument("baseline_forward: mist is not a baseline");
  if (!s.video || !s.question || !s.answers) throw std::invalid_argument("sample view is incomplete");
  const auto& x = s.video->x;
  if (x.rank() != 4 || x.extent(0) != c.K || x.extent(1) != c.T || x.extent(2) != c.N || x.extent(3) != c.D) {
    throw std::invalid_argument("video shape " + shape_string(x.shape()) + " does not match the model config");
  }
  if (s.video->positions_added) throw std::logic_error("position embeddings already added to these features");
  Tape& tape = p.tape();
  Var video = add_positions(p, c, tape.constant(x.reshaped({c.K * c.T * c.N, c.D})));
  const Var words = tape.constant(s.question->w);
  ForwardResult r;
  switch (c.kind) {
    case ModelKind::meanpool:
      r.x_o = linear(mean_rows(pool_frames(c, *s.video, video)), p.linear("base.pool_proj"));
      break;
    case ModelKind::trans_frame:
      r.x_o = dense_fusion(p, c, linear(pool_frames(c, *s.video, video), p.linear("base.frame_proj")), words);
      break;
    case ModelKind::trans_patch:
      r.x_o = dense_fusion(p, c, linear(video, p.linear("base.patch_proj")), words);
      break;
    case ModelKind::divided_sta:
      r.x_o = divided_sta(p, c, video, words);
      break;
    case ModelKind::mist:
      break;
  }
  r.scores = score_answers(r.x_o, tape.constant(s.answers->a), c.cosine_answer);
  return r;
}

ForwardResult model_forward(ParamBinder& p, const ModelConfig& c, const SampleView& s, const ForwardOptions& o) {
  if (c.kind == ModelKind::mist) return mist_forward(p, c, s, o);
  return baseline_forward(p, c, s);
}

}  // namespace ad

Tensor baseline_forward(ModelKind kind, const SampleView& sample, const ParamStore& params, const ModelConfig& cfg) {
  ModelConfig c = cfg;
  c.kind = kind;
  c.ablation = Ablation::none;
  Tape tape;
  ParamBinder binder(tape, params);
  return ad::baseline_forward(binder, c, sample).x_o.value().reshaped({c.D});
}

Tensor ablation_forward(Ablation variant, const SampleView& sample, const ParamStore& params, const ModelConfig& cfg,
                        const ForwardOptions& options) {
  ModelConfig c = cfg;
  c.kind = ModelKind::mist;
  c.ablation = variant;
  Tape tape;
  ParamBinder binder(tape, params);
  return ad::mist_forward(binder, c, sample, options).x_o.value().reshaped({c.D});
}

LossFn sample_loss(const ModelConfig& cfg, const SampleView& sample, std::size_t label, const ForwardOptions& options) {
  return [cfg, sample, label, options](Tape&, ParamBinder& binder) {
    return ad::qa_loss(ad::model_forward(binder, cfg, sample, options).scores, label);
  };
}

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kTrainSampleStream = 2;
constexpr std::uint64_t kTrainNoiseStream = 3;
constexpr std::uint64_t kEvalSampleStream = 4;
constexpr std::uint64_t kGradCheckStream = 5;

}  // namespace

GradCheckReport model_grad_check(const TrainConfig& tc, const GradCheckOptions& options) {
  validate(tc);
  const ModelConfig mc = model_config(tc);
  const SynthSample s = generate_synthetic(synth_config(tc), derive_seed(tc.seed, {kGradCheckStream, 0}));
  const ParamStore params = init_params(mc, derive_seed(tc.seed, {kInitStream}));
  ForwardOptions opts;
  opts.training = true;
  opts.straight_through = false;
  opts.temperature = tc.temperature_start;
  opts.seed = derive_seed(tc.seed, {kGradCheckStream, 1});
  return grad_check(sample_loss(mc, view_of(s), s.label, opts), params, options);
}

TrainConfig tiny_gradcheck_config() {
  TrainConfig tc;
  tc.K = 2;
  tc.frames = 4;
  tc.N = 4;
  tc.D = 8;
  tc.M = 3;
  tc.A = 3;
  tc.top_k = 2;
  tc.top_j = 2;
  tc.heads = 2;
  tc.event_patches = 1;
  tc.clutter_patches = 2;
  // Unit-variance features keep every partial well away from zero.
  tc.noise_std = 1.0;
  return tc;
}

// ---------------------------------------------------------------------------
// Training.

namespace {

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

struct AdamW {
  ParamStore m, v;
  std::size_t t = 0;

  void step(ParamStore& params, const ParamStore& grads, const TrainConfig& tc) {
    ++t;
    const double c1 = 1.0 - std::pow(tc.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(tc.beta2, static_cast<double>(t));
    for (auto& [name, p] : params) {
      const Tensor& g = grads.at(name);
      Tensor& mm = m.try_emplace(name, p.shape(), 0.0).first->second;
      Tensor& vv = v.try_emplace(name, p.shape(), 0.0).first->second;
      const bool decay = name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        mm[i] = tc.beta1 * mm[i] + (1.0 - tc.beta1) * g[i];
        vv[i] = tc.beta2 * vv[i] + (1.0 - tc.beta2) * g[i] * g[i];
        const double update = (mm[i] / c1) / (std::sqrt(vv[i] / c2) + tc.adam_eps);
        if (decay) p[i] -= tc.learning_rate * tc.weight_decay * p[i];
        p[i] -= tc.learning_rate * update;
      }
    }
  }
};

bool has_segment_selection(const ModelConfig& c) {
  return c.kind == ModelKind::mist && c.ablation != Ablation::no_ss;
}

}  // namespace

std::size_t worker_threads() {
  if (const char* env = std::getenv("MIST_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
    throw std::invalid_argument(std::string("MIST_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

bool planted_hit(const AttentionTrace& trace, const PlantedInfo& planted) {
  for (const LayerTrace& l : trace) {
    for (std::size_t s : l.temporal_selected) {
      if (s == planted.answer_segment) return true;
    }
  }
  return false;
}

MetricsLog evaluate(const ParamStore& params, const TrainConfig& tc, std::size_t n_samples, std::uint64_t seed) {
  validate(tc);
  const ModelConfig mc = model_config(tc);
  const SynthConfig sc = synth_config(tc);
  MetricsLog log;
  log.eval_samples = n_samples;
  if (n_samples == 0) return log;
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> loss(n_samples);
  std::vector<char> correct(n_samples), hit(n_samples);
  std::vector<std::uint64_t> macs(n_samples);
  parallel_for(n_samples, [&](std::size_t i) {
    const SynthSample s = generate_synthetic(sc, derive_seed(seed, {kEvalSampleStream, i}));
    Tape tape;
    ParamBinder binder(tape, params);
    ForwardOptions opts;
    opts.training = false;
    opts.straight_through = mc.straight_through;
    const ForwardResult r = ad::model_forward(binder, mc, view_of(s), opts);
    loss[i] = ad::qa_loss(r.scores, s.label).value()[0];
    correct[i] = predict(r.scores.value(), s.label).correct.value_or(false);
    hit[i] = planted_hit(r.trace, s.planted);
    macs[i] = tape.macs();
  });
  double loss_sum = 0.0, correct_sum = 0.0, hit_sum = 0.0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    loss_sum += loss[i];
    correct_sum += correct[i];
    hit_sum += hit[i];
    log.macs += macs[i];
  }
  const double n = static_cast<double>(n_samples);
  log.eval_loss = loss_sum / n;
  log.accuracy = correct_sum / n;
  if (has_segment_selection(mc)) log.hit_rate = hit_sum / n;
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

TrainResult train(const TrainConfig& tc, const std::function<void(const MetricsRow&)>& on_row) {
  validate(tc);
  const auto start = std::chrono::steady_clock::now();
  const ModelConfig mc = model_config(tc);
  const SynthConfig sc = synth_config(tc);
  TrainResult result;
  result.params = init_params(mc, derive_seed(tc.seed, {kInitStream}));
  AdamW adam;
  const std::size_t B = tc.batch_size;
  std::uint64_t total_macs = 0;

  auto emit = [&](MetricsRow row) {
    if (on_row) on_row(row);
    result.log.rows.push_back(std::move(row));
  };

  for (std::size_t step = 0; step < tc.steps; ++step) {
    const double tau = temperature_at(tc, step);
    std::vector<ParamStore> grads(B);
    std::vector<double> losses(B);
    std::vector<std::uint64_t> macs(B);
    parallel_for(B, [&](std::size_t b) {
      const SynthSample s = generate_synthetic(sc, derive_seed(tc.seed, {kTrainSampleStream, step, b}));
      Tape tape;
      ParamBinder binder(tape, result.params);
      ForwardOptions opts;
      opts.training = true;
      opts.temperature = tau;
      opts.seed = derive_seed(tc.seed, {kTrainNoiseStream, step, b});
      opts.straight_through = mc.straight_through;
      const Var loss = ad::qa_loss(ad::model_forward(binder, mc, view_of(s), opts).scores, s.label);
      macs[b] = tape.macs();
      tape.backward(loss);
      losses[b] = loss.value()[0];
      grads[b] = binder.gradients();
    });
    double loss = 0.0;
    ParamStore& total = grads[0];
    for (std::size_t b = 0; b < B; ++b) {
      loss += losses[b];
      total_macs += macs[b];
      if (b == 0) continue;
      for (auto& [name, g] : total) {
        const Tensor& gb = grads[b].at(name);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gb[i];
      }
    }
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss)) {
      throw std::runtime_error("training diverged at step " + std::to_string(step) + ": loss is not finite");
    }
    for (auto& [name, g] : total) {
      for (double& x : g.values()) x /= static_cast<double>(B);
    }
    adam.step(result.params, total, tc);

    MetricsRow row{step + 1, loss, std::nullopt, std::nullopt, static_cast<double>(total_macs) / 1e6};
    if (tc.eval_every != 0 && (step + 1) % tc.eval_every == 0 && step + 1 < tc.steps) {
      const MetricsLog e = evaluate(result.params, tc, tc.eval_samples, tc.eval_seed);
      row.acc = e.accuracy;
      row.hit_rate = e.hit_rate;
    }
    emit(row);
  }

  const MetricsLog final_eval = evaluate(result.params, tc, tc.eval_samples, tc.eval_seed);
  if (result.log.rows.empty()) emit(MetricsRow{0, final_eval.eval_loss, std::nullopt, std::nullopt, 0.0});
  MetricsRow& last = result.log.rows.back();
  last.acc = final_eval.accuracy;
  last.hit_rate = final_eval.hit_rate;
  result.log.eval_samples = final_eval.eval_samples;
  result.log.accuracy = final_eval.accuracy;
  result.log.hit_rate = final_eval.hit_rate;
  result.log.eval_loss = final_eval.eval_loss;
  result.log.macs = total_macs;
  result.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

namespace {

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

}  // namespace

void write_metrics_csv(const MetricsLog& log, std::ostream& out) {
  out << "step,loss,acc,hit_rate,mmacs\n";
  for (const MetricsRow& r : log.rows) {
    out << r.step << ',' << format_number(r.loss) << ',' << format_optional(r.acc) << ','
        << format_optional(r.hit_rate) << ',' << format_number(r.mmacs) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Cost accounting. Every term mirrors a counted product of the forward pass.

namespace {

std::uint64_t attention_cost(std::uint64_t n, std::uint64_t d) { return 4 * n * d * d + 2 * n * n * d; }
std::uint64_t quadratic_cost(std::uint64_t n, std::uint64_t d) { return 2 * n * n * d; }

}  // namespace

CostReport cost_estimate(const ModelConfig& cfg) {
  validate(cfg);
  CostReport r;
  r.kind = cfg.kind;
  r.ablation = cfg.ablation;
  const std::uint64_t K = cfg.K, T = cfg.T, N = cfg.N, D = cfg.D, M = cfg.M, A = cfg.A;
  const std::uint64_t F = K * T, D2 = D * D;
  auto site = [&](std::string name, std::uint64_t n, std::uint64_t count) {
    r.sites.push_back(AttentionSite{std::move(name), n, count});
    r.attention_macs += count * attention_cost(n, D);
    r.quadratic_macs += count * quadratic_cost(n, D);
  };
  std::uint64_t& proj = r.projection_macs;
  switch (cfg.kind) {
    case ModelKind::mist: {
      const bool seg = cfg.ablation != Ablation::no_ss;
      const bool reg = cfg.ablation != Ablation::no_rs;
      const bool seg_param = cfg.segment_selector != SelectorKind::nonparametric;
      const bool reg_param = cfg.region_selector != SelectorKind::nonparametric;
      const std::uint64_t frames = seg ? cfg.top_k * T : F;
      const std::uint64_t regions = frames * (reg ? cfg.top_j : N);
      for (std::size_t l = 0; l < cfg.layers; ++l) {
        if (seg) proj += (seg_param ? D2 + K * D2 : 0) + K * D;
        if (reg) proj += (reg_param ? D2 + frames * N * D2 : 0) + frames * N * D;
        if (seg) proj += K * D2;
        proj += regions * D2;
        if (cfg.ablation != Ablation::no_sta) {
          proj += M * D2;
          site("layer" + std::to_string(l) + ".mha", ista_tokens(cfg), 1);
        }
      }
      break;
    }
    case ModelKind::meanpool:
      proj += D2;
      break;
    case ModelKind::trans_frame:
      proj += F * D2 + M * D2;
      site("base.mha", F + (cfg.words_in_attention ? M : 0), 1);
      break;
    case ModelKind::trans_patch:
      proj += F * N * D2 + M * D2;
      site("base.mha", F * N + (cfg.words_in_attention ? M : 0), 1);
      break;
    case ModelKind::divided_sta:
      proj += F * N * D2 + M * D2;
      site("base.temporal.mha", F, N);
      site("base.spatial.mha", N, F);
      break;
  }
  proj += A * D;
  r.total_macs = r.projection_macs + r.attention_macs;
  if (cfg.kind == ModelKind::trans_patch && cfg.words_in_attention) {
    r.ratio_vs_dense = 1.0;
    r.quadratic_ratio_vs_dense = 1.0;
  } else {
    ModelConfig dense = cfg;
    dense.kind = ModelKind::trans_patch;
    dense.ablation = Ablation::none;
    dense.words_in_attention = true;
    const CostReport d = cost_estimate(dense);
    r.ratio_vs_dense = static_cast<double>(r.total_macs) / static_cast<double>(d.total_macs);
    r.quadratic_ratio_vs_dense = static_cast<double>(r.quadratic_macs) / static_cast<double>(d.quadratic_macs);
  }
  return r;
}

json to_json(const CostReport& r) {
  json sites = json::array();
  for (const AttentionSite& s : r.sites) sites.push_back({{"name", s.name}, {"tokens", s.tokens}, {"count", s.count}});
  return json{{"kind", to_string(r.kind)},
              {"ablation", to_string(r.ablation)},
              {"attention_sites", sites},
              {"projection_macs", r.projection_macs},
              {"attention_macs", r.attention_macs},
              {"quadratic_macs", r.quadratic_macs},
              {"total_macs", r.total_macs},
              {"ratio_vs_dense", r.ratio_vs_dense},
              {"quadratic_ratio_vs_dense", r.quadratic_ratio_vs_dense}};
}

MeasuredCost measure_cost(const ModelConfig& cfg) {
  validate(cfg);
  Rng rng(derive_seed(0, {kEvalSampleStream, 0}));
  auto gaussian = [&](std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.normal();
    return t;
  };
  VideoFeatures video{gaussian({cfg.K, cfg.T, cfg.N, cfg.D})};
  video.has_cls_patch = cfg.frame_pool == PoolMode::first_token;
  QuestionFeatures question{gaussian({cfg.M, cfg.D})};
  AnswerBank answers{gaussian({cfg.A, cfg.D}), {}};
  const ParamStore params = init_params(cfg, 0);
  Tape tape;
  ParamBinder binder(tape, params);
  ad::model_forward(binder, cfg, SampleView{&video, &question, &answers}, ForwardOptions{});
  return MeasuredCost{tape.macs(), tape.attention_sites()};
}

// ---------------------------------------------------------------------------
// Sweeps.

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::top_k: return "top_k";
    case SweepAxis::top_j: return "top_j";
    case SweepAxis::layers: return "layers";
    case SweepAxis::K: return "K";
    case SweepAxis::frames: return "frames";
  }
  return "?";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  for (SweepAxis a : {SweepAxis::top_k, SweepAxis::top_j, SweepAxis::layers, SweepAxis::K, SweepAxis::frames}) {
    if (to_string(a) == s) return a;
  }
  if (s == "L") return SweepAxis::layers;
  throw std::invalid_argument("unknown sweep axis '" + s + "' (top_k, top_j, layers, K, frames)");
}

TrainConfig with_axis(TrainConfig tc, SweepAxis axis, std::size_t value) {
  switch (axis) {
    case SweepAxis::top_k: tc.top_k = value; break;
    case SweepAxis::top_j: tc.top_j = value; break;
    case SweepAxis::layers: tc.layers = value; break;
    case SweepAxis::K: tc.K = value; break;
    case SweepAxis::frames: tc.frames = value; break;
  }
  validate(tc);
  return tc;
}

std::vector<SweepRow> sweep(const TrainConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                            const std::vector<std::uint64_t>& seeds, const std::function<void(const SweepRow&)>& on_row) {
  std::vector<TrainConfig> configs;
  for (std::size_t v : values) {
    try {
      configs.push_back(with_axis(base, axis, v));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("sweep value " + to_string(axis) + "=" + std::to_string(v) + " rejected: " +
                                  e.what());
    }
  }
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::uint64_t seed : seeds) {
      TrainConfig tc = configs[i];
      tc.seed = seed;
      const TrainResult r = train(tc);
      SweepRow row{axis, values[i], seed, r.log.rows.back().loss, r.log.accuracy.value_or(0.0), r.log.hit_rate,
                   r.log.rows.back().mmacs};
      if (on_row) on_row(row);
      rows.push_back(row);
    }
  }
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "axis,value,seed,loss,acc,hit_rate,mmacs\n";
  for (const SweepRow& r : rows) {
    out << to_string(r.axis) << ',' << r.value << ',' << r.seed << ',' << format_number(r.final_loss) << ','
        << format_number(r.acc) << ',' << format_optional(r.hit_rate) << ',' << format_number(r.mmacs) << '\n';
  }
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

// ---------------------------------------------------------------------------
// Parameter files.

namespace {

constexpr char kParamMagic[8] = {'M', 'I', 'S', 'T', 'P', 'A', 'R', 'M'};

static_assert(std::endian::native == std::endian::little, "parameter files assume a little-endian host");

}  // namespace

void save_params(const ParamStore& params, const TrainConfig& tc, const std::filesystem::path& path) {
  json tensors = json::array();
  for (const auto& [name, t] : params) tensors.push_back({{"name", name}, {"shape", t.shape()}});
  const std::string header = json{{"version", 1}, {"config", to_json(tc)}, {"tensors", tensors}}.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write parameter file " + path.string());
  out.write(kParamMagic, sizeof kParamMagic);
  const auto len = static_cast<std::uint32_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, t] : params) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing parameter file " + path.string());
}

ParamFile load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open parameter file " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "parameter file " + path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kParamMagic, 8) != 0) throw std::runtime_error(where + ": bad magic");
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  if (12 + static_cast<std::size_t>(len) > bytes.size()) throw std::runtime_error(where + ": header length exceeds file");
  json header;
  try {
    header = json::parse(bytes.substr(12, len));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(where + ": malformed header: " + e.what());
  }
  if (header.value("version", 0) != 1) throw std::runtime_error(where + ": unsupported version");
  ParamFile file;
  file.config = train_config_from_json(header.at("config"));
  std::size_t offset = 12 + len;
  for (const json& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    Tensor t(shape);
    const std::size_t n = t.size() * sizeof(double);
    if (offset + n > bytes.size()) throw std::runtime_error(where + ": payload shorter than the header declares");
    std::memcpy(t.data(), bytes.data() + offset, n);
    offset += n;
    if (!t.all_finite()) throw std::runtime_error(where + ": non-finite parameter values");
    file.params[entry.at("name").get<std::string>()] = std::move(t);
  }
  if (offset != bytes.size()) throw std::runtime_error(where + ": payload longer than the header declares");
  return file;
}

}  // namespace mist
