#include "mist/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <numeric>
#include <stdexcept>

#include "mist/rng.hpp"

namespace mist {

using nlohmann::json;

namespace {

constexpr char kFeatureMagic[8] = {'M', 'I', 'S', 'T', 'F', 'E', 'A', 'T'};

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

void validate(const VideoFeatures& v) {
  require(v.x.rank() == 4, "video features must be K×T×N×D, got " + shape_string(v.x.shape()));
  require(v.x.all_finite(), "video features contain non-finite values");
}

void validate(const QuestionFeatures& q, std::size_t dim) {
  require(q.w.rank() == 2 && q.w.cols() == dim, "question features must be M×" + std::to_string(dim));
  require(q.w.all_finite(), "question features contain non-finite values");
}

void validate(const AnswerBank& a, std::size_t dim) {
  require(a.a.rank() == 2 && a.a.cols() == dim, "answer bank must be A×" + std::to_string(dim));
  require(a.a.rows() >= 2, "answer bank needs at least two candidates");
  require(a.labels.empty() || a.labels.size() == a.a.rows(), "answer label count mismatch");
  require(a.a.all_finite(), "answer features contain non-finite values");
}

PooledVideo pool_hierarchy(const VideoFeatures& v, PoolMode mode) {
  validate(v);
  if (mode == PoolMode::first_token && !v.has_cls_patch) {
    throw std::invalid_argument("first_token pooling requires a CLS patch slot");
  }
  const std::size_t K = v.segments(), T = v.frames_per_segment(), N = v.patches(), D = v.dim();
  PooledVideo out{Tensor({K, T, D}, 0.0), Tensor({K, D}, 0.0)};
  for (std::size_t f = 0; f < K * T; ++f) {
    double* dst = out.frames.data() + f * D;
    if (mode == PoolMode::first_token) {
      std::copy_n(v.x.data() + f * N * D, D, dst);
      continue;
    }
    for (std::size_t n = 0; n < N; ++n) {
      const double* src = v.x.data() + (f * N + n) * D;
      for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
    }
    for (std::size_t d = 0; d < D; ++d) dst[d] /= static_cast<double>(N);
  }
  for (std::size_t k = 0; k < K; ++k) {
    double* dst = out.segments.data() + k * D;
    for (std::size_t t = 0; t < T; ++t) {
      const double* src = out.frames.data() + (k * T + t) * D;
      for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
    }
    for (std::size_t d = 0; d < D; ++d) dst[d] /= static_cast<double>(T);
  }
  return out;
}

Tensor pool_question(const QuestionFeatures& q, PoolMode mode) {
  require(q.w.rank() == 2 && q.w.rows() >= 1, "question needs at least one word");
  const std::size_t M = q.w.rows(), D = q.w.cols();
  Tensor out({D}, 0.0);
  if (mode == PoolMode::first_token) {
    std::copy_n(q.w.data(), D, out.data());
    return out;
  }
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t d = 0; d < D; ++d) out[d] += q.w[m * D + d];
  }
  for (std::size_t d = 0; d < D; ++d) out[d] /= static_cast<double>(M);
  return out;
}

VideoFeatures add_positions(const VideoFeatures& v, const PositionTable& table) {
  validate(v);
  if (v.positions_added) throw std::logic_error("position embeddings already added to these features");
  const std::size_t K = v.segments(), T = v.frames_per_segment(), N = v.patches(), D = v.dim();
  require(table.temporal.rank() == 2 && table.temporal.rows() == K * T + 1 && table.temporal.cols() == D,
          "temporal table must have K·T+1 = " + std::to_string(K * T + 1) + " rows of width " +
              std::to_string(D));
  VideoFeatures out = v;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t t = 0; t < T; ++t) {
      const double* pos = table.temporal.data() + position_row(k, t, T) * D;
      for (std::size_t n = 0; n < N; ++n) {
        double* dst = out.x.data() + (((k * T + t) * N) + n) * D;
        for (std::size_t d = 0; d < D; ++d) dst[d] += pos[d];
      }
    }
  }
  out.positions_added = true;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::vector<unsigned char>& out, const Tensor& t) {
  for (double v : t.values()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int s = 0; s < 32; s += 8) out.push_back(static_cast<unsigned char>(bits >> s));
  }
}

Tensor get_f32(const unsigned char*& p, std::vector<std::size_t> shape, const std::string& what) {
  Tensor t(std::move(shape), 0.0);
  for (std::size_t i = 0; i < t.size(); ++i, p += 4) {
    const float f = std::bit_cast<float>(get_u32(p));
    if (!std::isfinite(f)) throw std::runtime_error("feature file: non-finite value in " + what + " payload");
    t[i] = static_cast<double>(f);
  }
  return t;
}

std::size_t header_dim(const json& h, const char* key) {
  if (!h.contains(key) || !h[key].is_number_unsigned() || h[key].get<std::size_t>() == 0) {
    throw std::runtime_error(std::string("feature file: header field '") + key + "' missing or not positive");
  }
  return h[key].get<std::size_t>();
}

}  // namespace

void save_features(const VideoFeatures& v, const QuestionFeatures& q, const AnswerBank& a,
                   const std::filesystem::path& path) {
  validate(v);
  validate(q, v.dim());
  validate(a, v.dim());
  json header = {{"version", 1},
                 {"K", v.segments()},
                 {"T", v.frames_per_segment()},
                 {"N", v.patches()},
                 {"D", v.dim()},
                 {"M", q.w.rows()},
                 {"A", a.a.rows()},
                 {"dtype", "f32"},
                 {"cls_patch", v.has_cls_patch},
                 {"cls_frame", v.has_cls_frame}};
  if (!a.labels.empty()) header["labels"] = a.labels;
  const std::string text = header.dump();
  std::vector<unsigned char> payload;
  payload.reserve(4 * (v.x.size() + q.w.size() + a.a.size()));
  put_f32(payload, v.x);
  put_f32(payload, q.w);
  put_f32(payload, a.a);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kFeatureMagic, sizeof(kFeatureMagic));
  put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

FeatureBundle load_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kFeatureMagic, 8) != 0) {
    throw std::runtime_error("feature file: bad magic");
  }
  const std::uint32_t hlen = get_u32(bytes.data() + 8);
  if (12ull + hlen > bytes.size()) throw std::runtime_error("feature file: header length exceeds file size");
  json h;
  try {
    h = json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("feature file: malformed header: ") + e.what());
  }
  if (h.value("dtype", std::string{}) != "f32") throw std::runtime_error("feature file: dtype must be f32");
  if (h.value("version", 0) != 1) throw std::runtime_error("feature file: unsupported version");
  const std::size_t K = header_dim(h, "K"), T = header_dim(h, "T"), N = header_dim(h, "N"),
                    D = header_dim(h, "D"), M = header_dim(h, "M"), A = header_dim(h, "A");
  const std::size_t floats = K * T * N * D + M * D + A * D;
  const std::size_t have = bytes.size() - 12 - hlen;
  if (have != 4 * floats) {
    throw std::runtime_error("feature file: payload length mismatch (header declares " + std::to_string(4 * floats) +
                             " bytes, file holds " + std::to_string(have) + ")");
  }
  const unsigned char* p = bytes.data() + 12 + hlen;
  FeatureBundle out;
  out.video.x = get_f32(p, {K, T, N, D}, "video");
  out.video.has_cls_patch = h.value("cls_patch", false);
  out.video.has_cls_frame = h.value("cls_frame", false);
  out.question.w = get_f32(p, {M, D}, "question");
  out.answers.a = get_f32(p, {A, D}, "answers");
  if (h.contains("labels")) {
    out.answers.labels = h["labels"].get<std::vector<std::string>>();
    if (out.answers.labels.size() != A) throw std::runtime_error("feature file: label count mismatch");
  }
  validate(out.answers, D);
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(TaskKind kind) {
  return kind == TaskKind::single_event ? "single_event" : "multi_event_order";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "single_event") return TaskKind::single_event;
  if (s == "multi_event_order") return TaskKind::multi_event_order;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

void validate(const SynthConfig& c) {
  require(c.K > 0 && c.T > 0 && c.N > 0 && c.D > 0 && c.M > 0, "synthetic dims must be positive");
  require(c.A >= 2, "synthetic task needs A >= 2 answers");
  require(c.A <= c.D, "A = " + std::to_string(c.A) + " orthogonal prototypes need A <= D = " + std::to_string(c.D));
  require(c.noise_std >= 0.0 && std::isfinite(c.noise_std), "noise_std must be finite and >= 0");
  require(c.event_patches >= 1, "event_patches must be >= 1");
  require(c.event_patches + c.clutter_patches <= c.N, "event_patches + clutter_patches must not exceed N");
  require(c.clutter_scale >= 0.0 && c.clutter_scale < 1.0, "clutter_scale must lie in [0, 1)");
  if (c.task == TaskKind::multi_event_order) require(c.K >= 2, "multi_event_order needs K >= 2");
}

Tensor class_prototypes(const SynthConfig& cfg) {
  validate(cfg);
  Rng rng(derive_seed(cfg.task_seed, {0x70726f74ull, cfg.D, cfg.A}));
  std::vector<std::size_t> axes(cfg.D);
  std::iota(axes.begin(), axes.end(), 0);
  std::shuffle(axes.begin(), axes.end(), rng.engine());
  Tensor p = Tensor::matrix(cfg.A, cfg.D);
  for (std::size_t a = 0; a < cfg.A; ++a) p.at(a, axes[a]) = rng.uniform() < 0.5 ? -1.0 : 1.0;
  return p;
}

namespace {

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::vector<std::size_t> pick_distinct(Rng& rng, std::size_t n, std::size_t count, const std::vector<std::size_t>& avoid) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::find(avoid.begin(), avoid.end(), i) == avoid.end()) pool.push_back(i);
  }
  std::shuffle(pool.begin(), pool.end(), rng.engine());
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::size_t pick_class(Rng& rng, std::size_t A, const std::vector<std::size_t>& avoid) {
  std::vector<std::size_t> pool;
  for (std::size_t a = 0; a < A; ++a) {
    if (std::find(avoid.begin(), avoid.end(), a) == avoid.end()) pool.push_back(a);
  }
  return pool[rng.below(pool.size())];
}

void stamp(Tensor& x, const SynthConfig& c, const PlantedEvent& e, const Tensor& protos) {
  for (std::size_t t = 0; t < c.T; ++t) {
    for (std::size_t n : e.patches) {
      double* dst = x.data() + (((e.segment * c.T + t) * c.N) + n) * c.D;
      for (std::size_t d = 0; d < c.D; ++d) dst[d] = f32(e.scale * protos.at(e.class_id, d));
    }
  }
}

}  // namespace

SynthSample generate_synthetic(const SynthConfig& c, std::uint64_t seed) {
  validate(c);
  const Tensor protos = class_prototypes(c);
  Rng rng(derive_seed(seed, {0x73616d70ull}));
  SynthSample s;
  s.video.x = Tensor({c.K, c.T, c.N, c.D}, 0.0);
  for (double& v : s.video.x.values()) v = f32(c.noise_std * rng.normal());

  PlantedInfo& info = s.planted;
  info.kind = c.task;
  Tensor cue({c.D}, 0.0);
  if (c.task == TaskKind::single_event) {
    PlantedEvent e;
    e.segment = rng.below(c.K);
    e.class_id = rng.below(c.A);
    e.patches = pick_distinct(rng, c.N, c.event_patches, {});
    info.events.push_back(e);
    info.answer_segment = e.segment;
    s.label = e.class_id;
    // The question asks which event happened: a direction shared by every prototype.
    for (std::size_t a = 0; a < c.A; ++a) {
      for (std::size_t d = 0; d < c.D; ++d) cue[d] += protos.at(a, d) / std::sqrt(static_cast<double>(c.A));
    }
  } else {
    std::vector<std::size_t> segs = pick_distinct(rng, c.K, 2, {});
    const std::size_t cue_class = rng.below(c.A);
    const std::size_t later_class = pick_class(rng, c.A, {cue_class});
    PlantedEvent first{segs[0], cue_class, pick_distinct(rng, c.N, c.event_patches, {}), 1.0};
    PlantedEvent second{segs[1], later_class, pick_distinct(rng, c.N, c.event_patches, {}), 1.0};
    info.events = {first, second};
    info.cue_class = cue_class;
    info.answer_segment = second.segment;
    s.label = later_class;
    for (std::size_t d = 0; d < c.D; ++d) cue[d] = protos.at(cue_class, d);
  }

  std::vector<std::size_t> used_classes;
  for (const auto& e : info.events) used_classes.push_back(e.class_id);
  if (c.clutter_patches > 0 && c.clutter_scale > 0.0 && used_classes.size() < c.A) {
    for (const auto& e : info.events) {
      PlantedEvent cl;
      cl.segment = e.segment;
      cl.class_id = pick_class(rng, c.A, used_classes);
      cl.patches = pick_distinct(rng, c.N, c.clutter_patches, e.patches);
      cl.scale = c.clutter_scale;
      info.clutter.push_back(cl);
    }
  }
  for (const auto& cl : info.clutter) stamp(s.video.x, c, cl, protos);
  for (const auto& e : info.events) stamp(s.video.x, c, e, protos);

  s.question.w = Tensor::matrix(c.M, c.D);
  for (std::size_t m = 0; m < c.M; ++m) {
    for (std::size_t d = 0; d < c.D; ++d) {
      const double noise = m == 0 ? 0.0 : c.noise_std * rng.normal();
      s.question.w.at(m, d) = f32(cue[d] + noise);
    }
  }
  s.answers.a = protos;
  for (std::size_t a = 0; a < c.A; ++a) s.answers.labels.push_back("class_" + std::to_string(a));
  return s;
}

}  // namespace mist
