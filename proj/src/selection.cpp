#include "mist/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mist {

std::string to_string(SelectorKind kind) {
  switch (kind) {
    case SelectorKind::gumbel_with_replacement: return "gumbel_with_replacement";
    case SelectorKind::gumbel_without_replacement: return "gumbel_without_replacement";
    case SelectorKind::nonparametric: return "nonparametric";
  }
  return "?";
}

SelectorKind selector_kind_from_string(const std::string& s) {
  if (s == "gumbel_with_replacement") return SelectorKind::gumbel_with_replacement;
  if (s == "gumbel_without_replacement") return SelectorKind::gumbel_without_replacement;
  if (s == "nonparametric") return SelectorKind::nonparametric;
  throw std::invalid_argument("unknown selector kind '" + s + "'");
}

namespace {

// Probabilities below this are treated as zero when taking logs.
constexpr double kTinyProb = 1e-300;

std::size_t argmax_lowest(const double* v, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace

std::vector<std::size_t> deterministic_topk(const Tensor& scores, std::size_t k, SelectorKind kind) {
  const std::size_t n = scores.size();
  if (kind == SelectorKind::gumbel_with_replacement) {
    return std::vector<std::size_t>(k, argmax_lowest(scores.data(), n));
  }
  if (k > n) throw std::invalid_argument("top-k without replacement needs k <= n");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  return order;
}

namespace ad {

Var projected_scores(Var query_proj, Var keys, const LinearVars& proj_k) {
  const Var k = linear(keys, proj_k);
  if (k.cols() != query_proj.cols()) throw std::invalid_argument("cross-modal scores: projection widths differ");
  const double factor = 1.0 / std::sqrt(static_cast<double>(k.cols()));
  return softmax_rows(matmul_nt(query_proj, k), factor);
}

Var cross_modal_scores(Var q_vec, Var keys, const LinearVars& proj_q, const LinearVars& proj_k) {
  return projected_scores(linear(reshape(q_vec, {1, q_vec.value().size()}), proj_q), keys, proj_k);
}

Var nonparametric_scores(Var q_vec, Var keys) {
  const Var q = normalize_rows(reshape(q_vec, {1, q_vec.value().size()}));
  return softmax_rows(matmul_nt(q, normalize_rows(keys)));
}

TapeSelection gumbel_topk(Var scores, Var values, std::size_t k, const SelectorMode& mode, Rng& rng,
                          const SelectOptions& options) {
  const Tensor& p = scores.value();
  const std::size_t n = p.size();
  const std::size_t c = values.cols();
  if (k == 0) throw std::invalid_argument("top-k selection needs k >= 1");
  if (values.rows() != n) throw std::invalid_argument("top-k selection: scores and values disagree on candidates");
  if (!(mode.temperature > 0.0)) throw std::invalid_argument("selector temperature must be positive");
  if (mode.kind != SelectorKind::gumbel_with_replacement && k > n) {
    throw std::invalid_argument("top-k without replacement: k = " + std::to_string(k) + " exceeds " +
                                std::to_string(n) + " candidates");
  }
  TapeSelection out;
  out.soft_weights = p.reshaped({n});

  const bool sample = options.training && mode.kind != SelectorKind::nonparametric;
  if (!sample) {
    out.indices = deterministic_topk(out.soft_weights, k, mode.kind);
    out.selected = gather_rows(values, out.indices);
    return out;
  }

  const double tau = mode.temperature;
  std::vector<double> logp(n);
  for (std::size_t i = 0; i < n; ++i) logp[i] = std::log(std::max(p[i], kTinyProb));
  std::vector<double> soft(k * n, 0.0);
  std::vector<bool> taken(n, false);
  for (std::size_t j = 0; j < k; ++j) {
    double* y = soft.data() + j * n;
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> z(n, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i) {
      const double g = rng.gumbel();
      if (taken[i]) continue;
      z[i] = (logp[i] + g) / tau;
      m = std::max(m, z[i]);
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = taken[i] ? 0.0 : std::exp(z[i] - m);
      sum += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] /= sum;
    const std::size_t idx = argmax_lowest(z.data(), n);
    out.indices.push_back(idx);
    if (mode.kind == SelectorKind::gumbel_without_replacement) taken[idx] = true;
  }

  const Tensor& vv = values.value();
  Tensor selected = Tensor::matrix(k, c);
  for (std::size_t j = 0; j < k; ++j) {
    double* dst = selected.data() + j * c;
    if (options.straight_through) {
      std::copy_n(vv.data() + out.indices[j] * c, c, dst);
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double w = soft[j * n + i];
      if (w == 0.0) continue;
      const double* src = vv.data() + i * c;
      for (std::size_t d = 0; d < c; ++d) dst[d] += w * src[d];
    }
  }

  const std::size_t is = scores.id, iv = values.id;
  const bool st = options.straight_through;
  out.selected = scores.tape->record(
      std::move(selected), {scores, values},
      [is, iv, n, c, k, tau, st, soft = std::move(soft), indices = out.indices](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad_if_any(self);
        const Tensor& v = t.value(iv);
        if (t.requires_grad(iv)) {
          Tensor& gv = t.grad(iv);
          for (std::size_t j = 0; j < k; ++j) {
            const double* gj = g.data() + j * c;
            if (st) {
              double* dst = gv.data() + indices[j] * c;
              for (std::size_t d = 0; d < c; ++d) dst[d] += gj[d];
              continue;
            }
            for (std::size_t i = 0; i < n; ++i) {
              const double w = soft[j * n + i];
              if (w == 0.0) continue;
              double* dst = gv.data() + i * c;
              for (std::size_t d = 0; d < c; ++d) dst[d] += w * gj[d];
            }
          }
        }
        if (!t.requires_grad(is)) return;
        const Tensor& pv = t.value(is);
        std::vector<double> dlogp(n, 0.0);
        std::vector<double> dy(n);
        for (std::size_t j = 0; j < k; ++j) {
          const double* gj = g.data() + j * c;
          const double* y = soft.data() + j * n;
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            if (y[i] != 0.0) {
              const double* vi = v.data() + i * c;
              for (std::size_t d = 0; d < c; ++d) s += gj[d] * vi[d];
            }
            dy[i] = s;
            dot += y[i] * s;
          }
          for (std::size_t i = 0; i < n; ++i) dlogp[i] += y[i] * (dy[i] - dot) / tau;
        }
        Tensor& gp = t.grad(is);
        for (std::size_t i = 0; i < n; ++i) {
          if (pv[i] > kTinyProb) gp[i] += dlogp[i] / pv[i];
        }
      });
  return out;
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Tensor-level wrappers.

namespace {

LinearVars lift(Tape& tape, const LinearMap& m) {
  LinearVars out{tape.constant(m.weight), std::nullopt};
  if (m.bias) out.bias = tape.constant(*m.bias);
  return out;
}

SelectionResult to_result(ad::TapeSelection&& s, const SelectOptions& options) {
  return SelectionResult{std::move(s.indices), std::move(s.soft_weights), s.selected.value(),
                         options.straight_through};
}

}  // namespace

Tensor cross_modal_scores(const Tensor& q_vec, const Tensor& keys, const LinearMap& proj_q, const LinearMap& proj_k) {
  if (proj_q.out_dim() != proj_k.out_dim()) throw std::invalid_argument("cross-modal scores: projection widths differ");
  Tape tape;
  const Var s = ad::cross_modal_scores(tape.constant(q_vec), tape.constant(keys), lift(tape, proj_q), lift(tape, proj_k));
  return s.value().reshaped({keys.rows()});
}

Tensor nonparametric_scores(const Tensor& q_vec, const Tensor& keys) {
  Tape tape;
  return ad::nonparametric_scores(tape.constant(q_vec), tape.constant(keys)).value().reshaped({keys.rows()});
}

SelectionResult gumbel_topk(const Tensor& scores, const Tensor& values, std::size_t k, const SelectorMode& mode,
                            Rng& rng, const SelectOptions& options) {
  Tape tape;
  const Var v = tape.constant(values.reshaped({values.rows(), values.cols()}));
  return to_result(ad::gumbel_topk(tape.constant(scores.reshaped({1, scores.size()})), v, k, mode, rng, options),
                   options);
}

SelectionResult segment_select(const VideoFeatures& video, const Tensor& segments, const Tensor& q_vec,
                               const SelectionParams& params, std::size_t top_k, const SelectorMode& mode, Rng& rng,
                               const SelectOptions& options) {
  validate(video);
  const std::size_t K = video.segments(), T = video.frames_per_segment(), N = video.patches(), D = video.dim();
  if (segments.rows() != K || segments.cols() != D) {
    throw std::invalid_argument("segment features must be K×D = " + std::to_string(K) + "×" + std::to_string(D));
  }
  const Tensor scores = mode.kind == SelectorKind::nonparametric
                            ? nonparametric_scores(q_vec, segments)
                            : cross_modal_scores(q_vec, segments, params.query, params.key);
  SelectionResult r = gumbel_topk(scores, video.x.reshaped({K, T * N * D}), top_k, mode, rng, options);
  r.selected = r.selected.reshaped({top_k, T, N, D});
  return r;
}

SelectionResult region_select(const Tensor& frame_patches, const Tensor& q_vec, const SelectionParams& params,
                              std::size_t top_j, const SelectorMode& mode, Rng& rng, const SelectOptions& options) {
  const Tensor scores = mode.kind == SelectorKind::nonparametric
                            ? nonparametric_scores(q_vec, frame_patches)
                            : cross_modal_scores(q_vec, frame_patches, params.query, params.key);
  return gumbel_topk(scores, frame_patches, top_j, mode, rng, options);
}

}  // namespace mist
