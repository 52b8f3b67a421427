#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mist/autodiff.hpp"
#include "mist/features.hpp"
#include "mist/numerics.hpp"
#include "mist/params.hpp"
#include "mist/rng.hpp"

namespace mist {

enum class SelectorKind { gumbel_with_replacement, gumbel_without_replacement, nonparametric };

std::string to_string(SelectorKind kind);
SelectorKind selector_kind_from_string(const std::string& s);

struct SelectorMode {
  SelectorKind kind = SelectorKind::gumbel_with_replacement;
  double temperature = 1.0;
};

/// Training draws Gumbel samples; evaluation takes the deterministic
/// argmax-top-k. Without straight-through the forward value is the soft
/// relaxation itself (a convex mix of candidate rows), which makes the whole
/// model smooth in its parameters for gradient checking.
struct SelectOptions {
  bool training = true;
  bool straight_through = true;
};

struct SelectionResult {
  std::vector<std::size_t> indices;
  Tensor soft_weights;
  Tensor selected;
  bool straight_through = true;
};

/// Query/key projections of one cross-modal attention site (g_q/g_s for
/// segments, h_q/h_x for regions).
struct SelectionParams {
  LinearMap query;
  LinearMap key;
};

Tensor cross_modal_scores(const Tensor& q_vec, const Tensor& keys, const LinearMap& proj_q, const LinearMap& proj_k);
Tensor nonparametric_scores(const Tensor& q_vec, const Tensor& keys);

/// Indices picked when no sampling happens: argmax repeated k times for the
/// with-replacement selector, otherwise the k best distinct candidates.
/// Ties go to the lowest index.
std::vector<std::size_t> deterministic_topk(const Tensor& scores, std::size_t k, SelectorKind kind);

SelectionResult gumbel_topk(const Tensor& scores, const Tensor& values, std::size_t k, const SelectorMode& mode,
                            Rng& rng, const SelectOptions& options = {});

/// Scores pooled segments against the question and selects whole segments;
/// `selected` has shape top_k×T×N×D.
SelectionResult segment_select(const VideoFeatures& video, const Tensor& segments, const Tensor& q_vec,
                               const SelectionParams& params, std::size_t top_k, const SelectorMode& mode, Rng& rng,
                               const SelectOptions& options = {});

/// Selects top_j patch rows of one N×D frame.
SelectionResult region_select(const Tensor& frame_patches, const Tensor& q_vec, const SelectionParams& params,
                              std::size_t top_j, const SelectorMode& mode, Rng& rng,
                              const SelectOptions& options = {});

namespace ad {

struct TapeSelection {
  std::vector<std::size_t> indices;
  Tensor soft_weights;
  Var selected;
};

/// softmax(query_proj · proj_k(keys)ᵀ / sqrt(d_k)) with an already projected
/// 1×d_k query. Returns a 1×n row.
Var projected_scores(Var query_proj, Var keys, const LinearVars& proj_k);
Var cross_modal_scores(Var q_vec, Var keys, const LinearVars& proj_q, const LinearVars& proj_k);
Var nonparametric_scores(Var q_vec, Var keys);

TapeSelection gumbel_topk(Var scores, Var values, std::size_t k, const SelectorMode& mode, Rng& rng,
                          const SelectOptions& options);

}  // namespace ad
}  // namespace mist
