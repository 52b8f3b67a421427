#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>

#include "mist/autodiff.hpp"
#include "mist/params.hpp"
#include "mist/tensor.hpp"

namespace mist {

/// Affine map y = W x + b with W stored as D_out×D_in.
struct LinearMap {
  Tensor weight;
  std::optional<Tensor> bias;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

struct MhaParams {
  LinearMap q, k, v, o;
};

/// Softmax along `axis` of a tensor of any rank.
Tensor softmax(const Tensor& v, std::size_t axis);
/// Applies the map to the last axis.
Tensor linear(const Tensor& x, const LinearMap& map);
Tensor multi_head_attention(const Tensor& tokens, const MhaParams& params, std::size_t heads);
/// Arithmetic mean along `axis`; the axis is removed (rank-1 input gives a 1-vector).
Tensor mean_pool(const Tensor& x, std::size_t axis);
double cross_entropy(const Tensor& scores, std::size_t label);

namespace ad {

/// Projections, per-head scaled dot-product attention and output projection.
/// Records its token count as one attention site on the tape.
Var multi_head_attention(Var tokens, const MhaVars& params, std::size_t heads);

/// Attention block used by the model. With `norm` set the block is
/// LayerNorm(x + MultiHead(x)); without it the bare MultiHead(x).
Var attention_block(Var tokens, const MhaVars& params, std::size_t heads,
                    const std::optional<LayerNormVars>& norm);

inline Var linear(Var x, const LinearVars& map) { return linear(x, map.weight, map.bias); }

}  // namespace ad

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param_path;
  std::size_t checked = 0;
};

/// Builds a scalar loss on a fresh tape. Must be deterministic: any
/// randomness has to come from a stream the function re-seeds on every call.
using LossFn = std::function<Var(Tape&, ParamBinder&)>;

struct GradCheckOptions {
  double eps = 2e-4;
  /// Central stencil width: 2 gives (f(x+h) - f(x-h)) / 2h; 4 adds the ±2h
  /// points for a fourth-order estimate, which keeps roundoff below 1e-12 on
  /// O(1) losses.
  int points = 4;
  /// Restricts the check to parameters whose name passes the filter.
  std::function<bool(const std::string&)> filter;
};

/// Reverse-mode gradient of every parameter at `params`.
ParamStore analytic_gradients(const LossFn& loss, const ParamStore& params, double* loss_value = nullptr);

/// Compares supplied gradients against central finite differences. Relative
/// error per entry is |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport compare_gradients(const LossFn& loss, const ParamStore& params, const ParamStore& analytic,
                                  const GradCheckOptions& options = {});

GradCheckReport grad_check(const LossFn& loss, const ParamStore& params, const GradCheckOptions& options = {});

}  // namespace mist
