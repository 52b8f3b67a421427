#pragma once

#include <cstddef>
#include <optional>

#include "mist/autodiff.hpp"
#include "mist/features.hpp"
#include "mist/tensor.hpp"

namespace mist {

struct Prediction {
  Tensor scores;
  std::size_t predicted = 0;
  std::optional<bool> correct;
};

/// Similarity of the fused feature with every candidate answer. Plain dot
/// product by default; `cosine` divides by both norms.
Tensor score_answers(const Tensor& x_o, const AnswerBank& bank, bool cosine = false);
double qa_loss(const Tensor& scores, std::size_t label);
/// Argmax with lowest-index tie-break.
Prediction predict(const Tensor& scores, std::optional<std::size_t> label = std::nullopt);

namespace ad {

Var score_answers(Var x_o, Var bank, bool cosine = false);
Var qa_loss(Var scores, std::size_t label);

}  // namespace ad
}  // namespace mist
