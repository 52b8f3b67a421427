#include "mist/answer.hpp"

#include <stdexcept>

namespace mist {

namespace ad {

Var score_answers(Var x_o, Var bank, bool cosine) {
  if (x_o.value().size() != bank.cols()) {
    throw std::invalid_argument("score_answers: feature width " + std::to_string(x_o.value().size()) +
                                " does not match answer width " + std::to_string(bank.cols()));
  }
  Var x = reshape(x_o, {1, x_o.value().size()});
  if (cosine) return matmul_nt(normalize_rows(x), normalize_rows(bank));
  return matmul_nt(x, bank);
}

Var qa_loss(Var scores, std::size_t label) { return cross_entropy(scores, label); }

}  // namespace ad

Tensor score_answers(const Tensor& x_o, const AnswerBank& bank, bool cosine) {
  Tape tape;
  return ad::score_answers(tape.constant(x_o), tape.constant(bank.a), cosine).value().reshaped({bank.a.rows()});
}

double qa_loss(const Tensor& scores, std::size_t label) {
  Tape tape;
  return ad::qa_loss(tape.constant(scores), label).value()[0];
}

Prediction predict(const Tensor& scores, std::optional<std::size_t> label) {
  if (scores.empty()) throw std::invalid_argument("predict: empty answer bank");
  Prediction p{scores, 0, std::nullopt};
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[p.predicted]) p.predicted = i;
  }
  if (label) p.correct = *label == p.predicted;
  return p;
}

}  // namespace mist
