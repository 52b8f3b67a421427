#pragma once

#include <map>
#include <optional>
#include <string>

#include "mist/autodiff.hpp"
#include "mist/tensor.hpp"

namespace mist {

/// Named trainable tensors. Ordered so iteration (and therefore gradient
/// summation, serialisation and optimiser updates) is deterministic.
using ParamStore = std::map<std::string, Tensor>;

struct LinearVars {
  Var weight;
  std::optional<Var> bias;
};

struct MhaVars {
  LinearVars q, k, v, o;
};

struct LayerNormVars {
  Var gamma, beta;
};

/// Lazily lifts parameters from a store onto a tape as gradient-carrying
/// leaves. One binder per tape.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParamStore& store) : tape_(tape), store_(store) {}

  Var get(const std::string& name);
  bool has(const std::string& name) const { return store_.count(name) != 0; }
  LinearVars linear(const std::string& prefix);
  MhaVars mha(const std::string& prefix);
  LayerNormVars layer_norm(const std::string& prefix);

  /// Gradients of every stored parameter after Tape::backward; zeros for
  /// parameters the computation never touched.
  ParamStore gradients() const;

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ParamStore& store_;
  std::map<std::string, Var> bound_;
};

std::size_t parameter_count(const ParamStore& params);

}  // namespace mist
