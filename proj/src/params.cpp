#include "mist/params.hpp"

#include <stdexcept>

namespace mist {

Var ParamBinder::get(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  auto src = store_.find(name);
  if (src == store_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  Var v = tape_.variable(src->second);
  bound_.emplace(name, v);
  return v;
}

LinearVars ParamBinder::linear(const std::string& prefix) {
  LinearVars out{get(prefix + ".weight"), std::nullopt};
  if (has(prefix + ".bias")) out.bias = get(prefix + ".bias");
  return out;
}

MhaVars ParamBinder::mha(const std::string& prefix) {
  return MhaVars{linear(prefix + ".q"), linear(prefix + ".k"), linear(prefix + ".v"), linear(prefix + ".o")};
}

LayerNormVars ParamBinder::layer_norm(const std::string& prefix) {
  return LayerNormVars{get(prefix + ".gamma"), get(prefix + ".beta")};
}

ParamStore ParamBinder::gradients() const {
  ParamStore out;
  for (const auto& [name, value] : store_) {
    auto it = bound_.find(name);
    const Tensor* g = it == bound_.end() ? nullptr : tape_.grad_if_any(it->second.id);
    out.emplace(name, g ? *g : Tensor(value.shape(), 0.0));
  }
  return out;
}

std::size_t parameter_count(const ParamStore& params) {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.size();
  return n;
}

}  // namespace mist
