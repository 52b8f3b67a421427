#include "mist/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace mist {

Tensor softmax(const Tensor& v, std::size_t axis) {
  if (axis >= v.rank()) throw std::invalid_argument("softmax: axis out of range");
  const auto& shape = v.shape();
  const std::size_t n = shape[axis];
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < shape.size(); ++a) inner *= shape[a];
  const std::size_t outer = v.size() / (n * inner);
  Tensor out(shape, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      auto at = [&](std::size_t j) { return (o * n + j) * inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) m = std::max(m, v[at(j)]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        out[at(j)] = std::exp(v[at(j)] - m);
        sum += out[at(j)];
      }
      for (std::size_t j = 0; j < n; ++j) out[at(j)] /= sum;
    }
  }
  return out;
}

Tensor linear(const Tensor& x, const LinearMap& map) {
  Tape tape;
  std::optional<Var> bias;
  if (map.bias) bias = tape.constant(*map.bias);
  return ad::linear(tape.constant(x), tape.constant(map.weight), bias).value();
}

namespace {

LinearVars lift(Tape& tape, const LinearMap& m) {
  LinearVars out{tape.constant(m.weight), std::nullopt};
  if (m.bias) out.bias = tape.constant(*m.bias);
  return out;
}

}  // namespace

Tensor multi_head_attention(const Tensor& tokens, const MhaParams& params, std::size_t heads) {
  Tape tape;
  const MhaVars vars{lift(tape, params.q), lift(tape, params.k), lift(tape, params.v), lift(tape, params.o)};
  Tensor out = ad::multi_head_attention(tape.constant(tokens), vars, heads).value();
  return out;
}

Tensor mean_pool(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw std::invalid_argument("mean_pool: axis out of range");
  const auto& shape = x.shape();
  const std::size_t n = shape[axis];
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < shape.size(); ++a) inner *= shape[a];
  const std::size_t outer = x.size() / (n * inner);
  std::vector<std::size_t> out_shape;
  for (std::size_t a = 0; a < shape.size(); ++a) {
    if (a != axis) out_shape.push_back(shape[a]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += x[(o * n + j) * inner + i];
      out[o * inner + i] = s / static_cast<double>(n);
    }
  }
  return out;
}

double cross_entropy(const Tensor& scores, std::size_t label) {
  Tape tape;
  return ad::cross_entropy(tape.constant(scores), label).value()[0];
}

namespace ad {

Var multi_head_attention(Var tokens, const MhaVars& params, std::size_t heads) {
  const std::size_t d = tokens.cols();
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("multi_head_attention: width " + std::to_string(d) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  tokens.tape->note_attention_site(tokens.rows());
  const Var q = linear(tokens, params.q);
  const Var k = linear(tokens, params.k);
  const Var v = linear(tokens, params.v);
  return linear(attention(q, k, v, heads), params.o);
}

Var attention_block(Var tokens, const MhaVars& params, std::size_t heads,
                    const std::optional<LayerNormVars>& norm) {
  const Var mixed = multi_head_attention(tokens, params, heads);
  if (!norm) return mixed;
  return layer_norm_rows(add(tokens, mixed), norm->gamma, norm->beta);
}

}  // namespace ad

ParamStore analytic_gradients(const LossFn& loss, const ParamStore& params, double* loss_value) {
  Tape tape;
  ParamBinder binder(tape, params);
  const Var l = loss(tape, binder);
  if (l.value().size() != 1) throw std::invalid_argument("grad_check: loss must be a scalar");
  if (loss_value) *loss_value = l.value()[0];
  tape.backward(l);
  return binder.gradients();
}

namespace {

double evaluate(const LossFn& loss, const ParamStore& params) {
  Tape tape;
  ParamBinder binder(tape, params);
  return loss(tape, binder).value()[0];
}

}  // namespace

GradCheckReport compare_gradients(const LossFn& loss, const ParamStore& params, const ParamStore& analytic,
                                  const GradCheckOptions& options) {
  if (!(options.eps > 1e-7 && options.eps < 1e-3)) {
    throw std::invalid_argument("grad_check: eps must lie in (1e-7, 1e-3)");
  }
  if (options.points != 2 && options.points != 4) throw std::invalid_argument("grad_check: points must be 2 or 4");
  const double base = evaluate(loss, params);
  const double again = evaluate(loss, params);
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    throw std::runtime_error("grad_check: loss is not deterministic under a frozen random stream");
  }
  GradCheckReport report;
  ParamStore probe = params;
  for (auto& [name, tensor] : probe) {
    if (options.filter && !options.filter(name)) continue;
    const Tensor& a = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      auto at = [&](double offset) {
        tensor[i] = saved + offset;
        return evaluate(loss, probe);
      };
      const double h = options.eps;
      const double d1 = at(h) - at(-h);
      double numeric = d1 / (2.0 * h);
      if (options.points == 4) numeric = (8.0 * d1 - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
      tensor[i] = saved;
      const double denom = std::max({std::abs(a[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(a[i] - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || report.worst_param_path.empty()) {
        report.max_rel_error = rel;
        report.worst_param_path = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

GradCheckReport grad_check(const LossFn& loss, const ParamStore& params, const GradCheckOptions& options) {
  return compare_gradients(loss, params, analytic_gradients(loss, params), options);
}

}  // namespace mist
