#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mist/tensor.hpp"

namespace mist {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode recording of one computation. Not shared between threads:
/// every sample of a batch gets its own tape.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var constant(Tensor value);
  Var variable(Tensor value);
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer, zero-initialised on first access.
  Tensor& grad(std::size_t id);
  /// Null when nothing has flowed into the node.
  const Tensor* grad_if_any(std::size_t id) const;

  /// Seeds d(output)/d(output) = 1 elementwise and runs the recorded backward
  /// closures in reverse order.
  void backward(Var output);

  std::size_t size() const { return nodes_.size(); }

  void add_macs(std::uint64_t n) { macs_ += n; }
  std::uint64_t macs() const { return macs_; }
  void note_attention_site(std::size_t tokens) { attention_sites_.push_back(tokens); }
  const std::vector<std::size_t>& attention_sites() const { return attention_sites_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::uint64_t macs_ = 0;
  std::vector<std::size_t> attention_sites_;
};

namespace ad {

/// a[r×k] · b[k×c]
Var matmul(Var a, Var b);
/// a[r×k] · b[c×k]ᵀ
Var matmul_nt(Var a, Var b);
/// x[r×in] · w[out×in]ᵀ + bias[out]
Var linear(Var x, Var weight, std::optional<Var> bias);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
/// Adds a length-c row to every row of a[r×c].
Var add_row(Var a, Var row);

Var gather_rows(Var a, std::vector<std::size_t> index);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var reshape(Var a, std::vector<std::size_t> shape);

/// Mean over rows: [r×c] -> [1×c].
Var mean_rows(Var a);
/// Mean over consecutive groups of `group` rows: [r×c] -> [(r/group)×c].
Var group_mean_rows(Var a, std::size_t group);

/// Row-wise softmax of factor·a.
Var softmax_rows(Var a, double factor = 1.0);
/// Row-wise L2 normalisation; throws on a zero-norm row.
Var normalize_rows(Var a);
/// −log softmax(scores)[label] for a single row of scores.
Var cross_entropy(Var scores, std::size_t label);
Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5);
Var sum_squares(Var a);

/// Scaled dot-product attention with `heads` column blocks:
/// head h mixes V[:, h] with softmax(Q[:, h] K[:, h]ᵀ / sqrt(cols/heads)).
Var attention(Var q, Var k, Var v, std::size_t heads);

}  // namespace ad
}  // namespace mist
