#include "mist/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace mist {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }
MutMap as_mat(Tensor& t) { return MutMap(t.data(), t.rows(), t.cols()); }
ConstMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMap(t.data(), rows, cols);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, true, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw std::logic_error("mixing values from different tapes");
    needs = needs || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(backward) : nullptr});
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

const Tensor* Tape::grad_if_any(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.grad.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var output) {
  if (output.tape != this) throw std::logic_error("backward on a foreign value");
  if (!nodes_[output.id].requires_grad) return;
  grad(output.id).fill(1.0);
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

namespace ad {

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.cols() == bv.rows(), "matmul: inner dimensions differ");
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  Tape& tape = *a.tape;
  tape.add_macs(static_cast<std::uint64_t>(av.rows()) * av.cols() * bv.cols());
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto g = as_mat(*t.grad_if_any(self));
    if (t.requires_grad(ia)) as_mat(t.grad(ia)).noalias() += g * as_mat(t.value(ib)).transpose();
    if (t.requires_grad(ib)) as_mat(t.grad(ib)).noalias() += as_mat(t.value(ia)).transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.cols() == bv.cols(), "matmul_nt: inner dimensions differ");
  Tensor out = Tensor::matrix(av.rows(), bv.rows());
  as_mat(out).noalias() = as_mat(av) * as_mat(bv).transpose();
  Tape& tape = *a.tape;
  tape.add_macs(static_cast<std::uint64_t>(av.rows()) * av.cols() * bv.rows());
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto g = as_mat(*t.grad_if_any(self));
    if (t.requires_grad(ia)) as_mat(t.grad(ia)).noalias() += g * as_mat(t.value(ib));
    if (t.requires_grad(ib)) as_mat(t.grad(ib)).noalias() += g.transpose() * as_mat(t.value(ia));
  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require(xv.cols() == wv.cols(), "linear: input has " + std::to_string(xv.cols()) +
                                      " features, map expects " + std::to_string(wv.cols()));
  const std::size_t out_dim = wv.rows();
  std::vector<std::size_t> shape = xv.shape();
  shape.back() = out_dim;
  Tensor out(shape, 0.0);
  const ConstMap xm = as_mat(xv);
  auto om = MutMap(out.data(), xv.rows(), out_dim);
  om.noalias() = xm * as_mat(wv).transpose();
  if (bias) {
    const Tensor& bv = bias->value();
    require(bv.size() == out_dim, "linear: bias length mismatch");
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data(), out_dim);
  }
  Tape& tape = *x.tape;
  tape.add_macs(static_cast<std::uint64_t>(xv.rows()) * xv.cols() * out_dim);
  const std::size_t ix = x.id, iw = weight.id;
  const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return tape.record(std::move(out), inputs, [ix, iw, ib](Tape& t, std::size_t self) {
    const Tensor& gt = *t.grad_if_any(self);
    const std::size_t rows = t.value(ix).rows();
    const auto g = as_mat(gt, rows, gt.cols());
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad(ix);
      MutMap(gx.data(), rows, gx.cols()).noalias() += g * as_mat(t.value(iw));
    }
    if (t.requires_grad(iw)) {
      const Tensor& xv2 = t.value(ix);
      as_mat(t.grad(iw)).noalias() += g.transpose() * as_mat(xv2, rows, xv2.cols());
    }
    if (ib && t.requires_grad(*ib)) {
      Tensor& gb = t.grad(*ib);
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), gb.size()) += g.colwise().sum();
    }
  });
}

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.size() == bv.size() && av.cols() == bv.cols(), "add: shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      Tensor& gi = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, factor](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    Tensor& gi = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += factor * g[i];
  });
}

Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  require(rv.size() == av.cols(), "add_row: row length mismatch");
  Tensor out = av;
  const std::size_t c = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += rv[j];
  }
  const std::size_t ia = a.id, ir = row.id;
  return a.tape->record(std::move(out), {a, row}, [ia, ir, c](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ir)) {
      Tensor& gr = t.grad(ir);
      for (std::size_t i = 0; i < g.size(); ++i) gr[i % c] += g[i];
    }
  });
}

Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Tensor& av = a.value();
  const std::size_t c = av.cols();
  const std::size_t n = av.rows();
  require(!index.empty(), "gather_rows: empty index");
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    require(index[r] < n, "gather_rows: index out of range");
    std::copy_n(av.data() + index[r] * c, c, out.data() + r * c);
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a},
                        [ia, c, index = std::move(index)](Tape& t, std::size_t self) {
                          const Tensor& g = *t.grad_if_any(self);
                          Tensor& ga = t.grad(ia);
                          for (std::size_t r = 0; r < index.size(); ++r) {
                            double* dst = ga.data() + index[r] * c;
                            const double* src = g.data() + r * c;
                            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                          }
                        });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  require(count > 0 && begin + count <= av.rows(), "slice_rows: range out of bounds");
  const std::size_t c = av.cols();
  Tensor out = Tensor::matrix(count, c);
  std::copy_n(av.data() + begin * c, count * c, out.data());
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, begin, c](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    Tensor& ga = t.grad(ia);
    double* dst = ga.data() + begin * c;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == c, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Tensor out = Tensor::matrix(rows, c);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    std::copy_n(pv.data(), pv.size(), out.data() + off);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += pv.size();
  }
  return parts.front().tape->record(
      std::move(out), parts, [ids = std::move(ids), offsets = std::move(offsets)](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad_if_any(self);
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (!t.requires_grad(ids[p])) continue;
          Tensor& gp = t.grad(ids[p]);
          const double* src = g.data() + offsets[p];
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
        }
      });
}

Var reshape(Var a, std::vector<std::size_t> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var mean_rows(Var a) { return group_mean_rows(a, a.rows()); }

Var group_mean_rows(Var a, std::size_t group) {
  const Tensor& av = a.value();
  require(group > 0 && av.rows() % group == 0, "group_mean_rows: rows not divisible by group");
  const std::size_t c = av.cols();
  const std::size_t groups = av.rows() / group;
  Tensor out = Tensor::matrix(groups, c);
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t gidx = 0; gidx < groups; ++gidx) {
    double* dst = out.data() + gidx * c;
    for (std::size_t r = 0; r < group; ++r) {
      const double* src = av.data() + (gidx * group + r) * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    for (std::size_t j = 0; j < c; ++j) dst[j] *= inv;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, group, c, inv](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    Tensor& ga = t.grad(ia);
    const std::size_t rows = ga.rows();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = g.data() + (r / group) * c;
      double* dst = ga.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += inv * src[j];
    }
  });
}

namespace {

void softmax_row(const double* in, double* out, std::size_t n, double factor) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) m = std::max(m, factor * in[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(factor * in[j] - m);
    sum += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
}

}  // namespace

Var softmax_rows(Var a, double factor) {
  const Tensor& av = a.value();
  Tensor out(av.shape(), 0.0);
  const std::size_t c = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r) softmax_row(av.data() + r * c, out.data() + r * c, c, factor);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, c, factor](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double* yr = y.data() + r * c;
      const double* gr = g.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += factor * yr[j] * (gr[j] - dot);
    }
  });
}

Var normalize_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t c = av.cols();
  Tensor out(av.shape(), 0.0);
  std::vector<double> norms(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += av[r * c + j] * av[r * c + j];
    const double n = std::sqrt(s);
    if (!(n > 0.0)) throw std::invalid_argument("normalize_rows: zero-norm row");
    norms[r] = n;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = av[r * c + j] / n;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, c, norms = std::move(norms)](Tape& t, std::size_t self) {
    const Tensor& g = *t.grad_if_any(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < norms.size(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[r * c + j] * g[r * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += (g[r * c + j] - y[r * c + j] * dot) / norms[r];
    }
  });
}

Var cross_entropy(Var scores, std::size_t label) {
  const Tensor& s = scores.value();
  require(s.size() > 0, "cross_entropy: empty scores");
  if (label >= s.size()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " outside " +
                            std::to_string(s.size()) + " classes");
  }
  std::vector<double> p(s.size());
  softmax_row(s.data(), p.data(), s.size(), 1.0);
  double m = -std::numeric_limits<double>::infinity();
  for (double v : s.values()) m = std::max(m, v);
  double sum = 0.0;
  for (double v : s.values()) sum += std::exp(v - m);
  const double loss = m + std::log(sum) - s[label];
  const std::size_t is = scores.id;
  return scores.tape->record(Tensor::scalar(loss), {scores},
                             [is, label, p = std::move(p)](Tape& t, std::size_t self) {
                               const double g = (*t.grad_if_any(self))[0];
                               Tensor& gs = t.grad(is);
                               for (std::size_t j = 0; j < p.size(); ++j) {
                                 gs[j] += g * (p[j] - (j == label ? 1.0 : 0.0));
                               }
                             });
}

Var layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  const Tensor& av = a.value();
  const std::size_t c = av.cols();
  require(gamma.value().size() == c && beta.value().size() == c, "layer_norm_rows: parameter length mismatch");
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(av.shape(), 0.0);
  Tensor xhat(av.shape(), 0.0);
  std::vector<double> inv_std(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const double* x = av.data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (x[j] - mean) * inv_std[r];
      out[r * c + j] = gv[j] * xhat[r * c + j] + bv[j];
    }
  }
  const std::size_t ia = a.id, ig = gamma.id, ib = beta.id;
  return a.tape->record(
      std::move(out), {a, gamma, beta},
      [ia, ig, ib, c, inv_std = std::move(inv_std), xhat = std::move(xhat)](Tape& t, std::size_t self) {
        const Tensor& g = *t.grad_if_any(self);
        const Tensor& gv2 = t.value(ig);
        const std::size_t rows = inv_std.size();
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) {
              if (t.requires_grad(ig)) t.grad(ig)[j] += g[r * c + j] * xhat[r * c + j];
              if (t.requires_grad(ib)) t.grad(ib)[j] += g[r * c + j];
            }
          }
        }
        if (!t.requires_grad(ia)) return;
        Tensor& ga = t.grad(ia);
        const double n = static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double d = g[r * c + j] * gv2[j];
            sum_d += d;
            sum_dx += d * xhat[r * c + j];
          }
          for (std::size_t j = 0; j < c; ++j) {
            const double d = g[r * c + j] * gv2[j];
            ga[r * c + j] += inv_std[r] * (d - sum_d / n - xhat[r * c + j] * sum_dx / n);
          }
        }
      });
}

Var sum_squares(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    const double g = (*t.grad_if_any(self))[0];
    const Tensor& x = t.value(ia);
    Tensor& gx = t.grad(ia);
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += 2.0 * g * x[i];
  });
}

Var attention(Var q, Var k, Var v, std::size_t heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t d = qv.cols();
  require(heads > 0 && d % heads == 0, "attention: width " + std::to_string(d) +
                                           " not divisible by " + std::to_string(heads) + " heads");
  require(kv.cols() == d && vv.cols() == d, "attention: Q/K/V widths differ");
  require(kv.rows() == vv.rows(), "attention: K/V lengths differ");
  const std::size_t nq = qv.rows();
  const std::size_t nk = kv.rows();
  const std::size_t dk = d / heads;
  const double factor = 1.0 / std::sqrt(static_cast<double>(dk));

  Tensor out = Tensor::matrix(nq, d);
  std::vector<RowMat> probs(heads);
  const ConstMap qm = as_mat(qv), km = as_mat(kv), vm = as_mat(vv);
  MutMap om = as_mat(out);
  for (std::size_t h = 0; h < heads; ++h) {
    RowMat s = (qm.middleCols(h * dk, dk) * km.middleCols(h * dk, dk).transpose()) * factor;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const double m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp();
      s.row(r) /= s.row(r).sum();
    }
    om.middleCols(h * dk, dk).noalias() = s * vm.middleCols(h * dk, dk);
    probs[h] = std::move(s);
  }
  Tape& tape = *q.tape;
  tape.add_macs(2ull * nq * nk * d);
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return tape.record(
      std::move(out), {q, k, v},
      [iq, ik, iv, heads, dk, factor, probs = std::move(probs)](Tape& t, std::size_t self) {
        const ConstMap g = as_mat(*t.grad_if_any(self));
        const ConstMap qm2 = as_mat(t.value(iq)), km2 = as_mat(t.value(ik)), vm2 = as_mat(t.value(iv));
        for (std::size_t h = 0; h < heads; ++h) {
          const RowMat& p = probs[h];
          const auto gh = g.middleCols(h * dk, dk);
          if (t.requires_grad(iv)) as_mat(t.grad(iv)).middleCols(h * dk, dk).noalias() += p.transpose() * gh;
          if (!t.requires_grad(iq) && !t.requires_grad(ik)) continue;
          RowMat dp = gh * vm2.middleCols(h * dk, dk).transpose();
          const Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
          RowMat ds = p.array() * (dp.colwise() - rowdot).array();
          ds *= factor;
          if (t.requires_grad(iq)) as_mat(t.grad(iq)).middleCols(h * dk, dk).noalias() += ds * km2.middleCols(h * dk, dk);
          if (t.requires_grad(ik)) as_mat(t.grad(ik)).middleCols(h * dk, dk).noalias() += ds.transpose() * qm2.middleCols(h * dk, dk);
        }
      });
}

}  // namespace ad
}  // namespace mist
