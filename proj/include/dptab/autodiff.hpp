#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape records primitive ops in execution order, so node ids are already a
// topological order and backward() is a single reverse sweep. Leaves can
// borrow an external tensor (model parameters) without copying it.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dptab/error.hpp"
#include "dptab/tensor.hpp"

namespace dptab {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  // Called with the node's upstream gradient and its own output value.
  using Backward = std::function<void(Tape&, const Tensor& out_grad, const Tensor& out)>;

  Tape() { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(std::move(t), nullptr, false); }
  Var variable(Tensor t) { return push(std::move(t), nullptr, true); }
  // Borrows `external`; it must outlive the tape.
  Var leaf(const Tensor& external, bool requires_grad) { return push(Tensor{}, &external, requires_grad); }

  Var record(const char* op, Tensor out, std::initializer_list<Var> inputs, Backward backward) {
    return record(op, std::move(out), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var record(const char* op, Tensor out, std::span<const Var> inputs, Backward backward) {
    if (!out.all_finite()) throw NumericFault(op, "non-finite output of shape " + shape_str(out.shape()));
    bool needs = false;
    for (const Var& v : inputs) {
      require(v.tape == this, [&] { return std::string(op) + ": input belongs to a different tape"; });
      needs = needs || nodes_[v.id].requires_grad;
    }
    Var out_var = push(std::move(out), nullptr, needs);
    if (needs) nodes_[out_var.id].backward = std::move(backward);
    nodes_[out_var.id].op = op;
    return out_var;
  }

  const Tensor& value(int id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
  }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  // Gradient accumulator for a node, allocated as zeros on first use.
  Tensor& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  const Tensor* grad(int id) const {
    const Node& n = nodes_.at(id);
    return n.has_grad ? &n.grad : nullptr;
  }

  void backward(Var loss) {
    require(loss.tape == this, "backward: loss belongs to a different tape");
    require(value(loss.id).size() == 1, [&] { return "backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()); });
    require(!backward_done_, "backward: tape already differentiated");
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = 1.0f;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, n.grad, n.external ? *n.external : n.owned);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    const char* op = "leaf";
    Backward backward;
  };

  Var push(Tensor t, const Tensor* external, bool requires_grad) {
    Node n;
    n.owned = std::move(t);
    n.external = external;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

/// Gradients of a scalar loss with respect to `wrt`, in the same order.
/// Parameters the loss does not reach get a zero tensor.
inline std::vector<Tensor> grad(Tape& tape, Var loss, std::span<const Var> wrt) {
  tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Var& v : wrt) {
    const Tensor* g = tape.grad(v.id);
    out.push_back(g ? *g : Tensor::zeros_like(v.value()));
  }
  return out;
}

namespace ad {

namespace detail {

inline void accumulate(Tape& t, Var v, const Tensor& g) {
  if (!t.requires_grad(v)) return;
  auto dst = t.grad_buffer(v.id).data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), [&] { return "add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()); });
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g);
  });
}

inline Var scale(Var a, float s) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return a.tape->record("scale", std::move(out), {a}, [a, s](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.requires_grad(a)) return;
    auto dst = t.grad_buffer(a.id).data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * s;
  });
}

inline Var relu(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0f ? av[i] : 0.0f;
  return a.tape->record("relu", std::move(out), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.requires_grad(a)) return;
    const Tensor& x = t.value(a.id);
    auto dst = t.grad_buffer(a.id).data();
    for (std::size_t i = 0; i < dst.size(); ++i)
      if (x[i] > 0.0f) dst[i] += g[i];
  });
}

inline Var sum(Var a) {
  double acc = 0.0;
  for (float v : a.value().data()) acc += v;
  return a.tape->record("sum", Tensor({1}, {static_cast<float>(acc)}), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.requires_grad(a)) return;
    for (float& d : t.grad_buffer(a.id).data()) d += g[0];
  });
}

namespace detail {

// Inner product in a fixed order: eight float lanes, then a double combine.
// The order never depends on threading, so results are bit-stable.
inline double dot_lanes(const float* a, const float* b, std::size_t n) {
  float acc[8] = {};
  std::size_t p = 0;
  for (; p + 8 <= n; p += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[p + j] * b[p + j];
  double s = 0.0;
  for (float v : acc) s += v;
  for (; p < n; ++p) s += static_cast<double>(a[p]) * b[p];
  return s;
}

// dst[0..n) += alpha * src[0..n)
inline void axpy(float* dst, float alpha, const float* src, std::size_t n) {
  for (std::size_t p = 0; p < n; ++p) dst[p] += alpha * src[p];
}

}  // namespace detail

/// (m x k) * (k x n).
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), [&] {
    return "matmul: incompatible shapes " + shape_str(av.shape()) + " x " + shape_str(bv.shape());
  });
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) detail::axpy(&out[i * n], av[i * k + p], &bv[p * n], n);
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = t.value(a.id);
    const Tensor& bv = t.value(b.id);
    if (t.requires_grad(a)) {
      Tensor& da = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p)
          da[i * k + p] += static_cast<float>(detail::dot_lanes(&g[i * n], &bv[p * n], n));
    }
    if (t.requires_grad(b)) {
      Tensor& db = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) detail::axpy(&db[p * n], av[i * k + p], &g[i * n], n);
    }
  });
}

namespace detail {

// y = x * w^T (+ bias). x is (m x k), w is (n x k).
inline Tensor affine_nt(const Tensor& x, const Tensor& w, const Tensor* bias) {
  const std::size_t m = x.rows(), k = x.cols(), n = w.dim(0);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const float* xr = &x[i * k];
    for (std::size_t o = 0; o < n; ++o) {
      const double acc = dot_lanes(xr, &w[o * k], k) + (bias ? static_cast<double>((*bias)[o]) : 0.0);
      out[i * n + o] = static_cast<float>(acc);
    }
  }
  return out;
}

inline void affine_nt_backward(Tape& t, Var x, Var w, const Var* bias, const Tensor& g) {
  const Tensor& xv = t.value(x.id);
  const Tensor& wv = t.value(w.id);
  const std::size_t m = xv.rows(), k = xv.cols(), n = wv.dim(0);
  if (t.requires_grad(x)) {
    Tensor& dx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t o = 0; o < n; ++o) {
        const float gi = g[i * n + o];
        if (gi != 0.0f) axpy(&dx[i * k], gi, &wv[o * k], k);
      }
  }
  if (t.requires_grad(w)) {
    Tensor& dw = t.grad_buffer(w.id);
    for (std::size_t o = 0; o < n; ++o)
      for (std::size_t i = 0; i < m; ++i) {
        const float gi = g[i * n + o];
        if (gi != 0.0f) axpy(&dw[o * k], gi, &xv[i * k], k);
      }
  }
  if (bias && t.requires_grad(*bias)) {
    Tensor& db = t.grad_buffer(bias->id);
    for (std::size_t o = 0; o < n; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += g[i * n + o];
      db[o] += static_cast<float>(s);
    }
  }
}

}  // namespace detail

/// a * b^T for a (m x k), b (n x k).
inline Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(bv.rank() == 2 && av.cols() == bv.dim(1), [&] { return
          "matmul_nt: incompatible shapes " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + "^T"; });
  return a.tape->record("matmul_nt", detail::affine_nt(av, bv, nullptr), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    detail::affine_nt_backward(t, a, b, nullptr, g);
  });
}

/// Fully connected layer: x * W^T + bias, W stored as (out x in).
inline Var linear(Var x, Var w, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = bias.value();
  require(wv.rank() == 2 && xv.cols() == wv.dim(1), [&] { return
          "linear: input " + shape_str(xv.shape()) + " incompatible with weight " + shape_str(wv.shape()); });
  require(bv.size() == wv.dim(0), [&] { return "linear: bias length " + std::to_string(bv.size()) + " != out features"; });
  return x.tape->record("linear", detail::affine_nt(xv, wv, &bv), {x, w, bias}, [x, w, bias](Tape& t, const Tensor& g, const Tensor&) {
    detail::affine_nt_backward(t, x, w, &bias, g);
  });
}

/// Row-wise layer normalization with learned scale and shift.
inline Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  require(gamma.value().size() == n && beta.value().size() == n, [&] { return
          "layer_norm: scale/shift length must equal row width " + std::to_string(n); });
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<float> inv_std(m);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = xv.row(i);
    double mean = 0.0;
    for (float v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = static_cast<float>(inv);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (r[j] - mean) * inv;
      xhat[i * n + j] = static_cast<float>(h);
      out[i * n + j] = static_cast<float>(h * gv[j] + bv[j]);
    }
  }
  return x.tape->record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& gv = t.value(gamma.id);
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          std::vector<double> dg(n, 0.0), db(n, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              dg[j] += static_cast<double>(g[i * n + j]) * xhat[i * n + j];
              db[j] += g[i * n + j];
            }
          if (t.requires_grad(gamma)) {
            Tensor& d = t.grad_buffer(gamma.id);
            for (std::size_t j = 0; j < n; ++j) d[j] += static_cast<float>(dg[j]);
          }
          if (t.requires_grad(beta)) {
            Tensor& d = t.grad_buffer(beta.id);
            for (std::size_t j = 0; j < n; ++j) d[j] += static_cast<float>(db[j]);
          }
        }
        if (!t.requires_grad(x)) return;
        Tensor& dx = t.grad_buffer(x.id);
        std::vector<double> dh(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dh[j] = static_cast<double>(g[i * n + j]) * gv[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * xhat[i * n + j];
          }
          mean_dh /= static_cast<double>(n);
          mean_dh_h /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j)
            dx[i * n + j] += static_cast<float>(inv_std[i] * (dh[j] - mean_dh - xhat[i * n + j] * mean_dh_h));
        }
      });
}

/// Row-wise softmax with max subtraction.
inline Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = xv.row(i);
    const float mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(static_cast<double>(r[j]) - mx);
      out[i * n + j] = static_cast<float>(e);
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<float>(out[i * n + j] / z);
  }
  return x.tape->record("softmax", std::move(out), {x}, [x, m, n](Tape& t, const Tensor& g, const Tensor& yv) {
    if (!t.requires_grad(x)) return;
    Tensor& dx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(g[i * n + j]) * yv[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        dx[i * n + j] += static_cast<float>(yv[i * n + j] * (g[i * n + j] - s));
    }
  });
}

/// Columns [start, start+len) of a 2-D tensor.
inline Var slice_cols(Var x, std::size_t start, std::size_t len) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  require(len > 0 && start + len <= n, "slice_cols: range out of bounds");
  Tensor out({m, len});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = xv[i * n + start + j];
  return x.tape->record("slice_cols", std::move(out), {x}, [x, start, len, m, n](Tape& t, const Tensor& g, const Tensor&) {
    if (!t.requires_grad(x)) return;
    Tensor& dx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) dx[i * n + start + j] += g[i * len + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts.front().value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(p.value().rows() == m, "concat_cols: row count mismatch");
    total += p.value().cols();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    const std::size_t c = pv.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&pv[i * c], c, &out[i * total + off]);
    off += c;
  }
  return parts.front().tape->record("concat_cols", std::move(out), std::span<const Var>(parts),
                                    [parts, m, total](Tape& t, const Tensor& g, const Tensor&) {
                                      std::size_t off = 0;
                                      for (const Var& p : parts) {
                                        const std::size_t c = t.value(p.id).cols();
                                        if (t.requires_grad(p)) {
                                          Tensor& d = t.grad_buffer(p.id);
                                          for (std::size_t i = 0; i < m; ++i)
                                            for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[i * total + off + j];
                                        }
                                        off += c;
                                      }
                                    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t n = parts.front().value().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    require(p.value().cols() == n, "concat_rows: column count mismatch");
    m += p.value().rows();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.size();
  }
  return parts.front().tape->record("concat_rows", std::move(out), std::span<const Var>(parts),
                                    [parts](Tape& t, const Tensor& g, const Tensor&) {
                                      std::size_t off = 0;
                                      for (const Var& p : parts) {
                                        const std::size_t sz = t.value(p.id).size();
                                        if (t.requires_grad(p)) {
                                          Tensor& d = t.grad_buffer(p.id);
                                          for (std::size_t i = 0; i < sz; ++i) d[i] += g[off + i];
                                        }
                                        off += sz;
                                      }
                                    });
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
    detail::accumulate(t, x, g);
  });
}

/// Row `index` of an embedding table, as a (1 x d) tensor.
inline Var gather_row(Var table, std::size_t index) {
  const Tensor& tv = table.value();
  require(tv.rank() == 2, "gather_row: table must be 2-D");
  require(index < tv.dim(0), [&] { return "gather_row: index " + std::to_string(index) + " >= table rows " + std::to_string(tv.dim(0)); });
  const std::size_t d = tv.dim(1);
  Tensor out({1, d});
  std::copy_n(&tv[index * d], d, out.data().begin());
  return table.tape->record("embedding_gather", std::move(out), {table},
                            [table, index, d](Tape& t, const Tensor& g, const Tensor&) {
                              if (!t.requires_grad(table)) return;
                              Tensor& dt = t.grad_buffer(table.id);
                              for (std::size_t j = 0; j < d; ++j) dt[index * d + j] += g[j];
                            });
}

/// Binary cross-entropy on a single logit, computed as softplus(z) - y*z.
inline Var sigmoid_bce(Var logit, float label) {
  require(logit.value().size() == 1, "sigmoid_bce: expected a single logit");
  const double z = logit.value()[0];
  const double loss = std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
  return logit.tape->record("sigmoid_cross_entropy", Tensor({1}, {static_cast<float>(loss)}), {logit},
                            [logit, z, label](Tape& t, const Tensor& g, const Tensor&) {
                              if (!t.requires_grad(logit)) return;
                              const double p = 1.0 / (1.0 + std::exp(-z));
                              t.grad_buffer(logit.id)[0] += static_cast<float>(g[0] * (p - label));
                            });
}

}  // namespace ad
}  // namespace dptab
