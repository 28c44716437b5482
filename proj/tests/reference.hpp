#pragma once

// Double-precision re-implementation of the model forward pass, written
// independently of the autodiff engine. Tests use it as a finite-difference
// oracle for the float gradients.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dptab/model.hpp"

namespace ref {

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t rows, std::size_t cols) : r(rows), c(cols), v(rows * cols, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

using Params = std::map<std::string, Mat>;

inline Params from_model(const dptab::Model& m) {
  Params p;
  for (const auto& q : m.parameters()) {
    const std::size_t rows = q.value.rank() == 1 ? 1 : q.value.dim(0);
    Mat x(rows, q.value.size() / rows);
    for (std::size_t i = 0; i < q.value.size(); ++i) x.v[i] = q.value[i];
    p[q.name] = std::move(x);
  }
  return p;
}

// x (n x in), w (out x in), bias length out
inline Mat linear(const Mat& x, const Mat& w, const Mat* bias) {
  Mat y(x.r, w.r);
  for (std::size_t i = 0; i < x.r; ++i)
    for (std::size_t o = 0; o < w.r; ++o) {
      double s = bias ? bias->v[o] : 0.0;
      for (std::size_t k = 0; k < x.c; ++k) s += x(i, k) * w(o, k);
      y(i, o) = s;
    }
  return y;
}

inline Mat linear(const Params& p, const Mat& x, const std::string& w, const std::string& b) {
  return linear(x, p.at(w), &p.at(b));
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

// When set, relu appends the sign pattern of its inputs.
inline thread_local std::vector<char>* relu_trace = nullptr;

inline Mat relu(Mat a) {
  for (double& x : a.v) {
    if (relu_trace) relu_trace->push_back(x > 0.0);
    x = x > 0.0 ? x : 0.0;
  }
  return a;
}

inline Mat layer_norm(const Mat& x, const Mat& gamma, const Mat& beta) {
  const double eps = static_cast<double>(1e-5f);
  Mat y(x.r, x.c);
  for (std::size_t i = 0; i < x.r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) mean += x(i, j);
    mean /= static_cast<double>(x.c);
    double var = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(x.c);
    for (std::size_t j = 0; j < x.c; ++j) y(i, j) = (x(i, j) - mean) / std::sqrt(var + eps) * gamma.v[j] + beta.v[j];
  }
  return y;
}

inline Mat layer_norm(const Params& p, const Mat& x, const std::string& prefix) {
  return layer_norm(x, p.at(prefix + ".gamma"), p.at(prefix + ".beta"));
}

inline Mat softmax_rows(const Mat& x) {
  Mat y(x.r, x.c);
  for (std::size_t i = 0; i < x.r; ++i) {
    double mx = x(i, 0);
    for (std::size_t j = 1; j < x.c; ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) z += (y(i, j) = std::exp(x(i, j) - mx));
    for (std::size_t j = 0; j < x.c; ++j) y(i, j) /= z;
  }
  return y;
}

inline double bce(double z, double label) { return std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z))); }

inline Mat ffn_linear(const Params& p, const Mat& x, const std::string& base, const std::string& bias, double scaling) {
  Mat y = linear(p, x, base, bias);
  if (p.contains(base + ".lora_a")) {
    Mat low = linear(linear(x, p.at(base + ".lora_a"), nullptr), p.at(base + ".lora_b"), nullptr);
    for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += scaling * low.v[i];
  }
  return y;
}

inline double logit(const Params& p, const dptab::ModelConfig& c, double lora_scaling,
                    std::span<const std::int32_t> cat, std::span<const float> cont) {
  const std::size_t d = c.embed_dim, nc = c.n_categorical();
  std::vector<double> features;
  if (nc > 0) {
    Mat x(nc, d);
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t j = 0; j < d; ++j)
        x(i, j) = p.at("embed." + std::to_string(i))(static_cast<std::size_t>(cat[i]), j) + p.at("embed.column_id")(i, j);
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
      const std::string pre = "block." + std::to_string(b);
      const Mat q = linear(p, x, pre + ".attn.wq", pre + ".attn.bq");
      const Mat k = linear(p, x, pre + ".attn.wk", pre + ".attn.bk");
      const Mat v = linear(p, x, pre + ".attn.wv", pre + ".attn.bv");
      const std::size_t hd = d / c.n_heads;
      Mat heads(nc, d);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        Mat s(nc, nc);
        for (std::size_t i = 0; i < nc; ++i)
          for (std::size_t j = 0; j < nc; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < hd; ++t) acc += q(i, h * hd + t) * k(j, h * hd + t);
            s(i, j) = acc / std::sqrt(static_cast<double>(hd));
          }
        const Mat a = softmax_rows(s);
        for (std::size_t i = 0; i < nc; ++i)
          for (std::size_t t = 0; t < hd; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < nc; ++j) acc += a(i, j) * v(j, h * hd + t);
            heads(i, h * hd + t) = acc;
          }
      }
      x = layer_norm(p, add(x, linear(p, heads, pre + ".attn.wo", pre + ".attn.bo")), pre + ".ln1");
      const Mat hid = relu(ffn_linear(p, x, pre + ".ffn.w1", pre + ".ffn.b1", lora_scaling));
      Mat f = ffn_linear(p, hid, pre + ".ffn.w2", pre + ".ffn.b2", lora_scaling);
      if (p.contains(pre + ".adapter.ln.gamma")) {
        Mat z = layer_norm(p, f, pre + ".adapter.ln");
        z = linear(p, relu(linear(p, z, pre + ".adapter.down.weight", pre + ".adapter.down.bias")),
                   pre + ".adapter.up.weight", pre + ".adapter.up.bias");
        f = add(f, z);
      }
      x = layer_norm(p, add(x, f), pre + ".ln2");
    }
    features = x.v;
  }
  if (c.n_continuous > 0) {
    Mat xc(1, cont.size());
    for (std::size_t j = 0; j < cont.size(); ++j) xc.v[j] = cont[j];
    const Mat n = layer_norm(p, xc, "cont_norm");
    features.insert(features.end(), n.v.begin(), n.v.end());
  }
  Mat h(1, features.size());
  h.v = features;
  for (std::size_t l = 0; l < c.mlp_layers; ++l)
    h = relu(linear(p, h, "mlp." + std::to_string(l) + ".weight", "mlp." + std::to_string(l) + ".bias"));
  return linear(p, h, "head.weight", "head.bias").v[0];
}

inline double lora_scaling(const dptab::Model& m) {
  return m.peft().lora_alpha / static_cast<double>(m.peft().lora_rank);
}

inline double example_loss(const Params& p, const dptab::Model& m, const dptab::TabularDataset& data, std::size_t i) {
  return bce(logit(p, m.config(), lora_scaling(m), data.cat_row(i), data.cont_row(i)), data.labels[i]);
}

/// Largest relative error between float analytic gradients and double-precision
/// central differences over every trainable coordinate:
///   |a - f| / max(|a|, |f|, floor_ratio * max_k |f_k|)
/// The floor keeps coordinates whose exact gradient is zero (for example key
/// biases, which softmax ignores) from dividing float round-off by zero.
/// Coordinates whose +-h stencil changes any ReLU's active set straddle a kink
/// and are skipped.
struct FdReport {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  std::string worst;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

template <class GradFn>
FdReport finite_difference_check(const dptab::Model& m, const dptab::TabularDataset& data, std::size_t row,
                                 GradFn&& analytic, double h = 1e-3, double floor_ratio = 1e-4) {
  Params p = from_model(m);
  const std::vector<dptab::Tensor> g = analytic();
  struct Entry {
    std::string name;
    std::size_t j;
    double an, fd;
    bool smooth;
  };
  std::vector<char> base, trace;
  relu_trace = &base;
  example_loss(p, m, data, row);
  relu_trace = &trace;
  const auto traced_loss = [&] {
    trace.clear();
    const double l = example_loss(p, m, data, row);
    return std::make_pair(l, trace == base);
  };
  std::vector<Entry> entries;
  FdReport rep;
  const auto params = m.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& q = params[k];
    Mat& target = p.at(q.name);
    for (std::size_t j = 0; j < q.trainable_prefix(); ++j) {
      const double saved = target.v[j];
      target.v[j] = saved + h;
      const auto [up, up_smooth] = traced_loss();
      target.v[j] = saved - h;
      const auto [down, down_smooth] = traced_loss();
      target.v[j] = saved;
      entries.push_back({q.name, j, g[k][j], (up - down) / (2.0 * h), up_smooth && down_smooth});
      rep.max_abs_grad = std::max(rep.max_abs_grad, std::abs(entries.back().fd));
    }
  }
  relu_trace = nullptr;
  const double floor = floor_ratio * rep.max_abs_grad;
  for (const Entry& e : entries) {
    if (!e.smooth) {
      ++rep.skipped;
      continue;
    }
    const double rel = std::abs(e.fd - e.an) / std::max({std::abs(e.fd), std::abs(e.an), floor});
    ++rep.checked;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst = e.name + "[" + std::to_string(e.j) + "] analytic=" + std::to_string(e.an) + " fd=" + std::to_string(e.fd);
    }
  }
  return rep;
}

}  // namespace ref
