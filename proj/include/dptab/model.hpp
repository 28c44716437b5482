#pragma once

// TabTransformer: per-column embeddings, N post-norm transformer blocks, and
// an MLP over the flattened contextual embeddings concatenated with
// layer-normed continuous features. The head emits one logit.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dptab/autodiff.hpp"
#include "dptab/config.hpp"
#include "dptab/data.hpp"
#include "dptab/error.hpp"
#include "dptab/rng.hpp"
#include "dptab/tensor.hpp"

namespace dptab {

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
  // When set, only the first `tuned_rows` rows (output units) are trainable.
  std::optional<std::size_t> tuned_rows;

  std::size_t row_width() const { return value.size() / value.dim(0); }
  std::size_t trainable_count() const {
    if (!trainable) return 0;
    return tuned_rows ? *tuned_rows * row_width() : value.size();
  }
  // Trainable entries always form a prefix of the row-major data.
  std::size_t trainable_prefix() const { return trainable_count(); }
};

struct LinearRef {
  std::size_t weight = 0;
  std::size_t bias = 0;
};

struct LoraRef {
  std::size_t a = 0;
  std::size_t b = 0;
};

struct AdapterRef {
  std::size_t ln_gamma = 0, ln_beta = 0;
  LinearRef down, up;
};

struct BlockLayout {
  LinearRef q, k, v, o;
  std::size_t ln1_gamma = 0, ln1_beta = 0, ln2_gamma = 0, ln2_beta = 0;
  LinearRef ffn1, ffn2;
  std::optional<LoraRef> lora1, lora2;
  std::optional<AdapterRef> adapter;
};

struct ModelLayout {
  std::vector<std::size_t> embed;
  std::size_t column_id = 0;
  std::vector<BlockLayout> blocks;
  std::size_t cont_gamma = 0, cont_beta = 0;
  std::vector<LinearRef> mlp;
  LinearRef head;
};

struct ParameterCount {
  std::size_t total = 0;
  std::size_t trainable = 0;
  friend bool operator==(const ParameterCount&, const ParameterCount&) = default;
};

class Model {
 public:
  explicit Model(ModelConfig config) : config_(std::move(config)) { config_.validate(); }

  const ModelConfig& config() const noexcept { return config_; }
  const PeftConfig& peft() const noexcept { return peft_; }
  PeftConfig& peft() noexcept { return peft_; }
  bool lora_merged() const noexcept { return lora_merged_; }
  void set_lora_merged(bool merged) noexcept { lora_merged_ = merged; }

  std::span<Parameter> parameters() noexcept { return params_; }
  std::span<const Parameter> parameters() const noexcept { return params_; }

  const Parameter* find(std::string_view name) const {
    const auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter* find(std::string_view name) {
    const auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter& at(std::string_view name) const {
    const Parameter* p = find(name);
    if (!p) throw ContractViolation("no parameter named " + std::string(name));
    return *p;
  }
  Parameter& at(std::string_view name) {
    Parameter* p = find(name);
    if (!p) throw ContractViolation("no parameter named " + std::string(name));
    return *p;
  }
  std::size_t index_of(std::string_view name) const {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ContractViolation("no parameter named " + std::string(name));
    return it->second;
  }

  void add_parameter(Parameter p) {
    if (index_.contains(p.name)) throw ContractViolation("duplicate parameter name " + p.name);
    index_.emplace(p.name, params_.size());
    params_.push_back(std::move(p));
    layout_.reset();
  }

  void remove_parameter(std::string_view name) {
    const std::size_t i = index_of(name);
    params_.erase(params_.begin() + static_cast<std::ptrdiff_t>(i));
    index_.clear();
    for (std::size_t j = 0; j < params_.size(); ++j) index_.emplace(params_[j].name, j);
    layout_.reset();
  }

  const ModelLayout& layout() const {
    if (!layout_) layout_ = build_layout();
    return *layout_;
  }

 private:
  LinearRef linear_ref(const std::string& prefix, const char* w = "weight", const char* b = "bias") const {
    return {index_of(prefix + "." + w), index_of(prefix + "." + b)};
  }

  ModelLayout build_layout() const {
    ModelLayout l;
    const ModelConfig& c = config_;
    for (std::size_t i = 0; i < c.n_categorical(); ++i) l.embed.push_back(index_of("embed." + std::to_string(i)));
    if (c.n_categorical() > 0) l.column_id = index_of("embed.column_id");
    for (std::size_t b = 0; b < c.n_blocks && c.n_categorical() > 0; ++b) {
      const std::string p = "block." + std::to_string(b);
      BlockLayout bl;
      bl.q = linear_ref(p + ".attn", "wq", "bq");
      bl.k = linear_ref(p + ".attn", "wk", "bk");
      bl.v = linear_ref(p + ".attn", "wv", "bv");
      bl.o = linear_ref(p + ".attn", "wo", "bo");
      bl.ln1_gamma = index_of(p + ".ln1.gamma");
      bl.ln1_beta = index_of(p + ".ln1.beta");
      bl.ffn1 = linear_ref(p + ".ffn", "w1", "b1");
      bl.ffn2 = linear_ref(p + ".ffn", "w2", "b2");
      bl.ln2_gamma = index_of(p + ".ln2.gamma");
      bl.ln2_beta = index_of(p + ".ln2.beta");
      if (find(p + ".ffn.w1.lora_a")) bl.lora1 = LoraRef{index_of(p + ".ffn.w1.lora_a"), index_of(p + ".ffn.w1.lora_b")};
      if (find(p + ".ffn.w2.lora_a")) bl.lora2 = LoraRef{index_of(p + ".ffn.w2.lora_a"), index_of(p + ".ffn.w2.lora_b")};
      if (find(p + ".adapter.ln.gamma")) {
        AdapterRef a;
        a.ln_gamma = index_of(p + ".adapter.ln.gamma");
        a.ln_beta = index_of(p + ".adapter.ln.beta");
        a.down = linear_ref(p + ".adapter.down");
        a.up = linear_ref(p + ".adapter.up");
        bl.adapter = a;
      }
      l.blocks.push_back(bl);
    }
    if (c.n_continuous > 0) {
      l.cont_gamma = index_of("cont_norm.gamma");
      l.cont_beta = index_of("cont_norm.beta");
    }
    for (std::size_t i = 0; i < c.mlp_layers; ++i) l.mlp.push_back(linear_ref("mlp." + std::to_string(i)));
    l.head = linear_ref("head");
    return l;
  }

  ModelConfig config_;
  PeftConfig peft_;
  bool lora_merged_ = false;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  mutable std::optional<ModelLayout> layout_;
};

namespace detail {

inline Tensor uniform_tensor(Shape shape, double bound, std::uint64_t key) {
  Tensor t(std::move(shape));
  const CounterRng rng(key);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>((2.0 * rng.uniform(i) - 1.0) * bound);
  return t;
}

inline Tensor normal_tensor(Shape shape, double stddev, std::uint64_t key) {
  Tensor t(std::move(shape));
  const CounterRng rng(key);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.gaussian(i) * stddev);
  return t;
}

inline std::uint64_t param_key(std::uint64_t seed, std::string_view name) { return mix(seed, fnv1a(name)); }

}  // namespace detail

/// Adds `prefix.weight` (out x in), U(-1/sqrt(in), 1/sqrt(in)), and a zero `prefix.bias`.
inline void add_linear(Model& m, const std::string& weight_name, const std::string& bias_name, std::size_t in,
                       std::size_t out, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  m.add_parameter({weight_name, detail::uniform_tensor({out, in}, bound, detail::param_key(seed, weight_name)), true, std::nullopt});
  m.add_parameter({bias_name, Tensor({out}), true, std::nullopt});
}

inline void add_layer_norm(Model& m, const std::string& prefix, std::size_t width) {
  m.add_parameter({prefix + ".gamma", Tensor({width}, 1.0f), true, std::nullopt});
  m.add_parameter({prefix + ".beta", Tensor({width}, 0.0f), true, std::nullopt});
}

inline constexpr double kEmbeddingInitStd = 0.1;  // N(0, 0.01) as a variance

/// Fresh model; every tensor is a pure function of (config, seed, parameter name).
inline Model init_model(const ModelConfig& config, std::uint64_t seed) {
  Model m(config);
  const std::size_t d = config.embed_dim;
  const std::size_t nc = config.n_categorical();
  for (std::size_t i = 0; i < nc; ++i) {
    const std::string name = "embed." + std::to_string(i);
    m.add_parameter({name, detail::normal_tensor({config.vocab_sizes[i], d}, kEmbeddingInitStd, detail::param_key(seed, name)), true, std::nullopt});
  }
  if (nc > 0) {
    m.add_parameter({"embed.column_id", detail::normal_tensor({nc, d}, kEmbeddingInitStd, detail::param_key(seed, "embed.column_id")), true, std::nullopt});
    for (std::size_t b = 0; b < config.n_blocks; ++b) {
      const std::string p = "block." + std::to_string(b);
      for (const char* proj : {"q", "k", "v", "o"})
        add_linear(m, p + ".attn.w" + proj, p + ".attn.b" + proj, d, d, seed);
      add_layer_norm(m, p + ".ln1", d);
      add_linear(m, p + ".ffn.w1", p + ".ffn.b1", d, config.ffn_hidden, seed);
      add_linear(m, p + ".ffn.w2", p + ".ffn.b2", config.ffn_hidden, d, seed);
      add_layer_norm(m, p + ".ln2", d);
    }
  }
  if (config.n_continuous > 0) add_layer_norm(m, "cont_norm", config.n_continuous);
  std::size_t in = config.mlp_input_dim();
  for (std::size_t i = 0; i < config.mlp_layers; ++i) {
    const std::string p = "mlp." + std::to_string(i);
    add_linear(m, p + ".weight", p + ".bias", in, config.mlp_units, seed);
    in = config.mlp_units;
  }
  add_linear(m, "head.weight", "head.bias", in, 1, seed);
  return m;
}

inline ParameterCount count_parameters(const Model& m) {
  ParameterCount c;
  for (const Parameter& p : m.parameters()) {
    c.total += p.value.size();
    c.trainable += p.trainable_count();
  }
  return c;
}

/// One tape leaf per model parameter, in parameter order. Leaves require a
/// gradient only when `with_grad` is set and the parameter is trainable.
inline std::vector<Var> bind_parameters(Tape& tape, const Model& m, bool with_grad) {
  std::vector<Var> leaves;
  leaves.reserve(m.parameters().size());
  for (const Parameter& p : m.parameters()) leaves.push_back(tape.leaf(p.value, with_grad && p.trainable));
  return leaves;
}

namespace detail {

inline Var apply_linear(Var x, std::span<const Var> p, LinearRef r) { return ad::linear(x, p[r.weight], p[r.bias]); }

// Linear layer with an optional low-rank update: x W^T + b + s * (x A^T) B^T.
inline Var apply_linear_lora(Var x, std::span<const Var> p, LinearRef r, const std::optional<LoraRef>& lora,
                             float scaling) {
  Var y = apply_linear(x, p, r);
  if (!lora) return y;
  Var low = ad::matmul_nt(ad::matmul_nt(x, p[lora->a]), p[lora->b]);
  return ad::add(y, ad::scale(low, scaling));
}

inline Var attention(Var x, std::span<const Var> p, const BlockLayout& bl, std::size_t n_heads) {
  const std::size_t d = x.value().cols();
  const std::size_t hd = d / n_heads;
  Var q = apply_linear(x, p, bl.q);
  Var k = apply_linear(x, p, bl.k);
  Var v = apply_linear(x, p, bl.v);
  const float inv_sqrt = static_cast<float>(1.0 / std::sqrt(static_cast<double>(hd)));
  std::vector<Var> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var qh = ad::slice_cols(q, h * hd, hd);
    Var kh = ad::slice_cols(k, h * hd, hd);
    Var vh = ad::slice_cols(v, h * hd, hd);
    Var weights = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(ad::matmul(weights, vh));
  }
  return apply_linear(ad::concat_cols(heads), p, bl.o);
}

}  // namespace detail

/// Logit (1 x 1) for one example. `leaves` comes from bind_parameters().
inline Var forward_example(Tape& tape, const Model& m, std::span<const Var> leaves, std::span<const std::int32_t> cat,
                           std::span<const float> cont) {
  const ModelConfig& c = m.config();
  const ModelLayout& l = m.layout();
  require(cat.size() == c.n_categorical() && cont.size() == c.n_continuous,
          "forward: example does not match the model's feature counts");
  std::vector<Var> features;
  if (c.n_categorical() > 0) {
    std::vector<Var> tokens;
    tokens.reserve(cat.size());
    for (std::size_t i = 0; i < cat.size(); ++i) {
      if (cat[i] < 0 || static_cast<std::size_t>(cat[i]) >= c.vocab_sizes[i])
        throw DataError("out-of-vocabulary index " + std::to_string(cat[i]) + " in categorical column " +
                        std::to_string(i) + " (vocabulary size " + std::to_string(c.vocab_sizes[i]) + ")");
      tokens.push_back(ad::gather_row(leaves[l.embed[i]], static_cast<std::size_t>(cat[i])));
    }
    Var x = ad::add(ad::concat_rows(tokens), leaves[l.column_id]);
    const float lora_scaling = static_cast<float>(m.peft().lora_alpha / static_cast<double>(m.peft().lora_rank));
    for (const BlockLayout& bl : l.blocks) {
      x = ad::layer_norm(ad::add(x, detail::attention(x, leaves, bl, c.n_heads)), leaves[bl.ln1_gamma],
                         leaves[bl.ln1_beta]);
      Var h = ad::relu(detail::apply_linear_lora(x, leaves, bl.ffn1, bl.lora1, lora_scaling));
      Var f = detail::apply_linear_lora(h, leaves, bl.ffn2, bl.lora2, lora_scaling);
      if (bl.adapter) {
        const AdapterRef& a = *bl.adapter;
        Var z = ad::layer_norm(f, leaves[a.ln_gamma], leaves[a.ln_beta]);
        z = detail::apply_linear(ad::relu(detail::apply_linear(z, leaves, a.down)), leaves, a.up);
        f = ad::add(f, z);
      }
      x = ad::layer_norm(ad::add(x, f), leaves[bl.ln2_gamma], leaves[bl.ln2_beta]);
    }
    features.push_back(ad::reshape(x, {1, x.value().size()}));
  }
  if (c.n_continuous > 0) {
    Var xc = tape.constant(Tensor({1, cont.size()}, std::vector<float>(cont.begin(), cont.end())));
    features.push_back(ad::layer_norm(xc, leaves[l.cont_gamma], leaves[l.cont_beta]));
  }
  Var h = features.size() == 1 ? features.front() : ad::concat_cols(features);
  for (const LinearRef& r : l.mlp) h = ad::relu(detail::apply_linear(h, leaves, r));
  return detail::apply_linear(h, leaves, l.head);
}

/// Logits for every row of `batch`. Rows are evaluated independently.
inline std::vector<float> model_forward(const Model& m, const TabularDataset& batch) {
  std::vector<float> logits;
  logits.reserve(batch.rows());
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    Tape tape;
    const auto leaves = bind_parameters(tape, m, false);
    logits.push_back(forward_example(tape, m, leaves, batch.cat_row(i), batch.cont_row(i)).value()[0]);
  }
  return logits;
}

/// Fraction of rows whose thresholded logit (> 0) matches the label.
inline double accuracy(const Model& m, const TabularDataset& data) {
  if (data.empty()) return 0.0;
  const auto logits = model_forward(m, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) correct += (logits[i] > 0.0f) == (data.labels[i] > 0.5f);
  return static_cast<double>(correct) / static_cast<double>(data.rows());
}

/// Model configuration matching a dataset schema.
inline ModelConfig model_config_for(const DatasetSchema& schema, ModelConfig base = {}) {
  base.vocab_sizes = schema.vocab_sizes();
  base.n_continuous = schema.continuous.size();
  return base;
}

}  // namespace dptab
