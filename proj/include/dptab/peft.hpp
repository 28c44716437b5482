#pragma once

// Parameter-efficient fine-tuning on a frozen backbone: LoRA on the
// feed-forward matrices, bottleneck adapters after the feed-forward layer,
// and unit-level (deep / shallow) tuning of the MLP.

#include <cstdint>
#include <string>

#include "dptab/config.hpp"
#include "dptab/error.hpp"
#include "dptab/model.hpp"

namespace dptab {

inline void freeze_backbone(Model& m) {
  for (Parameter& p : m.parameters()) {
    p.trainable = false;
    p.tuned_rows.reset();
  }
}

inline void unfreeze_all(Model& m) {
  for (Parameter& p : m.parameters()) {
    p.trainable = true;
    p.tuned_rows.reset();
  }
}

namespace detail {

inline void require_frozen(const Model& m, const char* op) {
  for (const Parameter& p : m.parameters())
    if (p.trainable)
      throw ContractViolation(std::string(op) + ": backbone must be frozen first (" + p.name + " is trainable)");
}

inline bool has_lora(const Model& m) { return m.find("block.0.ffn.w1.lora_a") != nullptr; }
inline bool has_adapter(const Model& m) { return m.find("block.0.adapter.ln.gamma") != nullptr; }

}  // namespace detail

/// Adds a trainable pair (A: r x in, B: out x r) to both feed-forward matrices
/// of every block. B starts at zero, so the model function is unchanged.
inline void apply_lora(Model& m, const PeftConfig& cfg, std::uint64_t seed) {
  PeftConfig c = cfg;
  c.variant = PeftVariant::kLora;
  c.validate(m.config());
  detail::require_frozen(m, "apply_lora");
  if (detail::has_lora(m)) throw ContractViolation("apply_lora: LoRA already applied");
  if (m.config().n_categorical() == 0 || m.config().n_blocks == 0)
    throw ConfigError("apply_lora: model has no transformer blocks");
  const std::size_t r = c.lora_rank;
  for (std::size_t b = 0; b < m.config().n_blocks; ++b) {
    for (const char* w : {"w1", "w2"}) {
      const std::string base = "block." + std::to_string(b) + ".ffn." + w;
      const Tensor& weight = m.at(base).value;
      const std::size_t out = weight.dim(0), in = weight.dim(1);
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      m.add_parameter({base + ".lora_a", detail::uniform_tensor({r, in}, bound, detail::param_key(seed, base + ".lora_a")),
                       true, std::nullopt});
      m.add_parameter({base + ".lora_b", Tensor({out, r}), true, std::nullopt});
    }
  }
  m.peft() = c;
  m.set_lora_merged(false);
}

/// Folds (alpha / r) * B * A into each base weight and removes the factors.
inline void merge_lora(Model& m) {
  if (!detail::has_lora(m)) {
    throw ContractViolation(m.lora_merged() ? "merge_lora: LoRA already merged" : "merge_lora: no LoRA factors present");
  }
  const double scaling = m.peft().lora_alpha / static_cast<double>(m.peft().lora_rank);
  for (std::size_t b = 0; b < m.config().n_blocks; ++b) {
    for (const char* w : {"w1", "w2"}) {
      const std::string base = "block." + std::to_string(b) + ".ffn." + w;
      const Tensor a = m.at(base + ".lora_a").value;
      const Tensor bm = m.at(base + ".lora_b").value;
      Tensor& weight = m.at(base).value;
      const std::size_t out = weight.dim(0), in = weight.dim(1), r = a.dim(0);
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) {
          double s = 0.0;
          for (std::size_t k = 0; k < r; ++k) s += static_cast<double>(bm[o * r + k]) * a[k * in + i];
          weight[o * in + i] = static_cast<float>(weight[o * in + i] + scaling * s);
        }
      m.remove_parameter(base + ".lora_a");
      m.remove_parameter(base + ".lora_b");
    }
  }
  m.set_lora_merged(true);
}

/// Inserts LN -> down(d->m) -> ReLU -> up(m->d) with a residual skip after each
/// block's feed-forward output. Projections start near zero (N(0, 1e-3)).
inline void apply_adapter(Model& m, const PeftConfig& cfg, std::uint64_t seed) {
  PeftConfig c = cfg;
  c.variant = PeftVariant::kAdapter;
  c.validate(m.config());
  detail::require_frozen(m, "apply_adapter");
  if (detail::has_adapter(m)) throw ContractViolation("apply_adapter: adapters already applied");
  if (m.config().n_categorical() == 0 || m.config().n_blocks == 0)
    throw ConfigError("apply_adapter: model has no transformer blocks");
  const std::size_t d = m.config().embed_dim, k = c.adapter_bottleneck;
  for (std::size_t b = 0; b < m.config().n_blocks; ++b) {
    const std::string p = "block." + std::to_string(b) + ".adapter";
    add_layer_norm(m, p + ".ln", d);
    m.add_parameter({p + ".down.weight", detail::normal_tensor({k, d}, 1e-3, detail::param_key(seed, p + ".down.weight")),
                     true, std::nullopt});
    m.add_parameter({p + ".down.bias", Tensor({k}), true, std::nullopt});
    m.add_parameter({p + ".up.weight", detail::normal_tensor({d, k}, 1e-3, detail::param_key(seed, p + ".up.weight")),
                     true, std::nullopt});
    m.add_parameter({p + ".up.bias", Tensor({d}), true, std::nullopt});
  }
  m.peft() = c;
}

enum class TuningDepth { kShallow, kDeep };

/// Unfreezes the incoming weights and bias of the first `tuned_units` units of
/// the first MLP layer (shallow) or of every MLP hidden layer (deep). The
/// output head stays frozen.
inline void apply_unit_tuning(Model& m, const PeftConfig& cfg, TuningDepth depth) {
  PeftConfig c = cfg;
  c.variant = depth == TuningDepth::kDeep ? PeftVariant::kDeep : PeftVariant::kShallow;
  c.validate(m.config());
  detail::require_frozen(m, "apply_unit_tuning");
  const std::size_t layers = depth == TuningDepth::kDeep ? m.config().mlp_layers : 1;
  for (std::size_t l = 0; l < layers; ++l) {
    for (const char* part : {".weight", ".bias"}) {
      Parameter& p = m.at("mlp." + std::to_string(l) + part);
      p.trainable = true;
      p.tuned_rows = c.tuned_units;
    }
  }
  m.peft() = c;
}

/// Prepares a pretrained model for the given fine-tuning method.
/// Full tuning and training from scratch leave everything trainable; zero-shot
/// freezes everything.
inline void apply_peft(Model& m, const PeftConfig& cfg, std::uint64_t seed) {
  switch (cfg.variant) {
    case PeftVariant::kFull:
    case PeftVariant::kScratch:
      unfreeze_all(m);
      m.peft() = cfg;
      return;
    case PeftVariant::kZeroShot:
      freeze_backbone(m);
      m.peft() = cfg;
      return;
    case PeftVariant::kLora:
      freeze_backbone(m);
      apply_lora(m, cfg, seed);
      return;
    case PeftVariant::kAdapter:
      freeze_backbone(m);
      apply_adapter(m, cfg, seed);
      return;
    case PeftVariant::kDeep:
      freeze_backbone(m);
      apply_unit_tuning(m, cfg, TuningDepth::kDeep);
      return;
    case PeftVariant::kShallow:
      freeze_backbone(m);
      apply_unit_tuning(m, cfg, TuningDepth::kShallow);
      return;
  }
}

/// Closed-form trainable-parameter counts, independent of any model instance.
inline std::size_t lora_trainable_count(const ModelConfig& m, std::size_t rank) {
  return m.n_blocks * rank * 2 * (m.embed_dim + m.ffn_hidden);
}

inline std::size_t adapter_trainable_count(const ModelConfig& m, std::size_t bottleneck) {
  const std::size_t d = m.embed_dim;
  return m.n_blocks * (2 * d + (d * bottleneck + bottleneck) + (bottleneck * d + d));
}

inline std::size_t shallow_trainable_count(const ModelConfig& m, std::size_t units) {
  return units * (m.mlp_input_dim() + 1);
}

inline std::size_t deep_trainable_count(const ModelConfig& m, std::size_t units) {
  return shallow_trainable_count(m, units) + (m.mlp_layers - 1) * units * (m.mlp_units + 1);
}

}  // namespace dptab
