#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dptab/error.hpp"

namespace dptab {

/// TabTransformer architecture. Defaults are the evaluated configuration:
/// 32-dim embeddings, 4 blocks, 8 heads, a 5 x 72 MLP.
struct ModelConfig {
  std::size_t embed_dim = 32;
  std::size_t n_blocks = 4;
  std::size_t n_heads = 8;
  std::size_t ffn_hidden = 128;
  std::size_t mlp_layers = 5;
  std::size_t mlp_units = 72;
  std::vector<std::size_t> vocab_sizes;
  std::size_t n_continuous = 0;

  std::size_t n_categorical() const noexcept { return vocab_sizes.size(); }
  std::size_t mlp_input_dim() const noexcept { return n_categorical() * embed_dim + n_continuous; }

  void validate() const {
    if (embed_dim == 0 || n_heads == 0 || ffn_hidden == 0 || mlp_layers == 0 || mlp_units == 0)
      throw ConfigError("model dimensions must be positive");
    if (embed_dim % n_heads != 0)
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    if (mlp_input_dim() == 0) throw ConfigError("model has no input features");
    for (std::size_t v : vocab_sizes)
      if (v == 0) throw ConfigError("vocabulary sizes must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"embed_dim", c.embed_dim},     {"n_blocks", c.n_blocks},     {"n_heads", c.n_heads},
                     {"ffn_hidden", c.ffn_hidden},   {"mlp_layers", c.mlp_layers}, {"mlp_units", c.mlp_units},
                     {"vocab_sizes", c.vocab_sizes}, {"n_continuous", c.n_continuous}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("n_blocks").get_to(c.n_blocks);
  j.at("n_heads").get_to(c.n_heads);
  j.at("ffn_hidden").get_to(c.ffn_hidden);
  j.at("mlp_layers").get_to(c.mlp_layers);
  j.at("mlp_units").get_to(c.mlp_units);
  j.at("vocab_sizes").get_to(c.vocab_sizes);
  j.at("n_continuous").get_to(c.n_continuous);
}

enum class PeftVariant { kFull, kScratch, kLora, kAdapter, kDeep, kShallow, kZeroShot };

inline constexpr std::array<PeftVariant, 7> kAllVariants = {PeftVariant::kFull,    PeftVariant::kScratch,
                                                            PeftVariant::kLora,    PeftVariant::kAdapter,
                                                            PeftVariant::kDeep,    PeftVariant::kShallow,
                                                            PeftVariant::kZeroShot};

inline std::string_view to_string(PeftVariant v) {
  switch (v) {
    case PeftVariant::kFull: return "full";
    case PeftVariant::kScratch: return "scratch";
    case PeftVariant::kLora: return "lora";
    case PeftVariant::kAdapter: return "adapter";
    case PeftVariant::kDeep: return "deep";
    case PeftVariant::kShallow: return "shallow";
    case PeftVariant::kZeroShot: return "zero_shot";
  }
  return "?";
}

inline PeftVariant parse_variant(std::string_view s) {
  for (PeftVariant v : kAllVariants)
    if (to_string(v) == s) return v;
  throw ConfigError("unknown fine-tuning method '" + std::string(s) +
                    "' (expected full, scratch, lora, adapter, deep, shallow or zero_shot)");
}

/// Fine-tuning variant and its hyperparameters.
struct PeftConfig {
  PeftVariant variant = PeftVariant::kFull;
  std::size_t lora_rank = 1;
  double lora_alpha = 1.0;  // scaling is lora_alpha / lora_rank
  std::size_t adapter_bottleneck = 4;
  std::size_t tuned_units = 8;

  void validate(const ModelConfig& m) const {
    if (variant == PeftVariant::kLora &&
        (lora_rank == 0 || lora_rank > std::min(m.embed_dim, m.ffn_hidden)))
      throw ConfigError("lora_rank must be in [1, min(embed_dim, ffn_hidden)], got " + std::to_string(lora_rank));
    if (variant == PeftVariant::kAdapter && (adapter_bottleneck == 0 || adapter_bottleneck > m.embed_dim))
      throw ConfigError("adapter_bottleneck must be in [1, embed_dim], got " + std::to_string(adapter_bottleneck));
    if ((variant == PeftVariant::kDeep || variant == PeftVariant::kShallow) &&
        (tuned_units == 0 || tuned_units > m.mlp_units))
      throw ConfigError("tuned_units must be in [1, mlp_units], got " + std::to_string(tuned_units));
  }

  friend bool operator==(const PeftConfig&, const PeftConfig&) = default;
};

inline void to_json(nlohmann::json& j, const PeftConfig& c) {
  j = nlohmann::json{{"variant", std::string(to_string(c.variant))},
                     {"lora_rank", c.lora_rank},
                     {"lora_alpha", c.lora_alpha},
                     {"adapter_bottleneck", c.adapter_bottleneck},
                     {"tuned_units", c.tuned_units}};
}

inline void from_json(const nlohmann::json& j, PeftConfig& c) {
  c.variant = parse_variant(j.at("variant").get<std::string>());
  j.at("lora_rank").get_to(c.lora_rank);
  j.at("lora_alpha").get_to(c.lora_alpha);
  j.at("adapter_bottleneck").get_to(c.adapter_bottleneck);
  j.at("tuned_units").get_to(c.tuned_units);
}

}  // namespace dptab
