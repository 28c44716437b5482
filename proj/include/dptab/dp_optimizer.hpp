#pragma once

// DP-SGD: per-example gradients, per-example clipping to norm C, one Gaussian
// draw of scale C * sigma added to the clipped sum, averaging by B, and an SGD
// update restricted to trainable coordinates.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "dptab/autodiff.hpp"
#include "dptab/data.hpp"
#include "dptab/error.hpp"
#include "dptab/model.hpp"
#include "dptab/rng.hpp"

namespace dptab {

struct DpConfig {
  double clip_norm = 2.0;          // +inf disables clipping
  double noise_multiplier = 0.0;   // 0 means non-private
  double sampling_rate = 1.0;      // B / N, used for accounting
  std::size_t batch_size = 64;
  double delta = 1e-5;
  double learning_rate = 0.05;
  std::size_t steps = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (!(noise_multiplier >= 0.0) || !std::isfinite(noise_multiplier))
      throw ConfigError("noise_multiplier must be finite and non-negative");
    if (!(sampling_rate > 0.0 && sampling_rate <= 1.0)) throw ConfigError("sampling_rate must be in (0, 1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must be in (0, 1)");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  }
};

struct GradientEntry {
  std::string name;
  std::size_t param_index = 0;
  Tensor grad;
  std::size_t active = 0;  // trainable prefix length; entries past it are zero
};

/// Gradients of the trainable parameters, in model parameter order.
struct GradientMap {
  std::vector<GradientEntry> entries;

  const Tensor* find(std::string_view name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e.grad;
    return nullptr;
  }

  // Global L2 norm over the concatenation of all active coordinates.
  double norm() const {
    double s = 0.0;
    for (const auto& e : entries) s += squared_norm(e.grad.data().first(e.active));
    return std::sqrt(s);
  }
};

struct GradientSample {
  GradientMap grads;
  double norm = 0.0;
};

inline GradientSample make_sample(GradientMap g) {
  const double n = g.norm();
  return {std::move(g), n};
}

/// Scales g by 1 / max(1, ||g|| / C); the result has norm min(||g||, C).
inline GradientSample clip(GradientSample g, double clip_norm) {
  require(clip_norm > 0.0, "clip: clip_norm must be positive");
  const double factor = 1.0 / std::max(1.0, g.norm / clip_norm);
  if (factor == 1.0) return g;
  for (auto& e : g.grads.entries)
    for (float& v : e.grad.data().first(e.active)) v = static_cast<float>(v * factor);
  g.norm = g.grads.norm();
  return g;
}

/// Per-example loss: builds the forward pass for example `index` on `tape`
/// from the parameter leaves and returns a scalar.
using ExampleLoss = std::function<Var(Tape& tape, std::span<const Var> params, std::size_t index)>;

namespace detail {

inline GradientMap example_gradient(std::span<const Parameter> params, const ExampleLoss& loss, std::size_t index,
                                    double* loss_value) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Parameter& p : params) leaves.push_back(tape.leaf(p.value, p.trainable));
  Var l = loss(tape, leaves, index);
  if (loss_value) *loss_value = l.value()[0];
  tape.backward(l);
  GradientMap out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = params[i];
    if (!p.trainable) continue;
    const Tensor* g = tape.grad(leaves[i].id);
    GradientEntry e{p.name, i, g ? *g : Tensor::zeros_like(p.value), p.trainable_prefix()};
    auto data = e.grad.data();
    std::fill(data.begin() + static_cast<std::ptrdiff_t>(e.active), data.end(), 0.0f);
    out.entries.push_back(std::move(e));
  }
  return out;
}

}  // namespace detail

/// One gradient map per example, each from its own backward pass. Examples
/// may be processed on `workers` threads; results are stored by index, so the
/// output does not depend on the worker count.
inline std::vector<GradientMap> per_example_grads(std::span<const Parameter> params, std::size_t batch_size,
                                                  const ExampleLoss& loss, std::size_t workers = 1,
                                                  std::vector<double>* losses = nullptr) {
  require(batch_size >= 1, "per_example_grads: empty batch");
  std::vector<GradientMap> out(batch_size);
  std::vector<double> values(batch_size);
  workers = std::max<std::size_t>(1, std::min(workers, batch_size));
  if (workers == 1) {
    for (std::size_t i = 0; i < batch_size; ++i) out[i] = detail::example_gradient(params, loss, i, &values[i]);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < batch_size; i += workers)
            out[i] = detail::example_gradient(params, loss, i, &values[i]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  if (losses) *losses = std::move(values);
  return out;
}

/// Per-example loss of a model on the rows of `batch`.
inline ExampleLoss model_example_loss(const Model& m, const TabularDataset& batch) {
  return [&m, &batch](Tape& tape, std::span<const Var> params, std::size_t i) {
    Var logit = forward_example(tape, m, params, batch.cat_row(i), batch.cont_row(i));
    return ad::sigmoid_bce(logit, batch.labels[i]);
  };
}

namespace detail {

// Running sum of clipped per-example gradients for one trainable parameter.
struct SumSlot {
  std::string name;
  std::size_t param_index = 0;
  Shape shape;
  std::size_t active = 0;
  std::vector<double> acc;
};

inline std::vector<SumSlot> sum_slots(std::span<const Parameter> params) {
  std::vector<SumSlot> slots;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = params[i];
    if (!p.trainable) continue;
    slots.push_back({p.name, i, p.value.shape(), p.trainable_prefix(), std::vector<double>(p.trainable_prefix(), 0.0)});
  }
  return slots;
}

// Clips one example's gradient (one pointer per slot, nullptr meaning zero)
// and adds it to the sums. Matches clip() followed by summation bit for bit.
inline void add_clipped(std::vector<SumSlot>& slots, std::span<const float* const> grads, double clip_norm) {
  double sq = 0.0;
  for (std::size_t k = 0; k < slots.size(); ++k)
    if (grads[k]) sq += squared_norm(std::span<const float>(grads[k], slots[k].active));
  const double factor = 1.0 / std::max(1.0, std::sqrt(sq) / clip_norm);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const float* g = grads[k];
    if (!g) continue;
    double* acc = slots[k].acc.data();
    const std::size_t n = slots[k].active;
    if (factor == 1.0) {
      for (std::size_t j = 0; j < n; ++j) acc[j] += g[j];
    } else {
      for (std::size_t j = 0; j < n; ++j) acc[j] += static_cast<float>(g[j] * factor);
    }
  }
}

inline GradientMap noisy_mean(const std::vector<SumSlot>& slots, std::size_t count, const DpConfig& cfg,
                              std::uint64_t step) {
  const double inv_b = 1.0 / static_cast<double>(count);
  const double noise_std = cfg.noise_multiplier > 0.0 ? cfg.clip_norm * cfg.noise_multiplier : 0.0;
  GradientMap out;
  out.entries.reserve(slots.size());
  for (const SumSlot& s : slots) {
    GradientEntry agg{s.name, s.param_index, Tensor(s.shape), s.active};
    const CounterRng rng(mix(mix(cfg.seed, step), fnv1a(s.name)));
    for (std::size_t j = 0; j < s.active; ++j) {
      const double noise = noise_std > 0.0 ? noise_std * rng.gaussian(j) : 0.0;
      agg.grad[j] = static_cast<float>((s.acc[j] + noise) * inv_b);
    }
    out.entries.push_back(std::move(agg));
  }
  return out;
}

}  // namespace detail

/// (1/B) * (sum of clipped gradients + N(0, C^2 sigma^2 I)). Noise for each
/// coordinate is keyed by (seed, step, parameter name, coordinate).
inline GradientMap noisy_aggregate(std::span<const GradientSample> grads, const DpConfig& cfg, std::uint64_t step) {
  require(!grads.empty(), "noisy_aggregate: no gradients");
  for (const auto& g : grads)
    require(g.grads.norm() <= cfg.clip_norm + 1e-6, [&] {
      return "noisy_aggregate: gradient norm " + std::to_string(g.grads.norm()) + " exceeds clip norm " +
             std::to_string(cfg.clip_norm);
    });
  std::vector<detail::SumSlot> slots;
  for (const GradientEntry& e : grads.front().grads.entries)
    slots.push_back({e.name, e.param_index, e.grad.shape(), e.active, std::vector<double>(e.active, 0.0)});
  for (const auto& g : grads) {
    require(g.grads.entries.size() == slots.size(), "noisy_aggregate: gradient layouts differ");
    for (std::size_t k = 0; k < slots.size(); ++k) {
      const GradientEntry& e = g.grads.entries[k];
      require(e.name == slots[k].name && e.active == slots[k].active, "noisy_aggregate: gradient layouts differ");
      for (std::size_t j = 0; j < e.active; ++j) slots[k].acc[j] += e.grad[j];
    }
  }
  return detail::noisy_mean(slots, grads.size(), cfg, step);
}

/// theta <- theta - lr * g on the active coordinates of each entry.
inline void apply_update(Model& m, const GradientMap& g, double learning_rate) {
  for (const auto& e : g.entries) {
    Parameter& p = m.parameters()[e.param_index];
    require(p.name == e.name, "apply_update: gradient does not match the model layout");
    auto data = p.value.data();
    for (std::size_t j = 0; j < e.active; ++j) data[j] = static_cast<float>(data[j] - learning_rate * e.grad[j]);
  }
}

struct StepResult {
  double loss = 0.0;  // mean per-example loss before the update
};

/// One DP-SGD step on `batch`. With one worker each example's gradient is
/// clipped and summed as soon as it is computed; with more workers all
/// gradients are computed first and summed in example order. Both paths give
/// identical results.
inline StepResult dp_sgd_step(Model& m, const TabularDataset& batch, const DpConfig& cfg, std::uint64_t step,
                              std::size_t workers = 1) {
  if (count_parameters(m).trainable == 0) throw ConfigError("dp_sgd_step: model has no trainable parameters");
  require(!batch.empty(), "dp_sgd_step: empty batch");
  require(cfg.clip_norm > 0.0, "dp_sgd_step: clip_norm must be positive");
  const auto params = m.parameters();
  const ExampleLoss loss = model_example_loss(m, batch);
  std::vector<detail::SumSlot> slots = detail::sum_slots(params);
  std::vector<const float*> ptrs(slots.size());
  StepResult r;
  if (workers <= 1) {
    for (std::size_t i = 0; i < batch.rows(); ++i) {
      Tape tape;
      std::vector<Var> leaves;
      leaves.reserve(params.size());
      for (const Parameter& p : params) leaves.push_back(tape.leaf(p.value, p.trainable));
      Var l = loss(tape, leaves, i);
      r.loss += l.value()[0];
      tape.backward(l);
      for (std::size_t k = 0; k < slots.size(); ++k) {
        const Tensor* g = tape.grad(leaves[slots[k].param_index].id);
        ptrs[k] = g ? g->data().data() : nullptr;
      }
      detail::add_clipped(slots, ptrs, cfg.clip_norm);
    }
  } else {
    std::vector<double> losses;
    const auto grads = per_example_grads(params, batch.rows(), loss, workers, &losses);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      r.loss += losses[i];
      for (std::size_t k = 0; k < slots.size(); ++k) ptrs[k] = grads[i].entries[k].grad.data().data();
      detail::add_clipped(slots, ptrs, cfg.clip_norm);
    }
  }
  apply_update(m, detail::noisy_mean(slots, batch.rows(), cfg, step), cfg.learning_rate);
  r.loss /= static_cast<double>(batch.rows());
  return r;
}

/// Seeded shuffle of [0, n) cut into full batches; a short tail is dropped.
inline std::vector<std::vector<std::size_t>> sample_batches(std::size_t n, std::size_t batch_size,
                                                            std::uint64_t epoch_seed) {
  require(n > 0, "sample_batches: empty dataset");
  require(batch_size > 0, "sample_batches: batch size must be positive");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  RngStream rng(derive_seed(epoch_seed, "shuffle"));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + batch_size <= n; start += batch_size)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                     perm.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  return out;
}

inline std::size_t steps_per_epoch(std::size_t rows, std::size_t batch_size) { return rows / batch_size; }

struct TrainLog {
  std::vector<double> epoch_loss;  // mean step loss per epoch
  std::size_t steps = 0;
};

/// Runs `epochs` passes of DP-SGD. Step indices run 0..steps-1 across epochs.
inline TrainLog dp_train(Model& m, const TabularDataset& data, const DpConfig& cfg, std::size_t epochs,
                         std::size_t workers = 1) {
  cfg.validate();
  if (data.rows() < cfg.batch_size)
    throw DataError("training set has " + std::to_string(data.rows()) + " rows, fewer than one batch of " +
                    std::to_string(cfg.batch_size));
  TrainLog log;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto batches = sample_batches(data.rows(), cfg.batch_size, mix(cfg.seed, epoch));
    double sum = 0.0;
    for (const auto& idx : batches) {
      sum += dp_sgd_step(m, data.subset(idx), cfg, log.steps, workers).loss;
      ++log.steps;
    }
    log.epoch_loss.push_back(sum / static_cast<double>(batches.size()));
  }
  return log;
}

}  // namespace dptab
