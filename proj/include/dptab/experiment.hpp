#pragma once

// End-to-end experiments: DP pretraining, PEFT fine-tuning under DP,
// evaluation, and the resumable (method, eps_p, eps_f, seed) grid with its
// CSV reports.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "dptab/accountant.hpp"
#include "dptab/checkpoint.hpp"
#include "dptab/config.hpp"
#include "dptab/config_file.hpp"
#include "dptab/data.hpp"
#include "dptab/dp_optimizer.hpp"
#include "dptab/error.hpp"
#include "dptab/model.hpp"
#include "dptab/peft.hpp"

namespace dptab {

inline const std::vector<double>& default_epsilon_grid() {
  static const std::vector<double> grid = {0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0};
  return grid;
}

inline constexpr const char* kOutputRootEnv = "DPTAB_OUTPUT_ROOT";

/// Training settings of one phase. An infinite epsilon trains without
/// clipping or noise.
struct PhaseConfig {
  double epsilon = 8.0;
  double delta = 1e-5;
  double clip_norm = 2.0;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  std::size_t epochs = 5;

  void validate(const char* phase) const {
    const std::string p(phase);
    if (!(epsilon > 0.0)) throw ConfigError(p + ".epsilon must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError(p + ".delta must be in (0, 1)");
    if (!(clip_norm > 0.0)) throw ConfigError(p + ".clip_norm must be positive");
    if (batch_size == 0) throw ConfigError(p + ".batch_size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError(p + ".learning_rate must be positive");
  }
};

struct DataConfig {
  std::string source = "synth";  // "synth" or "csv"
  std::string pretrain_csv;
  std::string finetune_csv;
  std::string column_map;
  std::size_t synth_pretrain_rows = 20000;
  std::size_t synth_finetune_rows = 5000;
  double synth_shift = 1.0;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;

  void validate() const {
    if (source != "synth" && source != "csv") throw ConfigError("data.source must be \"synth\" or \"csv\", got \"" + source + "\"");
    if (source == "csv" && (pretrain_csv.empty() || finetune_csv.empty()))
      throw ConfigError("data.pretrain_csv and data.finetune_csv are required when data.source = \"csv\"");
    if (!(synth_shift >= 0.0 && synth_shift <= 1.0)) throw ConfigError("data.synth_shift must be in [0, 1]");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("data.test_fraction must be in (0, 1)");
  }
};

struct GridConfig {
  std::vector<PeftVariant> methods = {PeftVariant::kFull,    PeftVariant::kLora,    PeftVariant::kAdapter,
                                      PeftVariant::kDeep,    PeftVariant::kShallow, PeftVariant::kZeroShot,
                                      PeftVariant::kScratch};
  std::vector<double> eps_p = default_epsilon_grid();
  std::vector<double> eps_f = default_epsilon_grid();
};

struct ExperimentConfig {
  ModelConfig model;
  PeftConfig peft;
  PhaseConfig pretrain;
  PhaseConfig finetune;
  DataConfig data;
  GridConfig grid;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string output_dir;
  std::size_t workers = 1;

  void validate() const {
    pretrain.validate("pretrain");
    finetune.validate("finetune");
    data.validate();
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (workers == 0) throw ConfigError("workers must be positive");
    for (double e : grid.eps_p)
      if (!(e > 0.0)) throw ConfigError("grid.eps_p values must be positive");
    for (double e : grid.eps_f)
      if (!(e > 0.0)) throw ConfigError("grid.eps_f values must be positive");
  }
};

// ---------------------------------------------------------------------------
// Config file mapping.

namespace detail {

class SectionReader {
 public:
  SectionReader(const nlohmann::json& root, std::string name) : name_(std::move(name)) {
    if (name_.empty()) {
      obj_ = &root;
    } else if (root.contains(name_)) {
      obj_ = &root.at(name_);
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    try {
      out = obj_->at(key).template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key " + path(key) + " has the wrong type");
    }
  }

  void get_real(const char* key, double& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    const auto& v = obj_->at(key);
    if (!v.is_number()) throw ConfigError("config key " + path(key) + " must be a number");
    out = v.get<double>();
  }

  void get_size(const char* key, std::size_t& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    const auto& v = obj_->at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
      throw ConfigError("config key " + path(key) + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }

  void get_reals(const char* key, std::vector<double>& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    const auto& v = obj_->at(key);
    if (v.is_string() && v.get<std::string>() == "default") {
      out = default_epsilon_grid();
      return;
    }
    if (!v.is_array()) throw ConfigError("config key " + path(key) + " must be an array of numbers or \"default\"");
    out.clear();
    for (const auto& x : v) {
      if (!x.is_number()) throw ConfigError("config key " + path(key) + " must contain only numbers");
      out.push_back(x.get<double>());
    }
  }

  void finish() const {
    if (!obj_) return;
    if (!obj_->is_object()) throw ConfigError("config section [" + name_ + "] is not a table");
    for (const auto& [k, v] : obj_->items()) {
      if (name_.empty() && v.is_object()) continue;  // sections are checked separately
      if (!seen_.count(k)) throw ConfigError("unknown config key " + path(k.c_str()));
    }
  }

 private:
  std::string path(const char* key) const { return name_.empty() ? std::string(key) : name_ + "." + key; }

  const nlohmann::json* obj_ = nullptr;
  std::string name_;
  std::set<std::string> seen_;
};

inline void read_phase(const nlohmann::json& root, const char* name, PhaseConfig& p) {
  SectionReader r(root, name);
  r.get_real("epsilon", p.epsilon);
  r.get_real("delta", p.delta);
  r.get_real("clip_norm", p.clip_norm);
  r.get_size("batch_size", p.batch_size);
  r.get_real("learning_rate", p.learning_rate);
  r.get_size("epochs", p.epochs);
  r.finish();
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& root) {
  if (!root.is_object()) throw ConfigError("config must be a table");
  static const std::set<std::string> sections = {"model", "peft", "pretrain", "finetune", "data", "grid"};
  for (const auto& [k, v] : root.items())
    if (v.is_object() && !sections.count(k)) throw ConfigError("unknown config section [" + k + "]");

  ExperimentConfig c;
  {
    detail::SectionReader r(root, "");
    r.get("seeds", c.seeds);
    r.get("output_dir", c.output_dir);
    r.get_size("workers", c.workers);
    r.finish();
  }
  {
    detail::SectionReader r(root, "model");
    r.get_size("embed_dim", c.model.embed_dim);
    r.get_size("n_blocks", c.model.n_blocks);
    r.get_size("n_heads", c.model.n_heads);
    r.get_size("ffn_hidden", c.model.ffn_hidden);
    r.get_size("mlp_layers", c.model.mlp_layers);
    r.get_size("mlp_units", c.model.mlp_units);
    r.finish();
  }
  {
    detail::SectionReader r(root, "peft");
    std::string method = std::string(to_string(c.peft.variant));
    r.get("method", method);
    c.peft.variant = parse_variant(method);
    r.get_size("lora_rank", c.peft.lora_rank);
    r.get_real("lora_alpha", c.peft.lora_alpha);
    r.get_size("adapter_bottleneck", c.peft.adapter_bottleneck);
    r.get_size("tuned_units", c.peft.tuned_units);
    r.finish();
  }
  detail::read_phase(root, "pretrain", c.pretrain);
  detail::read_phase(root, "finetune", c.finetune);
  {
    detail::SectionReader r(root, "data");
    r.get("source", c.data.source);
    r.get("pretrain_csv", c.data.pretrain_csv);
    r.get("finetune_csv", c.data.finetune_csv);
    r.get("column_map", c.data.column_map);
    r.get_size("synth_pretrain_rows", c.data.synth_pretrain_rows);
    r.get_size("synth_finetune_rows", c.data.synth_finetune_rows);
    r.get_real("synth_shift", c.data.synth_shift);
    r.get("seed", c.data.seed);
    r.get_real("test_fraction", c.data.test_fraction);
    r.get("split_seed", c.data.split_seed);
    r.finish();
  }
  {
    detail::SectionReader r(root, "grid");
    std::vector<std::string> methods;
    r.get("methods", methods);
    if (!methods.empty()) {
      c.grid.methods.clear();
      for (const auto& m : methods) c.grid.methods.push_back(parse_variant(m));
    }
    r.get_reals("eps_p", c.grid.eps_p);
    r.get_reals("eps_f", c.grid.eps_f);
    r.finish();
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_config_from_json(parse_config_file(path));
}

/// Output directory: explicit flag, then the environment, then the config,
/// then "dptab-runs".
inline std::filesystem::path resolve_output_root(const std::string& flag, const ExperimentConfig& cfg) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return "dptab-runs";
}

// ---------------------------------------------------------------------------
// Number formatting shared by file names and reports.

/// Shortest decimal form that parses back to the same double.
inline std::string format_real(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (std::isnan(x)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline double parse_real(std::string_view s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw DataError("cannot parse number '" + std::string(s) + "'");
  return v;
}

inline nlohmann::json real_to_json(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(format_real(x)); }

inline double real_from_json(const nlohmann::json& j) {
  return j.is_string() ? parse_real(j.get<std::string>()) : j.get<double>();
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << text;
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Data.

struct ExperimentData {
  DatasetSchema schema;
  TabularDataset pretrain;
  TabularDataset finetune_train;
  TabularDataset finetune_test;
  nlohmann::json summary;
};

inline ExperimentData prepare_data(const DataConfig& cfg) {
  cfg.validate();
  ExperimentData d;
  TabularDataset finetune;
  std::size_t dropped_p = 0, dropped_f = 0;
  if (cfg.source == "synth") {
    d.schema = synth_schema();
    d.pretrain = synth_generate(cfg.synth_pretrain_rows, 0.0, derive_seed(cfg.seed, "pretrain"));
    finetune = synth_generate(cfg.synth_finetune_rows, cfg.synth_shift, derive_seed(cfg.seed, "finetune"));
  } else {
    const ColumnMapping mapping = cfg.column_map.empty() ? ColumnMapping{} : load_column_mapping(cfg.column_map);
    LoadedTable p = load_csv(cfg.pretrain_csv, acs_income_schema(), mapping);
    if (p.data.empty()) throw DataError(cfg.pretrain_csv + ": no usable rows");
    LoadedTable f = load_csv(cfg.finetune_csv, p.schema, mapping);
    if (f.data.empty()) throw DataError(cfg.finetune_csv + ": no usable rows");
    d.schema = std::move(p.schema);
    d.pretrain = std::move(p.data);
    finetune = std::move(f.data);
    dropped_p = p.rows_dropped;
    dropped_f = f.rows_dropped;
  }
  auto [train, test] = split(finetune, cfg.test_fraction, cfg.split_seed);
  d.finetune_train = std::move(train);
  d.finetune_test = std::move(test);
  d.summary = {{"pretrain", dataset_summary(d.pretrain, d.schema, dropped_p)},
               {"finetune", dataset_summary(finetune, d.schema, dropped_f)},
               {"finetune_train_rows", d.finetune_train.rows()},
               {"finetune_test_rows", d.finetune_test.rows()}};
  return d;
}

// ---------------------------------------------------------------------------
// Phases.

/// Privacy parameters and outcome of one training phase.
struct PhaseReport {
  bool trained = false;
  double target_epsilon = 0.0;
  double delta = 0.0;
  double noise_multiplier = 0.0;
  double sampling_rate = 0.0;
  std::size_t steps = 0;
  double epsilon = 0.0;  // achieved; inf for non-private training
  double best_order = 0.0;
};

inline void to_json(nlohmann::json& j, const PhaseReport& r) {
  j = nlohmann::json{{"trained", r.trained},
                     {"target_epsilon", real_to_json(r.target_epsilon)},
                     {"delta", r.delta},
                     {"noise_multiplier", r.noise_multiplier},
                     {"sampling_rate", r.sampling_rate},
                     {"steps", r.steps},
                     {"epsilon", real_to_json(r.epsilon)},
                     {"best_order", r.best_order}};
}

inline void from_json(const nlohmann::json& j, PhaseReport& r) {
  j.at("trained").get_to(r.trained);
  r.target_epsilon = real_from_json(j.at("target_epsilon"));
  j.at("delta").get_to(r.delta);
  j.at("noise_multiplier").get_to(r.noise_multiplier);
  j.at("sampling_rate").get_to(r.sampling_rate);
  j.at("steps").get_to(r.steps);
  r.epsilon = real_from_json(j.at("epsilon"));
  j.at("best_order").get_to(r.best_order);
}

/// q = B / N, steps = epochs * floor(N / B), sigma calibrated to the target.
inline PhaseReport plan_phase(const PhaseConfig& p, double target_epsilon, std::size_t rows) {
  if (rows < p.batch_size)
    throw DataError("training set has " + std::to_string(rows) + " rows, fewer than one batch of " +
                    std::to_string(p.batch_size));
  PhaseReport r;
  r.trained = true;
  r.target_epsilon = target_epsilon;
  r.delta = p.delta;
  r.sampling_rate = static_cast<double>(p.batch_size) / static_cast<double>(rows);
  r.steps = p.epochs * steps_per_epoch(rows, p.batch_size);
  if (std::isinf(target_epsilon)) {
    r.epsilon = std::numeric_limits<double>::infinity();
    return r;
  }
  if (r.steps == 0) return r;
  r.noise_multiplier = calibrate_sigma(target_epsilon, p.delta, r.sampling_rate, r.steps);
  const DpGuarantee g = account(r.sampling_rate, r.noise_multiplier, r.steps, p.delta);
  r.epsilon = g.epsilon;
  r.best_order = g.order;
  return r;
}

inline DpConfig make_dp_config(const PhaseConfig& p, const PhaseReport& r, std::uint64_t seed) {
  DpConfig c;
  const bool private_run = std::isfinite(r.target_epsilon);
  c.clip_norm = private_run ? p.clip_norm : std::numeric_limits<double>::infinity();
  c.noise_multiplier = r.noise_multiplier;
  c.sampling_rate = r.sampling_rate;
  c.batch_size = p.batch_size;
  c.delta = p.delta;
  c.learning_rate = p.learning_rate;
  c.steps = r.steps;
  c.seed = seed;
  return c;
}

struct EvalResult {
  std::size_t correct = 0;
  std::size_t rows = 0;
  double accuracy = 0.0;
};

/// Thresholds each logit at 0 and compares it with the label.
inline EvalResult evaluate(const Model& m, const TabularDataset& data) {
  EvalResult r;
  r.rows = data.rows();
  const auto logits = model_forward(m, data);
  for (std::size_t i = 0; i < logits.size(); ++i) r.correct += (logits[i] > 0.0f) == (data.labels[i] > 0.5f);
  r.accuracy = r.rows ? static_cast<double>(r.correct) / static_cast<double>(r.rows) : 0.0;
  return r;
}

/// Accuracy of always predicting the training set's majority label on `test`.
inline double majority_accuracy(const TabularDataset& train, const TabularDataset& test) {
  if (test.empty()) return 0.0;
  const bool positive = train.positive_rate() > 0.5;
  const double rate = test.positive_rate();
  return positive ? rate : 1.0 - rate;
}

struct PretrainOutput {
  Model model;
  PhaseReport privacy;
  TrainLog log;
};

inline PretrainOutput run_pretrain(const ExperimentConfig& cfg, const ExperimentData& data, double eps_p,
                                   std::uint64_t seed) {
  const ModelConfig mc = model_config_for(data.schema, cfg.model);
  mc.validate();
  PretrainOutput out{init_model(mc, derive_seed(seed, "init")), {}, {}};
  out.privacy = plan_phase(cfg.pretrain, eps_p, data.pretrain.rows());
  out.log = dp_train(out.model, data.pretrain, make_dp_config(cfg.pretrain, out.privacy, derive_seed(seed, "pretrain")),
                     cfg.pretrain.epochs, cfg.workers);
  return out;
}

struct ResultRecord {
  std::string method;
  double eps_p = 0.0;  // 0 when no pretraining is involved
  double eps_f = 0.0;  // 0 when no fine-tuning is performed
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t test_rows = 0;
  std::size_t trainable = 0;
  std::size_t total = 0;
  PhaseReport pretrain;
  PhaseReport finetune;
  double wall_time_s = 0.0;
};

inline void to_json(nlohmann::json& j, const ResultRecord& r) {
  j = nlohmann::json{{"method", r.method},
                     {"eps_p", real_to_json(r.eps_p)},
                     {"eps_f", real_to_json(r.eps_f)},
                     {"seed", r.seed},
                     {"accuracy", r.accuracy},
                     {"correct", r.correct},
                     {"test_rows", r.test_rows},
                     {"trainable", r.trainable},
                     {"total", r.total},
                     {"pretrain", r.pretrain},
                     {"finetune", r.finetune},
                     {"wall_time_s", r.wall_time_s}};
}

inline void from_json(const nlohmann::json& j, ResultRecord& r) {
  j.at("method").get_to(r.method);
  r.eps_p = real_from_json(j.at("eps_p"));
  r.eps_f = real_from_json(j.at("eps_f"));
  j.at("seed").get_to(r.seed);
  j.at("accuracy").get_to(r.accuracy);
  j.at("correct").get_to(r.correct);
  j.at("test_rows").get_to(r.test_rows);
  j.at("trainable").get_to(r.trainable);
  j.at("total").get_to(r.total);
  j.at("pretrain").get_to(r.pretrain);
  j.at("finetune").get_to(r.finetune);
  j.at("wall_time_s").get_to(r.wall_time_s);
}

struct FinetuneOutput {
  Model model;
  ResultRecord record;
  TrainLog log;
};

/// Prepares `pretrained` for `method`, fine-tunes it with DP on the fine-tune
/// training split and evaluates on the test split. Training from scratch
/// ignores `pretrained`; zero-shot skips training.
inline FinetuneOutput run_finetune(const ExperimentConfig& cfg, const ExperimentData& data, const Model& pretrained,
                                   const PhaseReport& pretrain_report, double eps_p, PeftVariant method, double eps_f,
                                   std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  PeftConfig peft = cfg.peft;
  peft.variant = method;

  FinetuneOutput out{method == PeftVariant::kScratch ? init_model(pretrained.config(), derive_seed(seed, "scratch-init"))
                                                     : pretrained,
                     {}, {}};
  ResultRecord& r = out.record;
  r.method = std::string(to_string(method));
  r.seed = seed;
  r.eps_p = method == PeftVariant::kScratch ? 0.0 : eps_p;
  r.eps_f = method == PeftVariant::kZeroShot ? 0.0 : eps_f;
  if (method != PeftVariant::kScratch) r.pretrain = pretrain_report;

  apply_peft(out.model, peft, derive_seed(seed, "peft"));
  if (method != PeftVariant::kZeroShot) {
    r.finetune = plan_phase(cfg.finetune, eps_f, data.finetune_train.rows());
    out.log = dp_train(out.model, data.finetune_train,
                       make_dp_config(cfg.finetune, r.finetune, derive_seed(seed, "finetune")), cfg.finetune.epochs,
                       cfg.workers);
  }
  const ParameterCount counts = count_parameters(out.model);
  r.trainable = counts.trainable;
  r.total = counts.total;
  const EvalResult e = evaluate(out.model, data.finetune_test);
  r.accuracy = e.accuracy;
  r.correct = e.correct;
  r.test_rows = e.rows;
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------------------
// Grid.

struct GridCell {
  PeftVariant method = PeftVariant::kFull;
  double eps_p = 0.0;
  double eps_f = 0.0;
  std::uint64_t seed = 0;

  friend bool operator==(const GridCell&, const GridCell&) = default;
};

/// Every cell of the grid. Zero-shot has no eps_f axis and training from
/// scratch has no eps_p axis; the missing axis is recorded as 0.
inline std::vector<GridCell> grid_cells(const ExperimentConfig& cfg) {
  std::vector<GridCell> cells;
  for (std::uint64_t seed : cfg.seeds)
    for (PeftVariant m : cfg.grid.methods) {
      if (m == PeftVariant::kScratch) {
        for (double ef : cfg.grid.eps_f) cells.push_back({m, 0.0, ef, seed});
      } else if (m == PeftVariant::kZeroShot) {
        for (double ep : cfg.grid.eps_p) cells.push_back({m, ep, 0.0, seed});
      } else {
        for (double ep : cfg.grid.eps_p)
          for (double ef : cfg.grid.eps_f) cells.push_back({m, ep, ef, seed});
      }
    }
  return cells;
}

inline std::string cell_file_name(const GridCell& c) {
  return std::string(to_string(c.method)) + "__ep" + format_real(c.eps_p) + "__ef" + format_real(c.eps_f) + "__s" +
         std::to_string(c.seed) + ".json";
}

inline std::filesystem::path pretrain_checkpoint_path(const std::filesystem::path& root, double eps_p,
                                                      std::uint64_t seed) {
  return root / "pretrain" / ("ep" + format_real(eps_p) + "__s" + std::to_string(seed) + ".dptt");
}

inline std::filesystem::path privacy_report_path(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".privacy.json";
}

/// Loads the pretrained model for (eps_p, seed) from the grid cache or trains
/// and caches it.
inline std::pair<Model, PhaseReport> cached_pretrain(const ExperimentConfig& cfg, const ExperimentData& data,
                                                     const std::filesystem::path& root, double eps_p,
                                                     std::uint64_t seed, bool* trained = nullptr) {
  const auto path = pretrain_checkpoint_path(root, eps_p, seed);
  const auto report_path = privacy_report_path(path);
  if (std::filesystem::exists(path) && std::filesystem::exists(report_path)) {
    if (trained) *trained = false;
    return {load_checkpoint(path).model, nlohmann::json::parse(read_text(report_path)).get<PhaseReport>()};
  }
  PretrainOutput p = run_pretrain(cfg, data, eps_p, seed);
  save_checkpoint(p.model, path, data.schema);
  write_text_atomic(report_path, nlohmann::json(p.privacy).dump(2) + "\n");
  if (trained) *trained = true;
  return {std::move(p.model), p.privacy};
}

struct GridSummary {
  std::size_t cells = 0;
  std::size_t completed_before = 0;
  std::size_t ran = 0;
  std::size_t pretrain_runs = 0;
};

using GridLog = std::function<void(const std::string&)>;

/// Runs every missing cell, writing one record file per cell, then rewrites
/// the reports. Cells whose record file exists are skipped.
inline GridSummary run_grid(const ExperimentConfig& cfg, const ExperimentData& data, const std::filesystem::path& root,
                            const GridLog& log = {}) {
  cfg.validate();
  GridSummary s;
  const auto cells = grid_cells(cfg);
  s.cells = cells.size();
  const auto records = root / "records";

  // Group by the pretrained model each cell needs so it is built at most once.
  std::map<std::pair<double, std::uint64_t>, std::vector<GridCell>> groups;
  for (const GridCell& c : cells) {
    if (std::filesystem::exists(records / cell_file_name(c))) {
      ++s.completed_before;
      continue;
    }
    groups[{c.method == PeftVariant::kScratch ? -1.0 : c.eps_p, c.seed}].push_back(c);
  }
  for (const auto& [key, group] : groups) {
    std::optional<std::pair<Model, PhaseReport>> pre;
    if (key.first < 0.0) {
      const ModelConfig mc = model_config_for(data.schema, cfg.model);
      mc.validate();
      pre.emplace(init_model(mc, 0), PhaseReport{});
    } else {
      bool trained = false;
      pre.emplace(cached_pretrain(cfg, data, root, key.first, key.second, &trained));
      if (trained) {
        ++s.pretrain_runs;
        if (log) log("pretrained eps_p=" + format_real(key.first) + " seed=" + std::to_string(key.second));
      }
    }
    for (const GridCell& c : group) {
      const FinetuneOutput out =
          run_finetune(cfg, data, pre->first, pre->second, c.eps_p, c.method, c.eps_f, c.seed);
      write_text_atomic(records / cell_file_name(c), nlohmann::json(out.record).dump(2) + "\n");
      ++s.ran;
      if (log)
        log(std::string(to_string(c.method)) + " eps_p=" + format_real(c.eps_p) + " eps_f=" + format_real(c.eps_f) +
            " seed=" + std::to_string(c.seed) + " acc=" + format_real(out.record.accuracy));
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Reports.

/// All record files under `root/records`, sorted by (method, eps_p, eps_f, seed).
inline std::vector<ResultRecord> read_records(const std::filesystem::path& root) {
  std::vector<ResultRecord> out;
  const auto dir = root / "records";
  if (!std::filesystem::exists(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    try {
      out.push_back(nlohmann::json::parse(read_text(entry.path())).get<ResultRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed record file " + entry.path().string() + ": " + e.what());
    }
  }
  std::sort(out.begin(), out.end(), [](const ResultRecord& a, const ResultRecord& b) {
    return std::tie(a.method, a.eps_p, a.eps_f, a.seed) < std::tie(b.method, b.eps_p, b.eps_f, b.seed);
  });
  return out;
}

struct CellStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single seed
  std::size_t n = 0;
};

inline CellStats cell_stats(const std::vector<double>& values) {
  CellStats s;
  s.n = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

/// Mean and std of accuracy per (eps_p, eps_f) for one method.
struct PivotTable {
  std::vector<double> eps_p;
  std::vector<double> eps_f;
  std::map<std::pair<double, double>, CellStats> cells;
};

inline PivotTable pivot(const std::vector<ResultRecord>& records, const std::string& method) {
  PivotTable t;
  std::map<std::pair<double, double>, std::vector<double>> values;
  std::set<double> ep, ef;
  for (const ResultRecord& r : records) {
    if (r.method != method) continue;
    values[{r.eps_p, r.eps_f}].push_back(r.accuracy);
    ep.insert(r.eps_p);
    ef.insert(r.eps_f);
  }
  t.eps_p.assign(ep.begin(), ep.end());
  t.eps_f.assign(ef.begin(), ef.end());
  for (const auto& [k, v] : values) t.cells[k] = cell_stats(v);
  return t;
}

inline std::string pivot_csv(const PivotTable& t) {
  std::string out = "eps_p\\eps_f";
  for (double ef : t.eps_f) out += "," + format_real(ef);
  out += "\n";
  for (double ep : t.eps_p) {
    out += format_real(ep);
    for (double ef : t.eps_f) {
      out += ",";
      const auto it = t.cells.find({ep, ef});
      if (it != t.cells.end()) out += format_real(it->second.mean) + " (" + format_real(it->second.stddev) + ")";
    }
    out += "\n";
  }
  return out;
}

/// Parses a file written by pivot_csv. Cell counts are not stored and read as 0.
inline PivotTable read_pivot_csv(const std::string& text) {
  PivotTable t;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty pivot table");
  auto header = detail::split_csv_line(line);
  for (std::size_t i = 1; i < header.size(); ++i) t.eps_f.push_back(parse_real(header[i]));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    const double ep = parse_real(fields.at(0));
    t.eps_p.push_back(ep);
    for (std::size_t i = 1; i < fields.size() && i <= t.eps_f.size(); ++i) {
      const std::string& cell = fields[i];
      if (cell.empty()) continue;
      const auto open = cell.find(" (");
      if (open == std::string::npos || cell.back() != ')') throw DataError("malformed pivot cell '" + cell + "'");
      CellStats s;
      s.mean = parse_real(std::string_view(cell).substr(0, open));
      s.stddev = parse_real(std::string_view(cell).substr(open + 2, cell.size() - open - 3));
      t.cells[{ep, t.eps_f[i - 1]}] = s;
    }
  }
  return t;
}

inline std::string records_csv(const std::vector<ResultRecord>& records) {
  std::string out =
      "method,eps_p,eps_f,seed,accuracy,correct,test_rows,trainable,total,"
      "pretrain_sigma,pretrain_steps,pretrain_epsilon,finetune_sigma,finetune_steps,finetune_epsilon\n";
  for (const ResultRecord& r : records) {
    out += r.method + "," + format_real(r.eps_p) + "," + format_real(r.eps_f) + "," + std::to_string(r.seed) + "," +
           format_real(r.accuracy) + "," + std::to_string(r.correct) + "," + std::to_string(r.test_rows) + "," +
           std::to_string(r.trainable) + "," + std::to_string(r.total) + "," +
           format_real(r.pretrain.noise_multiplier) + "," + std::to_string(r.pretrain.steps) + "," +
           format_real(r.pretrain.epsilon) + "," + format_real(r.finetune.noise_multiplier) + "," +
           std::to_string(r.finetune.steps) + "," + format_real(r.finetune.epsilon) + "\n";
  }
  return out;
}

/// Trainable parameters per method and their share of the full model.
inline std::string counts_csv(const std::vector<ResultRecord>& records) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
  for (const ResultRecord& r : records) counts.emplace(r.method, std::make_pair(r.trainable, r.total));
  std::size_t full_total = 0;
  for (const auto& [m, c] : counts) full_total = std::max(full_total, c.second);
  std::string out = "method,trainable,total,reduction_pct\n";
  for (const auto& [m, c] : counts) {
    const double reduction = full_total ? 100.0 * (1.0 - static_cast<double>(c.first) / static_cast<double>(full_total)) : 0.0;
    out += m + "," + std::to_string(c.first) + "," + std::to_string(c.second) + "," + format_real(reduction) + "\n";
  }
  return out;
}

/// Regenerates records.csv, counts.csv and pivot_<method>.csv from the record
/// files. Output depends only on the record contents.
inline std::vector<std::filesystem::path> write_reports(const std::filesystem::path& root) {
  const auto records = read_records(root);
  std::vector<std::filesystem::path> written;
  const auto put = [&](const std::string& name, const std::string& text) {
    write_text_atomic(root / name, text);
    written.push_back(root / name);
  };
  put("records.csv", records_csv(records));
  put("counts.csv", counts_csv(records));
  std::set<std::string> methods;
  for (const ResultRecord& r : records) methods.insert(r.method);
  for (const std::string& m : methods) put("pivot_" + m + ".csv", pivot_csv(pivot(records, m)));
  return written;
}

}  // namespace dptab
