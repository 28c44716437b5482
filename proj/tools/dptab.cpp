// dptab: command-line driver for DP pretraining, PEFT fine-tuning, evaluation
// and experiment grids.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dptab/dptab.hpp"

namespace {

using namespace dptab;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitInfeasible = 4;

struct CommonOptions {
  std::string config;
  std::string output;
  std::size_t workers = 0;
};

ExperimentConfig load_config(const CommonOptions& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  if (o.workers > 0) cfg.workers = o.workers;
  return cfg;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

std::optional<PhaseReport> read_privacy_sidecar(const fs::path& checkpoint) {
  const fs::path p = privacy_report_path(checkpoint);
  if (!fs::exists(p)) return std::nullopt;
  return nlohmann::json::parse(read_text(p)).get<PhaseReport>();
}

std::string float_text(float v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

int cmd_pretrain(const CommonOptions& o, std::optional<double> epsilon, std::uint64_t seed) {
  const ExperimentConfig cfg = load_config(o);
  const double eps = epsilon.value_or(cfg.pretrain.epsilon);
  const ExperimentData data = prepare_data(cfg.data);
  const fs::path root = resolve_output_root(o.output, cfg);
  const PretrainOutput out = run_pretrain(cfg, data, eps, seed);
  const fs::path ckpt = pretrain_checkpoint_path(root, eps, seed);
  save_checkpoint(out.model, ckpt, data.schema);
  write_text_atomic(privacy_report_path(ckpt), nlohmann::json(out.privacy).dump(2) + "\n");
  print_json({{"checkpoint", ckpt.string()},
              {"digest", file_digest(ckpt)},
              {"privacy", out.privacy},
              {"epoch_loss", out.log.epoch_loss},
              {"parameters", count_parameters(out.model).total}});
  return kExitOk;
}

int cmd_finetune(const CommonOptions& o, const std::string& checkpoint, std::optional<std::string> method,
                 std::optional<double> epsilon, std::uint64_t seed) {
  const ExperimentConfig cfg = load_config(o);
  const PeftVariant variant = method ? parse_variant(*method) : cfg.peft.variant;
  const double eps_f = epsilon.value_or(cfg.finetune.epsilon);
  const ExperimentData data = prepare_data(cfg.data);
  const LoadedCheckpoint pre = load_checkpoint(checkpoint);
  const PhaseReport pre_report = read_privacy_sidecar(checkpoint).value_or(PhaseReport{});
  const FinetuneOutput out =
      run_finetune(cfg, data, pre.model, pre_report, pre_report.target_epsilon, variant, eps_f, seed);
  const fs::path root = resolve_output_root(o.output, cfg);
  const GridCell cell{variant, out.record.eps_p, out.record.eps_f, seed};
  fs::path stem = root / "finetune" / cell_file_name(cell);
  stem.replace_extension();
  save_checkpoint(out.model, stem.string() + ".dptt", pre.schema ? pre.schema : std::optional(data.schema));
  write_text_atomic(stem.string() + ".json", nlohmann::json(out.record).dump(2) + "\n");
  print_json(out.record);
  return kExitOk;
}

int cmd_evaluate(const CommonOptions& o, const std::string& checkpoint, const std::string& csv,
                 const std::string& column_map) {
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  TabularDataset test;
  nlohmann::json source;
  if (!csv.empty()) {
    if (!ck.schema) throw DataError("checkpoint " + checkpoint + " carries no dataset schema; use --config instead");
    const ColumnMapping mapping = column_map.empty() ? ColumnMapping{} : load_column_mapping(column_map);
    LoadedTable t = load_csv(csv, *ck.schema, mapping);
    for (const auto& w : t.warnings) std::cerr << "warning: " << w << "\n";
    test = std::move(t.data);
    source = {{"csv", csv}, {"rows_dropped", t.rows_dropped}};
  } else {
    const ExperimentConfig cfg = load_config(o);
    ExperimentData data = prepare_data(cfg.data);
    test = std::move(data.finetune_test);
    source = {{"split", "finetune_test"}};
  }
  const EvalResult r = evaluate(ck.model, test);
  print_json({{"accuracy", r.accuracy}, {"correct", r.correct}, {"rows", r.rows}, {"source", source}});
  return kExitOk;
}

int cmd_grid(const CommonOptions& o, const std::vector<std::string>& methods, const std::vector<double>& eps_p,
             const std::vector<double>& eps_f, const std::vector<std::uint64_t>& seeds) {
  ExperimentConfig cfg = load_config(o);
  if (!methods.empty()) {
    cfg.grid.methods.clear();
    for (const auto& m : methods) cfg.grid.methods.push_back(parse_variant(m));
  }
  if (!eps_p.empty()) cfg.grid.eps_p = eps_p;
  if (!eps_f.empty()) cfg.grid.eps_f = eps_f;
  if (!seeds.empty()) cfg.seeds = seeds;
  cfg.validate();
  const fs::path root = resolve_output_root(o.output, cfg);
  const ExperimentData data = prepare_data(cfg.data);
  const GridSummary s = run_grid(cfg, data, root, [](const std::string& line) { std::cerr << line << "\n"; });
  const auto reports = write_reports(root);
  nlohmann::json files = nlohmann::json::array();
  for (const auto& p : reports) files.push_back(p.string());
  print_json({{"cells", s.cells},
              {"already_complete", s.completed_before},
              {"ran", s.ran},
              {"pretrain_runs", s.pretrain_runs},
              {"reports", files}});
  return kExitOk;
}

int cmd_report(const CommonOptions& o) {
  const ExperimentConfig cfg = load_config(o);
  const fs::path root = resolve_output_root(o.output, cfg);
  for (const auto& p : write_reports(root)) std::cout << p.string() << "\n";
  return kExitOk;
}

int cmd_calibrate(std::vector<double> epsilons, double delta, std::optional<double> q, std::optional<std::size_t> steps,
                  std::size_t rows, std::size_t batch, std::size_t epochs) {
  if (epsilons.empty()) epsilons = default_epsilon_grid();
  double rate = 0.0;
  std::size_t t = 0;
  if (q || steps) {
    if (!q || !steps) throw ConfigError("--q and --steps must be given together");
    rate = *q;
    t = *steps;
  } else {
    if (batch == 0 || rows < batch) throw ConfigError("--rows must be at least --batch");
    rate = static_cast<double>(batch) / static_cast<double>(rows);
    t = epochs * steps_per_epoch(rows, batch);
  }
  std::cout << "target_epsilon,q,steps,sigma,achieved_epsilon,best_order\n";
  for (double e : epsilons) {
    const double sigma = calibrate_sigma(e, delta, rate, t);
    const DpGuarantee g = account(rate, sigma, t, delta);
    std::cout << format_real(e) << "," << format_real(rate) << "," << t << "," << format_real(sigma) << ","
              << format_real(g.epsilon) << "," << format_real(g.order) << "\n";
  }
  return kExitOk;
}

int cmd_count_params(const CommonOptions& o, const std::string& vocab) {
  const ExperimentConfig cfg = load_config(o);
  ModelConfig mc = cfg.model;
  mc.n_continuous = 2;
  if (vocab == "acs") {
    mc.vocab_sizes = acs_income_reference_vocab_sizes();
  } else if (vocab == "synth") {
    mc.vocab_sizes = synth_vocab_sizes();
  } else {
    throw ConfigError("--vocab must be acs or synth");
  }
  mc.validate();
  const Model base = init_model(mc, 0);
  const std::size_t full = count_parameters(base).total;
  std::cout << "method,trainable,total,reduction_pct\n";
  for (PeftVariant v : kAllVariants) {
    Model m = base;
    PeftConfig p = cfg.peft;
    p.variant = v;
    apply_peft(m, p, 0);
    const ParameterCount c = count_parameters(m);
    const double reduction = 100.0 * (1.0 - static_cast<double>(c.trainable) / static_cast<double>(full));
    std::cout << to_string(v) << "," << c.trainable << "," << c.total << "," << format_real(reduction) << "\n";
  }
  return kExitOk;
}

int cmd_synth(std::size_t rows, double shift, std::uint64_t seed, const std::string& output) {
  if (!(shift >= 0.0 && shift <= 1.0)) throw ConfigError("--shift must be in [0, 1]");
  const TabularDataset d = synth_generate(rows, shift, seed);
  const DatasetSchema schema = synth_schema();
  std::string text;
  for (const auto& c : schema.categorical) text += c + ",";
  for (const auto& c : schema.continuous) text += c + ",";
  text += schema.label + "\n";
  for (std::size_t i = 0; i < d.rows(); ++i) {
    for (std::int32_t v : d.cat_row(i)) text += std::to_string(v) + ",";
    for (float v : d.cont_row(i)) text += float_text(v) + ",";
    // Income chosen so the standard > 50,000 rule recovers the label.
    text += d.labels[i] > 0.5f ? "75000\n" : "25000\n";
  }
  if (output.empty() || output == "-") {
    std::cout << text;
  } else {
    write_text_atomic(output, text);
    print_json(dataset_summary(d, schema));
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentially private TabTransformer pretraining and parameter-efficient fine-tuning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "dptab 1.0.0");

  CommonOptions common;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("-c,--config", common.config, "Experiment config file (TOML subset)");
    if (config_required) opt->required();
    opt->check(CLI::ExistingFile);
    sub->add_option("-o,--output", common.output,
                    std::string("Output root (default: $") + kOutputRootEnv + ", then output_dir in the config)");
    sub->add_option("-j,--workers", common.workers, "Threads for per-example gradients");
  };

  std::optional<double> epsilon;
  std::uint64_t seed = 0;
  std::string checkpoint, csv, column_map, vocab = "acs", synth_out;
  std::optional<std::string> method;
  std::vector<std::string> methods;
  std::vector<double> eps_p, eps_f, eps_list;
  std::vector<std::uint64_t> seeds;
  double delta = 1e-5, shift = 1.0;
  std::optional<double> q;
  std::optional<std::size_t> steps;
  std::size_t rows = 195665, batch = 64, epochs = 5, synth_rows = 1000;

  auto* pre = app.add_subcommand("pretrain", "DP-pretrain a model on the pretraining data");
  add_common(pre, false);
  pre->add_option("-e,--epsilon", epsilon, "Pretraining budget (default: pretrain.epsilon)");
  pre->add_option("-s,--seed", seed, "Run seed");

  auto* fin = app.add_subcommand("finetune", "Freeze, apply a PEFT method and DP-fine-tune a checkpoint");
  add_common(fin, false);
  fin->add_option("-k,--checkpoint", checkpoint, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);
  fin->add_option("-m,--method", method, "full, scratch, lora, adapter, deep, shallow or zero_shot");
  fin->add_option("-e,--epsilon", epsilon, "Fine-tuning budget (default: finetune.epsilon)");
  fin->add_option("-s,--seed", seed, "Run seed");

  auto* ev = app.add_subcommand("evaluate", "Accuracy of a checkpoint on a CSV file or the configured test split");
  add_common(ev, false);
  ev->add_option("-k,--checkpoint", checkpoint, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  ev->add_option("--csv", csv, "Labelled CSV encoded with the checkpoint's schema")->check(CLI::ExistingFile);
  ev->add_option("--column-map", column_map, "JSON map from schema column names to file headers");

  auto* grid = app.add_subcommand("grid", "Run (method, eps_p, eps_f, seed) cells and write reports");
  add_common(grid, false);
  grid->add_option("--methods", methods, "Methods to run")->delimiter(',');
  grid->add_option("--eps-p", eps_p, "Pretraining budgets")->delimiter(',');
  grid->add_option("--eps-f", eps_f, "Fine-tuning budgets")->delimiter(',');
  grid->add_option("--seeds", seeds, "Seeds")->delimiter(',');

  auto* rep = app.add_subcommand("report", "Regenerate CSV reports from record files");
  add_common(rep, false);

  auto* cal = app.add_subcommand("calibrate", "Noise multipliers for target budgets (CSV)");
  cal->add_option("-e,--epsilon", eps_list, "Target budgets (default: 0.5,1,2,4,8,16,32)")->delimiter(',');
  cal->add_option("--delta", delta, "Target delta");
  cal->add_option("--q", q, "Sampling rate");
  cal->add_option("--steps", steps, "Number of steps");
  cal->add_option("--rows", rows, "Training rows (used when --q/--steps are absent)");
  cal->add_option("--batch", batch, "Batch size");
  cal->add_option("--epochs", epochs, "Epochs");

  auto* cnt = app.add_subcommand("count-params", "Trainable parameter counts per method (CSV)");
  add_common(cnt, false);
  cnt->add_option("--vocab", vocab, "Vocabulary sizes: acs (reference code book) or synth");

  auto* syn = app.add_subcommand("synth", "Write a synthetic ACSIncome-like CSV");
  syn->add_option("-n,--rows", synth_rows, "Rows");
  syn->add_option("--shift", shift, "Domain shift in [0, 1]");
  syn->add_option("-s,--seed", seed, "Seed");
  syn->add_option("-o,--output", synth_out, "Output CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*pre) return cmd_pretrain(common, epsilon, seed);
    if (*fin) return cmd_finetune(common, checkpoint, method, epsilon, seed);
    if (*ev) return cmd_evaluate(common, checkpoint, csv, column_map);
    if (*grid) return cmd_grid(common, methods, eps_p, eps_f, seeds);
    if (*rep) return cmd_report(common);
    if (*cal) return cmd_calibrate(eps_list, delta, q, steps, rows, batch, epochs);
    if (*cnt) return cmd_count_params(common, vocab);
    if (*syn) return cmd_synth(synth_rows, shift, seed, synth_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitData;
  } catch (const InfeasibleBudget& e) {
    std::cerr << "infeasible privacy budget: " << e.what() << "\n";
    return kExitInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
