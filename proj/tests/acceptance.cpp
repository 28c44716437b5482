// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   counts.*        trainable parameter counts on the reference ACSIncome model
//   numeric.*       finite differences, clipping, noise
//   accountant.*    RDP oracle and calibration round trip
//   desk.*          DP grid on synthetic shifted data, 3 seeds
//   determinism.*   bit-identical checkpoints and reports

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "dptab/dptab.hpp"
#include "reference.hpp"

using namespace dptab;
namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Tolerances.
constexpr double kFdTolerance = 1e-3;
constexpr double kClipSlack = 1e-6;
constexpr double kNoiseStdTolerance = 0.02;
constexpr double kRdpTolerance = 1e-9;
constexpr double kCalibrationTolerance = 0.01;
constexpr double kMinRatioAll = 97.86;
constexpr double kMinRatioAdapterLora = 99.0;
constexpr double kNonPrivateMargin = 0.15;
constexpr double kPeftOverZeroShot = 0.02;

int failures = 0;
int checks = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  ++checks;
  if (!ok) ++failures;
  std::printf("%s  %-44s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dptab_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

// ---------------------------------------------------------------------------

ModelConfig acs_model() {
  ModelConfig c;
  c.vocab_sizes = acs_income_reference_vocab_sizes();
  c.n_continuous = 2;
  return c;
}

void check_counts() {
  const Model base = init_model(acs_model(), 0);
  const std::size_t full = count_parameters(base).total;
  const std::map<PeftVariant, std::size_t> expected = {
      {PeftVariant::kShallow, 2072}, {PeftVariant::kDeep, 4408}, {PeftVariant::kAdapter, 1424}};
  std::map<PeftVariant, std::size_t> got;
  for (PeftVariant v : {PeftVariant::kShallow, PeftVariant::kDeep, PeftVariant::kAdapter, PeftVariant::kLora}) {
    Model m = base;
    PeftConfig p;
    p.variant = v;
    apply_peft(m, p, 0);
    got[v] = count_parameters(m).trainable;
  }
  for (const auto& [v, n] : expected)
    report(got[v] == n, "counts." + std::string(to_string(v)),
           std::to_string(got[v]) + " trainable, expected " + std::to_string(n));
  for (PeftVariant v : {PeftVariant::kDeep, PeftVariant::kShallow, PeftVariant::kAdapter, PeftVariant::kLora}) {
    const double ratio = 100.0 * (1.0 - static_cast<double>(got[v]) / static_cast<double>(full));
    const bool strict = v == PeftVariant::kAdapter || v == PeftVariant::kLora;
    const double need = strict ? kMinRatioAdapterLora : kMinRatioAll;
    report(ratio >= need, "counts.reduction." + std::string(to_string(v)),
           fmt("%.3f%% of full removed, need >= %.2f%%", ratio, need) + " (full " + std::to_string(full) + ")");
  }
}

// ---------------------------------------------------------------------------

ModelConfig mini_model() {
  ModelConfig c;
  c.embed_dim = 8;
  c.n_blocks = 1;
  c.n_heads = 2;
  c.ffn_hidden = 16;
  c.mlp_layers = 2;
  c.mlp_units = 8;
  c.vocab_sizes = {5, 7, 3};
  c.n_continuous = 2;
  return c;
}

void check_numeric() {
  {
    const ModelConfig mc = mini_model();
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
      Model m = init_model(mc, seed);
      for (auto& p : m.parameters()) {
        const CounterRng r(mix(seed, fnv1a(p.name)));
        for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += 0.2f * static_cast<float>(r.gaussian(i));
      }
      TabularDataset d;
      d.n_categorical = 3;
      d.n_continuous = 2;
      RngStream r(seed + 100);
      for (int i = 0; i < 2; ++i)
        d.push_row(std::vector<std::int32_t>{static_cast<std::int32_t>(r.below(5)), static_cast<std::int32_t>(r.below(7)),
                                             static_cast<std::int32_t>(r.below(3))},
                   std::vector<float>{static_cast<float>(r.gaussian()), static_cast<float>(r.gaussian())},
                   static_cast<float>(i));
      for (std::size_t row = 0; row < d.rows(); ++row) {
        const auto rep = ref::finite_difference_check(m, d, row, [&] {
          Tape tape;
          const auto leaves = bind_parameters(tape, m, true);
          Var loss = ad::sigmoid_bce(forward_example(tape, m, leaves, d.cat_row(row), d.cont_row(row)), d.labels[row]);
          return grad(tape, loss, leaves);
        });
        worst = std::max(worst, rep.max_rel_error);
        checked += rep.checked;
        skipped += rep.skipped;
      }
    }
    report(worst < kFdTolerance, "numeric.finite_difference",
           fmt("max relative error %.3g over %.0f coordinates", worst, static_cast<double>(checked)) + ", " +
               std::to_string(skipped) + " skipped at ReLU kinks");
  }
  {
    GradientMap g;
    g.entries.push_back({"v", 0, Tensor({2}, std::vector<float>{3.0f, 4.0f}), 2});
    const GradientSample c = clip(make_sample(std::move(g)), 2.0);
    const float a = c.grads.entries[0].grad[0], b = c.grads.entries[0].grad[1];
    report(a == 1.2f && b == 1.6f, "numeric.clip.three_four", fmt("(3,4) -> (%.9g, %.9g) at C=2", a, b));
  }
  {
    RngStream r(7);
    double worst = -kInf;
    for (int t = 0; t < 1000; ++t) {
      const std::size_t n = 1 + r.below(300);
      std::vector<float> v(n);
      const double scale = std::exp(r.uniform(-4.0, 4.0));
      for (float& x : v) x = static_cast<float>(scale * r.gaussian());
      const double c = std::exp(r.uniform(-3.0, 3.0));
      GradientMap g;
      g.entries.push_back({"v", 0, Tensor({n}, std::move(v)), n});
      const GradientSample out = clip(make_sample(std::move(g)), c);
      double s = 0.0;
      for (float x : out.grads.entries[0].grad.data()) s += static_cast<double>(x) * x;
      worst = std::max(worst, std::sqrt(s) - c);
    }
    report(worst <= kClipSlack, "numeric.clip.random_1000", fmt("max(norm - C) = %.3g, allowed %.0e", worst, kClipSlack));
  }
  {
    DpConfig cfg;
    cfg.clip_norm = 1.5;
    cfg.noise_multiplier = 1.2;
    cfg.seed = 31;
    const std::size_t n = 100000;
    GradientMap zero;
    zero.entries.push_back({"z", 0, Tensor({n}, std::vector<float>(n, 0.0f)), n});
    const std::vector<GradientSample> batch = {make_sample(std::move(zero))};
    const GradientMap g = noisy_aggregate(batch, cfg, 0);
    double s = 0.0, s2 = 0.0;
    for (float v : g.entries[0].grad.data()) {
      s += v;
      s2 += static_cast<double>(v) * v;
    }
    const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean), want = cfg.clip_norm * cfg.noise_multiplier;
    report(std::abs(sd / want - 1.0) <= kNoiseStdTolerance, "numeric.noise_std",
           fmt("std %.5f vs C*sigma %.5f over 1e5 draws", sd, want));
  }
}

// ---------------------------------------------------------------------------

using Big = boost::multiprecision::cpp_bin_float_100;

double oracle_rdp(double q, double sigma, int alpha) {
  const Big bq(q), b1mq = Big(1) - Big(q), s2 = Big(2) * Big(sigma) * Big(sigma);
  Big sum = 0, binom = 1;
  for (int k = 0; k <= alpha; ++k) {
    if (k > 0) binom = binom * Big(alpha - k + 1) / Big(k);
    sum += binom * boost::multiprecision::pow(b1mq, alpha - k) * boost::multiprecision::pow(bq, k) *
           boost::multiprecision::exp(Big(k) * Big(k - 1) / s2);
  }
  return static_cast<double>(boost::multiprecision::log(sum) / Big(alpha - 1));
}

void check_accountant() {
  {
    double worst = 0.0;
    for (double sigma : {0.5, 0.8, 1.0, 2.0, 7.0})
      for (int a : {2, 3, 5, 32, 256}) {
        const double want = a / (2.0 * sigma * sigma);
        worst = std::max(worst, std::abs(rdp_subsampled_gaussian(1.0, sigma, a) - want));
      }
    report(worst <= kRdpTolerance, "accountant.full_sampling", fmt("max |rdp - a/(2 s^2)| = %.3g, allowed %.0e", worst, kRdpTolerance));
  }
  {
    double worst = 0.0;
    for (double q : {1e-4, 1e-3, 0.01, 0.1, 0.5})
      for (double sigma : {0.6, 0.9, 1.5, 4.0, 20.0})
        for (int a : {2, 3, 8, 20, 40}) {
          const double want = oracle_rdp(q, sigma, a);
          worst = std::max(worst, std::abs(rdp_subsampled_gaussian(q, sigma, a) - want) / want);
        }
    report(worst <= kRdpTolerance, "accountant.oracle_grid", fmt("max relative error %.3g on 125 points, allowed %.0e", worst, kRdpTolerance));
  }
  {
    const double q = 64.0 / 195665.0;
    const std::size_t steps = 5 * (195665 / 64);
    double worst = 0.0;
    for (double target : default_epsilon_grid()) {
      const double sigma = calibrate_sigma(target, 1e-5, q, steps);
      const double achieved = account(q, sigma, steps, 1e-5).epsilon;
      const double gap = achieved > target ? kInf : (target - achieved) / target;
      worst = std::max(worst, gap);
    }
    report(worst <= kCalibrationTolerance, "accountant.calibration_round_trip",
           fmt("max (target - achieved)/target = %.3g, allowed %.2f", worst, kCalibrationTolerance));
  }
}

// ---------------------------------------------------------------------------

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.data.synth_pretrain_rows = 20000;
  c.data.synth_finetune_rows = 5000;
  c.data.synth_shift = 1.0;
  c.pretrain.epochs = 2;
  c.finetune.epochs = 3;
  c.pretrain.learning_rate = 0.2;
  c.finetune.learning_rate = 0.2;
  c.seeds = {0, 1, 2};
  c.workers = 1;
  return c;
}

const std::vector<PeftVariant> kPeft = {PeftVariant::kLora, PeftVariant::kAdapter, PeftVariant::kDeep,
                                        PeftVariant::kShallow};

double mean_accuracy(const std::vector<ResultRecord>& records, const std::string& method, double ep, double ef) {
  std::vector<double> v;
  for (const auto& r : records)
    if (r.method == method && r.eps_p == ep && r.eps_f == ef) v.push_back(r.accuracy);
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : cell_stats(v).mean;
}

void check_desk() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig base = desk_config();
  const ExperimentData data = prepare_data(base.data);
  const fs::path root = scratch("desk");
  const auto log = [](const std::string& line) { std::fprintf(stderr, "  %s\n", line.c_str()); };

  const auto run = [&](std::vector<PeftVariant> methods, std::vector<double> ep, std::vector<double> ef) {
    ExperimentConfig c = base;
    c.grid.methods = std::move(methods);
    c.grid.eps_p = std::move(ep);
    c.grid.eps_f = std::move(ef);
    run_grid(c, data, root, log);
  };
  run({PeftVariant::kFull}, {kInf}, {kInf});
  run(kPeft, {32.0}, {0.5, 32.0});
  run({PeftVariant::kFull}, {32.0}, {0.5});
  std::vector<PeftVariant> at8 = kPeft;
  at8.push_back(PeftVariant::kZeroShot);
  run(at8, {8.0}, {8.0});
  write_reports(root);
  const auto records = read_records(root);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;

  const double nonpriv = mean_accuracy(records, "full", kInf, kInf);
  const double majority = majority_accuracy(data.finetune_train, data.finetune_test);
  report(nonpriv - majority >= kNonPrivateMargin, "desk.non_private_beats_majority",
         fmt("full at eps=inf %.4f vs majority %.4f", nonpriv, majority));

  for (PeftVariant v : kPeft) {
    const std::string m(to_string(v));
    const double lo = mean_accuracy(records, m, 32.0, 0.5), hi = mean_accuracy(records, m, 32.0, 32.0);
    report(hi >= lo, "desk.budget_trend." + m, fmt("eps_f=32 %.4f vs eps_f=0.5 %.4f (eps_p=32)", hi, lo));
  }
  const double zero_shot = mean_accuracy(records, "zero_shot", 8.0, 0.0);
  for (PeftVariant v : kPeft) {
    const std::string m(to_string(v));
    const double acc = mean_accuracy(records, m, 8.0, 8.0);
    report(acc - zero_shot >= kPeftOverZeroShot, "desk.beats_zero_shot." + m,
           fmt("(8,8) %.4f vs zero-shot %.4f", acc, zero_shot));
  }
  const double adapter = mean_accuracy(records, "adapter", 32.0, 0.5), full = mean_accuracy(records, "full", 32.0, 0.5);
  report(adapter >= full, "desk.adapter_vs_full_low_budget", fmt("adapter %.4f vs full %.4f at (32,0.5)", adapter, full));

  bool budgets_met = true;
  for (const auto& r : records) {
    if (r.pretrain.trained && std::isfinite(r.pretrain.target_epsilon))
      budgets_met = budgets_met && r.pretrain.epsilon <= r.pretrain.target_epsilon;
    if (r.finetune.trained && std::isfinite(r.finetune.target_epsilon))
      budgets_met = budgets_met && r.finetune.epsilon <= r.finetune.target_epsilon;
  }
  report(budgets_met && records.size() == 45, "desk.privacy_budgets_met",
         std::to_string(records.size()) + " records, achieved epsilon <= target in every trained phase");
  report(minutes <= 15.0, "desk.wall_time", fmt("%.1f minutes, limit %.0f", minutes, 15.0));

  // Checkpoint round trip on a desk-scale pretrained model.
  const fs::path ckpt = pretrain_checkpoint_path(root, 32.0, 0);
  const std::string bytes = read_text(ckpt);
  const LoadedCheckpoint back = deserialize_checkpoint(bytes);
  report(serialize_checkpoint(back.model, back.schema) == bytes, "determinism.checkpoint_round_trip",
         std::to_string(bytes.size()) + " bytes re-serialized identically");
  fs::remove_all(root);
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> report_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::string text = read_text(e.path());
    if (e.path().extension() == ".json" && e.path().parent_path().filename() == "records") {
      auto j = nlohmann::json::parse(text);
      j.erase("wall_time_s");
      text = j.dump();
    }
    out[fs::relative(e.path(), root).string()] = text;
  }
  return out;
}

void check_determinism() {
  ExperimentConfig c = desk_config();
  c.data.synth_pretrain_rows = 2000;
  c.data.synth_finetune_rows = 800;
  c.pretrain.epochs = 1;
  c.finetune.epochs = 1;
  c.seeds = {0, 1};
  c.grid.methods = {PeftVariant::kFull, PeftVariant::kLora, PeftVariant::kAdapter, PeftVariant::kZeroShot};
  c.grid.eps_p = {4.0};
  c.grid.eps_f = {2.0};

  const fs::path a = scratch("det_a"), b = scratch("det_b");
  run_grid(c, prepare_data(c.data), a);
  write_reports(a);
  run_grid(c, prepare_data(c.data), b);
  write_reports(b);
  const auto fa = report_files(a), fb = report_files(b);
  std::size_t checkpoints = 0, same = 0;
  for (const auto& [name, text] : fa) {
    checkpoints += name.ends_with(".dptt");
    const auto it = fb.find(name);
    same += it != fb.end() && it->second == text;
  }
  report(fa.size() == fb.size() && same == fa.size() && checkpoints == 2, "determinism.reruns_bit_identical",
         std::to_string(same) + "/" + std::to_string(fa.size()) + " files identical, " + std::to_string(checkpoints) +
             " checkpoints");
  fs::remove_all(a);
  fs::remove_all(b);
}

}  // namespace

int main() {
  try {
    check_counts();
    check_numeric();
    check_accountant();
    check_determinism();
    check_desk();
  } catch (const std::exception& e) {
    std::printf("FAIL  %-44s %s\n", "acceptance.exception", e.what());
    return 2;
  }
  std::printf("%d/%d criteria passed\n", checks - failures, checks);
  return failures == 0 ? 0 : 1;
}
