#pragma once

// Tabular data: schema fitting, CSV ingestion, splitting and a synthetic
// generator with a controllable distribution shift.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dptab/error.hpp"
#include "dptab/rng.hpp"

namespace dptab {

/// Encoded rows: categorical indices, standardized continuous values, 0/1 labels.
struct TabularDataset {
  std::size_t n_categorical = 0;
  std::size_t n_continuous = 0;
  std::vector<std::int32_t> categorical;  // rows x n_categorical
  std::vector<float> continuous;          // rows x n_continuous
  std::vector<float> labels;

  std::size_t rows() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  std::span<const std::int32_t> cat_row(std::size_t i) const {
    return std::span<const std::int32_t>(categorical).subspan(i * n_categorical, n_categorical);
  }
  std::span<const float> cont_row(std::size_t i) const {
    return std::span<const float>(continuous).subspan(i * n_continuous, n_continuous);
  }

  void push_row(std::span<const std::int32_t> cat, std::span<const float> cont, float label) {
    categorical.insert(categorical.end(), cat.begin(), cat.end());
    continuous.insert(continuous.end(), cont.begin(), cont.end());
    labels.push_back(label);
  }

  TabularDataset subset(std::span<const std::size_t> idx) const {
    TabularDataset out;
    out.n_categorical = n_categorical;
    out.n_continuous = n_continuous;
    out.categorical.reserve(idx.size() * n_categorical);
    out.continuous.reserve(idx.size() * n_continuous);
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) {
      require(i < rows(), "subset: row index out of range");
      out.push_row(cat_row(i), cont_row(i), labels[i]);
    }
    return out;
  }

  double positive_rate() const {
    if (labels.empty()) return 0.0;
    double s = 0.0;
    for (float y : labels) s += y;
    return s / static_cast<double>(labels.size());
  }
};

/// Column layout plus everything fitted on the pretraining split: category
/// vocabularies (index 0 is reserved for unseen codes) and z-score statistics.
struct DatasetSchema {
  std::vector<std::string> categorical;
  std::vector<std::map<std::string, std::int32_t>> vocab;
  std::vector<std::string> continuous;
  std::vector<double> mean;
  std::vector<double> stddev;
  std::string label;
  double label_threshold = 50000.0;
  // When set, the vocabulary is implicit: codes are indices in [0, size).
  std::vector<std::size_t> fixed_vocab_sizes;

  bool fitted() const { return !fixed_vocab_sizes.empty() || (vocab.size() == categorical.size() && !vocab.empty()); }

  std::vector<std::size_t> vocab_sizes() const {
    if (!fixed_vocab_sizes.empty()) return fixed_vocab_sizes;
    std::vector<std::size_t> out;
    for (const auto& v : vocab) out.push_back(v.size() + 1);
    return out;
  }
};

inline void to_json(nlohmann::json& j, const DatasetSchema& s) {
  j = nlohmann::json{{"categorical", s.categorical}, {"vocab", s.vocab},
                     {"continuous", s.continuous},   {"mean", s.mean},
                     {"stddev", s.stddev},           {"label", s.label},
                     {"label_threshold", s.label_threshold}, {"fixed_vocab_sizes", s.fixed_vocab_sizes}};
}

inline void from_json(const nlohmann::json& j, DatasetSchema& s) {
  j.at("categorical").get_to(s.categorical);
  j.at("vocab").get_to(s.vocab);
  j.at("continuous").get_to(s.continuous);
  j.at("mean").get_to(s.mean);
  j.at("stddev").get_to(s.stddev);
  j.at("label").get_to(s.label);
  j.at("label_threshold").get_to(s.label_threshold);
  j.at("fixed_vocab_sizes").get_to(s.fixed_vocab_sizes);
}

/// The standard ACSIncome feature set: 8 categorical, 2 continuous, income label.
inline DatasetSchema acs_income_schema() {
  DatasetSchema s;
  s.categorical = {"COW", "SCHL", "MAR", "OCCP", "POBP", "RELP", "SEX", "RAC1P"};
  s.continuous = {"AGEP", "WKHP"};
  s.label = "PINCP";
  s.label_threshold = 50000.0;
  return s;
}

/// Vocabulary sizes (distinct codes + reserved unknown) of the ACS PUMS code
/// book for the ACSIncome categorical columns. Used where parameter counts are
/// needed without a data file.
inline std::vector<std::size_t> acs_income_reference_vocab_sizes() {
  // COW 1-9, SCHL 1-24, MAR 1-5, OCCP 529 codes, POBP 219 codes, RELP 0-17, SEX 1-2, RAC1P 1-9.
  return {10, 25, 6, 530, 220, 19, 3, 10};
}

struct LoadedTable {
  TabularDataset data;
  DatasetSchema schema;
  std::size_t rows_read = 0;
  std::size_t rows_dropped = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline std::optional<double> parse_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

// "3", "3.0" and " 3 " all denote the same category code.
inline std::string canonical_code(std::string_view raw) {
  std::string t = trim(raw);
  if (auto v = parse_number(t); v && *v == std::floor(*v) && std::abs(*v) < 1e15) {
    return std::to_string(static_cast<long long>(*v));
  }
  return t;
}

}  // namespace detail

/// Maps canonical column names onto the headers used in a particular file.
using ColumnMapping = std::map<std::string, std::string>;

inline ColumnMapping load_column_mapping(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open column mapping " + path);
  try {
    return nlohmann::json::parse(in).get<ColumnMapping>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed column mapping " + path + ": " + e.what());
  }
}

/// Reads and encodes a CSV. An unfitted schema is fitted on this file
/// (vocabularies and z-score statistics); a fitted one is applied verbatim and
/// unseen codes map to index 0. Rows with missing or unparseable required
/// fields are dropped and counted.
inline LoadedTable load_csv(const std::string& path, DatasetSchema schema, const ColumnMapping& mapping = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);

  LoadedTable out;
  const bool fit = !schema.fitted();
  out.data.n_categorical = schema.categorical.size();
  out.data.n_continuous = schema.continuous.size();

  std::string line;
  if (!std::getline(in, line) || detail::trim(line).empty()) {
    out.warnings.push_back(path + ": empty file, zero rows loaded");
    out.schema = std::move(schema);
    return out;
  }
  const auto header = detail::split_csv_line(line);
  auto locate = [&](const std::string& name) {
    const auto it = mapping.find(name);
    const std::string& file_name = it == mapping.end() ? name : it->second;
    for (std::size_t i = 0; i < header.size(); ++i)
      if (detail::trim(header[i]) == file_name) return i;
    throw DataError(path + ": missing column '" + file_name + "'" +
                    (file_name != name ? " (mapped from '" + name + "')" : ""));
  };
  std::vector<std::size_t> cat_pos, cont_pos;
  for (const auto& c : schema.categorical) cat_pos.push_back(locate(c));
  for (const auto& c : schema.continuous) cont_pos.push_back(locate(c));
  const std::size_t label_pos = locate(schema.label);

  // Raw pass: codes as strings, continuous as doubles.
  std::vector<std::vector<std::string>> raw_codes;
  std::vector<double> raw_cont;
  std::vector<float> labels;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++out.rows_read;
    const auto fields = detail::split_csv_line(line);
    auto field = [&](std::size_t pos) -> std::string_view {
      return pos < fields.size() ? std::string_view(fields[pos]) : std::string_view();
    };
    bool ok = true;
    std::vector<std::string> codes;
    for (std::size_t p : cat_pos) {
      std::string c = detail::canonical_code(field(p));
      if (c.empty()) ok = false;
      codes.push_back(std::move(c));
    }
    std::vector<double> conts;
    for (std::size_t p : cont_pos) {
      auto v = detail::parse_number(detail::trim(field(p)));
      if (!v) ok = false;
      conts.push_back(v.value_or(0.0));
    }
    const auto income = detail::parse_number(detail::trim(field(label_pos)));
    if (!income) ok = false;
    if (!ok) {
      ++out.rows_dropped;
      continue;
    }
    raw_codes.push_back(std::move(codes));
    raw_cont.insert(raw_cont.end(), conts.begin(), conts.end());
    labels.push_back(*income > schema.label_threshold ? 1.0f : 0.0f);
  }
  const std::size_t n = labels.size();
  const std::size_t nc = schema.continuous.size();

  if (fit) {
    schema.vocab.assign(schema.categorical.size(), {});
    for (std::size_t c = 0; c < schema.categorical.size(); ++c) {
      std::vector<std::string> distinct;
      for (const auto& r : raw_codes) distinct.push_back(r[c]);
      std::sort(distinct.begin(), distinct.end());
      distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
      for (std::size_t i = 0; i < distinct.size(); ++i) schema.vocab[c][distinct[i]] = static_cast<std::int32_t>(i + 1);
    }
    schema.mean.assign(nc, 0.0);
    schema.stddev.assign(nc, 1.0);
    for (std::size_t j = 0; j < nc && n > 0; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += raw_cont[i * nc + j];
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += (raw_cont[i * nc + j] - m) * (raw_cont[i * nc + j] - m);
      v /= static_cast<double>(n);
      schema.mean[j] = m;
      schema.stddev[j] = v > 0.0 ? std::sqrt(v) : 1.0;
    }
  }

  out.data.categorical.reserve(n * schema.categorical.size());
  out.data.continuous.reserve(n * nc);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < schema.categorical.size(); ++c) {
      if (!schema.fixed_vocab_sizes.empty()) {
        const auto v = detail::parse_number(raw_codes[i][c]);
        const bool in_range = v && *v >= 0.0 && *v < static_cast<double>(schema.fixed_vocab_sizes[c]);
        out.data.categorical.push_back(in_range ? static_cast<std::int32_t>(*v) : 0);
        continue;
      }
      const auto it = schema.vocab[c].find(raw_codes[i][c]);
      out.data.categorical.push_back(it == schema.vocab[c].end() ? 0 : it->second);
    }
    for (std::size_t j = 0; j < nc; ++j)
      out.data.continuous.push_back(static_cast<float>((raw_cont[i * nc + j] - schema.mean[j]) / schema.stddev[j]));
  }
  out.data.labels = std::move(labels);
  if (n == 0) out.warnings.push_back(path + ": zero rows loaded");
  out.schema = std::move(schema);
  return out;
}

/// Seeded split; the test side gets ceil(fraction * rows). Both sides keep the
/// original row order.
inline std::pair<TabularDataset, TabularDataset> split(const TabularDataset& data, double test_fraction,
                                                       std::uint64_t seed) {
  require(test_fraction >= 0.0 && test_fraction <= 1.0, "split: test fraction must be in [0, 1]");
  const std::size_t n = data.rows();
  const auto n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  RngStream rng(derive_seed(seed, "split"));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<std::size_t> test(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {data.subset(train), data.subset(test)};
}

// ---------------------------------------------------------------------------
// Synthetic ACSIncome-like data.

inline const std::vector<std::size_t>& synth_vocab_sizes() {
  static const std::vector<std::size_t> sizes = {9, 24, 5, 50, 50, 18, 2, 9};
  return sizes;
}

inline DatasetSchema synth_schema() {
  DatasetSchema s = acs_income_schema();
  s.fixed_vocab_sizes = synth_vocab_sizes();
  s.mean = {0.0, 0.0};
  s.stddev = {1.0, 1.0};
  return s;
}

/// Fixed ground truth shared by every synthetic dataset. `shift` interpolates
/// category marginals and effect sizes from the source to the target domain.
class SynthWorld {
 public:
  static const SynthWorld& instance() {
    static const SynthWorld world;
    return world;
  }

  double logit(std::span<const std::int32_t> cat, std::span<const float> cont, double shift) const {
    double z = bias_;
    for (std::size_t c = 0; c < cat.size(); ++c) {
      const auto v = static_cast<std::size_t>(cat[c]);
      z += effect_[c][v] + shift * effect_shift_[c][v];
    }
    z += interaction_[static_cast<std::size_t>(cat[3]) % kInter][static_cast<std::size_t>(cat[1]) % kInter];
    z += kContWeight * (static_cast<double>(cont[0]) - cont[1]);
    return kSharpness * z;
  }

  // Category sampling weights (unnormalized, positive).
  std::vector<double> marginal(std::size_t column, double shift) const {
    std::vector<double> w(marginal_[column].size());
    for (std::size_t v = 0; v < w.size(); ++v) w[v] = std::exp(marginal_[column][v] + shift * marginal_shift_[column][v]);
    return w;
  }

  double continuous_mean_shift() const { return 0.3; }

 private:
  static constexpr std::size_t kInter = 6;
  static constexpr double kContWeight = 0.5;
  static constexpr double kSharpness = 2.5;

  SynthWorld() {
    RngStream rng(0xA11CE5EEDull);
    const auto& sizes = synth_vocab_sizes();
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      std::vector<double> m(sizes[c]), ms(sizes[c]), e(sizes[c]), es(sizes[c]);
      for (std::size_t v = 0; v < sizes[c]; ++v) {
        m[v] = 0.8 * rng.gaussian();
        ms[v] = 1.0 * rng.gaussian();
        e[v] = 0.6 * rng.gaussian();
        es[v] = 0.6 * rng.gaussian();
      }
      marginal_.push_back(std::move(m));
      marginal_shift_.push_back(std::move(ms));
      effect_.push_back(std::move(e));
      effect_shift_.push_back(std::move(es));
    }
    for (auto& row : interaction_)
      for (double& x : row) x = 0.5 * rng.gaussian();
  }

  double bias_ = -0.3;
  std::vector<std::vector<double>> marginal_, marginal_shift_, effect_, effect_shift_;
  std::array<std::array<double, kInter>, kInter> interaction_{};
};

/// Draws `n_rows` labelled rows. Rows depend only on (seed, row index, shift).
inline TabularDataset synth_generate(std::size_t n_rows, double shift, std::uint64_t seed) {
  require(shift >= 0.0 && shift <= 1.0, "synth_generate: shift must be in [0, 1]");
  const SynthWorld& world = SynthWorld::instance();
  const auto& sizes = synth_vocab_sizes();
  std::vector<std::vector<double>> cdf;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    auto w = world.marginal(c, shift);
    std::partial_sum(w.begin(), w.end(), w.begin());
    for (double& x : w) x /= w.back();
    cdf.push_back(std::move(w));
  }
  TabularDataset out;
  out.n_categorical = sizes.size();
  out.n_continuous = 2;
  std::vector<std::int32_t> cat(sizes.size());
  std::array<float, 2> cont{};
  for (std::size_t i = 0; i < n_rows; ++i) {
    RngStream rng(mix(derive_seed(seed, "synth-row"), i));
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      const double u = rng.uniform();
      const auto it = std::lower_bound(cdf[c].begin(), cdf[c].end(), u);
      cat[c] = static_cast<std::int32_t>(std::min<std::size_t>(static_cast<std::size_t>(it - cdf[c].begin()), sizes[c] - 1));
    }
    cont[0] = static_cast<float>(rng.gaussian() + shift * world.continuous_mean_shift());
    cont[1] = static_cast<float>(rng.gaussian() - shift * world.continuous_mean_shift());
    const double p = 1.0 / (1.0 + std::exp(-world.logit(cat, cont, shift)));
    out.push_row(cat, cont, rng.uniform() < p ? 1.0f : 0.0f);
  }
  return out;
}

/// JSON summary: rows, vocab sizes, label base rate, dropped rows.
inline nlohmann::json dataset_summary(const TabularDataset& data, const DatasetSchema& schema, std::size_t dropped = 0) {
  return nlohmann::json{{"rows", data.rows()},
                        {"vocab_sizes", schema.vocab_sizes()},
                        {"label_base_rate", data.positive_rate()},
                        {"dropped_rows", dropped}};
}

}  // namespace dptab
