#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dptab/data.hpp"

using namespace dptab;
namespace fs = std::filesystem;

namespace {

class CsvFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dptab_data_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }

  static DatasetSchema tiny_schema() {
    DatasetSchema s;
    s.categorical = {"A", "B"};
    s.continuous = {"X"};
    s.label = "INC";
    s.label_threshold = 50000.0;
    return s;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CsvFixture, FitsVocabularyAndStatistics) {
  const auto path = write("a.csv",
                          "A,B,X,INC\n"
                          "1,red,10,60000\n"
                          "2,blue,20,40000\n"
                          "1.0,red,30,50001\n"
                          "3,green,40,50000\n");
  const LoadedTable t = load_csv(path, tiny_schema());
  ASSERT_EQ(t.data.rows(), 4u);
  EXPECT_EQ(t.rows_dropped, 0u);
  EXPECT_EQ(t.schema.vocab_sizes(), (std::vector<std::size_t>{4, 4}));
  // "1" and "1.0" are the same code; indices start at 1.
  EXPECT_EQ(t.data.cat_row(0)[0], t.data.cat_row(2)[0]);
  EXPECT_GE(t.data.cat_row(0)[0], 1);
  EXPECT_EQ(t.data.labels, (std::vector<float>{1, 0, 1, 0}));
  EXPECT_DOUBLE_EQ(t.schema.mean[0], 25.0);
  EXPECT_NEAR(t.schema.stddev[0], std::sqrt(125.0), 1e-12);
  double s = 0.0;
  for (float v : t.data.continuous) s += v;
  EXPECT_NEAR(s, 0.0, 1e-6);
}

TEST_F(CsvFixture, FittedSchemaMapsUnseenCodesToZero) {
  const auto train = write("train.csv", "A,B,X,INC\n1,red,1,0\n2,blue,3,1\n");
  const auto test = write("test.csv", "A,B,X,INC\n9,red,5,0\n2,purple,1,99999\n");
  const LoadedTable fitted = load_csv(train, tiny_schema());
  const LoadedTable applied = load_csv(test, fitted.schema);
  EXPECT_EQ(applied.data.cat_row(0)[0], 0);
  EXPECT_NE(applied.data.cat_row(0)[1], 0);
  EXPECT_EQ(applied.data.cat_row(1)[1], 0);
  EXPECT_EQ(applied.schema.vocab, fitted.schema.vocab);
  // Statistics come from the fitting file: mean 2, std 1.
  EXPECT_FLOAT_EQ(applied.data.cont_row(0)[0], 3.0f);
}

TEST_F(CsvFixture, MissingColumnIsADataError) {
  const auto path = write("m.csv", "A,X,INC\n1,2,3\n");
  try {
    load_csv(path, tiny_schema());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("'B'"), std::string::npos);
  }
}

TEST_F(CsvFixture, ColumnMappingRenamesHeaders) {
  const auto path = write("r.csv", "alpha,beta,x,income\n1,2,3,70000\n");
  const auto map_path = write("map.json", R"({"A": "alpha", "B": "beta", "X": "x", "INC": "income"})");
  const LoadedTable t = load_csv(path, tiny_schema(), load_column_mapping(map_path));
  EXPECT_EQ(t.data.rows(), 1u);
  EXPECT_EQ(t.data.labels[0], 1.0f);
  try {
    load_csv(path, tiny_schema(), ColumnMapping{{"A", "nope"}});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("mapped from 'A'"), std::string::npos);
  }
  EXPECT_THROW(load_column_mapping(write("bad.json", "{not json")), DataError);
}

TEST_F(CsvFixture, EmptyFileWarnsWithZeroRows) {
  const LoadedTable t = load_csv(write("e.csv", ""), tiny_schema());
  EXPECT_EQ(t.data.rows(), 0u);
  ASSERT_FALSE(t.warnings.empty());
  const LoadedTable h = load_csv(write("h.csv", "A,B,X,INC\n"), tiny_schema());
  EXPECT_EQ(h.data.rows(), 0u);
  EXPECT_FALSE(h.warnings.empty());
}

TEST_F(CsvFixture, MalformedRowsAreDroppedAndCounted) {
  const auto path = write("d.csv",
                          "A,B,X,INC\n"
                          "1,red,10,60000\n"
                          ",red,10,60000\n"
                          "1,red,abc,60000\n"
                          "1,red,10\n"
                          "\"2\",\"b,lue\",5,1\n");
  const LoadedTable t = load_csv(path, tiny_schema());
  EXPECT_EQ(t.rows_read, 5u);
  EXPECT_EQ(t.rows_dropped, 3u);
  EXPECT_EQ(t.data.rows(), 2u);
  EXPECT_TRUE(t.schema.vocab[1].contains("b,lue"));
}

TEST_F(CsvFixture, MissingFileIsADataError) { EXPECT_THROW(load_csv((dir_ / "none.csv").string(), tiny_schema()), DataError); }

TEST(Split, SizesAndDisjointness) {
  TabularDataset d;
  d.n_continuous = 1;
  for (int i = 0; i < 35022; ++i) d.push_row({}, std::vector<float>{static_cast<float>(i)}, static_cast<float>(i % 2));
  const auto [train, test] = split(d, 0.2, 7);
  EXPECT_EQ(test.rows(), 7005u);
  EXPECT_EQ(train.rows(), 28017u);
  std::vector<bool> seen(d.rows(), false);
  for (const auto* part : {&train, &test})
    for (float v : part->continuous) {
      const auto i = static_cast<std::size_t>(v);
      EXPECT_FALSE(seen[i]);
      seen[i] = true;
    }
  const auto [train2, test2] = split(d, 0.2, 7);
  EXPECT_EQ(test2.continuous, test.continuous);
  const auto [train3, test3] = split(d, 0.2, 8);
  EXPECT_NE(test3.continuous, test.continuous);
}

TEST(Synthetic, DeterministicPerSeedAndRow) {
  const TabularDataset a = synth_generate(500, 1.0, 3), b = synth_generate(500, 1.0, 3), c = synth_generate(500, 1.0, 4);
  EXPECT_EQ(a.categorical, b.categorical);
  EXPECT_EQ(a.continuous, b.continuous);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.categorical, c.categorical);
  // A prefix of a larger draw is the smaller draw.
  const TabularDataset big = synth_generate(800, 1.0, 3);
  EXPECT_TRUE(std::equal(a.labels.begin(), a.labels.end(), big.labels.begin()));
}

TEST(Synthetic, IndicesRespectTheSchema) {
  const TabularDataset d = synth_generate(2000, 0.5, 1);
  const auto sizes = synth_schema().vocab_sizes();
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      ASSERT_GE(d.cat_row(i)[c], 0);
      ASSERT_LT(static_cast<std::size_t>(d.cat_row(i)[c]), sizes[c]);
    }
}

TEST(Synthetic, BaseRatesAreBalancedEnough) {
  for (double shift : {0.0, 1.0}) {
    const double r = synth_generate(20000, shift, 11).positive_rate();
    EXPECT_GT(r, 0.2);
    EXPECT_LT(r, 0.8);
  }
}

TEST(Synthetic, ShiftChangesTheDecisionRule) {
  const TabularDataset target = synth_generate(20000, 1.0, 12);
  const SynthWorld& w = SynthWorld::instance();
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < target.rows(); ++i)
    flipped += (w.logit(target.cat_row(i), target.cont_row(i), 0.0) > 0) != (w.logit(target.cat_row(i), target.cont_row(i), 1.0) > 0);
  EXPECT_GE(static_cast<double>(flipped) / static_cast<double>(target.rows()), 0.10);
}

TEST(Synthetic, ShiftMustBeInUnitInterval) { EXPECT_THROW(synth_generate(10, 1.5, 0), ContractViolation); }

TEST(Summary, ReportsRowsAndBaseRate) {
  const TabularDataset d = synth_generate(100, 0.0, 0);
  const auto j = dataset_summary(d, synth_schema(), 3);
  EXPECT_EQ(j["rows"], 100);
  EXPECT_EQ(j["dropped_rows"], 3);
  EXPECT_DOUBLE_EQ(j["label_base_rate"].get<double>(), d.positive_rate());
}

TEST(Schema, AcsReferenceVocabularies) {
  const DatasetSchema s = acs_income_schema();
  EXPECT_EQ(s.categorical.size(), 8u);
  EXPECT_EQ(s.continuous.size(), 2u);
  EXPECT_EQ(acs_income_reference_vocab_sizes().size(), 8u);
  EXPECT_FALSE(s.fitted());
  EXPECT_TRUE(synth_schema().fitted());
}
