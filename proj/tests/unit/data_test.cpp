#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "random.hpp"
#include "spdgeo/binio.hpp"
#include "spdgeo/data.hpp"

using namespace spdgeo;
using spdgeo::testing::Rng;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("spdgeo_data_test_" + name);
}

CovarianceSet random_set(Rng& rng, int dim, int n) {
  std::vector<CovItem> items;
  for (int i = 0; i < n; ++i) items.push_back({1 + i % 3, i % 4, SpdMatrix(rng.spd(dim, 100))});
  return CovarianceSet(dim, std::move(items));
}

}  // namespace

TEST(EstimateCovariance, OrthogonalRowsGiveDiagonal) {
  Mat x(2, 4);
  x << 1, -1, 1, -1,
       1, 1, -1, -1;
  const SpdMatrix c = estimate_covariance(x);
  EXPECT_EQ(c.mat(), Mat::Identity(2, 2));
}

TEST(EstimateCovariance, ConstantSignalIsRejected) {
  EXPECT_THROW(estimate_covariance(Mat::Ones(3, 50)), NotPositiveDefinite);
  EXPECT_THROW(estimate_covariance(Mat::Zero(3, 50)), NotPositiveDefinite);
}

TEST(EstimateCovariance, PreconditionsAndShrinkage) {
  Rng rng(1);
  EXPECT_THROW(estimate_covariance(rng.gaussian(3, 1)), ShapeError);
  Mat bad = rng.gaussian(3, 10);
  bad(1, 2) = INFINITY;
  EXPECT_THROW(estimate_covariance(bad), NumericalError);
  const Mat short_epoch = rng.gaussian(6, 4);
  EXPECT_THROW(estimate_covariance(short_epoch), NotPositiveDefinite);
  const SpdMatrix c = estimate_covariance(short_epoch, {.shrinkage = true});
  EXPECT_NEAR(c.mat().trace(), 6.0, 1e-12);
  EXPECT_GT(mat::sym_eig(c.mat()).values(0), 0.0);
}

TEST(EstimateCovariance, RandomSuiteIsSpdAndTraceNormalized) {
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const int c = rng.integer(1, 22);
    const int t = rng.integer(c + 1, 3 * c + 40);
    const Mat x = rng.gaussian(c, t) * rng.uniform(1e-3, 1e3);
    const SpdMatrix cov = estimate_covariance(x);
    EXPECT_NEAR(cov.mat().trace(), c, 1e-12);
    EXPECT_GT(mat::sym_eig(cov.mat()).values(0), 0.0);
  }
}

TEST(Loso, SplitsPartitionBySubject) {
  Rng rng(3);
  const CovarianceSet ds = synth_generate(SynthConfig{.dim = 3, .n_subjects = 9, .n_classes = 2, .trials = 2});
  const auto splits = loso_splits(ds);
  ASSERT_EQ(splits.size(), 9u);
  std::multiset<int> tested;
  for (const auto& s : splits) {
    for (int i : s.test) {
      EXPECT_EQ(ds[static_cast<std::size_t>(i)].subject, s.subject);
      tested.insert(i);
    }
    for (int i : s.train) EXPECT_NE(ds[static_cast<std::size_t>(i)].subject, s.subject);
    EXPECT_EQ(s.train.size() + s.test.size(), ds.size());
  }
  EXPECT_EQ(tested.size(), ds.size());
  EXPECT_EQ(std::set<int>(tested.begin(), tested.end()).size(), ds.size());
}

TEST(Loso, TwoSubjectsFourItemsEach) {
  const CovarianceSet ds = synth_generate(SynthConfig{.dim = 2, .n_subjects = 2, .n_classes = 2, .trials = 2});
  for (const auto& s : loso_splits(ds)) {
    EXPECT_EQ(s.train.size(), 4u);
    EXPECT_EQ(s.test.size(), 4u);
  }
}

TEST(Loso, SingleSubjectIsRejected) {
  const CovarianceSet ds = synth_generate(SynthConfig{.dim = 2, .n_subjects = 1, .n_classes = 2, .trials = 2});
  EXPECT_THROW(loso_splits(ds), InsufficientSubjects);
}

TEST(Synth, NoDistortionReproducesPrototypes) {
  SynthConfig cfg{.dim = 4, .n_subjects = 3, .n_classes = 3, .trials = 5};
  const CovarianceSet ds = synth_generate(cfg);
  for (int k = 0; k < 3; ++k) {
    const Mat* first = nullptr;
    for (const auto& it : ds.items()) {
      if (it.label != k) continue;
      EXPECT_NEAR(it.cov.mat().trace(), 4.0, 1e-12);
      if (!first) first = &it.cov.mat();
      EXPECT_EQ(it.cov.mat(), *first);
    }
  }
  // Between-class scatter is positive.
  EXPECT_GT(airm_distance(ds[0].cov, ds[5].cov), 1e-3);
}

TEST(Synth, SeedIsBitExact) {
  const auto cfg = SynthConfig::high_distortion(11);
  EXPECT_EQ(serialize_covariances(synth_generate(cfg)), serialize_covariances(synth_generate(cfg)));
  auto other = cfg;
  other.seed = 12;
  EXPECT_NE(serialize_covariances(synth_generate(cfg)), serialize_covariances(synth_generate(other)));
}

TEST(Synth, RotationSeparatesSubjectMeans) {
  SynthConfig cfg{.dim = 4, .n_subjects = 3, .n_classes = 2, .trials = 4, .rotation_scale = 0.5, .seed = 5};
  const CovarianceSet ds = synth_generate(cfg);
  std::vector<SpdMatrix> means;
  for (int s : ds.subjects()) {
    std::vector<SpdMatrix> class0;
    for (const auto& it : ds.items())
      if (it.subject == s && it.label == 0) class0.push_back(it.cov);
    means.push_back(karcher_mean(class0));
  }
  const SpdMatrix grand = karcher_mean(means);
  double scatter = 0.0;
  for (const auto& m : means) scatter += std::pow(airm_distance(m, grand), 2);
  EXPECT_GT(scatter / static_cast<double>(means.size()), 1e-3);
}

TEST(Synth, InvalidConfigThrows) {
  EXPECT_THROW(synth_generate(SynthConfig{.dim = 0}), Error);
  EXPECT_THROW(synth_generate(SynthConfig{.noise = -1.0}), Error);
}

TEST(Files, CovarianceRoundTripIsBitExact) {
  Rng rng(4);
  const CovarianceSet ds = random_set(rng, 5, 7);
  const auto path = temp_path("rt.spdc");
  save_covariances(ds, path);
  const CovarianceSet back = load_covariances(path);
  EXPECT_TRUE(back == ds);
  std::filesystem::remove(path);
}

TEST(Files, TruncatedCovarianceFileIsFormatError) {
  Rng rng(5);
  const std::string bytes = serialize_covariances(random_set(rng, 3, 3));
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() - 1}) {
    EXPECT_THROW(parse_covariances(bytes.substr(0, cut)), FormatError) << cut;
  }
  EXPECT_THROW(parse_covariances(bytes + "x"), FormatError);
}

TEST(Files, BadHeaderAndLabels) {
  Rng rng(6);
  std::string bytes = serialize_covariances(random_set(rng, 3, 2));
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    parse_covariances(bad_magic);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  std::string bad_label = bytes;
  const std::size_t rec1 = 16 + (8 + 9 * 8);
  bad_label[rec1 + 5] = 0x01;  // label 256
  try {
    parse_covariances(bad_label);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.record(), std::optional<std::uint64_t>(1));
    EXPECT_EQ(e.offset(), rec1 + 4);
  }
}

TEST(Files, WrongBlockLengthReportsRecord) {
  // Header claims dim 22, records carry 21x21 blocks. Record 0's 22x22 read
  // runs 344 bytes into the next record, so its row-major block is not
  // symmetric and parsing stops at record 0.
  Rng rng(7);
  const CovarianceSet small = random_set(rng, 21, 3);
  std::string bytes = serialize_covariances(small);
  io::ByteWriter dim22;
  dim22.put_u32(22);
  bytes.replace(8, 4, dim22.bytes());
  try {
    parse_covariances(bytes);
    FAIL();
  } catch (const FormatError& e) {
    ASSERT_TRUE(e.record().has_value());
    EXPECT_EQ(*e.record(), 0u);
    EXPECT_NE(std::string(e.what()).find("not symmetric"), std::string::npos);
  }
}

TEST(Files, NonSpdRecordIsFormatError) {
  io::ByteWriter w;
  w.put_bytes("SPDC");
  w.put_u32(1);
  w.put_u32(2);
  w.put_u32(1);
  w.put_u32(1);
  w.put_u32(0);
  for (double v : {1.0, 0.0, 0.0, -1.0}) w.put_f64(v);
  try {
    parse_covariances(w.bytes());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.record(), std::optional<std::uint64_t>(0));
  }
}

TEST(Files, EpochRoundTripAndCovariances) {
  Rng rng(8);
  EpochSet es;
  es.channels = 3;
  for (int i = 0; i < 4; ++i) es.epochs.push_back({1 + i % 2, i % 2, rng.gaussian(3, 10 + i)});
  const auto path = temp_path("rt.epoc");
  save_epochs(es, path);
  const EpochSet back = load_epochs(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.epochs.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.epochs[i].samples, es.epochs[i].samples);
    EXPECT_EQ(back.epochs[i].label, es.epochs[i].label);
    EXPECT_EQ(back.epochs[i].subject, es.epochs[i].subject);
  }
  const CovarianceSet cs = estimate_covariances(back);
  EXPECT_EQ(cs.size(), 4u);
  EXPECT_EQ(cs.dim(), 3);
}

TEST(Files, LabelsCsv) {
  const CovarianceSet ds = synth_generate(SynthConfig{.dim = 2, .n_subjects = 2, .n_classes = 2, .trials = 1});
  const auto path = temp_path("labels.csv");
  save_labels_csv(ds, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "index,subject,label");
  std::getline(in, line);
  EXPECT_EQ(line, "0,1,0");
  std::filesystem::remove(path);
}
