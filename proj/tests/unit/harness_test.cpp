#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>
#include <json.hpp>

#include "random.hpp"
#include "spdgeo/harness.hpp"

using namespace spdgeo;
using spdgeo::testing::Rng;

namespace {

const std::vector<int> kSubjects{1, 2, 3, 4, 5, 6, 7, 8, 9};
const std::vector<double> kMdmColumn{61.81, 26.39, 72.92, 44.79, 42.71, 32.29, 59.38, 71.18, 60.42};

RunConfig config(const std::string& text) { return parse_run_config(text); }

/// Every item is the identity, so MDM's class means tie and it always
/// answers class 0.
CovarianceSet constant_set(int subjects, int classes, int per_class) {
  std::vector<CovItem> items;
  for (int s = 1; s <= subjects; ++s)
    for (int k = 0; k < classes; ++k)
      for (int i = 0; i < per_class; ++i) items.push_back({s, k, SpdMatrix::identity(3)});
  return CovarianceSet(3, std::move(items));
}

CovarianceSet small_synth(std::uint64_t seed = 3) {
  SynthConfig c = SynthConfig::low_distortion(seed);
  c.n_subjects = 3;
  c.dim = 4;
  c.trials = 8;
  return synth_generate(c);
}

double recomputed_mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double recomputed_std(const std::vector<double>& v) {
  const double m = recomputed_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / v.size());
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("spdgeo_harness_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

// --- RunConfig ---------------------------------------------------------------

TEST(RunConfig, DefaultsMatchTheTrainingSchedule) {
  const RunConfig c = config(R"({"seed": 1, "classifier": "mdm"})");
  EXPECT_DOUBLE_EQ(c.optim.lr, 1e-3);
  EXPECT_DOUBLE_EQ(c.optim.weight_decay, 1e-5);
  EXPECT_EQ(c.optim.batch, 256);
  EXPECT_EQ(c.optim.steps, 1000);
  EXPECT_TRUE(c.align.empty());
}

TEST(RunConfig, ParsesStagesAndOverrides) {
  const RunConfig c = config(R"({"name": "x", "align": ["ra", {"kind": "dcr", "gamma_c": 0.2}],
                                 "classifier": {"kind": "tslr"}})");
  ASSERT_EQ(c.align.size(), 2u);
  EXPECT_EQ(c.align[0].kind, AlignStage::Ra);
  EXPECT_EQ(c.align[1].kind, AlignStage::Dcr);
  EXPECT_EQ(c.classifier.kind, ClassifierKind::Tslr);
  EXPECT_EQ(c.label(), "x");
  EXPECT_NE(effective_stage_hyper(c, c.align[1]).find("\"gamma_c\":0.2"), std::string::npos);
}

TEST(RunConfig, RunOptimFlowsIntoStagesUnlessOverridden) {
  const RunConfig c = config(R"({"optim": {"lr": 0.05, "steps": 7, "batch": 9},
                                 "align": [{"kind": "dcr", "steps": 3}, "rifu"],
                                 "classifier": {"kind": "tslr", "optim": {"lr": 0.2}}})");
  const auto dcr = nlohmann::json::parse(effective_stage_hyper(c, c.align[0]));
  EXPECT_DOUBLE_EQ(dcr["lr"].get<double>(), 0.05);
  EXPECT_EQ(dcr["steps"].get<int>(), 3);
  EXPECT_EQ(dcr["batch"].get<int>(), 0);  // DCR keeps the full-set default
  const auto rifu = nlohmann::json::parse(effective_stage_hyper(c, c.align[1]));
  EXPECT_EQ(rifu["optim"]["batch"].get<int>(), 9);
  EXPECT_EQ(rifu["optim"]["steps"].get<int>(), 7);
  const auto clf = nlohmann::json::parse(effective_classifier_hyper(c));
  EXPECT_DOUBLE_EQ(clf["optim"]["lr"].get<double>(), 0.2);
  EXPECT_EQ(clf["optim"]["steps"].get<int>(), 7);
}

TEST(RunConfig, RejectsInvalidConfigs) {
  EXPECT_THROW(config(R"({"align": ["ra"]})"), Error);                              // no classifier
  EXPECT_THROW(config(R"({"classifier": ["mdm", "tslr"]})"), Error);                // two classifiers
  EXPECT_THROW(config(R"({"align": ["ra", "dcr", "ra"], "classifier": "mdm"})"), Error);
  EXPECT_THROW(config(R"({"classifier": "mdm", "colour": 1})"), Error);
  EXPECT_THROW(config(R"({"align": [{"kind": "dcr", "gama": 1}], "classifier": "mdm"})"), Error);
  EXPECT_THROW(config(R"({"align": ["xyz"], "classifier": "mdm"})"), Error);
  EXPECT_THROW(config(R"({"optim": {"lr": -1}, "classifier": "mdm"})"), Error);
  EXPECT_THROW(config(R"({"classifier": {"kind": "tslr", "optim": {"steps": 0}}})"), Error);
  EXPECT_THROW(config("{not json"), Error);
}

TEST(RunConfig, SeedFallsBackToEnvironment) {
  ::setenv("SPDNET_GEO_SEED", "41", 1);
  EXPECT_EQ(config(R"({"classifier": "mdm"})").seed, 41u);
  EXPECT_EQ(config(R"({"seed": 2, "classifier": "mdm"})").seed, 2u);
  ::setenv("SPDNET_GEO_SEED", "junk", 1);
  EXPECT_EQ(config(R"({"classifier": "mdm"})").seed, 0u);
  ::unsetenv("SPDNET_GEO_SEED");
  EXPECT_EQ(config(R"({"classifier": "mdm"})").seed, 0u);
}

TEST(RunConfig, RoundTripsThroughJson) {
  const RunConfig c = config(R"({"name": "n", "seed": 5, "data": "d.spdc", "out": "o",
                                 "align": ["rpa", {"kind": "ra", "scope": "global"}],
                                 "classifier": {"kind": "csp-lda", "filters": 2}})");
  const RunConfig back = parse_run_config(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.fingerprint(), c.fingerprint());
}

TEST(Fingerprint, ChangesExactlyWithMeaningfulFields) {
  const std::string base = config(R"({"seed": 1, "align": ["ra"], "classifier": "tslr"})").fingerprint();
  EXPECT_EQ(base.size(), 16u);
  // Cosmetic fields and spelled-out defaults leave it alone.
  EXPECT_EQ(config(R"({"seed": 1, "name": "a", "out": "x/", "data": "y.spdc", "align": ["ra"],
                       "classifier": "tslr"})").fingerprint(), base);
  EXPECT_EQ(config(R"({"seed": 1, "align": [{"kind": "ra", "scope": "subject"}],
                       "optim": {"lr": 0.001}, "classifier": {"kind": "tslr"}})").fingerprint(), base);
  // Anything that changes the experiment moves it.
  for (const char* other : {
           R"({"seed": 2, "align": ["ra"], "classifier": "tslr"})",
           R"({"seed": 1, "align": ["ra"], "classifier": "mdm"})",
           R"({"seed": 1, "align": [], "classifier": "tslr"})",
           R"({"seed": 1, "align": [{"kind": "ra", "mean": "karcher"}], "classifier": "tslr"})",
           R"({"seed": 1, "optim": {"steps": 999}, "align": ["ra"], "classifier": "tslr"})",
           R"({"seed": 1, "align": ["ra"], "classifier": {"kind": "tslr", "optim": {"clip_norm": 1}}})",
       }) {
    EXPECT_NE(config(other).fingerprint(), base) << other;
  }
}

// --- LOSO --------------------------------------------------------------------

TEST(Loso, ConstantPredictorScoresChance) {
  const auto ds = constant_set(2, 4, 5);
  const LosoReport r = run_loso(config(R"({"classifier": "mdm"})"), ds);
  ASSERT_EQ(r.folds.size(), 2u);
  for (const auto& f : r.folds) {
    EXPECT_TRUE(f.ok);
    EXPECT_DOUBLE_EQ(f.accuracy, 25.0);
    EXPECT_DOUBLE_EQ(f.confusion.col(0).sum(), 20.0);
  }
  EXPECT_DOUBLE_EQ(r.mean(), 25.0);
  EXPECT_DOUBLE_EQ(r.std_dev(), 0.0);
}

TEST(Loso, RaThenMdmSeparatesSyntheticData) {
  const auto ds = synth_generate(SynthConfig::low_distortion(7));
  const LosoReport r = run_loso(config(R"({"align": ["ra"], "classifier": "mdm"})"), ds, {.jobs = 3});
  EXPECT_TRUE(r.all_ok());
  EXPECT_EQ(r.folds.size(), 6u);
  EXPECT_GE(r.mean(), 90.0);
}

TEST(Loso, ReportIsReproducibleAcrossJobCounts) {
  const auto ds = small_synth();
  const RunConfig c = config(R"({"seed": 4, "align": ["ra", {"kind": "dcr", "steps": 5}],
                                 "classifier": {"kind": "tslr", "optim": {"steps": 20}}})");
  const std::string a = run_loso(c, ds).to_json();
  EXPECT_EQ(run_loso(c, ds).to_json(), a);
  EXPECT_EQ(run_loso(c, ds, {.jobs = 4}).to_json(), a);
}

TEST(Loso, FoldSeedIsSeedPlusSubject) {
  const auto ds = small_synth();
  const RunConfig c = config(R"({"seed": 10, "classifier": {"kind": "tslr", "optim": {"steps": 15}}})");
  const LosoReport r = run_loso(c, ds);
  for (const auto& f : r.folds) {
    std::vector<int> train;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds[i].subject != f.subject) train.push_back(static_cast<int>(i));
    auto clf = make_classifier(ClassifierKind::Tslr, effective_classifier_hyper(c));
    clf->fit(ds.subset(train), 10 + f.subject);
    const auto test = ds.subset(ds.indices_of(f.subject));
    const auto pred = clf->predict(test);
    int correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) correct += pred[i] == test[i].label;
    EXPECT_EQ(f.correct, correct) << "subject " << f.subject;
  }
}

TEST(Loso, FailedFoldIsMarkedAndRunContinues) {
  // Subject 1 holds the only class-1 items, so its fold trains on one class.
  std::vector<CovItem> items;
  Rng rng(5);
  for (int s = 1; s <= 3; ++s)
    for (int i = 0; i < 6; ++i) items.push_back({s, s == 1 ? i % 2 : 0, SpdMatrix(rng.spd(3))});
  const CovarianceSet ds(3, std::move(items));
  const LosoReport r = run_loso(config(R"({"classifier": {"kind": "tslr", "optim": {"steps": 3}}})"), ds);
  ASSERT_EQ(r.folds.size(), 3u);
  EXPECT_FALSE(r.folds[0].ok);
  EXPECT_FALSE(r.folds[0].error.empty());
  EXPECT_TRUE(r.folds[1].ok);
  EXPECT_TRUE(r.folds[2].ok);
  EXPECT_FALSE(r.all_ok());
  EXPECT_EQ(r.accuracies().size(), 2u);
  EXPECT_NEAR(r.mean(), (r.folds[1].accuracy + r.folds[2].accuracy) / 2, 1e-12);
}

TEST(Loso, NeedsTwoSubjects) {
  EXPECT_THROW(run_loso(config(R"({"classifier": "mdm"})"), constant_set(1, 2, 3)), InsufficientSubjects);
  EXPECT_THROW(run_fold(config(R"({"classifier": "mdm"})"), constant_set(2, 2, 3), 9), UnknownSubject);
}

// --- zero-shot audit ---------------------------------------------------------

TEST(Audit, SupervisedStagesNeverSeeTheHeldOutSubject) {
  const auto ds = small_synth();
  const RunConfig c = config(R"({"align": ["ra", "rpa", {"kind": "dcr", "steps": 2}, {"kind": "rifu",
                                 "optim": {"steps": 2}}], "classifier": "mdm"})");
  for (int s : ds.subjects()) {
    const FoldResult f = run_fold(c, ds, s);
    EXPECT_NO_THROW(check_audit(f));
    int test_fits = 0;
    for (const auto& e : f.audit) {
      const bool sees = std::find(e.subjects.begin(), e.subjects.end(), s) != e.subjects.end();
      if (sees) {
        ++test_fits;
        EXPECT_FALSE(e.supervised) << e.stage;
        EXPECT_FALSE(e.labels_visible) << e.stage;
        EXPECT_EQ(e.subjects, std::vector<int>{s});
      }
    }
    EXPECT_EQ(test_fits, 2);  // ra/test and rpa/test
    EXPECT_EQ(f.audit.size(), 7u);
  }
}

TEST(Audit, GlobalRaIsFitOnTrainingSubjectsOnly) {
  const auto ds = small_synth();
  const FoldResult f = run_fold(config(R"({"align": [{"kind": "ra", "scope": "global"}], "classifier": "mdm"})"), ds, 2);
  ASSERT_EQ(f.audit.size(), 2u);
  EXPECT_EQ(f.audit[0].subjects, (std::vector<int>{1, 3}));
}

TEST(Audit, ViolationIsDetected) {
  FoldResult f;
  f.subject = 3;
  f.audit.push_back({"ra/test", false, {3}, false});
  EXPECT_NO_THROW(check_audit(f));
  f.audit.push_back({"tslr", true, {1, 3}, true});
  EXPECT_THROW(check_audit(f), ZeroShotViolation);
  f.audit.back() = {"ra", false, {3}, true};
  EXPECT_THROW(check_audit(f), ZeroShotViolation);
}

// --- reports and tables ------------------------------------------------------

TEST(Report, MeanAndStdAreRecomputable) {
  const LosoReport r = report_from_accuracies("MDM", kSubjects, kMdmColumn);
  EXPECT_NEAR(r.mean(), recomputed_mean(kMdmColumn), 1e-9);
  EXPECT_NEAR(r.std_dev(), recomputed_std(kMdmColumn), 1e-9);
}

TEST(Report, JsonRoundTrip) {
  const auto ds = constant_set(2, 4, 2);
  const LosoReport r = run_loso(config(R"({"align": ["ra"], "classifier": "mdm"})"), ds);
  const LosoReport back = parse_report(r.to_json());
  EXPECT_EQ(back.to_json(), r.to_json());
  EXPECT_EQ(back.fingerprint, r.fingerprint);
  EXPECT_EQ(back.folds[1].confusion, r.folds[1].confusion);
  EXPECT_THROW(parse_report("{}"), FormatError);
  EXPECT_THROW(parse_report("[1, 2"), FormatError);
}

TEST(Report, JsonExcludesTiming) {
  const auto ds = constant_set(2, 2, 2);
  LosoReport r = run_loso(config(R"({"classifier": "mdm"})"), ds);
  const std::string before = r.to_json();
  r.folds[0].seconds += 100.0;
  EXPECT_EQ(r.to_json(), before);
  EXPECT_NE(r.timing_json().find("seconds"), std::string::npos);
}

TEST(Table, ReproducesTheMdmColumn) {
  const Table t = emit_table({report_from_accuracies("MDM", kSubjects, kMdmColumn)});
  EXPECT_NE(t.text.find("52.43 ± 15.66"), std::string::npos) << t.text;
  EXPECT_EQ(format_mean_std(recomputed_mean(kMdmColumn), recomputed_std(kMdmColumn)), "52.43 ± 15.66");
}

TEST(Table, SingleSubjectHasZeroStd) {
  const Table t = emit_table({report_from_accuracies("A", {4}, {61.5})});
  EXPECT_NE(t.text.find("61.50 ± 0.00"), std::string::npos) << t.text;
}

TEST(Table, MarksTheBestScorePerRow) {
  const Table t = emit_table({report_from_accuracies("A", {1, 2}, {50.0, 40.0}),
                              report_from_accuracies("B", {1, 2}, {45.0, 40.001})});
  EXPECT_NE(t.text.find("50.00*"), std::string::npos);
  EXPECT_EQ(t.text.find("45.00*"), std::string::npos);
  // Ties at printed precision are both marked.
  std::size_t marks = 0;
  for (std::size_t p = t.text.find("40.00*"); p != std::string::npos; p = t.text.find("40.00*", p + 1)) ++marks;
  EXPECT_EQ(marks, 2u);
}

TEST(Table, CsvRoundTripsAtPrintedPrecision) {
  Rng rng(11);
  std::vector<double> a, b;
  for (std::size_t i = 0; i < kSubjects.size(); ++i) {
    a.push_back(rng.uniform(0, 100));
    b.push_back(rng.uniform(0, 100));
  }
  const std::vector<LosoReport> reports{report_from_accuracies("RA, TSLR", kSubjects, a),
                                        report_from_accuracies("say \"hi\"", kSubjects, b)};
  const Table t = emit_table(reports);
  const auto back = parse_table_csv(t.csv);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "RA, TSLR");
  EXPECT_EQ(back[1].name, "say \"hi\"");
  for (std::size_t i = 0; i < kSubjects.size(); ++i) {
    EXPECT_NEAR(back[0].folds[i].accuracy, a[i], 0.005 + 1e-12);
    EXPECT_NEAR(back[1].folds[i].accuracy, b[i], 0.005 + 1e-12);
  }
  EXPECT_EQ(emit_table(back).csv, t.csv);
}

TEST(Table, FailedFoldsShowAsFailed) {
  LosoReport r = report_from_accuracies("A", {1, 2}, {50.0, 70.0});
  r.folds[1].ok = false;
  const Table t = emit_table({r});
  EXPECT_NE(t.text.find("failed"), std::string::npos);
  EXPECT_NE(t.text.find("50.00 ± 0.00"), std::string::npos);
  const auto back = parse_table_csv(t.csv);
  EXPECT_FALSE(back[0].folds[1].ok);
}

TEST(Table, RejectsMismatchedSubjects) {
  EXPECT_THROW(emit_table({report_from_accuracies("A", {1, 2}, {1, 2}), report_from_accuracies("B", {1, 3}, {1, 2})}),
               FormatError);
  EXPECT_THROW(emit_table({}), EmptyInput);
  EXPECT_THROW(parse_table_csv("x,y\n1,2\n"), FormatError);
  EXPECT_THROW(parse_table_csv("subject,A\n1,abc\n"), FormatError);
  EXPECT_THROW(parse_table_csv("subject,A\n1,2,3\n"), FormatError);
}

TEST(Report, WritesAllFiles) {
  const auto dir = scratch("files");
  const auto ds = constant_set(2, 4, 2);
  const LosoReport r = run_loso(config(R"({"classifier": "mdm"})"), ds);
  write_report_files(r, dir);
  for (const char* f : {"report.json", "timing.json", "table.txt", "table.csv", "confusion_1.csv", "confusion_2.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  EXPECT_EQ(load_report(dir / "report.json").to_json(), r.to_json());
  std::filesystem::remove_all(dir);
}

// --- stage files -------------------------------------------------------------

TEST(Stage, SavedAlignerReproducesTheFit) {
  const auto ds = small_synth();
  for (AlignStage k : {AlignStage::Ra, AlignStage::Rpa, AlignStage::Dcr, AlignStage::Rifu}) {
    const StageFit f = fit_stage(k, R"({})", ds, 1);
    EXPECT_EQ(apply_aligner(f.model, ds), f.aligned) << align_stage_name(k);
    EXPECT_EQ(f.log.has_value(), k == AlignStage::Dcr || k == AlignStage::Rifu);
  }
  EXPECT_THROW(fit_stage(AlignStage::Ra, R"({"scope": "planet"})", ds, 0), Error);
}
