#pragma once

// Leave-one-subject-out pipeline runner and result tables.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "spdgeo/align.hpp"
#include "spdgeo/classify.hpp"
#include "spdgeo/data.hpp"

namespace spdgeo {

enum class AlignStage { Ra, Rpa, Dcr, Rifu };

std::string_view align_stage_name(AlignStage s);  // "ra", "rpa", "dcr", "rifu"
AlignStage parse_align_stage(std::string_view name);

struct StageSpec {
  AlignStage kind = AlignStage::Ra;
  std::string hyper_json = "{}";  // overrides for this stage only
};

struct ClassifierSpec {
  ClassifierKind kind = ClassifierKind::Mdm;
  std::string hyper_json = "{}";
};

/// JSON schema:
///
///   {
///     "name": "RA/TSLR",                   column label in tables
///     "seed": 0,
///     "data": "fixture.spdc",
///     "out": "report/",
///     "optim": {"lr": 1e-3, "weight_decay": 1e-5, "batch": 256, "steps": 1000},
///     "align": ["ra", {"kind": "dcr", "gamma_c": 0.2}],
///     "classifier": {"kind": "tslr"}       or just "tslr"
///   }
///
/// The optim block is the default for every iteratively trained stage; a
/// stage's own "optim" object (or, for DCR, its flat lr/weight_decay/steps
/// keys) wins. DCR ignores the batch size and trains on the full set.
struct RunConfig {
  std::string name;
  std::uint64_t seed = 0;
  std::string data;
  std::string out;
  ad::OptimConfig optim;
  std::vector<StageSpec> align;
  ClassifierSpec classifier;

  /// Throws Error on repeated stages or invalid hyperparameters.
  void validate() const;

  /// Name if set, otherwise "ra>dcr>tslr" style.
  std::string label() const;

  /// Canonical JSON with every default filled in. Paths and the name are
  /// excluded, so two configs that run the same experiment agree.
  std::string canonical_json() const;
  /// FNV-1a 64 of canonical_json(), 16 hex digits.
  std::string fingerprint() const;

  std::string to_json() const;
};

/// Unknown keys throw Error.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Effective hyperparameter JSON for a stage after applying the run's optim
/// block.
std::string effective_stage_hyper(const RunConfig& cfg, const StageSpec& stage);
std::string effective_classifier_hyper(const RunConfig& cfg);

struct StageFit {
  CovarianceSet aligned;
  std::string model;  // ALGN image
  std::optional<ad::TrainLog> log;
};

/// Fits one stage on `ds` with effective hyperparameters (defaults plus
/// `hyper_json`) and applies it to `ds`.
StageFit fit_stage(AlignStage kind, const std::string& hyper_json, const CovarianceSet& ds, std::uint64_t seed);

/// Applies a saved ALGN image of any kind.
CovarianceSet apply_aligner(const std::string& model, const CovarianceSet& ds);

struct AuditEntry {
  std::string stage;
  bool supervised = false;
  std::vector<int> subjects;  // distinct subjects handed to the estimator
  bool labels_visible = false;
};

/// First and last training loss of an iteratively fitted stage.
struct StageLoss {
  std::string stage;
  double first = 0.0;
  double last = 0.0;
  int steps = 0;
};

struct FoldResult {
  int subject = 0;
  bool ok = false;
  std::string error;
  int n_test = 0;
  int correct = 0;
  double accuracy = 0.0;        // percent
  double train_accuracy = 0.0;  // classifier on its own aligned training set
  Mat confusion;          // K x K, rows true class, columns predicted
  std::vector<AuditEntry> audit;
  std::vector<StageLoss> losses;
  double seconds = 0.0;
};

struct LosoReport {
  std::string name;
  std::string fingerprint;
  std::string config_json;
  int n_classes = 0;
  std::vector<FoldResult> folds;

  /// Over successful folds.
  double mean() const;
  /// Population standard deviation over successful folds.
  double std_dev() const;
  bool all_ok() const;
  std::vector<int> subjects() const;
  std::vector<double> accuracies() const;

  /// Everything except timing, so equal runs give equal bytes.
  std::string to_json() const;
  /// Wall-clock seconds per fold.
  std::string timing_json() const;
};

/// Throws FormatError on malformed input.
LosoReport parse_report(const std::string& json_text);
LosoReport load_report(const std::filesystem::path& path);

/// A report holding only per-subject accuracies (for table rendering).
LosoReport report_from_accuracies(std::string name, const std::vector<int>& subjects,
                                  const std::vector<double>& accuracies);

struct LosoOptions {
  int jobs = 1;
};

/// One fold per subject with the fold seed cfg.seed + subject. Fold failures
/// (any spdgeo::Error except ZeroShotViolation) are recorded and the run
/// goes on; a zero-shot violation aborts. Throws InsufficientSubjects for fewer than
/// two subjects.
LosoReport run_loso(const RunConfig& cfg, const CovarianceSet& ds, const LosoOptions& opt = {});

/// Runs one fold and throws on failure. Throws UnknownSubject if `held_out`
/// has no items.
FoldResult run_fold(const RunConfig& cfg, const CovarianceSet& ds, int held_out);

/// Throws ZeroShotViolation if an audit entry shows a supervised estimator,
/// or any estimator that could read labels, receiving the held-out subject.
void check_audit(const FoldResult& fold);

struct Table {
  std::string text;
  std::string csv;
};

/// Rows per subject plus "Mean ± Std", one column per report, two decimals.
/// The best score in each row is marked with '*'. Throws FormatError if the
/// reports cover different subjects.
Table emit_table(const std::vector<LosoReport>& reports);

/// "52.43 ± 15.66"
std::string format_mean_std(double mean, double std_dev);

/// Parses table CSV back into one accuracy-only report per column.
std::vector<LosoReport> parse_table_csv(const std::string& csv);

/// Writes report.json, timing.json, table.txt, table.csv and
/// confusion_<subject>.csv into `dir`.
void write_report_files(const LosoReport& report, const std::filesystem::path& dir);

/// Seed from SPDNET_GEO_SEED, if set and valid.
std::optional<std::uint64_t> seed_from_env();

}  // namespace spdgeo
