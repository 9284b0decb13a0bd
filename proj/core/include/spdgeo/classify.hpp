#pragma once

// Classifiers over covariance sets. Class labels are the integers
// 0..K-1 with K = CovarianceSet::num_classes() of the training set; every
// argmax/argmin tie resolves to the lowest class index.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spdgeo/data.hpp"
#include "spdgeo/optim.hpp"
#include "spdgeo/unet.hpp"

namespace spdgeo {

enum class ClassifierKind : std::uint32_t { Mdm = 1, Tslr = 2, TsaLda = 3, CspLda = 4, DcNet = 5, RifuNet = 6 };

/// "mdm", "tslr", "tsa-lda", "csp-lda", "dcnet", "rifunet".
std::string_view classifier_name(ClassifierKind kind);
/// Throws Error on an unknown name.
ClassifierKind parse_classifier_kind(std::string_view name);

/// Index of the largest entry of row `i`; ties go to the lowest index.
int argmax_row(const Mat& scores, Eigen::Index i);
std::vector<int> argmax_rows(const Mat& scores);

/// Row-wise softmax.
Mat softmax_rows(const Mat& logits);

// --- MDM -------------------------------------------------------------------

struct MdmModel {
  std::vector<SpdMatrix> prototypes;  // indexed by class
};

/// Karcher mean per class. Throws TrainingError if a class in 0..K-1 is empty.
MdmModel mdm_fit(const CovarianceSet& ds);
int mdm_predict(const MdmModel& m, const SpdMatrix& c);

// --- tangent space -----------------------------------------------------------

/// z = vec(log(M^{-1/2} C M^{-1/2})) with M the log-Euclidean mean of the
/// training set.
struct TangentMap {
  SpdMatrix base = SpdMatrix::identity(1);
  Mat whitener;

  static TangentMap fit(const CovarianceSet& ds);
  Vec features(const SpdMatrix& c) const;
  /// One row per item.
  Mat features(const CovarianceSet& ds) const;
};

struct TslrConfig {
  ad::OptimConfig optim;
};

struct TslrModel {
  TslrConfig config;
  TangentMap tangent;
  Mat weights;  // p x K
  Mat bias;     // K x 1
};

/// Multinomial logistic regression on tangent features, zero-initialized and
/// trained with Adam on the mean cross-entropy.
TslrModel tslr_fit(const CovarianceSet& ds, const TslrConfig& cfg = {}, std::uint64_t seed = 0,
                   ad::TrainLog* log = nullptr);
Mat tslr_probabilities(const TslrModel& m, const CovarianceSet& ds);
std::vector<int> tslr_predict(const TslrModel& m, const CovarianceSet& ds);

// --- LDA ---------------------------------------------------------------------

struct LdaModel {
  Mat means;       // K x p
  Mat coef;        // p x K, Sigma^{-1} mu_k
  Vec offset;      // K, -mu_k^T Sigma^{-1} mu_k / 2 + log pi_k
  double shrinkage = 0.05;
};

/// Pooled within-class covariance, shrunk towards (tr Sigma / p) I, and
/// empirical priors. Needs at least 2 rows per class; throws TrainingError
/// otherwise and NumericalError if Sigma is singular after shrinkage.
LdaModel lda_fit(const Mat& x, std::span<const int> labels, int n_classes, double shrinkage = 0.05);
/// delta_k(x) for every row.
Mat lda_scores(const LdaModel& m, const Mat& x);

struct TsaLdaConfig {
  double shrinkage = 0.05;
};

struct TsaLdaModel {
  TsaLdaConfig config;
  TangentMap tangent;
  LdaModel lda;
};

TsaLdaModel tsa_lda_fit(const CovarianceSet& ds, const TsaLdaConfig& cfg = {});
std::vector<int> tsa_lda_predict(const TsaLdaModel& m, const CovarianceSet& ds);

// --- CSP ---------------------------------------------------------------------

struct CspConfig {
  int filters = 8;        // per pairing, even, <= channel count
  bool zscore = false;    // per-channel standardization before CSP
  double shrinkage = 0.05;
};

struct CspModel {
  CspConfig config;
  /// One C x m block per pairing: class 0 vs 1 for two classes, otherwise
  /// each class against the rest. Columns satisfy W^T C_t W = I.
  std::vector<Mat> filters;
  LdaModel lda;
};

/// Correlation matrix D^{-1/2} C D^{-1/2}: the covariance of the epoch after
/// z-scoring each channel.
SpdMatrix standardize_channels(const SpdMatrix& c);

/// Filters for one pairing from the class-mean covariances: whitening by
/// C_t = C_k + C_rest, then the top m/2 and bottom m/2 eigenvectors.
Mat csp_filters(const Mat& class_cov, const Mat& rest_cov, int m);

CspModel csp_fit(const CovarianceSet& ds, const CspConfig& cfg = {});
CspModel csp_fit(const EpochSet& epochs, const CspConfig& cfg = {});
/// Concatenated log-variances log(diag(W^T C W)) over all pairings.
Mat csp_features(const CspModel& m, const CovarianceSet& ds);
std::vector<int> csp_predict(const CspModel& m, const CovarianceSet& ds);
int csp_predict(const CspModel& m, const Mat& epoch);

// --- network loss weights ------------------------------------------------------

/// L = ce * CE + act * (w W(A) - b B(A)) + sub * (b B(S) - w W(S)) + rec * Rec
struct NetLossWeights {
  double ce = 1.0;
  double act = 0.01;
  double sub = 0.01;
  double w = 1.0;
  double b = 1.0;
  double rec = 0.1;  // RiFUNet only
};

// --- SPD-DCNet -----------------------------------------------------------------

struct DcNetConfig {
  NetLossWeights loss;
  double eps = 1e-6;
  int hidden = 64;
  double init_noise = 1e-3;
  ad::OptimConfig optim{.clip_norm = 10.0};
};

struct DcNetModel {
  DcNetConfig config;
  std::vector<Mat> stack;  // d -> 2d -> 2d -> d
  Mat head1;               // p x hidden
  Mat head2;               // hidden x K
  Mat bias;                // K x 1
};

/// Widths d -> 2d -> 2d -> d.
std::vector<int> dcnet_widths(int d);

/// Stack from the leading eigenvectors of the Euclidean mean padded with an
/// identity block, plus seeded noise of scale `init_noise`; head layer 1
/// Gaussian / sqrt(p), layer 2 and bias zero.
DcNetModel dcnet_init(const CovarianceSet& ds, const DcNetConfig& cfg, std::uint64_t seed);

struct DcNetVars {
  std::vector<ad::Var> stack;
  ad::Var head1, head2, bias;
};

/// Full training loss on one batch.
ad::Var dcnet_loss(ad::Tape& tape, const DcNetVars& v, std::span<const Mat> covs, std::span<const int> actions,
                   std::span<const int> subjects, const DcNetConfig& cfg);

DcNetModel dcnet_fit(const CovarianceSet& ds, const DcNetConfig& cfg, std::uint64_t seed, ad::TrainLog* log = nullptr);

/// vec(log C_out) per item.
Mat dcnet_features(const DcNetModel& m, const CovarianceSet& ds);
Mat dcnet_logits(const DcNetModel& m, const CovarianceSet& ds);
std::vector<int> dcnet_predict(const DcNetModel& m, const CovarianceSet& ds);

// --- RiFUNet -------------------------------------------------------------------

/// Base point of the head's tangent centering at inference. Training always
/// centres on the batch.
enum class TangentBase { Train, Batch };

struct RifuNetConfig {
  NetLossWeights loss;
  double eps = 1e-6;
  int d1 = 0;  // 0: UNetDims::for_input
  int d2 = 0;
  TangentBase base = TangentBase::Train;
  ad::OptimConfig optim{.clip_norm = 10.0};
};

struct RifuNetModel {
  RifuNetConfig config;
  UNetWeights net;
  Mat head;        // p x K
  Mat bias;        // K x 1
  Vec train_base;  // mean of vec(log C_out) over the training set
};

RifuNetModel rifunet_init(const CovarianceSet& ds, const RifuNetConfig& cfg);

ad::Var rifunet_loss(ad::Tape& tape, const UNetVars& net, const ad::Var& head, const ad::Var& bias,
                     std::span<const Mat> covs, std::span<const int> actions, std::span<const int> subjects,
                     const RifuNetConfig& cfg);

RifuNetModel rifunet_fit(const CovarianceSet& ds, const RifuNetConfig& cfg, std::uint64_t seed,
                         ad::TrainLog* log = nullptr);

struct RifuNetOutput {
  std::vector<int> labels;
  Mat features;  // centred tangent vectors, one row per item
  Mat logits;
};

/// Throws EmptyInput on an empty set and ShapeError on a dimension mismatch.
RifuNetOutput rifunet_predict(const RifuNetModel& m, const CovarianceSet& ds);

// --- uniform interface -----------------------------------------------------------

class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual ClassifierKind kind() const = 0;
  /// Uses every item of `train`; the caller decides what it may see.
  virtual void fit(const CovarianceSet& train, std::uint64_t seed) = 0;
  virtual std::vector<int> predict(const CovarianceSet& ds) const = 0;
  /// Hyperparameters as JSON text.
  virtual std::string hyper_json() const = 0;
  /// "CLSF" container.
  virtual std::string serialize() const = 0;
  /// Loss per step for iteratively trained models.
  virtual std::optional<ad::TrainLog> train_log() const { return std::nullopt; }
};

/// `hyper_json` overrides defaults; unknown keys throw Error.
std::unique_ptr<Classifier> make_classifier(ClassifierKind kind, const std::string& hyper_json = "{}");
/// Throws FormatError on a malformed container.
std::unique_ptr<Classifier> parse_classifier(const std::string& bytes);

}  // namespace spdgeo
