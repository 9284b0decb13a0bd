#pragma once

// Alignment stages: Riemannian alignment (RA), Riemannian Procrustes
// analysis (RPA), and the learned DCR and RiFU pre-aligners.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "spdgeo/data.hpp"
#include "spdgeo/fisher.hpp"
#include "spdgeo/optim.hpp"
#include "spdgeo/unet.hpp"

namespace spdgeo {

enum class MeanKind { LogEuclidean, Karcher };

/// Reference mean of a set of matrices under the chosen geometry.
SpdMatrix reference_mean(std::span<const SpdMatrix> cs, MeanKind kind);

/// Tangent features vec(log C) of every item, one row per item.
Mat log_features(const CovarianceSet& ds);

// --- RA ----------------------------------------------------------------------

enum class RaScope { Subject, TrainGlobal };

struct RaModel {
  RaScope scope = RaScope::Subject;
  MeanKind mean = MeanKind::LogEuclidean;
  /// Keyed by subject id; TrainGlobal uses the single key kGlobal.
  std::map<int, SpdMatrix> reference;
  std::map<int, Mat> whitener;  // reference^{-1/2}

  static constexpr int kGlobal = -1;
};

/// Label-free: only matrices and subject ids are read.
RaModel ra_fit(const CovarianceSet& ds, RaScope scope = RaScope::Subject, MeanKind mean = MeanKind::LogEuclidean);
/// Throws UnknownSubject for a subject missing from a per-subject model.
CovarianceSet ra_apply(const RaModel& model, const CovarianceSet& ds);

// --- RPA ---------------------------------------------------------------------

enum class RpaDispersion {
  /// Sigma = exp(mean_i (L_i - Lbar)^2) over the recentred logs.
  LogScatter,
  /// Sigma = arithmetic mean of the recentred matrices.
  Mean,
};

struct RpaOptions {
  MeanKind mean = MeanKind::Karcher;
  RpaDispersion dispersion = RpaDispersion::LogScatter;
};

struct RpaSubject {
  SpdMatrix mean;
  SpdMatrix dispersion;
  Mat rotation;  // eigenvectors of the dispersion, descending eigenvalues
};

struct RpaModel {
  RpaOptions options;
  std::map<int, RpaSubject> subjects;
};

/// Label-free. Throws EmptyInput if a subject has fewer than two items.
RpaModel rpa_fit(const CovarianceSet& ds, const RpaOptions& opt = {});
CovarianceSet rpa_apply(const RpaModel& model, const CovarianceSet& ds);
CovarianceSet rpa_align(const CovarianceSet& ds, const RpaOptions& opt = {});

// --- DCR ---------------------------------------------------------------------

struct DcrHyper {
  double gamma = 1.0;     // Fisher ratio weight
  double gamma_c = 0.1;   // center penalty weight
  double alpha = 0.1;     // scale anchor
  double beta = 0.01;     // identity regularizer, cosine-decayed
  double eps = 1e-6;      // Fisher denominator guard
  double lr = 1e-3;
  double weight_decay = 1e-5;
  int batch = 0;          // 0: full set every step
  int steps = 1000;       // also the decay horizon T
  double clip_norm = 10.0;

  void validate() const;
};

struct DcrModel {
  Mat generator;  // A; R = exp(A - A^T)
  double scale_raw = 0.0;

  Mat rotation() const;
  /// softplus(scale_raw) + 1e-6
  double scale() const;

  /// A = 0 and lambda = 1.
  static DcrModel initial(int dim);
};

/// softplus^{-1}(1 - 1e-6): the raw value for which lambda = 1.
double dcr_unit_scale_raw();

/// beta * (1 + cos(pi t / T)) / 2
double dcr_beta_at(const DcrHyper& h, int step);

struct DcrTerms {
  double within = 0.0;   // W(R)
  double between = 0.0;  // B(R)
  double center = 0.0;   // C(R)
  double loss = 0.0;
};

/// Differentiable DCR loss on a batch of log-covariances.
ad::Var dcr_loss(ad::Tape& tape, const ad::Var& generator, const ad::Var& scale_raw, std::span<const Mat> logs,
                 std::span<const int> labels, const DcrHyper& h, int step);

/// Loss terms over a whole set at a given step (no training).
DcrTerms dcr_evaluate(const DcrModel& m, const CovarianceSet& ds, const DcrHyper& h, int step);

struct DcrFit {
  DcrModel model;
  ad::TrainLog log;
};

/// Algorithm: class means are recomputed from the scaled logs of each batch.
/// Throws TrainingError with fewer than two classes.
DcrFit dcr_fit(const CovarianceSet& ds, const DcrHyper& h, std::uint64_t seed);
/// C -> exp(R^T (lambda log C) R)
CovarianceSet dcr_apply(const DcrModel& m, const CovarianceSet& ds);

// --- RiFU --------------------------------------------------------------------

struct RifuConfig {
  double lambda_w = 1.0;
  double lambda_bet = 1.0;
  double lambda_sub = 0.5;
  double lambda_rec = 0.1;
  double eps = 1e-6;  // stabilizer after every congruence
  /// 0 picks UNetDims::for_input.
  int d1 = 0;
  int d2 = 0;
  bool identity_init = false;
  ad::OptimConfig optim{.clip_norm = 10.0};
};

struct RifuModel {
  UNetWeights net;
  RifuConfig config;
};

struct RifuFit {
  RifuModel model;
  ad::TrainLog log;
};

/// Differentiable RiFU loss on a batch (tangent-form reconstruction).
ad::Var rifu_loss(ad::Tape& tape, const UNetVars& w, std::span<const Mat> covs, std::span<const int> actions,
                  std::span<const int> subjects, const RifuConfig& cfg);

RifuModel rifu_init(const CovarianceSet& ds, const RifuConfig& cfg);
RifuFit rifu_fit(const CovarianceSet& ds, const RifuConfig& cfg, std::uint64_t seed);
/// Throws ShapeError on a dimension mismatch and NumericalError if an
/// output leaves the SPD cone.
CovarianceSet rifu_apply(const RifuModel& m, const CovarianceSet& ds);

// --- model files ("ALGN") ----------------------------------------------------

enum class AlignerKind : std::uint32_t { Ra = 1, Rpa = 2, Dcr = 3, Rifu = 4 };

std::string serialize_aligner(const RaModel& m);
std::string serialize_aligner(const RpaModel& m);
std::string serialize_aligner(const DcrModel& m);
std::string serialize_aligner(const RifuModel& m);

/// Kind stored in an ALGN image.
AlignerKind aligner_kind(const std::string& bytes);
RaModel parse_ra(const std::string& bytes);
RpaModel parse_rpa(const std::string& bytes);
DcrModel parse_dcr(const std::string& bytes);
RifuModel parse_rifu(const std::string& bytes);

}  // namespace spdgeo
