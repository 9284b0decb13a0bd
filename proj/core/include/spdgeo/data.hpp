#pragma once

// Trial data: epochs, covariance sets, LOSO splits, file formats and the
// synthetic cross-subject generator.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "spdgeo/spd.hpp"

namespace spdgeo {

/// Labels must be below this bound in files.
inline constexpr int kMaxClasses = 256;

struct Epoch {
  int subject = 0;
  int label = 0;
  Mat samples;  // channels x T
};

struct EpochSet {
  int channels = 0;
  std::vector<Epoch> epochs;
};

struct CovItem {
  int subject = 0;
  int label = 0;
  SpdMatrix cov;
};

/// Immutable collection of trial covariances of one dimension.
class CovarianceSet {
 public:
  CovarianceSet() = default;
  /// Throws ShapeError if any matrix is not dim x dim, and Error on negative
  /// labels or subjects.
  CovarianceSet(int dim, std::vector<CovItem> items);

  int dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  const CovItem& operator[](std::size_t i) const { return items_[i]; }
  const std::vector<CovItem>& items() const noexcept { return items_; }

  /// Sorted distinct subject ids.
  std::vector<int> subjects() const;
  /// 1 + largest label (0 for an empty set).
  int num_classes() const;
  std::vector<int> labels() const;
  std::vector<int> subject_ids() const;
  std::vector<SpdMatrix> matrices() const;

  CovarianceSet subset(std::span<const int> indices) const;
  /// Items of one subject, in their original order.
  std::vector<int> indices_of(int subject) const;
  /// Same labels and subjects, new matrices (possibly of another dim).
  CovarianceSet with_matrices(std::vector<SpdMatrix> mats) const;

  friend bool operator==(const CovarianceSet& a, const CovarianceSet& b);

 private:
  int dim_ = 0;
  std::vector<CovItem> items_;
};

struct CovOptions {
  /// Adds shrinkage_delta * tr(C)/C * I before normalization; needed when
  /// T < C + 1.
  bool shrinkage = false;
  double shrinkage_delta = 1e-3;
};

/// C = X X^T / (T - 1), optionally shrunk, then scaled so tr C = dim.
/// Throws ShapeError for T < 2, NumericalError for non-finite samples and
/// NotPositiveDefinite if the result is singular beyond the clamp floor.
SpdMatrix estimate_covariance(const Mat& x, const CovOptions& opt = {});

CovarianceSet estimate_covariances(const EpochSet& epochs, const CovOptions& opt = {});

struct LosoSplit {
  int subject = 0;
  std::vector<int> train;
  std::vector<int> test;
};

/// One split per subject, ordered by subject id. Throws InsufficientSubjects
/// with fewer than two subjects.
std::vector<LosoSplit> loso_splits(const CovarianceSet& ds);

struct SynthConfig {
  int dim = 8;
  int n_subjects = 6;
  int n_classes = 4;
  int trials = 40;              // per (subject, class)
  double class_spread = 1.0;    // sigma of the prototype generators
  double rotation_scale = 0.0;  // scale of the per-subject skew generator
  double dispersion_range = 0.0;
  double noise = 0.0;
  std::uint64_t seed = 0;

  /// Presets used by the LOSO fixtures.
  static SynthConfig low_distortion(std::uint64_t seed = 7);
  static SynthConfig high_distortion(std::uint64_t seed = 7);

  /// Throws Error on non-positive counts or negative scales.
  void validate() const;
};

/// Prototypes P_k = exp(class_spread * S_k); per subject
/// G_s = exp(rotation_scale * K_s) diag(exp(u_s)) with u_s ~ U[-r, r];
/// trial = G_s exp(log P_k + noise * N) G_s^T, trace-normalized.
/// Items are ordered subject-major, then class, then trial. Subjects are
/// numbered from 1.
CovarianceSet synth_generate(const SynthConfig& cfg);

// --- files -------------------------------------------------------------------

void save_covariances(const CovarianceSet& ds, const std::filesystem::path& path);
CovarianceSet load_covariances(const std::filesystem::path& path);
/// Parses an in-memory .spdc image.
CovarianceSet parse_covariances(std::string bytes);
std::string serialize_covariances(const CovarianceSet& ds);

void save_epochs(const EpochSet& es, const std::filesystem::path& path);
EpochSet load_epochs(const std::filesystem::path& path);
EpochSet parse_epochs(std::string bytes);

/// `index,subject,label` rows.
void save_labels_csv(const CovarianceSet& ds, const std::filesystem::path& path);

}  // namespace spdgeo
