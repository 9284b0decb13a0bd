#pragma once

// Dense linear algebra and affine-invariant geometry on the manifold of
// symmetric positive-definite matrices.
//
// Conventions used throughout the library:
//  * congruence is C' = W^T C W with W of shape d_in x d_out;
//  * eigenvalues come back in ascending order;
//  * tangent vectors use the upper triangle (row-major) with sqrt(2)
//    weighting on off-diagonal entries, so ||vec(S)||_2 == ||S||_F.

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "spdgeo/error.hpp"

namespace spdgeo {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Eigenvalues below kClampRatio * lambda_max are lifted to that floor inside
/// log/power. Matrices with lambda_min < -kClampRatio * lambda_max are
/// rejected as genuinely indefinite.
inline constexpr double kClampRatio = 1e-10;

/// exp() of anything above this overflows for practical purposes.
inline constexpr double kMaxExpArgument = 700.0;

struct EigDecomposition {
  Vec values;   // ascending
  Mat vectors;  // column j pairs with values(j)
};

// ---------------------------------------------------------------------------
// Raw-matrix kernels. No validation beyond what each function documents; the
// typed API below and the autodiff tape are both built on these so that every
// code path produces bit-identical numbers.
namespace mat {

Mat symmetrize(const Mat& m);

/// Cyclic Jacobi. Input must be square; only the symmetric part is used.
EigDecomposition sym_eig(const Mat& m);

/// U diag(f(lambda)) U^T, symmetrized.
template <class F>
Mat spectral_map(const EigDecomposition& e, F&& f) {
  Vec mapped(e.values.size());
  for (Eigen::Index i = 0; i < e.values.size(); ++i) mapped(i) = f(e.values(i));
  return symmetrize((e.vectors * mapped.asDiagonal()) * e.vectors.transpose());
}

/// Applies the positive-definiteness floor in place and returns the floor.
/// Throws NotPositiveDefinite for indefinite spectra.
double clamp_spectrum(Vec& values);

Mat log_spd(const Mat& c);
Mat exp_sym(const Mat& s);
Mat power_spd(const Mat& c, double p);

/// W^T C W, symmetrized. No positivity check.
Mat congruence(const Mat& c, const Mat& w);

/// log(W^T C W + eps I). When W has fewer rows than columns the congruence
/// has a null space of known eigenvalue eps; that block is written down
/// exactly instead of being recovered from an eigensolve, where its
/// eigenvalues would only carry ~1e-16 / eps relative accuracy.
Mat log_stabilized_congruence(const Mat& c, const Mat& w, double eps);

/// lambda_max > 0 and lambda_min > kClampRatio * lambda_max.
bool is_strictly_pd(const Mat& m);

/// Exponential of a general square matrix: Pade(7) with scaling and squaring
/// until the scaled 1-norm is <= 0.5.
Mat expm(const Mat& a);

Vec vec_upper(const Mat& s);
Mat unvec_upper(const Vec& z, int dim);

inline int tangent_length(int dim) { return dim * (dim + 1) / 2; }

}  // namespace mat

// ---------------------------------------------------------------------------

class SymMatrix {
 public:
  /// Symmetrizes (M + M^T)/2. Throws ShapeError if not square or empty and
  /// NumericalError on non-finite entries.
  explicit SymMatrix(Mat m);

  static SymMatrix zero(int dim) { return SymMatrix(Mat::Zero(dim, dim)); }
  static SymMatrix identity(int dim) { return SymMatrix(Mat::Identity(dim, dim)); }

  int dim() const noexcept { return static_cast<int>(m_.rows()); }
  const Mat& mat() const noexcept { return m_; }
  double operator()(int i, int j) const { return m_(i, j); }

  friend bool operator==(const SymMatrix& a, const SymMatrix& b) { return a.m_ == b.m_; }

 private:
  struct Trusted {};
  SymMatrix(Mat m, Trusted) : m_(std::move(m)) {}
  friend class SpdMatrix;

  Mat m_;
};

class SpdMatrix {
 public:
  /// Validates: symmetric part must have lambda_min >= -kClampRatio*lambda_max
  /// and lambda_max > 0. Near-singular matrices inside the clamp band are kept.
  explicit SpdMatrix(Mat m);

  /// Skips the spectral check. For outputs that are SPD by construction
  /// (exp of a symmetric matrix, congruence by an orthogonal matrix, ...).
  static SpdMatrix unchecked(Mat m);

  static SpdMatrix identity(int dim) { return unchecked(Mat::Identity(dim, dim)); }

  int dim() const noexcept { return sym_.dim(); }
  const Mat& mat() const noexcept { return sym_.mat(); }
  const SymMatrix& sym() const noexcept { return sym_; }
  double operator()(int i, int j) const { return sym_(i, j); }

  friend bool operator==(const SpdMatrix& a, const SpdMatrix& b) { return a.sym_ == b.sym_; }

 private:
  explicit SpdMatrix(SymMatrix s) : sym_(std::move(s)) {}
  SymMatrix sym_;
};

struct TangentVector {
  int dim = 0;  // ambient matrix dimension
  Vec coords;   // length dim*(dim+1)/2
};

/// Raised by karcher_mean; holds the last iterate.
class KarcherNotConverged : public NumericalError {
 public:
  KarcherNotConverged(const std::string& what, SpdMatrix last)
      : NumericalError(what), last_(std::move(last)) {}
  const SpdMatrix& last_iterate() const noexcept { return last_; }

 private:
  SpdMatrix last_;
};

EigDecomposition sym_eig(const SymMatrix& m);

SymMatrix spd_log(const SpdMatrix& c);
SpdMatrix spd_exp(const SymMatrix& s);
SpdMatrix spd_power(const SpdMatrix& c, double p);

double airm_distance(const SpdMatrix& a, const SpdMatrix& b);

/// Riemannian log map at `base`.
SymMatrix log_map(const SpdMatrix& base, const SpdMatrix& c);
SpdMatrix exp_map(const SpdMatrix& base, const SymMatrix& v);

/// W^T C W for W of shape (C.dim() x d_out). Requires d_out <= d_in; throws
/// NotPositiveDefinite when the result's smallest eigenvalue is below the
/// clamp floor (rank-deficient W).
SpdMatrix congruence(const SpdMatrix& c, const Mat& w);

SpdMatrix log_euclidean_merge(const SpdMatrix& a, const SpdMatrix& b);
SpdMatrix log_euclidean_mean(std::span<const SpdMatrix> cs);

/// Frechet mean under AIRM with squared distances. Starts from the
/// log-Euclidean mean and iterates until the Riemannian gradient norm drops
/// below `tol`.
SpdMatrix karcher_mean(std::span<const SpdMatrix> cs, double tol = 1e-10, int max_iter = 100);

TangentVector vec_upper(const SymMatrix& s);
SymMatrix unvec_upper(const TangentVector& z);

}  // namespace spdgeo
