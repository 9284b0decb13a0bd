#include "spdgeo/spd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <Eigen/Jacobi>

namespace spdgeo {
namespace mat {

namespace {

constexpr int kMaxSweeps = 100;
constexpr double kEps = std::numeric_limits<double>::epsilon();
const double kSqrt2 = std::sqrt(2.0);

void require_square(const Mat& m, const char* what) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    throw ShapeError(std::string(what) + ": expected a non-empty square matrix, got " +
                     std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

}  // namespace

Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

EigDecomposition sym_eig(const Mat& m) {
  require_square(m, "sym_eig");
  const Eigen::Index n = m.rows();
  Mat a = symmetrize(m);
  Mat v = Mat::Identity(n, n);
  if (!a.allFinite()) throw NumericalError("sym_eig: non-finite entries");

  // Rotate until every off-diagonal entry is negligible relative to the
  // geometric mean of its diagonal pair. This is stricter than an absolute
  // off-norm test and keeps small eigenvalues of SPD inputs accurate to
  // relative precision, which the matrix logarithm needs.
  const double floor = 1e-30 * a.norm();
  bool converged = n == 1;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    converged = true;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        const double scale = std::sqrt(std::abs(a(p, p)) * std::abs(a(q, q)));
        if (std::abs(apq) <= std::max(kEps * scale, floor)) continue;
        converged = false;
        Eigen::JacobiRotation<double> rot;
        rot.makeJacobi(a, p, q);
        a.applyOnTheLeft(p, q, rot.adjoint());
        a.applyOnTheRight(p, q, rot);
        v.applyOnTheRight(p, q, rot);
        a(p, q) = 0.0;
        a(q, p) = 0.0;
      }
    }
  }
  if (!converged) {
    throw NumericalError("sym_eig: Jacobi iteration did not converge in " +
                         std::to_string(kMaxSweeps) + " sweeps");
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return a(i, i) < a(j, j); });
  EigDecomposition out{Vec(n), Mat(n, n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    out.values(k) = a(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
    out.vectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

double clamp_spectrum(Vec& values) {
  const double lmax = values.maxCoeff();
  if (!(lmax > 0.0)) throw NotPositiveDefinite("largest eigenvalue is not positive");
  const double floor = kClampRatio * lmax;
  if (values.minCoeff() < -floor) {
    throw NotPositiveDefinite("matrix is indefinite (lambda_min = " +
                              std::to_string(values.minCoeff()) + ")");
  }
  for (auto& l : values) l = std::max(l, floor);
  return floor;
}

Mat log_spd(const Mat& c) {
  EigDecomposition e = sym_eig(c);
  clamp_spectrum(e.values);
  return spectral_map(e, [](double l) { return std::log(l); });
}

Mat exp_sym(const Mat& s) {
  const EigDecomposition e = sym_eig(s);
  if (e.values.maxCoeff() > kMaxExpArgument) {
    throw NumericalError("matrix exponential overflows (eigenvalue " +
                         std::to_string(e.values.maxCoeff()) + ")");
  }
  return spectral_map(e, [](double l) { return std::exp(l); });
}

Mat power_spd(const Mat& c, double p) {
  EigDecomposition e = sym_eig(c);
  clamp_spectrum(e.values);
  return spectral_map(e, [p](double l) { return std::pow(l, p); });
}

Mat congruence(const Mat& c, const Mat& w) {
  if (w.rows() != c.rows()) {
    throw ShapeError("congruence: W has " + std::to_string(w.rows()) + " rows, C has dim " +
                     std::to_string(c.rows()));
  }
  return symmetrize(w.transpose() * c * w);
}

Mat log_stabilized_congruence(const Mat& c, const Mat& w, double eps) {
  if (w.rows() != c.rows()) {
    throw ShapeError("congruence: W has " + std::to_string(w.rows()) + " rows, C has dim " + std::to_string(c.rows()));
  }
  if (w.cols() <= w.rows() || !(eps > 0.0)) {
    Mat a = congruence(c, w);
    a.diagonal().array() += eps;
    return log_spd(a);
  }
  // W^T = Q R with Q = [Q1 Q2]: W^T C W + eps I = Q1 (R C R^T + eps I) Q1^T + eps Q2 Q2^T.
  const auto k = w.rows();
  const auto n = w.cols();
  Eigen::HouseholderQR<Mat> qr(w.transpose());
  const Mat q = qr.householderQ();
  const Mat r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  Mat inner = symmetrize(r * c * r.transpose());
  inner.diagonal().array() += eps;
  EigDecomposition e = sym_eig(inner);
  const double floor = clamp_spectrum(e.values);
  const Mat q1 = q.leftCols(k);
  const Mat q2 = q.rightCols(n - k);
  const Mat range = q1 * spectral_map(e, [](double l) { return std::log(l); }) * q1.transpose();
  return symmetrize(range + std::log(std::max(eps, floor)) * (q2 * q2.transpose()));
}

Mat expm(const Mat& a) {
  static constexpr double b[] = {17297280.0, 8648640.0, 1995840.0, 277200.0,
                                 25200.0,    1512.0,    56.0,      1.0};
  const auto n = a.rows();
  const double norm1 = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm1 > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm1 / 0.5)));
  const Mat x = a / std::ldexp(1.0, squarings);
  const Mat id = Mat::Identity(n, n);
  const Mat x2 = x * x;
  const Mat x4 = x2 * x2;
  const Mat x6 = x4 * x2;
  const Mat u = x * (b[7] * x6 + b[5] * x4 + b[3] * x2 + b[1] * id);
  const Mat v = b[6] * x6 + b[4] * x4 + b[2] * x2 + b[0] * id;
  Mat r = (v - u).partialPivLu().solve(v + u);
  for (int k = 0; k < squarings; ++k) r = r * r;
  return r;
}

bool is_strictly_pd(const Mat& m) {
  const Vec values = sym_eig(m).values;
  const double lmax = values.maxCoeff();
  return lmax > 0.0 && values.minCoeff() > kClampRatio * lmax;
}

Vec vec_upper(const Mat& s) {
  require_square(s, "vec_upper");
  const int n = static_cast<int>(s.rows());
  Vec z(tangent_length(n));
  int k = 0;
  for (int i = 0; i < n; ++i) {
    z(k++) = s(i, i);
    for (int j = i + 1; j < n; ++j) z(k++) = kSqrt2 * s(i, j);
  }
  return z;
}

Mat unvec_upper(const Vec& z, int dim) {
  if (dim < 1 || z.size() != tangent_length(dim)) {
    throw ShapeError("unvec_upper: length " + std::to_string(z.size()) +
                     " does not match dim " + std::to_string(dim));
  }
  Mat s(dim, dim);
  int k = 0;
  for (int i = 0; i < dim; ++i) {
    s(i, i) = z(k++);
    for (int j = i + 1; j < dim; ++j) {
      s(i, j) = z(k++) / kSqrt2;
      s(j, i) = s(i, j);
    }
  }
  return s;
}

}  // namespace mat

// ---------------------------------------------------------------------------

SymMatrix::SymMatrix(Mat m) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    throw ShapeError("SymMatrix: expected a non-empty square matrix");
  }
  if (!m.allFinite()) throw NumericalError("SymMatrix: non-finite entries");
  m_ = mat::symmetrize(m);
}

SpdMatrix::SpdMatrix(Mat m) : sym_(std::move(m)) {
  Vec values = mat::sym_eig(sym_.mat()).values;
  mat::clamp_spectrum(values);
}

SpdMatrix SpdMatrix::unchecked(Mat m) {
  return SpdMatrix(SymMatrix(mat::symmetrize(m), SymMatrix::Trusted{}));
}

EigDecomposition sym_eig(const SymMatrix& m) { return mat::sym_eig(m.mat()); }

SymMatrix spd_log(const SpdMatrix& c) { return SymMatrix(mat::log_spd(c.mat())); }

SpdMatrix spd_exp(const SymMatrix& s) { return SpdMatrix::unchecked(mat::exp_sym(s.mat())); }

SpdMatrix spd_power(const SpdMatrix& c, double p) {
  return SpdMatrix::unchecked(mat::power_spd(c.mat(), p));
}

namespace {

void require_same_dim(const SpdMatrix& a, const SpdMatrix& b, const char* what) {
  if (a.dim() != b.dim()) {
    throw ShapeError(std::string(what) + ": dimension mismatch " + std::to_string(a.dim()) +
                     " vs " + std::to_string(b.dim()));
  }
}

struct Roots {
  Mat half;
  Mat inv_half;
};

Roots square_roots(const Mat& c) {
  EigDecomposition e = mat::sym_eig(c);
  mat::clamp_spectrum(e.values);
  return {mat::spectral_map(e, [](double l) { return std::sqrt(l); }),
          mat::spectral_map(e, [](double l) { return 1.0 / std::sqrt(l); })};
}

}  // namespace

// Eigenvalues of A^{-1/2} B A^{-1/2} below one are poorly resolved when A is
// ill-conditioned, so those are taken as reciprocals of the eigenvalues of
// B^{-1/2} A B^{-1/2} above one. This also makes the result exactly symmetric.
double airm_distance(const SpdMatrix& a, const SpdMatrix& b) {
  require_same_dim(a, b, "airm_distance");
  const auto relative_spectrum = [](const Mat& base, const Mat& other) {
    EigDecomposition e = mat::sym_eig(mat::congruence(other, mat::power_spd(base, -0.5)));
    mat::clamp_spectrum(e.values);
    return e.values;
  };
  const Vec up = relative_spectrum(a.mat(), b.mat());
  const Vec down = relative_spectrum(b.mat(), a.mat());
  double sum = 0.0;
  for (double l : up) {
    if (l >= 1.0) sum += std::log(l) * std::log(l);
  }
  for (double l : down) {
    if (l > 1.0) sum += std::log(l) * std::log(l);
  }
  return std::sqrt(sum);
}

SymMatrix log_map(const SpdMatrix& base, const SpdMatrix& c) {
  require_same_dim(base, c, "log_map");
  const Roots r = square_roots(base.mat());
  const Mat inner = mat::log_spd(mat::congruence(c.mat(), r.inv_half));
  return SymMatrix(mat::congruence(inner, r.half));
}

SpdMatrix exp_map(const SpdMatrix& base, const SymMatrix& v) {
  if (base.dim() != v.dim()) throw ShapeError("exp_map: dimension mismatch");
  const Roots r = square_roots(base.mat());
  const Mat inner = mat::exp_sym(mat::congruence(v.mat(), r.inv_half));
  return SpdMatrix::unchecked(mat::congruence(inner, r.half));
}

SpdMatrix congruence(const SpdMatrix& c, const Mat& w) {
  Mat out = mat::congruence(c.mat(), w);
  if (!mat::is_strictly_pd(out)) {
    throw NotPositiveDefinite("congruence: W is rank-deficient");
  }
  return SpdMatrix::unchecked(std::move(out));
}

SpdMatrix log_euclidean_merge(const SpdMatrix& a, const SpdMatrix& b) {
  require_same_dim(a, b, "log_euclidean_merge");
  return SpdMatrix::unchecked(mat::exp_sym(0.5 * (mat::log_spd(a.mat()) + mat::log_spd(b.mat()))));
}

namespace {

void require_nonempty_equal_dims(std::span<const SpdMatrix> cs, const char* what) {
  if (cs.empty()) throw EmptyInput(std::string(what) + ": empty input");
  for (const auto& c : cs) require_same_dim(cs.front(), c, what);
}

}  // namespace

SpdMatrix log_euclidean_mean(std::span<const SpdMatrix> cs) {
  require_nonempty_equal_dims(cs, "log_euclidean_mean");
  Mat acc = Mat::Zero(cs.front().dim(), cs.front().dim());
  for (const auto& c : cs) acc += mat::log_spd(c.mat());
  acc /= static_cast<double>(cs.size());
  return SpdMatrix::unchecked(mat::exp_sym(acc));
}

SpdMatrix karcher_mean(std::span<const SpdMatrix> cs, double tol, int max_iter) {
  require_nonempty_equal_dims(cs, "karcher_mean");
  const int n = cs.front().dim();
  Mat mu = log_euclidean_mean(cs).mat();
  for (int it = 0; it < max_iter; ++it) {
    const Roots r = square_roots(mu);
    Mat step = Mat::Zero(n, n);
    // Upper bound on the Hessian of the cost at mu: for one point whose
    // whitened log-spectrum spans delta it is (delta/2) coth(delta/2).
    double hessian = 0.0;
    for (const auto& c : cs) {
      EigDecomposition e = mat::sym_eig(mat::congruence(c.mat(), r.inv_half));
      mat::clamp_spectrum(e.values);
      const double half_spread = 0.5 * std::log(e.values.maxCoeff() / e.values.minCoeff());
      hessian += half_spread < 1e-8 ? 1.0 : half_spread / std::tanh(half_spread);
      step += mat::spectral_map(e, [](double l) { return std::log(l); });
    }
    step /= static_cast<double>(cs.size());
    hessian /= static_cast<double>(cs.size());
    if (step.norm() < tol) return SpdMatrix::unchecked(std::move(mu));
    mu = mat::congruence(mat::exp_sym(2.0 / (1.0 + hessian) * step), r.half);
  }
  throw KarcherNotConverged("karcher_mean: no convergence after " + std::to_string(max_iter) +
                                " iterations",
                            SpdMatrix::unchecked(std::move(mu)));
}

TangentVector vec_upper(const SymMatrix& s) { return {s.dim(), mat::vec_upper(s.mat())}; }

SymMatrix unvec_upper(const TangentVector& z) { return SymMatrix(mat::unvec_upper(z.coords, z.dim)); }

}  // namespace spdgeo
