#pragma once

// Seeded generators for test fixtures.

#include <cmath>
#include <cstdint>
#include <random>

#include "spdgeo/spd.hpp"

namespace spdgeo::testing {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal() { return normal_(gen_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }

  Mat gaussian(int rows, int cols) {
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = normal();
    return m;
  }

  Mat symmetric(int dim) { return mat::symmetrize(gaussian(dim, dim)); }

  Mat orthogonal(int dim) {
    Eigen::HouseholderQR<Mat> qr(gaussian(dim, dim));
    Mat q = qr.householderQ();
    return q;
  }

  /// SPD with eigenvalues log-uniform in [1, cond], randomly rotated.
  Mat spd(int dim, double cond = 10.0) {
    const Mat q = orthogonal(dim);
    Vec lambda(dim);
    for (int i = 0; i < dim; ++i) lambda(i) = std::exp(uniform(0.0, std::log(cond)));
    if (dim > 1) {
      lambda(0) = 1.0;
      lambda(dim - 1) = cond;
    }
    return mat::symmetrize(q * lambda.asDiagonal() * q.transpose());
  }

  /// Well-conditioned full-rank square matrix.
  Mat full_rank(int dim) { return orthogonal(dim) * Vec::NullaryExpr(dim, [&] { return uniform(0.5, 2.0); }).asDiagonal() * orthogonal(dim); }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_;
};

inline double rel_err(const Mat& a, const Mat& b) {
  const double denom = std::max(a.norm(), 1e-300);
  return (a - b).norm() / denom;
}

}  // namespace spdgeo::testing
