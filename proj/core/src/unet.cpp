#include "spdgeo/unet.hpp"

#include <algorithm>
#include <cmath>

namespace spdgeo {

UNetDims UNetDims::for_input(int d) {
  auto clamp = [d](long v) { return static_cast<int>(std::clamp<long>(v, 1, d)); };
  return {d, clamp(std::lround(8.0 * d / 11.0)), clamp(std::lround(4.0 * d / 11.0))};
}

UNetDims UNetWeights::dims() const {
  return {static_cast<int>(enc1.rows()), static_cast<int>(enc1.cols()), static_cast<int>(enc2.cols())};
}

void UNetWeights::validate() const {
  const UNetDims k = dims();
  const bool ok = enc2.rows() == k.d1 && dec2.rows() == k.d2 && dec2.cols() == k.d1 && dec1.rows() == k.d1 &&
                  dec1.cols() == k.d && k.d > 0 && k.d1 > 0 && k.d2 > 0;
  if (!ok) throw ShapeError("U-Net weights do not chain d -> d1 -> d2 -> d1 -> d");
  if (!(eps >= 0.0)) throw ShapeError("U-Net stabilizer must be non-negative");
}

UNetWeights unet_init(std::span<const SpdMatrix> train, const UNetDims& dims, double eps) {
  if (train.empty()) throw EmptyInput("unet_init: no training matrices");
  if (dims.d1 < 1 || dims.d1 > dims.d || dims.d2 < 1 || dims.d2 > dims.d1) {
    throw ShapeError("unet_init: need d >= d1 >= d2 >= 1");
  }
  Mat mean = Mat::Zero(dims.d, dims.d);
  for (const auto& c : train) {
    if (c.dim() != dims.d) throw ShapeError("unet_init: matrix dim does not match the network input");
    mean += c.mat();
  }
  mean /= static_cast<double>(train.size());
  const EigDecomposition e = mat::sym_eig(mean);
  const Mat u = e.vectors.rowwise().reverse();  // descending eigenvalues

  UNetWeights w;
  w.enc1 = u.leftCols(dims.d1);
  w.enc2 = Mat::Identity(dims.d1, dims.d2);
  w.dec2 = w.enc2.transpose();
  w.dec1 = w.enc1.transpose();
  w.eps = eps;
  return w;
}

UNetWeights unet_identity(int d, double eps) {
  const Mat id = Mat::Identity(d, d);
  return {id, id, id, id, eps};
}

ad::Var unet_forward(const ad::Var& c, const UNetVars& w, double eps) {
  using namespace ad;
  const Var c1 = add_identity(congruence(c, w.enc1), eps);
  const Var b = add_identity(congruence(c1, w.enc2), eps);
  const Var u = matrix_exp(scale(add(log_stabilized_congruence(b, w.dec2, eps), matrix_log(c1)), 0.5));
  return matrix_exp(scale(add(log_stabilized_congruence(u, w.dec1, eps), matrix_log(c)), 0.5));
}

namespace {

Mat stabilized(const Mat& c, const Mat& w, double eps) {
  Mat out = mat::congruence(c, w);
  out.diagonal().array() += eps;
  return out;
}

/// merge(Phi(x; w), other)
Mat merged_up(const Mat& x, const Mat& w, double eps, const Mat& other) {
  return mat::exp_sym(0.5 * (mat::log_stabilized_congruence(x, w, eps) + mat::log_spd(other)));
}

}  // namespace

Mat unet_apply(const UNetWeights& w, const Mat& c, std::vector<double>* min_eigs) {
  auto track = [min_eigs](const Mat& m) {
    if (min_eigs) min_eigs->push_back(mat::sym_eig(m).values(0));
  };
  const Mat c1 = stabilized(c, w.enc1, w.eps);
  track(c1);
  const Mat b = stabilized(c1, w.enc2, w.eps);
  track(b);
  if (min_eigs) track(stabilized(b, w.dec2, w.eps));
  const Mat u = merged_up(b, w.dec2, w.eps, c1);
  track(u);
  if (min_eigs) track(stabilized(u, w.dec1, w.eps));
  Mat out = merged_up(u, w.dec1, w.eps, c);
  track(out);
  return out;
}

}  // namespace spdgeo
