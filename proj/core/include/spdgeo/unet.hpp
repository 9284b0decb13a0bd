#pragma once

// SPD U-Net shared by the RiFU pre-aligner and the RiFUNet classifier.
//
//   C1 = Phi1(C),  B = Phi2(C1)                        (encoder)
//   U  = merge(Phi_d2(B), C1),  C_out = merge(Phi_d1(U), C)   (decoder)
//
// with Phi(X) = W^T X W + eps I. The decoder's up-projections have rank at
// most the bottleneck width, so the eps I term is what keeps them SPD.

#include <span>
#include <vector>

#include "spdgeo/autodiff.hpp"

namespace spdgeo {

struct UNetDims {
  int d = 0;   // input / output
  int d1 = 0;  // encoder stage 1
  int d2 = 0;  // bottleneck

  /// d1 = round(8d/11), d2 = round(4d/11), clamped to [1, d]; 22 -> 16 -> 8.
  static UNetDims for_input(int d);
};

struct UNetWeights {
  Mat enc1;  // d  x d1
  Mat enc2;  // d1 x d2
  Mat dec2;  // d2 x d1
  Mat dec1;  // d1 x d
  double eps = 1e-6;

  UNetDims dims() const;
  /// Throws ShapeError unless the four blocks chain d -> d1 -> d2 -> d1 -> d.
  void validate() const;
};

/// Encoder stage 1 takes the leading eigenvectors of the Euclidean mean of
/// `train`, stage 2 keeps the leading d2 coordinates, and the decoder starts
/// as the transpose of the encoder.
UNetWeights unet_init(std::span<const SpdMatrix> train, const UNetDims& dims, double eps);

/// Square identity layers; with eps = 0 the network is the identity map.
UNetWeights unet_identity(int d, double eps);

struct UNetVars {
  ad::Var enc1, enc2, dec2, dec1;
};

/// Differentiable forward pass of one covariance.
ad::Var unet_forward(const ad::Var& c, const UNetVars& w, double eps);

/// Plain forward pass; same kernels as the tape, so results are bit-identical.
/// If `min_eigs` is non-null it receives the smallest eigenvalue after every
/// layer (C1, B, Phi_d2(B), U, Phi_d1(U), C_out).
Mat unet_apply(const UNetWeights& w, const Mat& c, std::vector<double>* min_eigs = nullptr);

}  // namespace spdgeo
