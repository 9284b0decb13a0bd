#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "spdgeo/autodiff.hpp"

namespace spdgeo::ad {

/// A named, mutable parameter owned by some model.
struct ParamRef {
  std::string name;
  Mat* value = nullptr;
  Kind kind = Kind::Matrix;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled: p <- p - lr * weight_decay * p, applied alongside the Adam step.
  double weight_decay = 1e-5;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Mat> first_moment;
  std::vector<Mat> second_moment;
};

/// One Adam update. Moments are allocated lazily on the first call. Throws
/// NumericalError naming the parameter if a gradient is non-finite, and
/// ShapeError if a gradient's shape disagrees with its parameter.
void adam_step(std::span<const ParamRef> params, std::span<const Mat> grads, AdamState& state);

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
double clip_global_norm(std::span<Mat> grads, double max_norm);

struct GradInput {
  Mat value;
  Kind kind = Kind::Matrix;
};

using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  /// Worst error per input block.
  std::vector<double> per_input;
};

/// Compares reverse-mode gradients with central differences.
///
/// Per input block, the error is max_i |g_i - n_i| / max(max|g|, max|n|, 1e-8),
/// i.e. each coordinate's discrepancy measured against the block's gradient
/// scale. Sym inputs are perturbed in mirrored (i, j)/(j, i) pairs. Any
/// non-finite value reports an infinite error.
GradCheckResult check_gradient(const LossBuilder& f, std::span<const GradInput> point, double step = 1e-5);

// ---------------------------------------------------------------------------

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 1e-5;
  int batch = 256;
  int steps = 1000;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 0.0;
  /// Training stops once the loss falls below this value.
  double divergence_floor = -1e6;
};

struct TrainLog {
  std::vector<double> loss;  // one entry per executed step
  bool stopped_early = false;
};

/// Builds the loss for a minibatch (indices into the training set) at a step.
using BatchLoss = std::function<Var(Tape&, std::span<const Var> params, std::span<const int> batch, int step)>;

/// Minibatch Adam. Batches are drawn by cycling through a seeded permutation
/// of [0, n_items); when n_items <= batch every step uses the full set in
/// order. Throws NumericalError with the step index on a non-finite loss.
TrainLog train_adam(std::span<const ParamRef> params, int n_items, const OptimConfig& cfg, std::uint64_t seed,
                    const BatchLoss& loss_fn);

}  // namespace spdgeo::ad
