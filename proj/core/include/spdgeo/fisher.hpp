#pragma once

#include <span>
#include <vector>

#include "spdgeo/spd.hpp"

namespace spdgeo {

/// Within/between scatter of tangent features, grouped once by action and
/// once by subject:
///
///   W(G) = 1/N sum_i ||z_i - mu_g(i)||^2
///   B(G) = 1/N sum_g n_g ||mu_g - mu||^2
///
/// so W(G) + B(G) equals the total scatter 1/N sum_i ||z_i - mu||^2.
struct FisherStats {
  double within_action = 0.0;
  double between_action = 0.0;
  double within_subject = 0.0;
  double between_subject = 0.0;

  Vec global_mean;
  /// Keyed by the order labels first appear in the input.
  std::vector<int> action_labels;
  std::vector<Vec> action_means;
  std::vector<int> subject_labels;
  std::vector<Vec> subject_means;
};

/// Rows of `z` are feature vectors. Throws EmptyInput on an empty batch and
/// ShapeError if the label arrays do not match the row count.
FisherStats fisher_stats(const Mat& z, std::span<const int> actions, std::span<const int> subjects);

FisherStats fisher_stats(std::span<const TangentVector> z, std::span<const int> actions,
                         std::span<const int> subjects);

}  // namespace spdgeo
