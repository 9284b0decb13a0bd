#include "spdgeo/fisher.hpp"

#include <string>

namespace spdgeo {

namespace {

struct Groups {
  std::vector<int> labels;
  std::vector<int> index;  // per row, position in `labels`
  std::vector<Vec> means;
  std::vector<double> counts;
};

Groups group_means(const Mat& z, std::span<const int> labels) {
  Groups g;
  g.index.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t k = 0;
    while (k < g.labels.size() && g.labels[k] != labels[i]) ++k;
    if (k == g.labels.size()) {
      g.labels.push_back(labels[i]);
      g.means.push_back(Vec::Zero(z.cols()));
      g.counts.push_back(0.0);
    }
    g.index[i] = static_cast<int>(k);
    g.means[k] += z.row(static_cast<Eigen::Index>(i)).transpose();
    g.counts[k] += 1.0;
  }
  for (std::size_t k = 0; k < g.means.size(); ++k) g.means[k] /= g.counts[k];
  return g;
}

void scatter(const Mat& z, const Groups& g, const Vec& mu, double& within, double& between) {
  const double n = static_cast<double>(z.rows());
  within = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    within += (z.row(i).transpose() - g.means[static_cast<std::size_t>(g.index[static_cast<std::size_t>(i)])])
                  .squaredNorm();
  }
  within /= n;
  between = 0.0;
  for (std::size_t k = 0; k < g.means.size(); ++k) between += g.counts[k] * (g.means[k] - mu).squaredNorm();
  between /= n;
}

}  // namespace

FisherStats fisher_stats(const Mat& z, std::span<const int> actions, std::span<const int> subjects) {
  if (z.rows() == 0) throw EmptyInput("fisher_stats: empty batch");
  if (actions.size() != static_cast<std::size_t>(z.rows()) ||
      subjects.size() != static_cast<std::size_t>(z.rows())) {
    throw ShapeError("fisher_stats: " + std::to_string(z.rows()) + " rows but " +
                     std::to_string(actions.size()) + " action and " +
                     std::to_string(subjects.size()) + " subject labels");
  }
  FisherStats out;
  out.global_mean = z.colwise().mean().transpose();
  const Groups a = group_means(z, actions);
  const Groups s = group_means(z, subjects);
  scatter(z, a, out.global_mean, out.within_action, out.between_action);
  scatter(z, s, out.global_mean, out.within_subject, out.between_subject);
  out.action_labels = a.labels;
  out.action_means = a.means;
  out.subject_labels = s.labels;
  out.subject_means = s.means;
  return out;
}

FisherStats fisher_stats(std::span<const TangentVector> z, std::span<const int> actions,
                         std::span<const int> subjects) {
  if (z.empty()) throw EmptyInput("fisher_stats: empty batch");
  Mat rows(static_cast<Eigen::Index>(z.size()), z.front().coords.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i].coords.size() != rows.cols()) throw ShapeError("fisher_stats: ragged tangent vectors");
    rows.row(static_cast<Eigen::Index>(i)) = z[i].coords.transpose();
  }
  return fisher_stats(rows, actions, subjects);
}

}  // namespace spdgeo
