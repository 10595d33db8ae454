#include "calfuse/replay.hpp"

#include <algorithm>
#include <numeric>

#include "calfuse/rng.hpp"

namespace calfuse {

ClassGaussian fit_class_gaussian(const MatrixXd& features, std::uint32_t class_id) {
  if (features.rows() < 1) throw ValidationError("fit_class_gaussian: no samples");
  require_finite(features, "fit_class_gaussian");
  const double n = static_cast<double>(features.rows());

  ClassGaussian g;
  g.class_id = class_id;
  g.sample_count = static_cast<std::size_t>(features.rows());
  g.mean = features.colwise().sum().transpose() / n;
  g.variance.resize(features.cols());
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    const double s = (features.col(j).array() - g.mean(j)).square().sum();
    g.variance(j) = s / n + kVarianceShrinkage;
  }
  return g;
}

namespace {

std::vector<std::size_t> order_by_class(std::span<const ClassGaussian> gaussians) {
  std::vector<std::size_t> order(gaussians.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return gaussians[a].class_id < gaussians[b].class_id;
  });
  return order;
}

}  // namespace

std::vector<std::size_t> replay_allocation(std::span<const ClassGaussian> gaussians, std::size_t total) {
  std::vector<std::size_t> counts(gaussians.size(), 0);
  if (gaussians.empty()) return counts;
  const std::size_t base = total / gaussians.size();
  std::size_t remainder = total % gaussians.size();
  for (std::size_t idx : order_by_class(gaussians)) {
    counts[idx] = base + (remainder > 0 ? 1 : 0);
    if (remainder > 0) --remainder;
  }
  return counts;
}

ReplaySet sample_replay(std::span<const ClassGaussian> gaussians, std::size_t total, std::uint64_t seed) {
  ReplaySet out;
  if (total == 0) return out;
  if (gaussians.empty()) throw ValidationError("sample_replay: no class statistics to sample from");
  const Eigen::Index d = gaussians.front().mean.size();
  for (const auto& g : gaussians) {
    if (g.mean.size() != d || g.variance.size() != d) throw ValidationError("sample_replay: dimension mismatch");
    if ((g.variance.array() < 0.0).any()) throw ValidationError("sample_replay: negative variance");
  }

  const auto counts = replay_allocation(gaussians, total);
  out.features.resize(static_cast<Eigen::Index>(total), d);
  out.labels.reserve(total);

  Rng rng(seed);
  Eigen::Index row = 0;
  for (std::size_t idx : order_by_class(gaussians)) {
    const auto& g = gaussians[idx];
    const VectorXd stddev = g.variance.cwiseSqrt();
    for (std::size_t s = 0; s < counts[idx]; ++s, ++row) {
      for (Eigen::Index j = 0; j < d; ++j) out.features(row, j) = g.mean(j) + stddev(j) * rng.normal();
      out.labels.push_back(g.class_id);
    }
  }
  out.features = normalize_rows(out.features);
  return out;
}

}  // namespace calfuse
