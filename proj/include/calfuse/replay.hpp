#pragma once

// Per-class diagonal Gaussians over frozen embeddings, sampled as pseudo
// features for old classes.

#include <cstdint>
#include <span>
#include <vector>

#include "calfuse/linalg.hpp"

namespace calfuse {

inline constexpr double kVarianceShrinkage = 1e-6;

struct ClassGaussian {
  std::uint32_t class_id = 0;
  VectorXd mean;
  VectorXd variance;  // population variance + kVarianceShrinkage
  std::size_t sample_count = 0;
};

struct ReplaySet {
  MatrixXd features;                  // unit rows
  std::vector<std::uint32_t> labels;  // class ids
};

ClassGaussian fit_class_gaussian(const MatrixXd& features, std::uint32_t class_id);

/// Per-class sample counts: total split evenly, remainder to the lowest class ids.
/// Returned in the order of `gaussians`.
std::vector<std::size_t> replay_allocation(std::span<const ClassGaussian> gaussians, std::size_t total);

/// Draws mean + sqrt(variance) * z per sample, then L2-normalizes each row.
/// Classes are visited in ascending id order.
ReplaySet sample_replay(std::span<const ClassGaussian> gaussians, std::size_t total, std::uint64_t seed);

}  // namespace calfuse
