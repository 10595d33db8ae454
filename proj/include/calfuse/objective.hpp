#pragma once

// Cosine-similarity classifier head over class text embeddings, the
// cross-entropy and distillation losses, and the old-class-weighted total.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "calfuse/adapter.hpp"
#include "calfuse/linalg.hpp"

namespace calfuse {

struct ObjectiveConfig {
  double tau = 0.01;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
  }
};

/// Frozen end-of-previous-phase model used as the distillation target.
template <typename Scalar>
struct TeacherSnapshot {
  AdapterParams<Scalar> params;
  CalibrationConfig calibration;
  std::size_t old_class_count = 0;
};

inline constexpr double kLogClamp = 1e-30;

namespace detail {

template <typename Scalar>
Scalar clamped_log(Scalar p) {
  return std::log(std::max(p, static_cast<Scalar>(kLogClamp)));
}

/// Mean over rows of -sum_j target(i, j) log probs(i, j). Rows summed in index order.
template <typename Scalar, typename Target>
Scalar mean_cross_entropy(const Matrix<Scalar>& probs, Target&& target) {
  if (probs.rows() == 0) return Scalar(0);
  Scalar total = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Scalar row = 0;
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      const Scalar t = target(i, j);
      if (t != Scalar(0)) row -= t * clamped_log(probs(i, j));
    }
    total += row;
  }
  return total / static_cast<Scalar>(probs.rows());
}

}  // namespace detail

/// Row-wise softmax of logits, max-subtracted.
template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
  Matrix<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Scalar mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Similarities f . text^T (cosine, since rows are unit norm) divided by tau.
template <typename Scalar>
Matrix<Scalar> similarity_logits(const ObjectiveConfig& config, const Matrix<Scalar>& features,
                                 const Matrix<Scalar>& text) {
  config.validate();
  if (text.rows() < 1) throw ValidationError("class_probabilities: no classes");
  if (features.cols() != text.cols()) throw ValidationError("class_probabilities: feature width differs from text width");
  Matrix<Scalar> logits(features.rows(), text.rows());
  logits.noalias() = features * text.transpose();
  logits /= static_cast<Scalar>(config.tau);
  return logits;
}

template <typename Scalar>
Matrix<Scalar> class_probabilities(const ObjectiveConfig& config, const Matrix<Scalar>& features,
                                   const Matrix<Scalar>& text) {
  return softmax_rows(similarity_logits(config, features, text));
}

/// Mean of -log p[label]; probabilities below kLogClamp are clamped.
template <typename Scalar>
Scalar cross_entropy(const Matrix<Scalar>& probs, std::span<const std::uint32_t> labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) {
    throw ValidationError("cross_entropy: label count differs from batch size");
  }
  for (auto l : labels) {
    if (static_cast<Eigen::Index>(l) >= probs.cols()) throw ValidationError("cross_entropy: label out of range");
  }
  return detail::mean_cross_entropy(probs, [&](Eigen::Index i, Eigen::Index j) {
    return static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]) == j ? Scalar(1) : Scalar(0);
  });
}

/// Mean cross-entropy of the student against the teacher over the old-class slice.
/// Both arguments are expected renormalized over that slice. No old classes gives 0.
template <typename Scalar>
Scalar distill_loss(const Matrix<Scalar>& teacher_probs, const Matrix<Scalar>& student_probs) {
  if (teacher_probs.rows() != student_probs.rows() || teacher_probs.cols() != student_probs.cols()) {
    throw ValidationError("distill_loss: teacher and student shapes differ");
  }
  if (teacher_probs.cols() == 0) return Scalar(0);
  return detail::mean_cross_entropy(student_probs,
                                    [&](Eigen::Index i, Eigen::Index j) { return teacher_probs(i, j); });
}

/// Fraction of old classes among all classes seen so far.
inline double dynamic_lambda(std::size_t old_class_count, std::size_t total_class_count) {
  if (total_class_count == 0) throw ValidationError("dynamic_lambda: total class count is zero");
  if (old_class_count > total_class_count) throw ValidationError("dynamic_lambda: more old classes than total");
  return static_cast<double>(old_class_count) / static_cast<double>(total_class_count);
}

inline double total_loss(double ce, double distill, double lambda) {
  return (1.0 - lambda) * ce + lambda * distill;
}

// ---------------------------------------------------------------------------
// Full head: adapter -> calibrate -> normalize -> probabilities.

template <typename Scalar>
struct HeadForward {
  std::optional<EfsOutput<Scalar>> efs;  // absent when the adapter is bypassed
  Matrix<Scalar> calibrated;             // before normalization
  Matrix<Scalar> features;               // unit rows
  Matrix<Scalar> logits;
  Matrix<Scalar> probs;
};

/// Runs the head. With params == nullptr the adapter is bypassed and the
/// normalized input itself is scored (zero-shot path).
template <typename Scalar>
HeadForward<Scalar> head_forward(const AdapterParams<Scalar>* params, const CalibrationConfig& calibration,
                                 const ObjectiveConfig& objective, const Matrix<Scalar>& x,
                                 const Matrix<Scalar>& text) {
  HeadForward<Scalar> out;
  if (params != nullptr) {
    out.efs = efs_forward(*params, x);
    out.calibrated = calibrate(calibration, x, out.efs->y);
  } else {
    out.calibrated = x;
  }
  out.features = normalize_rows(out.calibrated);
  out.logits = similarity_logits(objective, out.features, text);
  out.probs = softmax_rows(out.logits);
  return out;
}

/// Teacher distribution over the first old_class_count rows of text, renormalized.
template <typename Scalar>
Matrix<Scalar> teacher_probabilities(const TeacherSnapshot<Scalar>& teacher, const ObjectiveConfig& objective,
                                     const Matrix<Scalar>& x, const Matrix<Scalar>& text) {
  const auto k = static_cast<Eigen::Index>(teacher.old_class_count);
  if (k > text.rows()) throw ValidationError("teacher: old class count exceeds class count");
  if (k == 0) return Matrix<Scalar>(x.rows(), 0);
  const Matrix<Scalar> old_text = text.topRows(k);
  return head_forward(&teacher.params, teacher.calibration, objective, x, old_text).probs;
}

/// Student distribution restricted to the first k classes, renormalized.
template <typename Scalar>
Matrix<Scalar> old_slice_probabilities(const Matrix<Scalar>& logits, Eigen::Index k) {
  if (k == 0) return Matrix<Scalar>(logits.rows(), 0);
  return softmax_rows(Matrix<Scalar>(logits.leftCols(k)));
}

/// Index of the largest entry per row; ties go to the lowest index.
template <typename Scalar>
std::vector<std::uint32_t> argmax_rows(const Matrix<Scalar>& scores) {
  std::vector<std::uint32_t> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    scores.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(best);
  }
  return out;
}

/// Percentage of predictions equal to labels; 0 for an empty batch.
inline double accuracy_percent(std::span<const std::uint32_t> predicted, std::span<const std::uint32_t> labels) {
  if (predicted.size() != labels.size()) throw ValidationError("accuracy: prediction count differs from label count");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double distill = 0.0;
  double lambda = 0.0;
};

template <typename Scalar>
struct LossGradient {
  LossBreakdown loss;
  AdapterParams<Scalar> grads;
};

/// Total loss (1-lambda) CE + lambda distill and its exact gradient with
/// respect to the adapter parameters. Labels index rows of text; the first
/// teacher_probs.cols() rows of text are the old classes.
template <typename Scalar>
LossGradient<Scalar> loss_and_gradient(const AdapterParams<Scalar>& params, const CalibrationConfig& calibration,
                                       const ObjectiveConfig& objective, const Matrix<Scalar>& x,
                                       std::span<const std::uint32_t> labels, const Matrix<Scalar>& text,
                                       const Matrix<Scalar>& teacher_probs, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("loss: lambda outside [0, 1]");
  const auto fwd = head_forward(&params, calibration, objective, x, text);
  const Eigen::Index batch = x.rows();
  const Eigen::Index k_old = teacher_probs.cols();
  if (k_old > 0 && teacher_probs.rows() != batch) throw ValidationError("loss: teacher batch size differs");
  if (k_old > text.rows()) throw ValidationError("loss: teacher covers more classes than the head");

  LossGradient<Scalar> out;
  out.loss.lambda = lambda;
  out.loss.ce = static_cast<double>(cross_entropy(fwd.probs, labels));
  Matrix<Scalar> student_old;
  if (k_old > 0) {
    student_old = old_slice_probabilities(fwd.logits, k_old);
    out.loss.distill = static_cast<double>(distill_loss(teacher_probs, student_old));
  }
  out.loss.total = total_loss(out.loss.ce, out.loss.distill, lambda);

  const Scalar inv_batch = Scalar(1) / static_cast<Scalar>(batch);
  const Scalar ce_w = static_cast<Scalar>(1.0 - lambda) * inv_batch;
  Matrix<Scalar> d_logits = ce_w * fwd.probs;
  for (Eigen::Index i = 0; i < batch; ++i) d_logits(i, labels[static_cast<std::size_t>(i)]) -= ce_w;
  if (k_old > 0) {
    const Scalar kd_w = static_cast<Scalar>(lambda) * inv_batch;
    d_logits.leftCols(k_old) += kd_w * (student_old - teacher_probs);
  }

  const Matrix<Scalar> d_features = (d_logits * text) / static_cast<Scalar>(objective.tau);
  const Matrix<Scalar> d_calibrated = normalize_rows_backward(fwd.calibrated, d_features);
  const Matrix<Scalar> d_efs = static_cast<Scalar>(1.0 - calibration.alpha) * d_calibrated;
  out.grads = efs_backward(params, fwd.efs->trace, d_efs).params;
  return out;
}

}  // namespace calfuse
