#pragma once

// Adam, the step-decay learning-rate schedule, and the per-task training loop.

#include <cstdint>
#include <span>
#include <vector>

#include "calfuse/adapter.hpp"
#include "calfuse/objective.hpp"

namespace calfuse {

struct AdamState {
  AdapterParamsd first_moment;
  AdapterParamsd second_moment;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState zeros_like(const AdapterParamsd& params);
};

struct AdamUpdate {
  AdamState state;
  AdapterParamsd params;
};

/// Bias-corrected Adam update.
AdamUpdate adam_step(const AdamState& state, const AdapterParamsd& params, const AdapterParamsd& grads, double lr);

struct TrainConfig {
  std::size_t epochs = 15;
  double learning_rate = 0.001;
  std::vector<std::size_t> decay_epochs{4, 10};
  double decay_factor = 0.1;
  std::size_t batch_size = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

/// base * factor^(number of decay epochs <= epoch). `epoch` is 1-based.
double lr_at_epoch(const TrainConfig& config, std::size_t epoch);

/// One phase of training data. Labels index rows of `text`; the first
/// `teacher->old_class_count` rows of `text` are the old classes.
struct TaskBatchSource {
  const MatrixXd* features = nullptr;
  std::span<const std::uint32_t> labels;
  const MatrixXd* replay_features = nullptr;  // may be null or empty
  std::span<const std::uint32_t> replay_labels;
  const MatrixXd* text = nullptr;
  std::uint64_t task_index = 0;  // selects the shuffle stream
};

struct HeadConfig {
  CalibrationConfig calibration;
  ObjectiveConfig objective;
};

struct TrainResult {
  AdapterParamsd params;
  double lambda = 0.0;
  std::vector<LossBreakdown> steps;
  std::vector<double> epoch_mean_loss;
};

/// Trains the adapter for one phase on real plus replay samples. When a
/// teacher is given, lambda = old / seen classes and the distillation term is
/// computed against its old-class distribution; otherwise lambda = 0.
TrainResult train_task(const TaskBatchSource& source, const TeacherSnapshot<double>* teacher,
                       const AdapterParamsd& init, const HeadConfig& head, const TrainConfig& config);

}  // namespace calfuse
