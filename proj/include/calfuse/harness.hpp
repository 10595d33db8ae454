#pragma once

// Full class-incremental runs: schedule, per-phase training, fusion, teacher
// snapshots, evaluation, metrics, and the report/state files behind the CLI.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "calfuse/adapter.hpp"
#include "calfuse/data.hpp"
#include "calfuse/fusion.hpp"
#include "calfuse/objective.hpp"
#include "calfuse/trainer.hpp"

namespace calfuse {

struct AblationFlags {
  bool fc = true;       // adapter + calibration + training
  bool pf = true;       // QR parameter fusion between phases
  bool distill = true;  // distillation against the previous phase
};

struct ExperimentConfig {
  std::string data_path;  // echoed into the report and state file
  Protocol protocol = Protocol::b0;
  std::size_t increment = 10;
  CalibrationConfig calibration{0.8};
  FusionConfig fusion{0.55, FusionVariant::literal};
  ObjectiveConfig objective{0.01};
  std::size_t replay_total = 2000;
  TrainConfig train;
  AblationFlags ablation;
  bool eval_with_fused = true;
  std::size_t hidden_dim = 0;  // 0 means equal to the feature dimension
  std::uint64_t seed = 0;

  void validate() const;
};

/// Independent random streams derived from ExperimentConfig::seed.
struct RunSeeds {
  std::uint64_t class_order;
  std::uint64_t adapter_init;
  std::uint64_t batch_shuffle;
  std::uint64_t replay;

  static RunSeeds from(std::uint64_t seed);
};

struct PhaseRecord {
  std::size_t phase = 0;  // 1-based
  std::size_t new_classes = 0;
  std::size_t seen_classes = 0;
  double accuracy = 0.0;  // percent
  double lambda = 0.0;
  double final_epoch_loss = 0.0;
  double seconds = 0.0;
};

struct MetricsReport {
  std::vector<PhaseRecord> phases;
  double avg = 0.0;
  double last = 0.0;
  bool complete = false;
  nlohmann::json config;

  std::vector<double> accuracies() const;
};

struct Metrics {
  double avg;
  double last;
};

/// Mean and final element of the per-phase accuracies.
Metrics compute_metrics(std::span<const double> per_phase);

/// Accuracy (percent) over test samples of `seen_classes`, predicting the
/// argmax over seen classes only. A null adapter scores the frozen features.
double evaluate_phase(const AdapterParamsd* params, const CalibrationConfig& calibration,
                      const ObjectiveConfig& objective, const EmbeddingDataset& dataset,
                      std::span<const std::uint32_t> seen_classes);

struct RunOutput {
  MetricsReport report;
  TaskSchedule schedule;
  std::vector<AdapterParamsd> eval_params;                 // per phase; empty when fc is off
  std::vector<std::optional<AdapterParamsd>> teacher_params;  // per phase
};

/// Called after each phase with the report so far.
using PhaseObserver = std::function<void(const MetricsReport&)>;

RunOutput run_experiment(const ExperimentConfig& config, const EmbeddingDataset& dataset,
                         const PhaseObserver& observer = {});

nlohmann::json config_to_json(const ExperimentConfig& config);

/// Throws ValidationError if avg is not the mean of the phase accuracies (1e-9) or last is not the final one.
nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

void write_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

/// Everything needed to recompute calibrated features after a run.
struct ExperimentState {
  std::string data_path;
  CalibrationConfig calibration;
  ObjectiveConfig objective;
  std::optional<AdapterParamsd> adapter;  // absent when fc was off
};

nlohmann::json state_to_json(const ExperimentState& state);
ExperimentState state_from_json(const nlohmann::json& j);

nlohmann::json adapter_to_json(const AdapterParamsd& params);
AdapterParamsd adapter_from_json(const nlohmann::json& j);

enum class Split { train, test };

/// Writes calibrated, normalized features of the chosen classes as CSV:
/// header "label,f0,...,f{d-1}", 9 significant digits.
void export_features(const AdapterParamsd* params, const CalibrationConfig& calibration,
                     const EmbeddingDataset& dataset, std::span<const std::uint32_t> classes,
                     const std::filesystem::path& path, Split split = Split::test);

/// Same rows export_features writes, in memory.
LabeledRows calibrated_features(const AdapterParamsd* params, const CalibrationConfig& calibration,
                                const EmbeddingDataset& dataset, std::span<const std::uint32_t> classes,
                                Split split = Split::test);

}  // namespace calfuse
