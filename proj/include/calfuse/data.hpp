#pragma once

// Embedding datasets, the CFEB binary file format, class-incremental task
// schedules, and the synthetic Gaussian-cluster benchmark.
//
// CFEB layout (little-endian):
//   "CFEB" | u32 version=1 | u32 d | u32 n_train | u32 n_test | u32 C
//   f32[n_train*d] train features (row-major) | u32[n_train] train labels
//   f32[n_test*d]  test features              | u32[n_test]  test labels
//   f32[C*d] class text features
//   C x (u16 byte length, UTF-8 bytes) class names

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "calfuse/linalg.hpp"

namespace calfuse {

inline constexpr char kCfebMagic[4] = {'C', 'F', 'E', 'B'};
inline constexpr std::uint32_t kCfebVersion = 1;
inline constexpr double kNormTolerance = 1e-5;

struct EmbeddingDataset {
  MatrixXd train_features;
  std::vector<std::uint32_t> train_labels;
  MatrixXd test_features;
  std::vector<std::uint32_t> test_labels;
  MatrixXd class_text_features;  // C x d
  std::vector<std::string> class_names;

  Eigen::Index feature_dim() const { return class_text_features.cols(); }
  std::size_t num_classes() const { return static_cast<std::size_t>(class_text_features.rows()); }

  /// Checks shapes, label ranges, and C >= 2. Throws ValidationError.
  void validate() const;

  bool operator==(const EmbeddingDataset& o) const {
    return identical(train_features, o.train_features) && train_labels == o.train_labels &&
           identical(test_features, o.test_features) && test_labels == o.test_labels &&
           identical(class_text_features, o.class_text_features) && class_names == o.class_names;
  }
};

/// Rows of `features` whose label is in `classes`, in original order.
struct LabeledRows {
  MatrixXd features;
  std::vector<std::uint32_t> labels;
};
LabeledRows select_classes(const MatrixXd& features, std::span<const std::uint32_t> labels,
                           std::span<const std::uint32_t> classes);

void write_dataset(const EmbeddingDataset& dataset, const std::filesystem::path& path);

/// Parses a CFEB file. Rows whose norm differs from 1 by more than
/// kNormTolerance are normalized and counted in *renormalized_rows (a warning
/// is printed to stderr).
EmbeddingDataset read_dataset(const std::filesystem::path& path, std::size_t* renormalized_rows = nullptr);

std::vector<std::uint8_t> encode_dataset(const EmbeddingDataset& dataset);
EmbeddingDataset decode_dataset(std::span<const std::uint8_t> bytes, std::size_t* renormalized_rows = nullptr);

enum class Protocol { b0, b50 };

std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& s);

inline constexpr std::size_t kB50BaseClasses = 50;

struct TaskSchedule {
  Protocol protocol = Protocol::b0;
  std::size_t increment = 10;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::uint32_t>> phases;

  std::size_t num_phases() const { return phases.size(); }
  bool operator==(const TaskSchedule&) const = default;
};

/// Shuffles 0..num_classes-1 with `seed`, then partitions per protocol.
TaskSchedule build_schedule(Protocol protocol, std::size_t num_classes, std::size_t increment, std::uint64_t seed);

struct SyntheticSpec {
  std::size_t num_classes = 100;
  std::size_t per_class_train = 50;
  std::size_t per_class_test = 20;
  std::size_t dim = 64;
  double cluster_spread = 0.3;
  std::uint64_t seed = 0;
  /// Shared per-dimension noise profile: variance of dimension j is
  /// proportional to exp(-anisotropy * j / (d - 1)), rescaled to mean 1.
  /// 0 gives isotropic N(0, I) noise.
  double anisotropy = 0.0;
};

/// Class centers uniform on the unit sphere; samples normalize(center +
/// spread * N(0, I)); text features are the centers. Values are rounded to
/// float32 before normalization so a CFEB round trip is lossless.
EmbeddingDataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace calfuse
