#include "calfuse/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>
#include <numeric>
#include <unordered_set>

#include "calfuse/rng.hpp"

namespace calfuse {

void EmbeddingDataset::validate() const {
  const auto c = num_classes();
  const auto d = feature_dim();
  if (c < 2) throw ValidationError("dataset: at least two classes required");
  if (d < 1) throw ValidationError("dataset: feature dimension must be positive");
  if (class_names.size() != c) throw ValidationError("dataset: class name count differs from class count");
  if (train_features.cols() != d || test_features.cols() != d) {
    throw ValidationError("dataset: feature width differs from text feature width");
  }
  if (static_cast<std::size_t>(train_features.rows()) != train_labels.size() ||
      static_cast<std::size_t>(test_features.rows()) != test_labels.size()) {
    throw ValidationError("dataset: label count differs from sample count");
  }
  auto check_labels = [c](const std::vector<std::uint32_t>& labels, const char* split) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= c) {
        throw ValidationError(std::string("dataset: ") + split + " label " + std::to_string(labels[i]) +
                              " at index " + std::to_string(i) + " is out of range");
      }
    }
  };
  check_labels(train_labels, "train");
  check_labels(test_labels, "test");
  require_finite(train_features, "dataset train features");
  require_finite(test_features, "dataset test features");
  require_finite(class_text_features, "dataset text features");
}

LabeledRows select_classes(const MatrixXd& features, std::span<const std::uint32_t> labels,
                           std::span<const std::uint32_t> classes) {
  const std::unordered_set<std::uint32_t> wanted(classes.begin(), classes.end());
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (wanted.contains(labels[i])) rows.push_back(static_cast<Eigen::Index>(i));
  }
  LabeledRows out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.features.row(static_cast<Eigen::Index>(r)) = features.row(rows[r]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[r])]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CFEB encoding

namespace {

class Writer {
 public:
  void u16(std::uint16_t v) {
    bytes_.push_back(static_cast<std::uint8_t>(v & 0xFF));
    bytes_.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) bytes_.push_back(static_cast<std::uint8_t>((v >> s) & 0xFF));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void matrix(const MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f32(m(i, j));
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated CFEB file while reading ") + what, pos_);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(bytes_[pos_ + k]) << (8 * k);
    pos_ += 4;
    return v;
  }
  double f32(const char* what) { return static_cast<double>(std::bit_cast<float>(u32(what))); }
  MatrixXd matrix(std::uint32_t rows, std::uint32_t cols, const char* what) {
    need(std::size_t{rows} * cols * 4, what);
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = f32(what);
    return m;
  }
  std::vector<std::uint32_t> labels(std::uint32_t n, const char* what) {
    need(std::size_t{n} * 4, what);
    std::vector<std::uint32_t> out(n);
    for (auto& l : out) l = u32(what);
    return out;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw ValidationError(std::string("CFEB: ") + what + " exceeds u32 range");
  return static_cast<std::uint32_t>(v);
}

std::size_t normalize_in_place(MatrixXd& m) {
  std::size_t fixed = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (std::abs(n - 1.0) > kNormTolerance && n > 0.0) {
      m.row(i) /= n;
      ++fixed;
    }
  }
  return fixed;
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(const EmbeddingDataset& ds) {
  ds.validate();
  Writer w;
  w.raw(kCfebMagic, 4);
  w.u32(kCfebVersion);
  w.u32(checked_u32(static_cast<std::size_t>(ds.feature_dim()), "feature dimension"));
  w.u32(checked_u32(ds.train_labels.size(), "train count"));
  w.u32(checked_u32(ds.test_labels.size(), "test count"));
  w.u32(checked_u32(ds.num_classes(), "class count"));
  w.matrix(ds.train_features);
  for (auto l : ds.train_labels) w.u32(l);
  w.matrix(ds.test_features);
  for (auto l : ds.test_labels) w.u32(l);
  w.matrix(ds.class_text_features);
  for (const auto& name : ds.class_names) {
    if (name.size() > 0xFFFF) throw ValidationError("CFEB: class name longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
  }
  return w.take();
}

EmbeddingDataset decode_dataset(std::span<const std::uint8_t> bytes, std::size_t* renormalized_rows) {
  Reader r(bytes);
  r.need(4, "magic");
  for (std::size_t i = 0; i < 4; ++i) {
    if (bytes[i] != static_cast<std::uint8_t>(kCfebMagic[i])) throw FormatError("bad CFEB magic", i);
  }
  (void)r.bytes(4, "magic");
  const std::size_t version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kCfebVersion) {
    throw FormatError("unsupported CFEB version " + std::to_string(version), version_at);
  }
  const auto d = r.u32("feature dimension");
  const auto n_train = r.u32("train count");
  const auto n_test = r.u32("test count");
  const auto c = r.u32("class count");

  EmbeddingDataset ds;
  ds.train_features = r.matrix(n_train, d, "train features");
  ds.train_labels = r.labels(n_train, "train labels");
  ds.test_features = r.matrix(n_test, d, "test features");
  ds.test_labels = r.labels(n_test, "test labels");
  ds.class_text_features = r.matrix(c, d, "text features");
  ds.class_names.reserve(c);
  for (std::uint32_t i = 0; i < c; ++i) {
    const auto len = r.u16("class name length");
    ds.class_names.push_back(r.bytes(len, "class name"));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after CFEB payload", r.offset());

  ds.validate();
  std::size_t fixed = normalize_in_place(ds.train_features);
  fixed += normalize_in_place(ds.test_features);
  fixed += normalize_in_place(ds.class_text_features);
  if (fixed > 0) std::cerr << "warning: normalized " << fixed << " feature rows that were not unit length\n";
  if (renormalized_rows != nullptr) *renormalized_rows = fixed;
  return ds;
}

void write_dataset(const EmbeddingDataset& dataset, const std::filesystem::path& path) {
  const auto bytes = encode_dataset(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

EmbeddingDataset read_dataset(const std::filesystem::path& path, std::size_t* renormalized_rows) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
  return decode_dataset(bytes, renormalized_rows);
}

// ---------------------------------------------------------------------------
// Schedules

std::string to_string(Protocol p) { return p == Protocol::b0 ? "b0" : "b50"; }

Protocol parse_protocol(const std::string& s) {
  if (s == "b0" || s == "B0") return Protocol::b0;
  if (s == "b50" || s == "B50") return Protocol::b50;
  throw ConfigError("unknown protocol '" + s + "'");
}

TaskSchedule build_schedule(Protocol protocol, std::size_t num_classes, std::size_t increment, std::uint64_t seed) {
  if (increment == 0) throw ValidationError("schedule: increment must be positive");
  if (num_classes == 0) throw ValidationError("schedule: no classes");
  std::size_t base = increment;
  if (protocol == Protocol::b0) {
    if (num_classes % increment != 0) {
      throw ValidationError("schedule: B0 increment " + std::to_string(increment) + " does not divide " +
                            std::to_string(num_classes) + " classes");
    }
  } else {
    if (num_classes < kB50BaseClasses) throw ValidationError("schedule: B50 needs at least 50 classes");
    if ((num_classes - kB50BaseClasses) % increment != 0) {
      throw ValidationError("schedule: B50 increment " + std::to_string(increment) + " does not divide the " +
                            std::to_string(num_classes - kB50BaseClasses) + " incremental classes");
    }
    base = kB50BaseClasses;
  }

  std::vector<std::uint32_t> order(num_classes);
  std::iota(order.begin(), order.end(), std::uint32_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::uint32_t>(order));

  TaskSchedule s;
  s.protocol = protocol;
  s.increment = increment;
  s.seed = seed;
  std::size_t pos = 0;
  std::size_t size = base;
  while (pos < num_classes) {
    s.phases.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                          order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
    size = increment;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

namespace {

void round_to_float(MatrixXd& m) {
  m = m.cast<float>().cast<double>();
}

VectorXd random_unit(Rng& rng, Eigen::Index d) {
  VectorXd v(d);
  do {
    for (Eigen::Index j = 0; j < d; ++j) v(j) = rng.normal();
  } while (v.norm() == 0.0);
  return v / v.norm();
}

}  // namespace

EmbeddingDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ValidationError("synthetic: at least two classes required");
  if (spec.per_class_train < 1 || spec.per_class_test < 1 || spec.dim < 1) {
    throw ValidationError("synthetic: counts and dimension must be positive");
  }
  if (!(spec.cluster_spread > 0.0) || !std::isfinite(spec.cluster_spread)) {
    throw ValidationError("synthetic: cluster spread must be positive");
  }
  if (!(spec.anisotropy >= 0.0) || !std::isfinite(spec.anisotropy)) {
    throw ValidationError("synthetic: anisotropy must be non-negative");
  }
  const auto c = static_cast<Eigen::Index>(spec.num_classes);
  const auto d = static_cast<Eigen::Index>(spec.dim);
  Rng rng(spec.seed);

  EmbeddingDataset ds;
  ds.class_text_features.resize(c, d);
  for (Eigen::Index k = 0; k < c; ++k) ds.class_text_features.row(k) = random_unit(rng, d).transpose();
  round_to_float(ds.class_text_features);

  VectorXd noise_scale = VectorXd::Ones(d);
  if (spec.anisotropy != 0.0 && d > 1) {
    for (Eigen::Index j = 0; j < d; ++j) {
      noise_scale(j) = std::exp(-spec.anisotropy * static_cast<double>(j) / static_cast<double>(d - 1));
    }
    noise_scale /= noise_scale.mean();
    noise_scale = noise_scale.cwiseSqrt();
  }

  auto draw_split = [&](std::size_t per_class, MatrixXd& features, std::vector<std::uint32_t>& labels) {
    features.resize(c * static_cast<Eigen::Index>(per_class), d);
    labels.clear();
    Eigen::Index row = 0;
    for (Eigen::Index k = 0; k < c; ++k) {
      for (std::size_t s = 0; s < per_class; ++s, ++row) {
        for (Eigen::Index j = 0; j < d; ++j) {
          features(row, j) = ds.class_text_features(k, j) + spec.cluster_spread * noise_scale(j) * rng.normal();
        }
        labels.push_back(static_cast<std::uint32_t>(k));
      }
    }
    features = normalize_rows(features);
    round_to_float(features);
  };
  draw_split(spec.per_class_train, ds.train_features, ds.train_labels);
  draw_split(spec.per_class_test, ds.test_features, ds.test_labels);

  ds.class_names.reserve(spec.num_classes);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    std::string name = std::to_string(k);
    ds.class_names.push_back("class_" + std::string(3 - std::min<std::size_t>(3, name.size()), '0') + name);
  }
  return ds;
}

}  // namespace calfuse
