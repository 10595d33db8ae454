#include "calfuse/harness.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "calfuse/replay.hpp"
#include "calfuse/rng.hpp"

namespace calfuse {

void ExperimentConfig::validate() const {
  calibration.validate();
  fusion.validate();
  objective.validate();
  train.validate();
  if (increment < 1) throw ConfigError("increment must be positive");
}

RunSeeds RunSeeds::from(std::uint64_t seed) {
  return {derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3), derive_seed(seed, 4)};
}

std::vector<double> MetricsReport::accuracies() const {
  std::vector<double> out;
  out.reserve(phases.size());
  for (const auto& p : phases) out.push_back(p.accuracy);
  return out;
}

Metrics compute_metrics(std::span<const double> per_phase) {
  if (per_phase.empty()) throw ValidationError("compute_metrics: no phases");
  double sum = 0.0;
  for (double a : per_phase) sum += a;
  return {sum / static_cast<double>(per_phase.size()), per_phase.back()};
}

namespace {

MatrixXd gather_text(const EmbeddingDataset& ds, std::span<const std::uint32_t> classes) {
  MatrixXd t(static_cast<Eigen::Index>(classes.size()), ds.feature_dim());
  for (std::size_t i = 0; i < classes.size(); ++i) t.row(static_cast<Eigen::Index>(i)) = ds.class_text_features.row(classes[i]);
  return t;
}

/// Rewrites class ids as positions within `seen`.
std::vector<std::uint32_t> to_seen_index(std::span<const std::uint32_t> labels, std::span<const std::uint32_t> seen,
                                         std::size_t num_classes) {
  std::vector<std::int64_t> position(num_classes, -1);
  for (std::size_t i = 0; i < seen.size(); ++i) position[seen[i]] = static_cast<std::int64_t>(i);
  std::vector<std::uint32_t> out;
  out.reserve(labels.size());
  for (auto l : labels) {
    if (position[l] < 0) throw ValidationError("label " + std::to_string(l) + " is not among the seen classes");
    out.push_back(static_cast<std::uint32_t>(position[l]));
  }
  return out;
}

}  // namespace

double evaluate_phase(const AdapterParamsd* params, const CalibrationConfig& calibration,
                      const ObjectiveConfig& objective, const EmbeddingDataset& dataset,
                      std::span<const std::uint32_t> seen_classes) {
  if (seen_classes.empty()) throw ValidationError("evaluate_phase: no seen classes");
  const auto rows = select_classes(dataset.test_features, dataset.test_labels, seen_classes);
  if (rows.labels.empty()) return 0.0;
  const MatrixXd text = gather_text(dataset, seen_classes);
  const auto fwd = head_forward(params, calibration, objective, rows.features, text);
  const auto predicted = argmax_rows(fwd.logits);
  const auto truth = to_seen_index(rows.labels, seen_classes, dataset.num_classes());
  return accuracy_percent(predicted, truth);
}

RunOutput run_experiment(const ExperimentConfig& config, const EmbeddingDataset& dataset,
                         const PhaseObserver& observer) {
  config.validate();
  dataset.validate();
  const RunSeeds seeds = RunSeeds::from(config.seed);
  const auto d = dataset.feature_dim();
  const auto h = config.hidden_dim == 0 ? d : static_cast<Eigen::Index>(config.hidden_dim);

  RunOutput out;
  out.schedule = build_schedule(config.protocol, dataset.num_classes(), config.increment, seeds.class_order);
  out.report.config = config_to_json(config);
  out.report.config["num_phases"] = out.schedule.num_phases();

  const bool fc = config.ablation.fc;
  const CalibrationConfig calibration = fc ? config.calibration : CalibrationConfig{1.0};
  HeadConfig head{calibration, config.objective};
  TrainConfig train = config.train;
  train.seed = seeds.batch_shuffle;

  std::vector<std::uint32_t> seen;
  std::vector<ClassGaussian> gaussians;
  std::optional<AdapterParamsd> kept;          // carried into the next fusion
  std::optional<AdapterParamsd> last_trained;  // raw result of the previous phase
  std::optional<AdapterParamsd> last_eval;     // produced the previous accuracy

  for (std::size_t t = 0; t < out.schedule.num_phases(); ++t) {
    const auto started = std::chrono::steady_clock::now();
    const auto& phase_classes = out.schedule.phases[t];
    const std::size_t old_count = seen.size();
    seen.insert(seen.end(), phase_classes.begin(), phase_classes.end());

    PhaseRecord record;
    record.phase = t + 1;
    record.new_classes = phase_classes.size();
    record.seen_classes = seen.size();

    if (!fc) {
      record.accuracy = evaluate_phase(nullptr, calibration, config.objective, dataset, seen);
      out.teacher_params.emplace_back();
    } else {
      const MatrixXd text = gather_text(dataset, seen);
      const auto real = select_classes(dataset.train_features, dataset.train_labels, phase_classes);
      const auto real_labels = to_seen_index(real.labels, seen, dataset.num_classes());

      ReplaySet replay;
      if (t > 0) replay = sample_replay(gaussians, config.replay_total, derive_seed(seeds.replay, t));
      const auto replay_labels = to_seen_index(replay.labels, seen, dataset.num_classes());

      AdapterParamsd init;
      if (t == 0) {
        init = init_adapter<double>(d, h, seeds.adapter_init);
      } else {
        init = config.ablation.pf ? *kept : *last_trained;
      }

      std::optional<TeacherSnapshot<double>> teacher;
      if (t > 0 && config.ablation.distill) teacher = TeacherSnapshot<double>{*last_eval, calibration, old_count};
      out.teacher_params.push_back(teacher ? std::optional<AdapterParamsd>(teacher->params) : std::nullopt);

      TaskBatchSource source;
      source.features = &real.features;
      source.labels = real_labels;
      source.replay_features = &replay.features;
      source.replay_labels = replay_labels;
      source.text = &text;
      source.task_index = t;
      auto trained = train_task(source, teacher ? &*teacher : nullptr, init, head, train);
      record.lambda = trained.lambda;
      record.final_epoch_loss = trained.epoch_mean_loss.back();

      AdapterParamsd eval = trained.params;
      if (config.ablation.pf && t > 0) {
        AdapterParamsd fused = fuse_adapter(config.fusion, *kept, trained.params);
        if (config.eval_with_fused) eval = fused;
        kept = std::move(fused);
      } else {
        kept = trained.params;
      }
      record.accuracy = evaluate_phase(&eval, calibration, config.objective, dataset, seen);

      for (auto c : phase_classes) {
        const std::uint32_t one[] = {c};
        const auto rows = select_classes(dataset.train_features, dataset.train_labels, one);
        if (rows.labels.empty()) throw ValidationError("class " + std::to_string(c) + " has no training samples");
        gaussians.push_back(fit_class_gaussian(rows.features, c));
      }
      last_trained = std::move(trained.params);
      last_eval = eval;
      out.eval_params.push_back(std::move(eval));
    }

    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    out.report.phases.push_back(record);
    const auto acc = out.report.accuracies();
    const auto m = compute_metrics(acc);
    out.report.avg = m.avg;
    out.report.last = m.last;
    out.report.complete = t + 1 == out.schedule.num_phases();
    if (observer) observer(out.report);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json config_to_json(const ExperimentConfig& c) {
  return {
      {"data", c.data_path},
      {"protocol", to_string(c.protocol)},
      {"increment", c.increment},
      {"alpha", c.calibration.alpha},
      {"beta", c.fusion.beta},
      {"fusion_variant", to_string(c.fusion.variant)},
      {"tau", c.objective.tau},
      {"replay", c.replay_total},
      {"epochs", c.train.epochs},
      {"lr", c.train.learning_rate},
      {"decay_epochs", c.train.decay_epochs},
      {"decay_factor", c.train.decay_factor},
      {"batch", c.train.batch_size},
      {"seed", c.seed},
      {"hidden_dim", c.hidden_dim},
      {"fc", c.ablation.fc},
      {"pf", c.ablation.pf},
      {"distill", c.ablation.distill},
      {"eval_with_fused", c.eval_with_fused},
  };
}

nlohmann::json report_to_json(const MetricsReport& r) {
  const auto acc = r.accuracies();
  if (!acc.empty()) {
    const auto m = compute_metrics(acc);
    if (std::abs(m.avg - r.avg) > 1e-9) throw ValidationError("report: avg is not the mean of the phase accuracies");
    if (m.last != r.last) throw ValidationError("report: last is not the final phase accuracy");
  }
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : r.phases) {
    phases.push_back({{"phase", p.phase},
                      {"new_classes", p.new_classes},
                      {"seen_classes", p.seen_classes},
                      {"accuracy", p.accuracy},
                      {"lambda", p.lambda},
                      {"final_epoch_loss", p.final_epoch_loss},
                      {"seconds", p.seconds}});
  }
  return {{"phases", phases},
          {"num_phases", r.phases.size()},
          {"avg", r.avg},
          {"last", r.last},
          {"complete", r.complete},
          {"config", r.config}};
}

MetricsReport report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    for (const auto& p : j.at("phases")) {
      PhaseRecord rec;
      rec.phase = p.at("phase").get<std::size_t>();
      rec.new_classes = p.value("new_classes", std::size_t{0});
      rec.seen_classes = p.value("seen_classes", std::size_t{0});
      rec.accuracy = p.at("accuracy").get<double>();
      rec.lambda = p.value("lambda", 0.0);
      rec.final_epoch_loss = p.value("final_epoch_loss", 0.0);
      rec.seconds = p.value("seconds", 0.0);
      r.phases.push_back(rec);
    }
    r.avg = j.at("avg").get<double>();
    r.last = j.at("last").get<double>();
    r.complete = j.value("complete", false);
    r.config = j.value("config", nlohmann::json::object());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("report: ") + e.what());
  }
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

namespace {

nlohmann::json matrix_to_json(const MatrixXd& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size()) {
    throw ValidationError("state: matrix data length differs from rows x cols");
  }
  return Eigen::Map<const MatrixXd>(data.data(), rows, cols);
}

nlohmann::json vector_to_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

VectorXd vector_from_json(const nlohmann::json& j) {
  const auto data = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(data.data(), static_cast<Eigen::Index>(data.size()));
}

}  // namespace

nlohmann::json adapter_to_json(const AdapterParamsd& p) {
  return {{"feature_dim", p.feature_dim()}, {"hidden_dim", p.hidden_dim()},
          {"w1", matrix_to_json(p.w1)},     {"b1", vector_to_json(p.b1)},
          {"w2", matrix_to_json(p.w2)},     {"b2", vector_to_json(p.b2)},
          {"w3", matrix_to_json(p.w3)},     {"b3", vector_to_json(p.b3)},
          {"w4", matrix_to_json(p.w4)},     {"b4", vector_to_json(p.b4)}};
}

AdapterParamsd adapter_from_json(const nlohmann::json& j) {
  try {
    AdapterParamsd p;
    p.w1 = matrix_from_json(j.at("w1"));
    p.b1 = vector_from_json(j.at("b1"));
    p.w2 = matrix_from_json(j.at("w2"));
    p.b2 = vector_from_json(j.at("b2"));
    p.w3 = matrix_from_json(j.at("w3"));
    p.b3 = vector_from_json(j.at("b3"));
    p.w4 = matrix_from_json(j.at("w4"));
    p.b4 = vector_from_json(j.at("b4"));
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("state: malformed adapter: ") + e.what());
  }
}

nlohmann::json state_to_json(const ExperimentState& s) {
  nlohmann::json j = {{"format", "calfuse-state"},
                      {"version", 1},
                      {"data", s.data_path},
                      {"alpha", s.calibration.alpha},
                      {"tau", s.objective.tau}};
  j["adapter"] = s.adapter ? adapter_to_json(*s.adapter) : nlohmann::json(nullptr);
  return j;
}

ExperimentState state_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string{}) != "calfuse-state") throw ValidationError("state: not a calfuse state file");
    ExperimentState s;
    s.data_path = j.at("data").get<std::string>();
    s.calibration.alpha = j.at("alpha").get<double>();
    s.objective.tau = j.at("tau").get<double>();
    if (!j.at("adapter").is_null()) s.adapter = adapter_from_json(j.at("adapter"));
    s.calibration.validate();
    s.objective.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("state: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Feature export

LabeledRows calibrated_features(const AdapterParamsd* params, const CalibrationConfig& calibration,
                                const EmbeddingDataset& dataset, std::span<const std::uint32_t> classes, Split split) {
  for (auto c : classes) {
    if (c >= dataset.num_classes()) throw ValidationError("export: class " + std::to_string(c) + " out of range");
  }
  const bool test = split == Split::test;
  auto rows = select_classes(test ? dataset.test_features : dataset.train_features,
                             test ? dataset.test_labels : dataset.train_labels, classes);
  if (rows.labels.empty()) return rows;
  if (params != nullptr) {
    const auto efs = efs_forward(*params, rows.features);
    rows.features = calibrate(calibration, rows.features, efs.y);
  }
  rows.features = normalize_rows(rows.features);
  return rows;
}

void export_features(const AdapterParamsd* params, const CalibrationConfig& calibration,
                     const EmbeddingDataset& dataset, std::span<const std::uint32_t> classes,
                     const std::filesystem::path& path, Split split) {
  const auto rows = calibrated_features(params, calibration, dataset, classes, split);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "label";
  for (Eigen::Index j = 0; j < dataset.feature_dim(); ++j) out << ",f" << j;
  out << '\n' << std::setprecision(9);
  for (std::size_t i = 0; i < rows.labels.size(); ++i) {
    out << rows.labels[i];
    for (Eigen::Index j = 0; j < rows.features.cols(); ++j) out << ',' << rows.features(static_cast<Eigen::Index>(i), j);
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace calfuse
