#include "calfuse/trainer.hpp"

#include <cmath>
#include <numeric>

#include "calfuse/rng.hpp"

namespace calfuse {

AdamState AdamState::zeros_like(const AdapterParamsd& params) {
  AdamState s;
  s.first_moment = AdapterParamsd::zeros(params.feature_dim(), params.hidden_dim());
  s.second_moment = s.first_moment;
  return s;
}

AdamUpdate adam_step(const AdamState& state, const AdapterParamsd& params, const AdapterParamsd& grads, double lr) {
  if (!params.same_shape(grads) || !params.same_shape(state.first_moment) ||
      !params.same_shape(state.second_moment)) {
    throw ValidationError("adam_step: parameter, gradient and moment shapes differ");
  }
  AdamUpdate out{state, params};
  out.state.step = state.step + 1;
  const double t = static_cast<double>(out.state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double eps = state.eps;

  for_each_block(
      [&](auto& p, auto& m, auto& v, const auto& g) {
        if (p.rows() != g.rows() || p.cols() != g.cols()) throw ValidationError("adam_step: block shape mismatch");
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
        p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
      },
      out.params, out.state.first_moment, out.state.second_moment, grads);
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("decay factor must lie in (0, 1]");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
}

double lr_at_epoch(const TrainConfig& config, std::size_t epoch) {
  double lr = config.learning_rate;
  for (auto e : config.decay_epochs) {
    if (e <= epoch) lr *= config.decay_factor;
  }
  return lr;
}

namespace {

MatrixXd gather_rows(const MatrixXd& src, std::span<const std::size_t> rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = src.row(static_cast<Eigen::Index>(rows[r]));
  return out;
}

}  // namespace

TrainResult train_task(const TaskBatchSource& source, const TeacherSnapshot<double>* teacher,
                       const AdapterParamsd& init, const HeadConfig& head, const TrainConfig& config) {
  config.validate();
  head.calibration.validate();
  head.objective.validate();
  init.validate();
  if (source.features == nullptr || source.text == nullptr) throw ValidationError("train_task: missing inputs");
  const MatrixXd& text = *source.text;

  // Single stream: real rows first, then replay rows.
  const Eigen::Index n_real = source.features->rows();
  const Eigen::Index n_replay = source.replay_features != nullptr ? source.replay_features->rows() : 0;
  if (static_cast<std::size_t>(n_real) != source.labels.size() ||
      static_cast<std::size_t>(n_replay) != source.replay_labels.size()) {
    throw ValidationError("train_task: label count differs from sample count");
  }
  if (n_real == 0) throw ValidationError("train_task: no training samples for this phase");

  MatrixXd stream(n_real + n_replay, init.feature_dim());
  stream.topRows(n_real) = *source.features;
  if (n_replay > 0) stream.bottomRows(n_replay) = *source.replay_features;
  std::vector<std::uint32_t> labels(source.labels.begin(), source.labels.end());
  labels.insert(labels.end(), source.replay_labels.begin(), source.replay_labels.end());
  for (auto l : labels) {
    if (static_cast<Eigen::Index>(l) >= text.rows()) throw ValidationError("train_task: label outside head classes");
  }

  TrainResult result;
  MatrixXd teacher_all;
  if (teacher != nullptr) {
    result.lambda = dynamic_lambda(teacher->old_class_count, static_cast<std::size_t>(text.rows()));
    teacher_all = teacher_probabilities(*teacher, head.objective, stream, text);
  }

  AdapterParamsd params = init;
  AdamState adam = AdamState::zeros_like(params);
  std::vector<std::size_t> order(static_cast<std::size_t>(stream.rows()));

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, source.task_index, epoch));
    rng.shuffle(std::span<std::size_t>(order));
    const double lr = lr_at_epoch(config, epoch);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      const std::span<const std::size_t> rows(order.data() + start, len);
      const MatrixXd x = gather_rows(stream, rows);
      std::vector<std::uint32_t> y(len);
      for (std::size_t i = 0; i < len; ++i) y[i] = labels[rows[i]];
      const MatrixXd t = teacher != nullptr ? gather_rows(teacher_all, rows) : MatrixXd(static_cast<Eigen::Index>(len), 0);

      const auto lg = loss_and_gradient(params, head.calibration, head.objective, x, y, text, t, result.lambda);
      auto update = adam_step(adam, params, lg.grads, lr);
      adam = std::move(update.state);
      params = std::move(update.params);

      result.steps.push_back(lg.loss);
      loss_sum += lg.loss.total;
      ++batches;
    }
    result.epoch_mean_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  result.params = std::move(params);
  return result;
}

}  // namespace calfuse
