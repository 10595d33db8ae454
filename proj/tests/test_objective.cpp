#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradient_suite.hpp"
#include "oracles.hpp"

#include "calfuse/objective.hpp"

using namespace calfuse;

namespace {

MatrixXd rows(std::initializer_list<std::initializer_list<double>> values) {
  MatrixXd m(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(values.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : values) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

// Features/text chosen so that the cosine similarities equal `sims` exactly:
// a unit feature e0 against text rows (s, sqrt(1 - s^2)).
MatrixXd probs_for_similarities(const std::vector<double>& sims, double tau) {
  MatrixXd f = rows({{1.0, 0.0}});
  MatrixXd text(static_cast<Eigen::Index>(sims.size()), 2);
  for (std::size_t k = 0; k < sims.size(); ++k) {
    text(static_cast<Eigen::Index>(k), 0) = sims[k];
    text(static_cast<Eigen::Index>(k), 1) = std::sqrt(1.0 - sims[k] * sims[k]);
  }
  return class_probabilities(ObjectiveConfig{tau}, f, text);
}

double scalar_softmax_first(double a, double b, double tau) {
  return 1.0 / (1.0 + std::exp((b - a) / tau));
}

}  // namespace

TEST_CASE("class probabilities examples") {
  const auto equal = probs_for_similarities({0.3, 0.3}, 0.01);
  CHECK(equal(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(equal(0, 1) == doctest::Approx(0.5).epsilon(1e-12));

  const auto warm = probs_for_similarities({1.0, 0.0}, 1.0);
  CHECK(std::abs(scalar_softmax_first(1.0, 0.0, 1.0) - 0.73106) < 1e-5);
  CHECK(std::abs(warm(0, 0) - 0.73106) < 1e-5);
  CHECK(std::abs(warm(0, 1) - 0.26894) < 1e-5);

  const auto sharp = probs_for_similarities({1.0, 0.9}, 0.01);
  CHECK(scalar_softmax_first(1.0, 0.9, 0.01) > 0.9999);
  CHECK(sharp(0, 0) > 0.9999);
}

TEST_CASE("class probabilities reject a nonpositive temperature") {
  const MatrixXd f = rows({{1.0, 0.0}});
  CHECK_THROWS_AS(class_probabilities(ObjectiveConfig{0.0}, f, f), ConfigError);
  CHECK_THROWS_AS(class_probabilities(ObjectiveConfig{-1.0}, f, f), ConfigError);
}

TEST_CASE("softmax property: rows sum to one and are shift invariant") {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const MatrixXd logits = oracle::random_matrix(rng, 4, 7, 30.0);
    const MatrixXd p = softmax_rows(logits);
    CHECK((p.array() >= 0.0).all());
    for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-12);
    MatrixXd shifted = logits;
    for (Eigen::Index i = 0; i < shifted.rows(); ++i) shifted.row(i).array() += 100.0 * rng.normal();
    CHECK((softmax_rows(shifted) - p).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("cross entropy examples and clamp") {
  const std::vector<std::uint32_t> l0{0};
  CHECK(cross_entropy(rows({{1.0, 0.0}}), std::span<const std::uint32_t>(l0)) == 0.0);
  CHECK(cross_entropy(rows({{0.5, 0.5}}), std::span<const std::uint32_t>(l0)) == doctest::Approx(0.693147).epsilon(1e-6));
  const std::vector<std::uint32_t> l00{0, 0};
  CHECK(cross_entropy(rows({{1.0, 0.0}, {0.5, 0.5}}), std::span<const std::uint32_t>(l00)) ==
        doctest::Approx(0.346574).epsilon(1e-6));
  const std::vector<std::uint32_t> l1{1};
  CHECK(cross_entropy(rows({{1.0, 0.0}}), std::span<const std::uint32_t>(l1)) ==
        doctest::Approx(-std::log(1e-30)).epsilon(1e-12));
  const std::vector<std::uint32_t> bad{2};
  CHECK_THROWS_AS(cross_entropy(rows({{1.0, 0.0}}), std::span<const std::uint32_t>(bad)), ValidationError);
}

TEST_CASE("distillation examples") {
  CHECK(distill_loss(rows({{1.0, 0.0}}), rows({{1.0, 0.0}})) == 0.0);
  CHECK(distill_loss(rows({{0.5, 0.5}}), rows({{0.5, 0.5}})) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const double hand = -0.75 * std::log(0.5) - 0.25 * std::log(0.5);
  CHECK(std::abs(hand - 0.693147) < 1e-6);
  CHECK(distill_loss(rows({{0.75, 0.25}}), rows({{0.5, 0.5}})) == doctest::Approx(hand).epsilon(1e-12));
  CHECK(distill_loss(MatrixXd(3, 0), MatrixXd(3, 0)) == 0.0);
}

TEST_CASE("distillation property: bounded below by teacher entropy, tight on match") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const MatrixXd t = softmax_rows(MatrixXd(oracle::random_matrix(rng, 3, 4, 2.0)));
    const MatrixXd s = softmax_rows(MatrixXd(oracle::random_matrix(rng, 3, 4, 2.0)));
    const double entropy = distill_loss(t, t);
    double h = 0.0;
    for (Eigen::Index i = 0; i < t.size(); ++i) h -= t.data()[i] * std::log(t.data()[i]);
    CHECK(std::abs(entropy - h / 3.0) < 1e-12);
    CHECK(distill_loss(t, s) >= entropy);
  }
}

TEST_CASE("cross entropy equals distillation against one-hot targets") {
  Rng rng(12);
  const MatrixXd p = softmax_rows(MatrixXd(oracle::random_matrix(rng, 6, 5, 2.0)));
  std::vector<std::uint32_t> labels(6);
  MatrixXd onehot = MatrixXd::Zero(6, 5);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = static_cast<std::uint32_t>(rng.below(5));
    onehot(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  CHECK(cross_entropy(p, std::span<const std::uint32_t>(labels)) == distill_loss(onehot, p));
}

TEST_CASE("dynamic lambda examples and errors") {
  CHECK(dynamic_lambda(0, 10) == 0.0);
  CHECK(dynamic_lambda(10, 20) == 0.5);
  CHECK(dynamic_lambda(50, 60) == doctest::Approx(0.83333).epsilon(1e-5));
  CHECK_THROWS_AS(dynamic_lambda(0, 0), ValidationError);
  CHECK_THROWS_AS(dynamic_lambda(11, 10), ValidationError);
}

TEST_CASE("total loss examples and monotonicity") {
  CHECK(total_loss(1.3, 0.2, 0.0) == 1.3);
  CHECK(total_loss(1.3, 0.2, 1.0) == 0.2);
  CHECK(total_loss(1.0, 0.5, 0.5) == 0.75);
  for (double lambda : {0.1, 0.5, 0.9}) {
    CHECK(total_loss(1.1, 0.5, lambda) > total_loss(1.0, 0.5, lambda));
    CHECK(total_loss(1.0, 0.6, lambda) > total_loss(1.0, 0.5, lambda));
  }
}

TEST_CASE("zero-shot head path uses the frozen features") {
  Rng rng(13);
  const MatrixXd x = normalize_rows(oracle::random_matrix(rng, 4, 3));
  const MatrixXd text = normalize_rows(oracle::random_matrix(rng, 5, 3));
  const auto fwd = head_forward<double>(nullptr, CalibrationConfig{0.8}, ObjectiveConfig{0.01}, x, text);
  CHECK_FALSE(fwd.efs.has_value());
  CHECK((fwd.probs - class_probabilities(ObjectiveConfig{0.01}, x, text)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("head loss of the analytic route agrees with the scalar oracle") {
  for (std::uint64_t seed = 0; seed < 8; ++seed)
    for (double lambda : {0.0, 0.5}) {
      const auto r = gradcheck::run_case(seed, lambda);
      CAPTURE(seed);
      CHECK(r.loss_gap < 1e-12);
    }
}

TEST_CASE("end-to-end head gradient matches central differences") {
  for (std::uint64_t seed = 100; seed < 112; ++seed)
    for (double lambda : {0.0, 0.5}) {
      const auto r = gradcheck::run_case(seed, lambda);
      CAPTURE(seed);
      CAPTURE(lambda);
      CHECK(r.max_rel_error < 1e-4);
    }
}

TEST_CASE("end-to-end head gradient holds at the default temperature") {
  // Logits of order 1/tau amplify rounding in the loss, so a wider step keeps it below truncation error.
  for (std::uint64_t seed = 200; seed < 204; ++seed) {
    const auto r = gradcheck::run_case(seed, 0.0, 0.01, true, 1e-4);
    CAPTURE(seed);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("argmax and accuracy") {
  const auto pred = argmax_rows(rows({{0.1, 0.9}, {0.7, 0.3}, {0.2, 0.8}}));
  CHECK(pred == std::vector<std::uint32_t>{1, 0, 1});
  const std::vector<std::uint32_t> truth{1, 1, 1};
  CHECK(accuracy_percent(pred, truth) == doctest::Approx(200.0 / 3.0));
}
