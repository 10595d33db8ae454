#pragma once

// Enhanced Feature Synthesis adapter: a two-layer main path multiplied by a
// two-layer sigmoid gate, all dimension-preserving.
//
//   m(x) = relu(x W1 + b1) W2 + b2
//   g(x) = sigmoid(relu(x W3 + b3) W4 + b4)
//   y    = g(x) * m(x)            (elementwise)
//
// Batches are row-major: one sample per row.

#include <cmath>
#include <cstdint>

#include "calfuse/linalg.hpp"
#include "calfuse/rng.hpp"

namespace calfuse {

template <typename Scalar>
struct AdapterParams {
  Matrix<Scalar> w1;  // d x h
  Vector<Scalar> b1;  // h
  Matrix<Scalar> w2;  // h x d
  Vector<Scalar> b2;  // d
  Matrix<Scalar> w3;  // d x h
  Vector<Scalar> b3;  // h
  Matrix<Scalar> w4;  // h x d
  Vector<Scalar> b4;  // d

  Eigen::Index feature_dim() const { return w1.rows(); }
  Eigen::Index hidden_dim() const { return w1.cols(); }

  static AdapterParams zeros(Eigen::Index d, Eigen::Index h) {
    return {Matrix<Scalar>::Zero(d, h), Vector<Scalar>::Zero(h), Matrix<Scalar>::Zero(h, d),
            Vector<Scalar>::Zero(d),    Matrix<Scalar>::Zero(d, h), Vector<Scalar>::Zero(h),
            Matrix<Scalar>::Zero(h, d), Vector<Scalar>::Zero(d)};
  }

  /// Throws ValidationError unless every shape matches (d, h) and all entries are finite.
  void validate() const {
    const auto d = feature_dim();
    const auto h = hidden_dim();
    if (d < 1 || h < 1) throw ValidationError("adapter: empty dimensions");
    auto check = [](bool ok, const char* name) {
      if (!ok) throw ValidationError(std::string("adapter: inconsistent shape for ") + name);
    };
    check(b1.size() == h, "b1");
    check(w2.rows() == h && w2.cols() == d, "w2");
    check(b2.size() == d, "b2");
    check(w3.rows() == d && w3.cols() == h, "w3");
    check(b3.size() == h, "b3");
    check(w4.rows() == h && w4.cols() == d, "w4");
    check(b4.size() == d, "b4");
    require_finite(w1, "adapter w1");
    require_finite(b1, "adapter b1");
    require_finite(w2, "adapter w2");
    require_finite(b2, "adapter b2");
    require_finite(w3, "adapter w3");
    require_finite(b3, "adapter b3");
    require_finite(w4, "adapter w4");
    require_finite(b4, "adapter b4");
  }

  bool same_shape(const AdapterParams& o) const {
    return feature_dim() == o.feature_dim() && hidden_dim() == o.hidden_dim();
  }

  bool operator==(const AdapterParams& o) const {
    return identical(w1, o.w1) && identical(b1, o.b1) && identical(w2, o.w2) && identical(b2, o.b2) &&
           identical(w3, o.w3) && identical(b3, o.b3) && identical(w4, o.w4) && identical(b4, o.b4);
  }
};

using AdapterParamsd = AdapterParams<double>;

/// Calls f on corresponding blocks of each parameter set: f(p.w1, q.w1, ...), then b1, ... b4.
template <typename F, typename... Ps>
void for_each_block(F&& f, Ps&... ps) {
  f(ps.w1...); f(ps.b1...); f(ps.w2...); f(ps.b2...);
  f(ps.w3...); f(ps.b3...); f(ps.w4...); f(ps.b4...);
}

struct CalibrationConfig {
  double alpha = 0.8;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  }
};

template <typename Scalar>
struct ForwardTrace {
  Matrix<Scalar> x;
  Matrix<Scalar> main_pre;     // x W1 + b1
  Matrix<Scalar> main_hidden;  // relu(main_pre)
  Matrix<Scalar> main_out;     // m(x)
  Matrix<Scalar> gate_pre;     // x W3 + b3
  Matrix<Scalar> gate_hidden;  // relu(gate_pre)
  Matrix<Scalar> gate;         // g(x)

  Eigen::Index batch_size() const { return x.rows(); }
};

template <typename Scalar>
struct EfsOutput {
  Matrix<Scalar> y;
  ForwardTrace<Scalar> trace;
};

template <typename Scalar>
struct EfsGradients {
  AdapterParams<Scalar> params;
  Matrix<Scalar> dx;
};

namespace detail {

template <typename Scalar>
Matrix<Scalar> affine(const Matrix<Scalar>& x, const Matrix<Scalar>& w, const Vector<Scalar>& b) {
  Matrix<Scalar> z(x.rows(), w.cols());
  z.noalias() = x * w;
  z.rowwise() += b.transpose();
  return z;
}

template <typename Scalar>
Matrix<Scalar> relu(const Matrix<Scalar>& z) {
  return z.cwiseMax(Scalar(0));
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  // Split by sign so exp never overflows.
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

}  // namespace detail

template <typename Scalar>
EfsOutput<Scalar> efs_forward(const AdapterParams<Scalar>& p, const Matrix<Scalar>& x) {
  if (x.cols() != p.feature_dim()) {
    throw ValidationError("efs_forward: input has " + std::to_string(x.cols()) +
                          " columns, adapter expects " + std::to_string(p.feature_dim()));
  }
  require_finite(x, "efs_forward input");

  EfsOutput<Scalar> out;
  auto& t = out.trace;
  t.x = x;
  t.main_pre = detail::affine(x, p.w1, p.b1);
  t.main_hidden = detail::relu(t.main_pre);
  t.main_out = detail::affine(t.main_hidden, p.w2, p.b2);
  t.gate_pre = detail::affine(x, p.w3, p.b3);
  t.gate_hidden = detail::relu(t.gate_pre);
  t.gate = detail::affine(t.gate_hidden, p.w4, p.b4).unaryExpr([](Scalar z) { return detail::sigmoid(z); });
  out.y = t.gate.cwiseProduct(t.main_out);
  return out;
}

/// Exact vector-Jacobian product of efs_forward. relu'(0) is taken as 0.
template <typename Scalar>
EfsGradients<Scalar> efs_backward(const AdapterParams<Scalar>& p, const ForwardTrace<Scalar>& t,
                                  const Matrix<Scalar>& dy) {
  const auto d = p.feature_dim();
  const auto h = p.hidden_dim();
  const auto n = t.batch_size();
  if (t.x.cols() != d || t.main_pre.cols() != h || t.gate_pre.cols() != h ||
      t.gate.rows() != n || t.main_out.rows() != n) {
    throw ValidationError("efs_backward: trace does not match adapter shape");
  }
  require_shape(dy, n, d, "efs_backward upstream gradient");

  const Matrix<Scalar> d_main = dy.cwiseProduct(t.gate);
  const Matrix<Scalar> d_gate = dy.cwiseProduct(t.main_out);
  const Matrix<Scalar> d_gate_pre_out =
      d_gate.cwiseProduct(t.gate.cwiseProduct((Scalar(1) - t.gate.array()).matrix()));

  auto relu_mask = [](const Matrix<Scalar>& pre, const Matrix<Scalar>& g) {
    return Matrix<Scalar>((pre.array() > Scalar(0)).select(g.array(), Scalar(0)));
  };

  EfsGradients<Scalar> out;
  auto& g = out.params;

  g.w2.noalias() = t.main_hidden.transpose() * d_main;
  g.b2 = d_main.colwise().sum().transpose();
  const Matrix<Scalar> d_main_pre = relu_mask(t.main_pre, d_main * p.w2.transpose());
  g.w1.noalias() = t.x.transpose() * d_main_pre;
  g.b1 = d_main_pre.colwise().sum().transpose();

  g.w4.noalias() = t.gate_hidden.transpose() * d_gate_pre_out;
  g.b4 = d_gate_pre_out.colwise().sum().transpose();
  const Matrix<Scalar> d_gate_pre = relu_mask(t.gate_pre, d_gate_pre_out * p.w4.transpose());
  g.w3.noalias() = t.x.transpose() * d_gate_pre;
  g.b3 = d_gate_pre.colwise().sum().transpose();

  out.dx.noalias() = d_main_pre * p.w1.transpose();
  out.dx.noalias() += d_gate_pre * p.w3.transpose();
  return out;
}

/// (1 - alpha) * f_efs + alpha * f_image.
template <typename Scalar>
Matrix<Scalar> calibrate(const CalibrationConfig& config, const Matrix<Scalar>& f_image,
                         const Matrix<Scalar>& f_efs) {
  config.validate();
  if (f_image.rows() != f_efs.rows() || f_image.cols() != f_efs.cols()) {
    throw ValidationError("calibrate: feature shapes differ");
  }
  const Scalar a = static_cast<Scalar>(config.alpha);
  return (Scalar(1) - a) * f_efs + a * f_image;
}

/// Weights uniform in +-1/sqrt(fan_in), biases zero. Draw order: w1, w2, w3, w4, row-major.
template <typename Scalar = double>
AdapterParams<Scalar> init_adapter(Eigen::Index d, Eigen::Index h, std::uint64_t seed) {
  if (d < 1 || h < 1) throw ValidationError("init_adapter: dimensions must be positive");
  Rng rng(seed);
  auto p = AdapterParams<Scalar>::zeros(d, h);
  auto fill = [&rng](Matrix<Scalar>& w) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        w(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
  };
  fill(p.w1);
  fill(p.w2);
  fill(p.w3);
  fill(p.w4);
  return p;
}

}  // namespace calfuse
