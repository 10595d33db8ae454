#pragma once

// QR-based fusion of consecutive adapter weights.
//
//   W_prev = Q_prev R_prev,  W_curr = Q_curr R_curr
//   R_next = beta * (Q_prev^T Q_curr) + (1 - beta) * R_prev          (literal)
//   R_next = beta * (Q_prev^T Q_curr R_curr) + (1 - beta) * R_prev   (r_inclusive)
//   W      = Q_prev R_next

#include <string>

#include "calfuse/adapter.hpp"
#include "calfuse/linalg.hpp"

namespace calfuse {

enum class FusionVariant { literal, r_inclusive };

inline std::string to_string(FusionVariant v) {
  return v == FusionVariant::literal ? "literal" : "r-inclusive";
}

inline FusionVariant parse_fusion_variant(const std::string& s) {
  if (s == "literal") return FusionVariant::literal;
  if (s == "r-inclusive" || s == "r_inclusive") return FusionVariant::r_inclusive;
  throw ConfigError("unknown fusion variant '" + s + "'");
}

struct FusionConfig {
  double beta = 0.55;
  FusionVariant variant = FusionVariant::literal;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  }
};

namespace detail {

template <typename Scalar>
Matrix<Scalar> fuse_tall(const FusionConfig& config, const Matrix<Scalar>& w_prev, const Matrix<Scalar>& w_curr) {
  const auto prev = qr_decompose(w_prev);
  const auto curr = qr_decompose(w_curr);
  const Scalar beta = static_cast<Scalar>(config.beta);

  Matrix<Scalar> projection = matmul(transpose(prev.q), curr.q);
  if (config.variant == FusionVariant::r_inclusive) projection = matmul(projection, curr.r);

  const Matrix<Scalar> r_next = beta * projection + (Scalar(1) - beta) * prev.r;
  return matmul(prev.q, r_next);
}

}  // namespace detail

/// Fuses one weight matrix. Wide inputs (rows < cols) are fused through their
/// transposes, where the thin factors have compatible shapes.
template <typename Scalar>
Matrix<Scalar> fuse_matrix(const FusionConfig& config, const Matrix<Scalar>& w_prev, const Matrix<Scalar>& w_curr) {
  config.validate();
  if (w_prev.rows() != w_curr.rows() || w_prev.cols() != w_curr.cols()) {
    throw ValidationError("fuse_matrix: weight shapes differ");
  }
  if (w_prev.rows() >= w_prev.cols()) return detail::fuse_tall(config, w_prev, w_curr);
  return transpose(detail::fuse_tall(config, transpose(w_prev), transpose(w_curr)));
}

template <typename Scalar>
AdapterParams<Scalar> fuse_adapter(const FusionConfig& config, const AdapterParams<Scalar>& prev,
                                   const AdapterParams<Scalar>& curr) {
  config.validate();
  prev.validate();
  curr.validate();
  if (!prev.same_shape(curr)) throw ValidationError("fuse_adapter: adapter shapes differ");

  const Scalar beta = static_cast<Scalar>(config.beta);
  auto bias = [beta](const Vector<Scalar>& p, const Vector<Scalar>& c) -> Vector<Scalar> {
    // (1 - beta) p + beta c, written so that p == c and beta == 0 both return p exactly
    return p + beta * (c - p);
  };
  AdapterParams<Scalar> out;
  out.w1 = fuse_matrix(config, prev.w1, curr.w1);
  out.b1 = bias(prev.b1, curr.b1);
  out.w2 = fuse_matrix(config, prev.w2, curr.w2);
  out.b2 = bias(prev.b2, curr.b2);
  out.w3 = fuse_matrix(config, prev.w3, curr.w3);
  out.b3 = bias(prev.b3, curr.b3);
  out.w4 = fuse_matrix(config, prev.w4, curr.w4);
  out.b4 = bias(prev.b4, curr.b4);
  return out;
}

}  // namespace calfuse
