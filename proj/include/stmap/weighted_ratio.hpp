#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "stmap/error.hpp"
#include "stmap/types.hpp"

namespace stmap {

inline constexpr double kLogWeightFloor = -700.0;

/// Replaces log-weights by w_i = exp(l_i - max_j l_j) in place and returns
/// sum_i w_i. The largest weight becomes exactly 1, so the sum is >= 1.
inline double exponentiate_shifted(std::span<double> log_weights) {
  const std::size_t n = log_weights.size();
  if (n == 0) throw DomainError("weighted ratio needs at least one weight");
  double* w = log_weights.data();
  double m = -kInf;
  STMAP_SIMD_REDUCTION(max, m)
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, w[i]);
  if (m == -kInf || std::isnan(m))
    throw DegenerateWeightsError("all log-weights are -inf: point outside the effective support");
  if (m == kInf) throw DomainError("log-weight is +inf");
  // Shifted log-weights below kLogWeightFloor are dropped (relative weight
  // under 1e-304). The clamp keeps every vector exp lane on libmvec's fast
  // path, which -inf or underflowing arguments would leave.
  STMAP_SIMD
  for (std::size_t i = 0; i < n; ++i) w[i] = std::max(w[i] - m, kLogWeightFloor);
  STMAP_SIMD
  for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(w[i]);
  const double floor_weight = std::exp(kLogWeightFloor);
  double s = 0.0;
  STMAP_SIMD_REDUCTION(+, s)
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = w[i] > floor_weight ? w[i] : 0.0;
    s += w[i];
  }
  return s;
}

struct RatioEstimate {
  Vector value;
  Vector standard_error;  // delta-method, per component
  double effective_size;  // (sum w)^2 / sum w^2
};

/// sum_i e^{l_i - L} v_i / sum_i e^{l_i - L}, L = max_i l_i.
inline Vector weighted_ratio(std::span<const double> log_weights, const Matrix& values) {
  if (static_cast<Eigen::Index>(log_weights.size()) != values.rows())
    throw DomainError("weighted_ratio: weight and value counts differ");
  Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(log_weights.data(),
                                                        static_cast<Eigen::Index>(log_weights.size()));
  const double s = exponentiate_shifted({w.data(), static_cast<std::size_t>(w.size())});
  return (values.transpose() * w) / s;
}

/// Ratio estimate plus its delta-method standard error
/// SE_j^2 = sum_i w_i^2 (v_ij - R_j)^2 / (sum_i w_i)^2.
inline RatioEstimate weighted_ratio_with_error(std::span<const double> log_weights,
                                               const Matrix& values) {
  if (static_cast<Eigen::Index>(log_weights.size()) != values.rows())
    throw DomainError("weighted_ratio: weight and value counts differ");
  Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(log_weights.data(),
                                                        static_cast<Eigen::Index>(log_weights.size()));
  const double s = exponentiate_shifted({w.data(), static_cast<std::size_t>(w.size())});
  RatioEstimate r;
  r.value = (values.transpose() * w) / s;
  Matrix centred = values.rowwise() - r.value.transpose();
  const Eigen::VectorXd w2 = w.array().square();
  r.standard_error = ((centred.array().square().matrix().transpose() * w2).array().sqrt() / s).matrix();
  r.effective_size = s * s / w2.sum();
  return r;
}

}  // namespace stmap
