#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>

#include <Eigen/Dense>

#if defined(STMAP_USE_LIBMVEC)
// glibc ships SIMD variants of these in libmvec but only declares them under
// -ffast-math. Declaring them here lets `omp simd` loops call the vector
// versions while keeping IEEE semantics (exp(-inf) == 0, no finite-math).
extern "C" {
#pragma omp declare simd notinbranch
double exp(double) noexcept;
#pragma omp declare simd notinbranch
double log(double) noexcept;
#pragma omp declare simd notinbranch
double sin(double) noexcept;
#pragma omp declare simd notinbranch
double cos(double) noexcept;
}
#endif

#define STMAP_PRAGMA(x) _Pragma(#x)
#define STMAP_SIMD STMAP_PRAGMA(omp simd)
#define STMAP_SIMD_REDUCTION(op, ...) STMAP_PRAGMA(omp simd reduction(op : __VA_ARGS__))

namespace stmap {

/// Row-major so that each particle / bank atom is one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

using ConstPoint = std::span<const double>;
using Point = std::span<double>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kLog2Pi = 1.83787706640934548356;

inline ConstPoint row_span(const Matrix& m, Eigen::Index i) {
  return {m.data() + i * m.cols(), static_cast<std::size_t>(m.cols())};
}
inline Point row_span(Matrix& m, Eigen::Index i) {
  return {m.data() + i * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline Eigen::Map<const Vector> as_vector(ConstPoint p) {
  return {p.data(), static_cast<Eigen::Index>(p.size())};
}
inline Eigen::Map<Vector> as_vector(Point p) {
  return {p.data(), static_cast<Eigen::Index>(p.size())};
}

inline double squared_norm(ConstPoint p) {
  double s = 0.0;
  for (double v : p) s += v * v;
  return s;
}

}  // namespace stmap
