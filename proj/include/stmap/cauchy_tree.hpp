#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numeric>
#include <vector>

#include "stmap/error.hpp"
#include "stmap/types.hpp"

namespace stmap {

/// Tree code for the one-dimensional Cauchy-kernel sums
///
///   S_q(x, h) = sum_i q_i * h / ((x - a_i)^2 + h^2),   q in {1, a}
///
/// over a fixed set of atoms a_i. The kernel is h Im[1 / (z - a)] with
/// z = x - i h, so well-separated clusters are summed through a truncated
/// Laurent expansion 1/(z - a) = sum_k (a - c)^k / (z - c)^{k+1} about the
/// cluster centre c. Moments are stored scaled by the cluster radius to stay
/// in range for any spread of atoms. Evaluation cost is O(log N) per point.
class CauchyTree {
 public:
  static constexpr int kOrder = 48;
  static constexpr double kTheta = 0.4;     // admissibility: radius < theta |z - c|
  static constexpr std::size_t kLeaf = 32;

  struct Sums {
    double weight;  // sum_i h / ((x - a_i)^2 + h^2)
    double first;   // sum_i a_i h / ((x - a_i)^2 + h^2)
  };

  explicit CauchyTree(std::span<const double> atoms) : atoms_(atoms.begin(), atoms.end()) {
    if (atoms_.empty()) throw DomainError("Cauchy tree needs at least one atom");
    std::sort(atoms_.begin(), atoms_.end());
    nodes_.reserve(2 * atoms_.size() / kLeaf + 2);
    build(0, atoms_.size());
  }

  std::size_t size() const { return atoms_.size(); }

  /// Both sums at x with kernel half-width h > 0.
  Sums evaluate(double x, double h) const {
    const std::complex<double> z(x, -h);
    std::complex<double> far_w(0.0), far_a(0.0);
    double near_w = 0.0, near_a = 0.0;
    std::array<std::uint32_t, 128> stack;
    std::size_t top = 0;
    stack[top++] = 0;
    const double h2 = h * h;
    while (top > 0) {
      const Node& node = nodes_[stack[--top]];
      const std::complex<double> dz = z - node.centre;
      const double dist = std::abs(dz);
      if (node.radius < kTheta * dist) {
        // sum_k m_k (r / dz)^k / dz with Horner in u = r / dz.
        const std::complex<double> u = node.radius / dz;
        std::complex<double> pw(0.0), pa(0.0);
        const double* mw = moments_.data() + node.moment_offset;
        const double* ma = mw + (kOrder + 1);
        for (int k = kOrder; k >= 0; --k) {
          pw = pw * u + mw[k];
          pa = pa * u + ma[k];
        }
        far_w += pw / dz;
        far_a += pa / dz;
      } else if (node.left < 0) {
        const double* a = atoms_.data() + node.begin;
        const std::size_t n = node.end - node.begin;
        double sw = 0.0, sa = 0.0;
        STMAP_SIMD_REDUCTION(+, sw, sa)
        for (std::size_t i = 0; i < n; ++i) {
          const double d = x - a[i];
          const double k = 1.0 / (d * d + h2);
          sw += k;
          sa += a[i] * k;
        }
        near_w += sw;
        near_a += sa;
      } else {
        stack[top++] = static_cast<std::uint32_t>(node.right);
        stack[top++] = static_cast<std::uint32_t>(node.left);
      }
    }
    return {h * near_w + far_w.imag(), h * near_a + far_a.imag()};
  }

  /// Same sums by direct summation; reference route for the expansion.
  Sums evaluate_direct(double x, double h) const {
    double sw = 0.0, sa = 0.0;
    const double h2 = h * h;
    for (double a : atoms_) {
      const double d = x - a;
      const double k = h / (d * d + h2);
      sw += k;
      sa += a * k;
    }
    return {sw, sa};
  }

 private:
  struct Node {
    std::size_t begin, end;
    double centre, radius;
    std::size_t moment_offset;
    int left = -1, right = -1;
  };

  int build(std::size_t begin, std::size_t end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({});
    const double lo = atoms_[begin], hi = atoms_[end - 1];
    Node node;
    node.begin = begin;
    node.end = end;
    node.centre = 0.5 * (lo + hi);
    node.radius = 0.5 * (hi - lo);
    node.moment_offset = moments_.size();
    // Scaled moments m_k = sum q ((a - c)/r)^k for q = 1 and q = a.
    moments_.resize(moments_.size() + 2 * (kOrder + 1), 0.0);
    double* mw = moments_.data() + node.moment_offset;
    double* ma = mw + (kOrder + 1);
    const double inv_r = node.radius > 0.0 ? 1.0 / node.radius : 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      const double a = atoms_[i];
      const double u = (a - node.centre) * inv_r;
      double p = 1.0;
      for (int k = 0; k <= kOrder; ++k) {
        mw[k] += p;
        ma[k] += a * p;
        p *= u;
        if (p == 0.0) break;
      }
    }
    if (end - begin > kLeaf && hi > lo) {
      const std::size_t mid = begin + (end - begin) / 2;
      node.left = build(begin, mid);
      node.right = build(mid, end);
    }
    nodes_[static_cast<std::size_t>(id)] = node;
    return id;
  }

  std::vector<double> atoms_;
  std::vector<Node> nodes_;
  std::vector<double> moments_;
};

}  // namespace stmap
