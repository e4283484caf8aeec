#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "stmap/cauchy_tree.hpp"
#include "stmap/distributions.hpp"
#include "stmap/error.hpp"
#include "stmap/rng.hpp"
#include "stmap/schedule.hpp"
#include "stmap/types.hpp"
#include "stmap/weighted_ratio.hpp"

namespace stmap {

enum class SchemeKind { Ode, ZeroOrder, FirstOrder, SecondOrder, Piecewise, MixtureClosed, FunnelReduced, Custom };

enum class ResamplePolicy { FixedPerRun, PerStep };

inline const char* scheme_name(SchemeKind k) {
  switch (k) {
    case SchemeKind::Ode: return "ode";
    case SchemeKind::ZeroOrder: return "zero";
    case SchemeKind::FirstOrder: return "first";
    case SchemeKind::SecondOrder: return "second";
    case SchemeKind::Piecewise: return "piecewise";
    case SchemeKind::MixtureClosed: return "mixture-closed";
    case SchemeKind::FunnelReduced: return "funnel-reduced";
    case SchemeKind::Custom: return "custom";
  }
  return "custom";
}

inline SchemeKind scheme_from_name(const std::string& s) {
  for (auto k : {SchemeKind::Ode, SchemeKind::ZeroOrder, SchemeKind::FirstOrder, SchemeKind::SecondOrder,
                 SchemeKind::Piecewise, SchemeKind::MixtureClosed, SchemeKind::FunnelReduced})
    if (s == scheme_name(k)) return k;
  throw ConfigError("unknown scheme '" + s +
                    "' (expected ode, zero, first, second, piecewise, mixture-closed or funnel-reduced)");
}

inline const char* resample_name(ResamplePolicy p) {
  return p == ResamplePolicy::PerStep ? "per-step" : "fixed";
}

/// i.i.d. N(0, I/lambda) probes shared by the first- and second-order drifts.
struct GaussianBank {
  Matrix xi;
  Vector sq_norms;  // |xi_i|^2
  double lambda = 1.0;

  GaussianBank() = default;
  GaussianBank(Matrix rows, double lam) : xi(std::move(rows)), lambda(lam) {
    if (xi.rows() < 1 || xi.cols() < 1) throw DomainError("Gaussian bank must be non-empty");
    if (!(lambda > 0.0)) throw DomainError("Gaussian bank precision lambda must be > 0");
    sq_norms = xi.rowwise().squaredNorm();
  }

  static GaussianBank draw(std::size_t n, std::size_t dim, double lambda, std::uint64_t seed,
                           std::uint64_t substream = 0) {
    if (n < 1) throw DomainError("Gaussian bank size must be >= 1");
    CounterRng rng(seed, {tag(Stream::Probe), substream});
    Matrix xi(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(lambda));
    for (Eigen::Index i = 0; i < xi.size(); ++i) xi.data()[i] = nd(rng);
    return GaussianBank(std::move(xi), lambda);
  }

  std::size_t size() const { return static_cast<std::size_t>(xi.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(xi.cols()); }
};

/// Drift value at a point with its Monte Carlo standard error (zero for
/// closed-form schemes).
struct DriftSample {
  Vector value;
  Vector standard_error;
};

/// The drift frozen at one time t; evaluates whole blocks of particles.
/// Implementations are immutable and may be shared by worker threads.
class PreparedDrift {
 public:
  virtual ~PreparedDrift() = default;
  /// out.row(i) = b_t(x.row(i)).
  virtual void evaluate(const Matrix& x, Matrix& out) const = 0;
  virtual DriftSample evaluate_with_error(ConstPoint x) const {
    Matrix in(1, static_cast<Eigen::Index>(x.size()));
    in.row(0) = as_vector(x).transpose();
    Matrix out;
    evaluate(in, out);
    return {out.row(0).transpose(), Vector::Zero(in.cols())};
  }
};

namespace detail {

inline void require_finite_point(ConstPoint x) {
  for (double v : x)
    if (!std::isfinite(v)) throw DomainError("drift evaluated at a non-finite point");
}

inline void require_open_right(double t, const char* what) {
  if (!(t >= 0.0 && t < 1.0)) {
    std::ostringstream os;
    os << what << " drift requires 0 <= t < 1 (got t=" << t << ")";
    throw DomainError(os.str());
  }
}

/// Rows per block for kernels that materialize a (block x bank) matrix.
inline Eigen::Index block_rows(std::size_t bank) {
  const std::size_t cap = std::size_t{1} << 21;
  return static_cast<Eigen::Index>(std::max<std::size_t>(1, std::min<std::size_t>(64, cap / std::max<std::size_t>(bank, 1))));
}

/// b = (sigma'/sigma)(x - D) with D the weighted bank mean.
class OdeField final : public PreparedDrift {
 public:
  OdeField(const Matrix& bank, const Density& rho0, const CauchyTree* tree, ScheduleValues s)
      : bank_(bank), rho0_(rho0), tree_(tree), s_(s) {
    if (rho0.dim() != static_cast<std::size_t>(bank.cols()))
      throw DomainError("initial density and bank dimensions differ");
    if (s.beta == 0.0) mean_ = bank.colwise().mean().transpose();
  }

  void evaluate(const Matrix& x, Matrix& out) const override {
    out.resize(x.rows(), x.cols());
    const double k = s_.sigma_prime / s_.sigma;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const ConstPoint p = row_span(x, r);
      require_finite_point(p);
      if (s_.beta == 0.0) {
        out.row(r) = k * (x.row(r) - mean_.transpose());
      } else if (tree_ != nullptr) {
        const auto sums = tree_->evaluate(p[0] / s_.beta, s_.sigma / s_.beta);
        if (!(sums.weight > 0.0))
          throw DegenerateWeightsError("ODE drift: all kernel weights vanished");
        out(r, 0) = k * (p[0] - sums.first / sums.weight);
      } else {
        out.row(r) = k * (x.row(r) - weighted_ratio(log_weights(p), bank_).transpose());
      }
    }
  }

  DriftSample evaluate_with_error(ConstPoint x) const override {
    require_finite_point(x);
    const double k = s_.sigma_prime / s_.sigma;
    if (s_.beta == 0.0)
      return {k * (as_vector(x) - mean_), Vector::Zero(static_cast<Eigen::Index>(x.size()))};
    const RatioEstimate e = mean_estimate(x);
    return {k * (as_vector(x) - e.value), std::abs(k) * e.standard_error};
  }

 private:
  // log rho_0((x - beta eta_i) / sigma)
  std::span<const double> log_weights(ConstPoint x) const {
    thread_local Matrix probes;
    thread_local std::vector<double> logw;
    probes = ((-s_.beta * bank_).rowwise() + as_vector(x).transpose()) / s_.sigma;
    logw.resize(static_cast<std::size_t>(bank_.rows()));
    rho0_.log_density_rows(probes, logw);
    return logw;
  }

  RatioEstimate mean_estimate(ConstPoint x) const { return weighted_ratio_with_error(log_weights(x), bank_); }

  const Matrix& bank_;
  const Density& rho0_;
  const CauchyTree* tree_;
  ScheduleValues s_;
  Vector mean_;
};

/// Zero-order: log-weights -|x - beta eta_i|^2 / (2 ell sigma), expanded so the
/// cross term of a particle block is one matrix product. The |x|^2 part is
/// common to all atoms and cancels in the ratio.
class ZeroOrderField final : public PreparedDrift {
 public:
  ZeroOrderField(const Matrix& bank, ScheduleValues s, double ell)
      : bank_(bank), s_(s), scale_(1.0 / (ell * s.sigma)) {
    if (!(ell * s.sigma > 0.0)) throw DomainError("zero-order drift requires ell_t sigma_t > 0");
    offset_ = (-0.5 * s.beta * s.beta * scale_) * bank.rowwise().squaredNorm();
  }

  void evaluate(const Matrix& x, Matrix& out) const override {
    out.resize(x.rows(), x.cols());
    const double k = s_.sigma_prime / s_.sigma;
    const Eigen::Index n = bank_.rows();
    const Eigen::Index block = block_rows(static_cast<std::size_t>(n));
    thread_local Matrix logits;
    for (Eigen::Index r0 = 0; r0 < x.rows(); r0 += block) {
      const Eigen::Index b = std::min(block, x.rows() - r0);
      for (Eigen::Index r = r0; r < r0 + b; ++r) require_finite_point(row_span(x, r));
      logits.noalias() = (s_.beta * scale_) * x.middleRows(r0, b) * bank_.transpose();
      logits.rowwise() += offset_.transpose();
      Vector sums(b);
      for (Eigen::Index r = 0; r < b; ++r)
        sums[r] = exponentiate_shifted({logits.data() + r * n, static_cast<std::size_t>(n)});
      Matrix mean = logits * bank_;
      for (Eigen::Index r = 0; r < b; ++r)
        out.row(r0 + r) = k * (x.row(r0 + r) - mean.row(r) / sums[r]);
    }
  }

  DriftSample evaluate_with_error(ConstPoint x) const override {
    require_finite_point(x);
    std::vector<double> logw(static_cast<std::size_t>(bank_.rows()));
    const Vector xv = as_vector(x);
    Eigen::Map<Vector>(logw.data(), bank_.rows()) = (s_.beta * scale_) * (bank_ * xv) + offset_;
    const RatioEstimate e = weighted_ratio_with_error(logw, bank_);
    const double k = s_.sigma_prime / s_.sigma;
    return {k * (xv - e.value), std::abs(k) * e.standard_error};
  }

 private:
  const Matrix& bank_;
  ScheduleValues s_;
  double scale_;
  Vector offset_;
};

/// Shared weight computation of the first- and second-order drifts:
///   log w_i = beta |y_i|^2/(2 ell) + (lambda - beta)|xi_i|^2/2 + log rho_1(y_i),
///   y_i = x - sqrt(ell sigma) xi_i.
class ProbeWeights {
 public:
  ProbeWeights(const GaussianBank& bank, const Density& target, ScheduleValues s, double ell)
      : bank_(bank), target_(target), s_(s), ell_(ell), step_(std::sqrt(ell * s.sigma)) {
    if (target.dim() != bank.dim()) throw DomainError("target and Gaussian bank dimensions differ");
    funnel_ = dynamic_cast<const Funnel*>(&target);
    if (funnel_ != nullptr) {
      tail_sq_ = bank.xi.rightCols(bank.xi.cols() - 1).rowwise().squaredNorm();
    }
  }

  double step() const { return step_; }

  /// Fills log-weights for one particle; probes are left in `probes`.
  void log_weights(ConstPoint x, std::vector<double>& logw, Matrix& probes, bool need_probes) const {
    const Eigen::Index n = bank_.xi.rows();
    logw.resize(static_cast<std::size_t>(n));
    const double a1 = s_.beta / (2.0 * ell_);
    const double a2 = 0.5 * (bank_.lambda - s_.beta);
    if (funnel_ != nullptr && !need_probes) {
      funnel_weights(x, logw);
      return;
    }
    probes = (-step_ * bank_.xi).rowwise() + as_vector(x).transpose();
    target_.log_density_rows(probes, logw);
    const double* sq = bank_.sq_norms.data();
    double* lw = logw.data();
    const Eigen::Index d = probes.cols();
    if (d == 1) {
      const double* y = probes.data();
      STMAP_SIMD
      for (Eigen::Index i = 0; i < n; ++i) lw[i] += a1 * y[i] * y[i] + a2 * sq[i];
    } else {
      const Vector ysq = probes.rowwise().squaredNorm();
      for (Eigen::Index i = 0; i < n; ++i) lw[i] += a1 * ysq[i] + a2 * sq[i];
    }
  }

 private:
  /// Funnel probes never materialized: y_1 and |y_1^*|^2 follow from x . xi.
  void funnel_weights(ConstPoint x, std::vector<double>& logw) const {
    const Eigen::Index n = bank_.xi.rows(), d = bank_.xi.cols();
    thread_local Vector cross;
    const Vector xs = as_vector(x).tail(d - 1);
    cross.noalias() = bank_.xi.rightCols(d - 1) * xs;
    const double x1 = x[0], xs2 = xs.squaredNorm();
    const double a1 = s_.beta / (2.0 * ell_);
    const double a2 = 0.5 * (bank_.lambda - s_.beta);
    const double alpha = funnel_->alpha(), m = static_cast<double>(d - 1);
    const double h = step_;
    const double* xi = bank_.xi.data();
    const double* sq = bank_.sq_norms.data();
    const double* ts = tail_sq_.data();
    const double* cr = cross.data();
    double* lw = logw.data();
    STMAP_SIMD
    for (Eigen::Index i = 0; i < n; ++i) {
      const double y1 = x1 - h * xi[i * d];
      const double tail = xs2 - 2.0 * h * cr[i] + h * h * ts[i];
      lw[i] = a1 * (y1 * y1 + tail) + a2 * sq[i] - 0.5 * y1 * y1 - m * alpha * y1 -
              0.5 * tail * std::exp(-2.0 * alpha * y1);
    }
  }

  const GaussianBank& bank_;
  const Density& target_;
  ScheduleValues s_;
  double ell_;
  double step_;
  const Funnel* funnel_ = nullptr;
  Vector tail_sq_;
};

/// First-order: b = sqrt(ell / sigma) sigma' sum w xi / sum w.
class FirstOrderField final : public PreparedDrift {
 public:
  FirstOrderField(const GaussianBank& bank, const Density& target, ScheduleValues s, double ell)
      : bank_(bank), target_(target), weights_(bank, target, s, ell), s_(s), ell_(ell) {
    coeff_ = ell > 0.0 ? std::sqrt(ell / s.sigma) * s.sigma_prime : 0.0;
  }

  void evaluate(const Matrix& x, Matrix& out) const override {
    out.resize(x.rows(), x.cols());
    thread_local std::vector<double> logw;
    thread_local Matrix probes;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const ConstPoint p = row_span(x, r);
      require_finite_point(p);
      if (ell_ == 0.0) {
        check_support(p);
        out.row(r).setZero();
        continue;
      }
      weights_.log_weights(p, logw, probes, false);
      const double sum = exponentiate_shifted(logw);
      const Eigen::Map<const Vector> w(logw.data(), static_cast<Eigen::Index>(logw.size()));
      out.row(r) = (coeff_ / sum) * (w.transpose() * bank_.xi);
    }
  }

  DriftSample evaluate_with_error(ConstPoint x) const override {
    require_finite_point(x);
    const auto d = static_cast<Eigen::Index>(x.size());
    if (ell_ == 0.0) {
      check_support(x);
      return {Vector::Zero(d), Vector::Zero(d)};
    }
    std::vector<double> logw;
    Matrix probes;
    weights_.log_weights(x, logw, probes, false);
    const RatioEstimate e = weighted_ratio_with_error(logw, bank_.xi);
    return {coeff_ * e.value, std::abs(coeff_) * e.standard_error};
  }

 private:
  // With ell = 0 every probe sits at x itself.
  void check_support(ConstPoint x) const {
    if (target_.log_density(x) == -kInf)
      throw DegenerateWeightsError("first-order drift: every probe lies outside the target support");
  }

  const GaussianBank& bank_;
  const Density& target_;
  ProbeWeights weights_;
  ScheduleValues s_;
  double ell_;
  double coeff_;
};

/// Second-order: b = (beta'/beta)(x + (ell/beta) R), R the weighted mean of
/// grad log rho_1 over the probes.
class SecondOrderField final : public PreparedDrift {
 public:
  SecondOrderField(const GaussianBank& bank, const Density& target, ScheduleValues s, double ell)
      : bank_(bank), target_(target), weights_(bank, target, s, ell), s_(s), ell_(ell) {
    if (!target.has_gradient())
      throw CapabilityError("second-order drift needs the gradient of the target log density");
    if (!(s.beta > 0.0)) throw DomainError("second-order drift requires beta_t > 0 (t > 0)");
  }

  void evaluate(const Matrix& x, Matrix& out) const override {
    out.resize(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const DriftSample d = compute(row_span(x, r), false);
      out.row(r) = d.value.transpose();
    }
  }

  DriftSample evaluate_with_error(ConstPoint x) const override { return compute(x, true); }

 private:
  DriftSample compute(ConstPoint x, bool with_error) const {
    require_finite_point(x);
    thread_local std::vector<double> logw;
    thread_local Matrix probes, grads;
    const auto d = static_cast<Eigen::Index>(x.size());
    weights_.log_weights(x, logw, probes, true);
    const double sum = exponentiate_shifted(logw);
    Vector r = Vector::Zero(d);
    grads.resize(probes.rows(), d);
    // Gradients only where the weight is positive: zero-density probes may
    // have undefined scores.
    thread_local std::vector<Eigen::Index> live;
    live.clear();
    for (Eigen::Index i = 0; i < probes.rows(); ++i)
      if (logw[static_cast<std::size_t>(i)] > 0.0) live.push_back(i);
    for (Eigen::Index i : live) {
      target_.grad_log_density(row_span(probes, i), row_span(grads, i));
      r += logw[static_cast<std::size_t>(i)] * grads.row(i).transpose();
    }
    r /= sum;
    Vector se = Vector::Zero(d);
    if (with_error) {
      for (Eigen::Index i : live) {
        const double w = logw[static_cast<std::size_t>(i)];
        se += (w * w) * (grads.row(i).transpose() - r).array().square().matrix();
      }
      se = se.cwiseSqrt() / sum;
    }
    const double k = s_.beta_prime / s_.beta;
    const double c = k * ell_ / s_.beta;
    return {k * as_vector(x) + c * r, std::abs(c) * se};
  }

  const GaussianBank& bank_;
  const Density& target_;
  ProbeWeights weights_;
  ScheduleValues s_;
  double ell_;
};

/// Closed-form mixture drift. For component i with Sigma_i = U diag(l) U^T,
/// A_i = U diag(ell sigma + beta^2 l) U^T, so all solves are diagonal in the
/// component's eigenbasis.
class MixtureField final : public PreparedDrift {
 public:
  MixtureField(const GaussianMixture& mix, ScheduleValues s, double ell) : mix_(mix), s_(s), ell_(ell) {
    const double base = ell * s.sigma;
    if (!(base > 0.0)) throw DomainError("mixture drift requires ell_t sigma_t > 0");
    for (const auto& c : mix.components()) {
      Comp k;
      k.a = (base + s.beta * s.beta * c.cov.eigenvalues().array()).matrix();
      k.inv_a = k.a.cwiseInverse();
      k.num = (ell - s.beta * c.cov.eigenvalues().array()).matrix().cwiseProduct(k.inv_a);
      k.mean_eig = c.cov.is_diagonal() ? c.mean : Vector(c.cov.eigenvectors().transpose() * c.mean);
      k.log_weight = std::log(c.weight) - 0.5 * k.a.array().log().sum();
      comps_.push_back(std::move(k));
    }
  }

  void evaluate(const Matrix& x, Matrix& out) const override {
    const Eigen::Index n = x.rows(), d = x.cols();
    const std::size_t nc = comps_.size();
    out.setZero(n, d);
    for (Eigen::Index r = 0; r < n; ++r) require_finite_point(row_span(x, r));
    Matrix logw(n, static_cast<Eigen::Index>(nc));
    std::vector<Matrix> values(nc);
    for (std::size_t i = 0; i < nc; ++i) {
      const auto& c = mix_.components()[i];
      const Comp& k = comps_[i];
      Matrix z = c.cov.is_diagonal() ? x : Matrix(x * c.cov.eigenvectors());
      Matrix diff = z.rowwise() - (s_.beta * k.mean_eig).transpose();
      logw.col(static_cast<Eigen::Index>(i)) =
          (k.log_weight - 0.5 * (diff.array().square().rowwise() * k.inv_a.transpose().array()).rowwise().sum())
              .matrix();
      // v = A^{-1}[(ell I - beta Sigma) x - ell m], in the eigenbasis.
      Matrix v = (z.array().rowwise() * k.num.transpose().array()).matrix();
      v.rowwise() -= (ell_ * k.mean_eig.cwiseProduct(k.inv_a)).transpose();
      values[i] = c.cov.is_diagonal() ? v : Matrix(v * c.cov.eigenvectors().transpose());
    }
    for (Eigen::Index r = 0; r < n; ++r) {
      double* lw = logw.data() + r * static_cast<Eigen::Index>(nc);
      const double sum = exponentiate_shifted({lw, nc});
      for (std::size_t i = 0; i < nc; ++i) out.row(r) += lw[i] * values[i].row(r);
      out.row(r) *= s_.sigma_prime / sum;
    }
  }

 private:
  struct Comp {
    Vector a, inv_a, num, mean_eig;
    double log_weight;
  };
  const GaussianMixture& mix_;
  ScheduleValues s_;
  double ell_;
  std::vector<Comp> comps_;
};

/// Funnel drift with the Gaussian tail block integrated out, leaving a
/// one-dimensional bank xi_i ~ N(0, 1). With e_i = exp(2 alpha xi_i) and
/// v_i = ell sigma + beta^2 e_i:
///   log w_i = -(x_1 - beta xi_i)^2/(2 ell sigma) - (d-1)/2 log v_i - |x^*|^2/(2 v_i)
///   b_1 = (sigma'/sigma)(x_1 - <xi>),  b^* = sigma' <(ell - beta e)/v> x^*.
class FunnelReducedField final : public PreparedDrift {
 public:
  FunnelReducedField(const Funnel& funnel, const Vector& xi, ScheduleValues s, double ell)
      : s_(s), dim_(funnel.dim()) {
    const double base = ell * s.sigma;
    if (!(base > 0.0)) throw DomainError("reduced funnel drift requires ell_t sigma_t > 0");
    const Eigen::Index n = xi.size();
    if (n < 1) throw DomainError("reduced funnel drift needs a non-empty xi bank");
    xi_ = xi;
    a_.resize(n);
    b_.resize(n);
    h_.resize(n);
    c_.resize(n);
    const double m = static_cast<double>(dim_ - 1), alpha = funnel.alpha();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double e = std::exp(2.0 * alpha * xi[i]);
      const double v = base + s.beta * s.beta * e;
      a_[i] = -s.beta * s.beta * xi[i] * xi[i] / (2.0 * base) - 0.5 * m * std::log(v);
      b_[i] = s.beta * xi[i] / base;
      h_[i] = 0.5 / v;
      c_[i] = (ell - s.beta * e) / v;
    }
  }

  void evaluate(const Matrix& x, Matrix& out) const override {
    out.resize(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const DriftSample d = compute(row_span(x, r), false);
      out.row(r) = d.value.transpose();
    }
  }

  DriftSample evaluate_with_error(ConstPoint x) const override { return compute(x, true); }

 private:
  DriftSample compute(ConstPoint x, bool with_error) const {
    require_finite_point(x);
    if (x.size() != dim_) throw DomainError("reduced funnel drift: point dimension mismatch");
    const Eigen::Index n = xi_.size();
    thread_local std::vector<double> lw;
    lw.resize(static_cast<std::size_t>(n));
    const double x1 = x[0];
    const double xs2 = squared_norm(x.subspan(1));
    const double* a = a_.data();
    const double* b = b_.data();
    const double* h = h_.data();
    double* w = lw.data();
    STMAP_SIMD
    for (Eigen::Index i = 0; i < n; ++i) w[i] = a[i] + x1 * b[i] - xs2 * h[i];
    const double sum = exponentiate_shifted(lw);
    double sxi = 0.0, sc = 0.0;
    const double* xi = xi_.data();
    const double* c = c_.data();
    STMAP_SIMD_REDUCTION(+, sxi, sc)
    for (Eigen::Index i = 0; i < n; ++i) {
      sxi += w[i] * xi[i];
      sc += w[i] * c[i];
    }
    const double mean_xi = sxi / sum, mean_c = sc / sum;
    const auto d = static_cast<Eigen::Index>(dim_);
    Vector out(d), se = Vector::Zero(d);
    out[0] = s_.sigma_prime / s_.sigma * (x1 - mean_xi);
    for (Eigen::Index j = 1; j < d; ++j) out[j] = s_.sigma_prime * mean_c * x[static_cast<std::size_t>(j)];
    if (with_error) {
      double v1 = 0.0, vc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        v1 += w[i] * w[i] * (xi[i] - mean_xi) * (xi[i] - mean_xi);
        vc += w[i] * w[i] * (c[i] - mean_c) * (c[i] - mean_c);
      }
      se[0] = std::abs(s_.sigma_prime / s_.sigma) * std::sqrt(v1) / sum;
      for (Eigen::Index j = 1; j < d; ++j)
        se[j] = std::abs(s_.sigma_prime * x[static_cast<std::size_t>(j)]) * std::sqrt(vc) / sum;
    }
    return {out, se};
  }

  ScheduleValues s_;
  std::size_t dim_;
  Vector xi_, a_, b_, h_, c_;
};

class CustomField final : public PreparedDrift {
 public:
  using Fn = std::function<void(double, ConstPoint, Point)>;
  CustomField(const Fn& fn, double t) : fn_(fn), t_(t) {}
  void evaluate(const Matrix& x, Matrix& out) const override {
    out.resize(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) fn_(t_, row_span(x, r), row_span(out, r));
  }

 private:
  const Fn& fn_;
  double t_;
};

}  // namespace detail

/// A drift formula bound to its target data, schedule and noise.
///
/// Banks are immutable shared snapshots; resample() returns a new scheme with
/// fresh banks rather than mutating this one.
class DriftScheme {
 public:
  using CustomFn = detail::CustomField::Fn;

  SchemeKind kind() const { return kind_; }
  const Schedule& schedule() const { return schedule_; }
  const NoiseConfig& noise() const { return noise_; }
  std::size_t dim() const { return dim_; }
  ResamplePolicy resample_policy() const { return policy_; }
  bool accelerated() const { return tree_ != nullptr; }

  const SampleBank* bank() const { return bank_.get(); }
  const GaussianBank* gaussian_bank() const { return gbank_.get(); }
  const Density* target() const { return target_.get(); }
  const Density* initial_density() const { return rho0_.get(); }
  const GaussianMixture* mixture() const { return mixture_.get(); }
  const Funnel* funnel() const { return funnel_.get(); }
  const Vector* xi_bank() const { return xi_.get(); }

  /// Deterministic ODE drift from a target bank and an initial density rho_0.
  /// In one dimension with a Cauchy rho_0, `accelerate` sums the kernel with a
  /// tree code instead of directly.
  static DriftScheme ode(SampleBank bank, DensityPtr rho0, Schedule schedule, bool accelerate = true,
                         DensityPtr bank_source = nullptr) {
    if (!rho0) throw CapabilityError("ODE drift needs an initial density");
    if (rho0->dim() != bank.dim()) throw ConfigError("initial density and bank dimensions differ");
    DriftScheme s(SchemeKind::Ode, std::move(schedule), NoiseConfig{}, bank.dim());
    s.rho0_ = std::move(rho0);
    s.bank_source_ = std::move(bank_source);
    s.set_bank(std::move(bank), accelerate);
    return s;
  }

  static DriftScheme zero_order(SampleBank bank, Schedule schedule, NoiseConfig noise,
                                DensityPtr bank_source = nullptr,
                                ResamplePolicy policy = ResamplePolicy::FixedPerRun) {
    noise.validate();
    DriftScheme s(SchemeKind::ZeroOrder, std::move(schedule), noise, bank.dim());
    s.bank_ = std::make_shared<const SampleBank>(std::move(bank));
    s.bank_source_ = std::move(bank_source);
    s.policy_ = policy;
    return s;
  }

  static DriftScheme first_order(GaussianBank gbank, DensityPtr target, Schedule schedule, NoiseConfig noise,
                                 ResamplePolicy policy = ResamplePolicy::FixedPerRun) {
    return probe_scheme(SchemeKind::FirstOrder, std::move(gbank), std::move(target), std::move(schedule),
                        noise, policy);
  }

  static DriftScheme second_order(GaussianBank gbank, DensityPtr target, Schedule schedule, NoiseConfig noise,
                                  ResamplePolicy policy = ResamplePolicy::FixedPerRun) {
    if (target && !target->has_gradient())
      throw CapabilityError("second-order scheme needs the gradient of the target log density");
    return probe_scheme(SchemeKind::SecondOrder, std::move(gbank), std::move(target), std::move(schedule),
                        noise, policy);
  }

  static DriftScheme piecewise(GaussianBank gbank, DensityPtr target, Schedule schedule, NoiseConfig noise,
                               ResamplePolicy policy = ResamplePolicy::FixedPerRun) {
    if (target && !target->has_gradient())
      throw CapabilityError("piecewise scheme needs the gradient of the target log density");
    return probe_scheme(SchemeKind::Piecewise, std::move(gbank), std::move(target), std::move(schedule), noise,
                        policy);
  }

  static DriftScheme mixture_closed(std::shared_ptr<const GaussianMixture> mixture, Schedule schedule,
                                    NoiseConfig noise) {
    noise.validate();
    if (!mixture) throw ConfigError("mixture-closed scheme needs a Gaussian mixture");
    DriftScheme s(SchemeKind::MixtureClosed, std::move(schedule), noise, mixture->dim());
    s.mixture_ = std::move(mixture);
    return s;
  }

  static DriftScheme funnel_reduced(std::shared_ptr<const Funnel> funnel, Vector xi, Schedule schedule,
                                    NoiseConfig noise, ResamplePolicy policy = ResamplePolicy::FixedPerRun) {
    noise.validate();
    if (!funnel) throw ConfigError("funnel-reduced scheme needs a funnel target");
    if (xi.size() < 1) throw DomainError("funnel xi bank must be non-empty");
    DriftScheme s(SchemeKind::FunnelReduced, std::move(schedule), noise, funnel->dim());
    s.funnel_ = std::move(funnel);
    s.xi_ = std::make_shared<const Vector>(std::move(xi));
    s.policy_ = policy;
    return s;
  }

  /// Arbitrary drift b(t, x); used to exercise the integrators.
  static DriftScheme custom(std::size_t dim, CustomFn fn, Schedule schedule = Schedule::cosine_squared(),
                            NoiseConfig noise = {}) {
    DriftScheme s(SchemeKind::Custom, std::move(schedule), noise, dim);
    s.custom_ = std::make_shared<const CustomFn>(std::move(fn));
    return s;
  }

  /// True for the schemes propagated by Euler-Maruyama.
  bool stochastic() const { return kind_ != SchemeKind::Ode; }

  /// Largest time at which the drift is defined; the integrators never reach it.
  bool defined_at(double t) const {
    switch (kind_) {
      case SchemeKind::SecondOrder: return t > 0.0 && t <= 1.0;
      case SchemeKind::Piecewise: return t >= 0.0 && t <= 1.0;
      case SchemeKind::Custom: return t >= 0.0 && t <= 1.0;
      case SchemeKind::ZeroOrder: return t >= 0.0 && t < 1.0 && ell(schedule_, noise_, t) > 0.0;
      default: return t >= 0.0 && t < 1.0;
    }
  }

  /// The drift frozen at time t. For the zero-order scheme t = 0 is accepted
  /// whenever gamma > 0: beta_0 = 0 makes all weights equal, giving the
  /// continuous extension sigma'_0 (x - mean(bank)).
  std::unique_ptr<PreparedDrift> prepare(double t) const {
    const ScheduleValues s = schedule_.evaluate(t);
    const double l = ell(s, noise_);
    switch (kind_) {
      case SchemeKind::Ode:
        detail::require_open_right(t, "ODE");
        return std::make_unique<detail::OdeField>(bank_->samples, *rho0_, tree_.get(), s);
      case SchemeKind::ZeroOrder:
        detail::require_open_right(t, "zero-order");
        return std::make_unique<detail::ZeroOrderField>(bank_->samples, s, l);
      case SchemeKind::FirstOrder:
        detail::require_open_right(t, "first-order");
        return std::make_unique<detail::FirstOrderField>(*gbank_, *target_, s, l);
      case SchemeKind::SecondOrder:
        return std::make_unique<detail::SecondOrderField>(*gbank_, *target_, s, l);
      case SchemeKind::Piecewise:
        if (t < 0.5) return std::make_unique<detail::FirstOrderField>(*gbank_, *target_, s, l);
        return std::make_unique<detail::SecondOrderField>(*gbank_, *target_, s, l);
      case SchemeKind::MixtureClosed:
        detail::require_open_right(t, "mixture");
        return std::make_unique<detail::MixtureField>(*mixture_, s, l);
      case SchemeKind::FunnelReduced:
        detail::require_open_right(t, "reduced funnel");
        return std::make_unique<detail::FunnelReducedField>(*funnel_, *xi_, s, l);
      case SchemeKind::Custom:
        return std::make_unique<detail::CustomField>(*custom_, t);
    }
    throw DomainError("unknown scheme");
  }

  /// A copy with every Monte Carlo bank redrawn from (seed, Bank/Probe, substream).
  DriftScheme resample(std::uint64_t seed, std::uint64_t substream) const {
    DriftScheme s = *this;
    if (bank_) {
      if (!bank_source_) throw CapabilityError("bank resampling needs a target sampler");
      SampleBank fresh = draw_bank(*bank_source_, bank_->size(), seed, substream);
      s.set_bank(std::move(fresh), tree_ != nullptr);
    }
    if (gbank_)
      s.gbank_ = std::make_shared<const GaussianBank>(
          GaussianBank::draw(gbank_->size(), gbank_->dim(), gbank_->lambda, seed, substream));
    if (xi_) {
      CounterRng rng(seed, {tag(Stream::Probe), substream});
      Vector xi(xi_->size());
      fill_standard_normal(rng, xi);
      s.xi_ = std::make_shared<const Vector>(std::move(xi));
    }
    return s;
  }

 private:
  DriftScheme(SchemeKind k, Schedule schedule, NoiseConfig noise, std::size_t dim)
      : kind_(k), schedule_(std::move(schedule)), noise_(noise), dim_(dim) {}

  static DriftScheme probe_scheme(SchemeKind k, GaussianBank gbank, DensityPtr target, Schedule schedule,
                                  NoiseConfig noise, ResamplePolicy policy) {
    noise.validate();
    if (!target) throw ConfigError(std::string(scheme_name(k)) + " scheme needs a target density");
    if (target->dim() != gbank.dim()) throw ConfigError("target and Gaussian bank dimensions differ");
    if (gbank.lambda != noise.lambda)
      throw ConfigError("Gaussian bank precision differs from noise.lambda");
    DriftScheme s(k, std::move(schedule), noise, target->dim());
    s.gbank_ = std::make_shared<const GaussianBank>(std::move(gbank));
    s.target_ = std::move(target);
    s.policy_ = policy;
    return s;
  }

  void set_bank(SampleBank bank, bool accelerate) {
    bank_ = std::make_shared<const SampleBank>(std::move(bank));
    tree_.reset();
    if (accelerate && kind_ == SchemeKind::Ode && dim_ == 1 && dynamic_cast<const Cauchy1d*>(rho0_.get()))
      tree_ = std::make_shared<const CauchyTree>(
          std::span<const double>(bank_->samples.data(), bank_->size()));
  }

  SchemeKind kind_;
  Schedule schedule_;
  NoiseConfig noise_;
  std::size_t dim_;
  ResamplePolicy policy_ = ResamplePolicy::FixedPerRun;
  std::shared_ptr<const SampleBank> bank_;
  DensityPtr bank_source_;
  DensityPtr rho0_;
  std::shared_ptr<const CauchyTree> tree_;
  std::shared_ptr<const GaussianBank> gbank_;
  DensityPtr target_;
  std::shared_ptr<const GaussianMixture> mixture_;
  std::shared_ptr<const Funnel> funnel_;
  std::shared_ptr<const Vector> xi_;
  std::shared_ptr<const CustomFn> custom_;
};

// ---------------------------------------------------------------------------
// Point evaluations

inline DriftSample drift_ode_with_error(double t, ConstPoint x, const SampleBank& bank, const Density& rho0,
                                        const Schedule& schedule) {
  detail::require_open_right(t, "ODE");
  return detail::OdeField(bank.samples, rho0, nullptr, schedule.evaluate(t)).evaluate_with_error(x);
}

inline Vector drift_ode(double t, ConstPoint x, const SampleBank& bank, const Density& rho0,
                        const Schedule& schedule) {
  return drift_ode_with_error(t, x, bank, rho0, schedule).value;
}

inline DriftSample drift_zero_order_with_error(double t, ConstPoint x, const SampleBank& bank,
                                               const Schedule& schedule, const NoiseConfig& noise) {
  if (!(t > 0.0 && t < 1.0)) {
    std::ostringstream os;
    os << "zero-order drift requires 0 < t < 1 (got t=" << t << ")";
    throw DomainError(os.str());
  }
  const ScheduleValues s = schedule.evaluate(t);
  return detail::ZeroOrderField(bank.samples, s, ell(s, noise)).evaluate_with_error(x);
}

inline Vector drift_zero_order(double t, ConstPoint x, const SampleBank& bank, const Schedule& schedule,
                               const NoiseConfig& noise) {
  return drift_zero_order_with_error(t, x, bank, schedule, noise).value;
}

inline DriftSample drift_first_order_with_error(double t, ConstPoint x, const GaussianBank& gbank,
                                                const Density& target, const Schedule& schedule,
                                                const NoiseConfig& noise) {
  detail::require_open_right(t, "first-order");
  const ScheduleValues s = schedule.evaluate(t);
  return detail::FirstOrderField(gbank, target, s, ell(s, noise)).evaluate_with_error(x);
}

inline Vector drift_first_order(double t, ConstPoint x, const GaussianBank& gbank, const Density& target,
                                const Schedule& schedule, const NoiseConfig& noise) {
  return drift_first_order_with_error(t, x, gbank, target, schedule, noise).value;
}

inline DriftSample drift_second_order_with_error(double t, ConstPoint x, const GaussianBank& gbank,
                                                 const Density& target, const Schedule& schedule,
                                                 const NoiseConfig& noise) {
  if (t == 0.0) throw DomainError("second-order drift is undefined at t=0 (beta_0 = 0)");
  const ScheduleValues s = schedule.evaluate(t);
  return detail::SecondOrderField(gbank, target, s, ell(s, noise)).evaluate_with_error(x);
}

inline Vector drift_second_order(double t, ConstPoint x, const GaussianBank& gbank, const Density& target,
                                 const Schedule& schedule, const NoiseConfig& noise) {
  return drift_second_order_with_error(t, x, gbank, target, schedule, noise).value;
}

/// First-order on [0, 1/2), second-order on [1/2, 1].
inline Vector drift_piecewise(double t, ConstPoint x, const GaussianBank& gbank, const Density& target,
                              const Schedule& schedule, const NoiseConfig& noise) {
  if (t < 0.5) return drift_first_order(t, x, gbank, target, schedule, noise);
  return drift_second_order(t, x, gbank, target, schedule, noise);
}

inline Vector drift_mixture_closed(double t, ConstPoint x, const GaussianMixture& mixture,
                                   const Schedule& schedule, const NoiseConfig& noise) {
  detail::require_open_right(t, "mixture");
  const ScheduleValues s = schedule.evaluate(t);
  return detail::MixtureField(mixture, s, ell(s, noise)).evaluate_with_error(x).value;
}

inline DriftSample drift_funnel_reduced_with_error(double t, ConstPoint x, const Funnel& funnel,
                                                   const Vector& xi_bank, const Schedule& schedule,
                                                   const NoiseConfig& noise) {
  detail::require_open_right(t, "reduced funnel");
  const ScheduleValues s = schedule.evaluate(t);
  return detail::FunnelReducedField(funnel, xi_bank, s, ell(s, noise)).evaluate_with_error(x);
}

inline Vector drift_funnel_reduced(double t, ConstPoint x, const Funnel& funnel, const Vector& xi_bank,
                                   const Schedule& schedule, const NoiseConfig& noise) {
  return drift_funnel_reduced_with_error(t, x, funnel, xi_bank, schedule, noise).value;
}

/// |b_t(x) - (beta'/beta)[ell grad log phi_t(x) + x]| / (1 + |x|) for a single
/// Gaussian target, where phi_t = N(beta m, ell sigma I + beta^2 Sigma).
inline double score_relation_check(double t, ConstPoint x, const GaussianMixture& single,
                                   const Schedule& schedule, const NoiseConfig& noise) {
  if (single.components().size() != 1)
    throw DomainError("score_relation_check needs a single-component mixture");
  if (!(t > 0.0 && t < 1.0)) throw DomainError("score_relation_check requires 0 < t < 1");
  const ScheduleValues s = schedule.evaluate(t);
  const double l = ell(s, noise);
  const auto& c = single.components().front();
  const Vector b = drift_mixture_closed(t, x, single, schedule, noise);
  const Vector xv = as_vector(x);
  // grad log phi_t(x) = -A^{-1}(x - beta m), solved in Sigma's eigenbasis.
  Vector z = c.cov.to_eigenbasis(x) - s.beta * c.cov.to_eigenbasis({c.mean.data(), static_cast<std::size_t>(c.mean.size())});
  const Vector a = (l * s.sigma + s.beta * s.beta * c.cov.eigenvalues().array()).matrix();
  const Vector score = -c.cov.from_eigenbasis(z.cwiseQuotient(a));
  const Vector rhs = (s.beta_prime / s.beta) * (l * score + xv);
  return (b - rhs).norm() / (1.0 + xv.norm());
}

}  // namespace stmap
