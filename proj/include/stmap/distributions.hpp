#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Eigenvalues>

#include "stmap/error.hpp"
#include "stmap/rng.hpp"
#include "stmap/types.hpp"

namespace stmap {

/// A probability density on R^d, possibly unnormalized.
///
/// Every drift formula is a ratio of expectations against the density, so
/// normalizing constants cancel; implementations may drop them. Points
/// outside the support have log density -inf.
class Density {
 public:
  virtual ~Density() = default;

  virtual std::size_t dim() const = 0;
  virtual std::string kind() const = 0;
  virtual double log_density(ConstPoint x) const = 0;

  virtual bool has_gradient() const { return false; }
  virtual void grad_log_density(ConstPoint, Point) const {
    throw CapabilityError(kind() + ": no gradient of the log density available");
  }

  virtual bool has_sampler() const { return false; }
  /// Fills every row of `out` (pre-sized n x dim) with an independent draw.
  virtual void sample_into(CounterRng&, Matrix&) const {
    throw CapabilityError(kind() + ": no sampler available");
  }

  /// log density of every row of `points`. Overridden by targets whose
  /// evaluation vectorizes across rows.
  virtual void log_density_rows(const Matrix& points, std::span<double> out) const {
    for (Eigen::Index i = 0; i < points.rows(); ++i) out[i] = log_density(row_span(points, i));
  }

  /// Gradient of the log density at every row of `points` into `out`.
  virtual void grad_log_density_rows(const Matrix& points, Matrix& out) const {
    out.resize(points.rows(), points.cols());
    for (Eigen::Index i = 0; i < points.rows(); ++i)
      grad_log_density(row_span(points, i), row_span(out, i));
  }
};

using DensityPtr = std::shared_ptr<const Density>;

// ---------------------------------------------------------------------------
// Covariances and Gaussian mixtures

/// Symmetric PSD covariance. Diagonal covariances are kept as a vector; full
/// ones (SPD or rank-deficient) as an eigendecomposition U diag(lambda) U^T,
/// so that sigma I + beta^2 Sigma can be inverted for any time without
/// refactorizing Sigma itself.
class Covariance {
 public:
  static Covariance diagonal(Vector alpha) {
    for (Eigen::Index j = 0; j < alpha.size(); ++j)
      if (!(alpha[j] >= 0.0) || !std::isfinite(alpha[j]))
        throw DomainError("diagonal covariance entries must be finite and >= 0");
    Covariance c;
    c.diagonal_ = true;
    c.eigvals_ = std::move(alpha);
    return c;
  }

  static Covariance full(const Matrix& sigma) {
    const Eigen::Index d = sigma.rows();
    if (sigma.cols() != d) throw DomainError("covariance must be square");
    if (!sigma.allFinite()) throw DomainError("covariance has non-finite entries");
    const double asym = (sigma - sigma.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-10) {
      std::ostringstream os;
      os << "covariance not symmetric (max |S - S^T| = " << asym << ")";
      throw DomainError(os.str());
    }
    Eigen::MatrixXd sym = 0.5 * (sigma + sigma.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    if (es.info() != Eigen::Success) throw DomainError("covariance eigendecomposition failed");
    if (es.eigenvalues().minCoeff() < -1e-10) {
      std::ostringstream os;
      os << "covariance not positive semidefinite (min eigenvalue "
         << es.eigenvalues().minCoeff() << ")";
      throw DomainError(os.str());
    }
    Covariance c;
    c.diagonal_ = false;
    c.eigvals_ = es.eigenvalues().cwiseMax(0.0);
    c.eigvecs_ = es.eigenvectors();
    return c;
  }

  /// Sigma = B B^T; rank-deficient whenever B has fewer columns than rows.
  static Covariance factor(const Matrix& b) {
    Matrix s = b * b.transpose();
    return full(s);
  }

  std::size_t dim() const { return static_cast<std::size_t>(eigvals_.size()); }
  bool is_diagonal() const { return diagonal_; }
  /// Diagonal entries (diagonal kind) or eigenvalues (full kind).
  const Vector& eigenvalues() const { return eigvals_; }
  /// Orthonormal eigenvectors as columns; empty for the diagonal kind.
  const Eigen::MatrixXd& eigenvectors() const { return eigvecs_; }

  Matrix dense() const {
    if (diagonal_) return Matrix(eigvals_.asDiagonal());
    return eigvecs_ * eigvals_.asDiagonal() * eigvecs_.transpose();
  }

  bool is_degenerate() const {
    const double scale = std::max(1.0, eigvals_.maxCoeff());
    return eigvals_.minCoeff() <= 1e-14 * scale;
  }

  double max_eigenvalue() const { return eigvals_.maxCoeff(); }

  /// Coordinates in the eigenbasis: U^T x (identity for diagonal).
  Vector to_eigenbasis(ConstPoint x) const {
    if (diagonal_) return as_vector(x);
    return eigvecs_.transpose() * as_vector(x);
  }

  Vector from_eigenbasis(const Vector& z) const {
    if (diagonal_) return z;
    return eigvecs_ * z;
  }

  bool operator==(const Covariance& o) const {
    return diagonal_ == o.diagonal_ && eigvals_ == o.eigvals_ && eigvecs_ == o.eigvecs_;
  }

 private:
  bool diagonal_ = true;
  Vector eigvals_;
  Eigen::MatrixXd eigvecs_;
};

struct GaussianComponent {
  double weight;
  Vector mean;
  Covariance cov;
};

/// rho(x) = sum_i w_i N(x | m_i, Sigma_i).
class GaussianMixture final : public Density {
 public:
  explicit GaussianMixture(std::vector<GaussianComponent> components)
      : components_(std::move(components)) {
    if (components_.empty()) throw DomainError("mixture needs at least one component");
    dim_ = static_cast<std::size_t>(components_.front().mean.size());
    if (dim_ == 0) throw DomainError("mixture dimension must be >= 1");
    double total = 0.0;
    for (const auto& c : components_) {
      if (!(c.weight > 0.0)) throw DomainError("mixture weights must be > 0");
      if (static_cast<std::size_t>(c.mean.size()) != dim_ || c.cov.dim() != dim_)
        throw DomainError("mixture components have inconsistent dimensions");
      if (!c.mean.allFinite()) throw DomainError("mixture means must be finite");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      std::ostringstream os;
      os.precision(17);
      os << "mixture weights sum to " << total << ", expected 1";
      throw DomainError(os.str());
    }
    for (const auto& c : components_) degenerate_ = degenerate_ || c.cov.is_degenerate();
    cumulative_.resize(components_.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < components_.size(); ++i) cumulative_[i] = (acc += components_[i].weight);
    cumulative_.back() = 1.0;
  }

  /// Single Gaussian N(mean, cov).
  static GaussianMixture gaussian(Vector mean, Covariance cov) {
    return GaussianMixture({GaussianComponent{1.0, std::move(mean), std::move(cov)}});
  }

  static GaussianMixture standard_normal(std::size_t d) {
    return gaussian(Vector::Zero(static_cast<Eigen::Index>(d)),
                    Covariance::diagonal(Vector::Ones(static_cast<Eigen::Index>(d))));
  }

  std::size_t dim() const override { return dim_; }
  std::string kind() const override { return "mixture"; }
  const std::vector<GaussianComponent>& components() const { return components_; }
  bool degenerate() const { return degenerate_; }

  /// Normalized log density, evaluated with a max-shift over components.
  /// Undefined (capability error) when a covariance is singular.
  double log_density(ConstPoint x) const override {
    require_density();
    thread_local std::vector<double> terms;
    terms.resize(components_.size());
    for (std::size_t i = 0; i < components_.size(); ++i)
      terms[i] = std::log(components_[i].weight) + component_log_density(components_[i], x);
    const double m = *std::max_element(terms.begin(), terms.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : terms) s += std::exp(v - m);
    return m + std::log(s);
  }

  bool has_gradient() const override { return !degenerate_; }

  void grad_log_density(ConstPoint x, Point out) const override {
    require_density();
    const std::size_t n = components_.size();
    thread_local std::vector<double> terms;
    terms.resize(n);
    std::vector<Vector> grads(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = components_[i];
      terms[i] = std::log(c.weight) + component_log_density(c, x);
      // grad log N = -Sigma^{-1}(x - m)
      Vector z = c.cov.to_eigenbasis(x) - c.cov.to_eigenbasis(std::span<const double>(c.mean.data(), dim_));
      z = z.cwiseQuotient(c.cov.eigenvalues());
      grads[i] = -c.cov.from_eigenbasis(z);
    }
    const double m = *std::max_element(terms.begin(), terms.end());
    Vector acc = Vector::Zero(static_cast<Eigen::Index>(dim_));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = std::exp(terms[i] - m);
      s += w;
      acc += w * grads[i];
    }
    as_vector(out) = acc / s;
  }

  bool has_sampler() const override { return true; }

  void sample_into(CounterRng& rng, Matrix& out) const override {
    std::normal_distribution<double> nd(0.0, 1.0);
    Vector z(static_cast<Eigen::Index>(dim_));
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double u = rng.uniform();
      const std::size_t k = static_cast<std::size_t>(
          std::upper_bound(cumulative_.begin(), cumulative_.end(), u) - cumulative_.begin());
      const auto& c = components_[std::min(k, components_.size() - 1)];
      for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = nd(rng);
      z = z.cwiseProduct(c.cov.eigenvalues().cwiseSqrt());
      out.row(r) = (c.mean + c.cov.from_eigenbasis(z)).transpose();
    }
  }

 private:
  void require_density() const {
    if (degenerate_)
      throw CapabilityError("mixture with a singular covariance has no Lebesgue density");
  }

  double component_log_density(const GaussianComponent& c, ConstPoint x) const {
    Vector z = c.cov.to_eigenbasis(x) -
               c.cov.to_eigenbasis(std::span<const double>(c.mean.data(), dim_));
    const Vector& lam = c.cov.eigenvalues();
    double quad = 0.0, logdet = 0.0;
    for (Eigen::Index j = 0; j < z.size(); ++j) {
      quad += z[j] * z[j] / lam[j];
      logdet += std::log(lam[j]);
    }
    return -0.5 * (static_cast<double>(dim_) * kLog2Pi + logdet + quad);
  }

  std::vector<GaussianComponent> components_;
  std::vector<double> cumulative_;
  std::size_t dim_ = 0;
  bool degenerate_ = false;
};

// ---------------------------------------------------------------------------
// Funnel

/// Anisotropic funnel rho(x) = phi_1(x_1) phi_{exp(2 alpha x_1)}(x_1^*) on
/// R x R^{d-1}, where phi_v is the centred Gaussian density with variance v.
class Funnel final : public Density {
 public:
  Funnel(std::size_t dim, double alpha) : dim_(dim), alpha_(alpha) {
    if (dim < 2) throw DomainError("funnel dimension must be >= 2");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw DomainError("funnel alpha must be > 0");
  }

  std::size_t dim() const override { return dim_; }
  std::string kind() const override { return "funnel"; }
  double alpha() const { return alpha_; }

  double log_density(ConstPoint x) const override {
    const double x1 = x[0];
    const double tail = squared_norm(x.subspan(1));
    return log_density_from(x1, tail);
  }

  void log_density_rows(const Matrix& points, std::span<double> out) const override {
    const Eigen::Index n = points.rows();
    thread_local std::vector<double> tail;
    tail.resize(static_cast<std::size_t>(n));
    const Eigen::Index d = points.cols();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double* row = points.data() + i * d;
      double s = 0.0;
      for (Eigen::Index j = 1; j < d; ++j) s += row[j] * row[j];
      tail[static_cast<std::size_t>(i)] = s;
    }
    const double* base = points.data();
    const double a = alpha_, m = static_cast<double>(dim_ - 1);
    const double c = -0.5 * static_cast<double>(dim_) * kLog2Pi;
    double* o = out.data();
    const double* tl = tail.data();
    STMAP_SIMD
    for (Eigen::Index i = 0; i < n; ++i) {
      const double x1 = base[i * d];
      o[i] = c - 0.5 * x1 * x1 - m * a * x1 - 0.5 * tl[i] * std::exp(-2.0 * a * x1);
    }
  }

  bool has_gradient() const override { return true; }

  void grad_log_density(ConstPoint x, Point out) const override {
    const double x1 = x[0];
    const double inv_var = std::exp(-2.0 * alpha_ * x1);
    const double tail = squared_norm(x.subspan(1));
    out[0] = -x1 - static_cast<double>(dim_ - 1) * alpha_ + alpha_ * tail * inv_var;
    for (std::size_t j = 1; j < dim_; ++j) out[j] = -x[j] * inv_var;
  }

  bool has_sampler() const override { return true; }

  /// Exact: x_1 ~ N(0, 1), then x_1^* ~ N(0, e^{2 alpha x_1} I).
  void sample_into(CounterRng& rng, Matrix& out) const override {
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double x1 = nd(rng);
      out(r, 0) = x1;
      const double scale = std::exp(alpha_ * x1);
      for (std::size_t j = 1; j < dim_; ++j) out(r, static_cast<Eigen::Index>(j)) = scale * nd(rng);
    }
  }

 private:
  double log_density_from(double x1, double tail) const {
    const double m = static_cast<double>(dim_ - 1);
    return -0.5 * static_cast<double>(dim_) * kLog2Pi - 0.5 * x1 * x1 - m * alpha_ * x1 -
           0.5 * tail * std::exp(-2.0 * alpha_ * x1);
  }

  std::size_t dim_;
  double alpha_;
};

// ---------------------------------------------------------------------------
// One-dimensional densities

/// rho_1(x) = 1 + (sin 2 pi x + sin 4 pi x) / 2 on [0, 1]; integrates to 1.
class Sinusoid1d final : public Density {
 public:
  std::size_t dim() const override { return 1; }
  std::string kind() const override { return "sinusoid1d"; }

  static double density(double x) {
    if (!(x >= 0.0 && x <= 1.0)) return 0.0;
    return 1.0 + 0.5 * (std::sin(2.0 * kPi * x) + std::sin(4.0 * kPi * x));
  }

  /// Closed-form mean: 1/2 - 3/(8 pi).
  static double mean() { return 0.5 - 3.0 / (8.0 * kPi); }

  double log_density(ConstPoint x) const override {
    const double v = x[0];
    if (!(v >= 0.0 && v <= 1.0)) return -kInf;
    return std::log(density(v));
  }

  void log_density_rows(const Matrix& points, std::span<double> out) const override {
    const double* y = points.data();
    double* o = out.data();
    const Eigen::Index n = points.rows();
    // Two passes: gcc will not if-convert a select around a vector call.
    STMAP_SIMD
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = y[i];
      o[i] = std::log(1.0 + 0.5 * (std::sin(2.0 * kPi * v) + std::sin(4.0 * kPi * v)));
    }
    for (Eigen::Index i = 0; i < n; ++i) o[i] = std::abs(y[i] - 0.5) <= 0.5 ? o[i] : -kInf;  // NaN -> -inf
  }

  bool has_gradient() const override { return true; }

  void grad_log_density(ConstPoint x, Point out) const override {
    const double v = x[0];
    const double r = density(v);
    out[0] = r > 0.0 ? kPi * (std::cos(2.0 * kPi * v) + 2.0 * std::cos(4.0 * kPi * v)) / r : 0.0;
  }

  bool has_sampler() const override { return true; }

  /// Rejection from the uniform law on [0, 1] under the envelope 2 >= rho_1.
  void sample_into(CounterRng& rng, Matrix& out) const override {
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      for (;;) {
        const double x = rng.uniform();
        if (2.0 * rng.uniform() < density(x)) {
          out(r, 0) = x;
          break;
        }
      }
    }
  }
};

/// Standard Cauchy density 1 / (pi (1 + x^2)).
class Cauchy1d final : public Density {
 public:
  std::size_t dim() const override { return 1; }
  std::string kind() const override { return "cauchy1d"; }

  double log_density(ConstPoint x) const override {
    return -std::log(kPi) - std::log1p(x[0] * x[0]);
  }

  void log_density_rows(const Matrix& points, std::span<double> out) const override {
    const double* x = points.data();
    const double c = -std::log(kPi);
    const std::size_t n = out.size();
    STMAP_SIMD
    for (std::size_t i = 0; i < n; ++i) out[i] = c - std::log(1.0 + x[i] * x[i]);
  }

  bool has_gradient() const override { return true; }
  void grad_log_density(ConstPoint x, Point out) const override {
    out[0] = -2.0 * x[0] / (1.0 + x[0] * x[0]);
  }

  bool has_sampler() const override { return true; }
  void sample_into(CounterRng& rng, Matrix& out) const override {
    for (Eigen::Index r = 0; r < out.rows(); ++r) out(r, 0) = std::tan(kPi * (rng.uniform() - 0.5));
  }
};

/// Isotropic Gaussian N(0, variance I).
class IsotropicGaussian final : public Density {
 public:
  IsotropicGaussian(std::size_t dim, double variance) : dim_(dim), variance_(variance) {
    if (dim == 0) throw DomainError("dimension must be >= 1");
    if (!(variance > 0.0)) throw DomainError("Gaussian variance must be > 0");
  }
  std::size_t dim() const override { return dim_; }
  std::string kind() const override { return "gaussian"; }
  double variance() const { return variance_; }

  double log_density(ConstPoint x) const override {
    return -0.5 * (static_cast<double>(dim_) * (kLog2Pi + std::log(variance_)) +
                   squared_norm(x) / variance_);
  }
  void log_density_rows(const Matrix& points, std::span<double> out) const override {
    const double c = -0.5 * static_cast<double>(dim_) * (kLog2Pi + std::log(variance_));
    Eigen::Map<Vector>(out.data(), points.rows()) =
        (c - (0.5 / variance_) * points.rowwise().squaredNorm().array()).matrix();
  }
  bool has_gradient() const override { return true; }
  void grad_log_density(ConstPoint x, Point out) const override {
    for (std::size_t j = 0; j < dim_; ++j) out[j] = -x[j] / variance_;
  }
  bool has_sampler() const override { return true; }
  void sample_into(CounterRng& rng, Matrix& out) const override {
    std::normal_distribution<double> nd(0.0, std::sqrt(variance_));
    for (Eigen::Index r = 0; r < out.rows(); ++r)
      for (Eigen::Index j = 0; j < out.cols(); ++j) out(r, j) = nd(rng);
  }

 private:
  std::size_t dim_;
  double variance_;
};

/// User-supplied density; gradient and sampler optional.
class FunctionDensity final : public Density {
 public:
  using LogFn = std::function<double(ConstPoint)>;
  using GradFn = std::function<void(ConstPoint, Point)>;
  using SampleFn = std::function<void(CounterRng&, Point)>;

  FunctionDensity(std::size_t dim, LogFn log_density, GradFn grad = {}, SampleFn sampler = {},
                  std::string name = "custom")
      : dim_(dim),
        log_(std::move(log_density)),
        grad_(std::move(grad)),
        sampler_(std::move(sampler)),
        name_(std::move(name)) {
    if (!log_) throw DomainError("custom density needs a log density");
  }

  std::size_t dim() const override { return dim_; }
  std::string kind() const override { return name_; }
  double log_density(ConstPoint x) const override { return log_(x); }
  bool has_gradient() const override { return static_cast<bool>(grad_); }
  void grad_log_density(ConstPoint x, Point out) const override {
    if (!grad_) Density::grad_log_density(x, out);
    grad_(x, out);
  }
  bool has_sampler() const override { return static_cast<bool>(sampler_); }
  void sample_into(CounterRng& rng, Matrix& out) const override {
    if (!sampler_) Density::sample_into(rng, out);
    for (Eigen::Index r = 0; r < out.rows(); ++r) sampler_(rng, row_span(out, r));
  }

 private:
  std::size_t dim_;
  LogFn log_;
  GradFn grad_;
  SampleFn sampler_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// Sample banks, initial laws and sampling

/// N draws eta_1..eta_N of the target, one per row.
struct SampleBank {
  Matrix samples;
  std::string source;  // target id and seed the bank was drawn from

  SampleBank() = default;
  SampleBank(Matrix s, std::string src) : samples(std::move(s)), source(std::move(src)) {
    if (samples.rows() < 1 || samples.cols() < 1) throw DomainError("sample bank must be non-empty");
    if (!samples.allFinite()) throw DomainError("sample bank entries must be finite");
  }

  std::size_t size() const { return static_cast<std::size_t>(samples.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(samples.cols()); }
};

struct GaussianStart {
  double gamma;
};
struct DiracStart {
  Vector point;
};
struct DensityStart {
  DensityPtr density;
};

/// Law of X_0: N(0, gamma I), a Dirac mass, or a density with a sampler.
struct InitialDistribution {
  std::variant<GaussianStart, DiracStart, DensityStart> law;
  std::size_t dim = 1;

  static InitialDistribution gaussian(std::size_t dim, double gamma) {
    if (!(gamma > 0.0)) throw DomainError("initial Gaussian variance gamma must be > 0");
    return {GaussianStart{gamma}, dim};
  }
  static InitialDistribution dirac(Vector point) {
    const auto d = static_cast<std::size_t>(point.size());
    return {DiracStart{std::move(point)}, d};
  }
  static InitialDistribution from_density(DensityPtr density) {
    if (!density || !density->has_sampler())
      throw CapabilityError("initial density must provide a sampler and a log density");
    const auto d = density->dim();
    return {DensityStart{std::move(density)}, d};
  }

  /// Initial law of the SDE schemes: N(0, gamma I), or the origin when gamma = 0.
  static InitialDistribution for_noise(std::size_t dim, double gamma) {
    if (gamma == 0.0) return dirac(Vector::Zero(static_cast<Eigen::Index>(dim)));
    return gaussian(dim, gamma);
  }

  const Density* density() const {
    if (auto* d = std::get_if<DensityStart>(&law)) return d->density.get();
    return nullptr;
  }
};

/// n i.i.d. draws from a density; deterministic given the stream.
inline Matrix sample(const Density& target, std::size_t n, CounterRng& rng) {
  if (n < 1) throw DomainError("sample count must be >= 1");
  if (!target.has_sampler()) throw CapabilityError(target.kind() + ": no sampler available");
  Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(target.dim()));
  target.sample_into(rng, out);
  return out;
}

inline Matrix sample(const InitialDistribution& init, std::size_t n, CounterRng& rng) {
  if (n < 1) throw DomainError("sample count must be >= 1");
  Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(init.dim));
  std::visit(
      [&](const auto& law) {
        using T = std::decay_t<decltype(law)>;
        if constexpr (std::is_same_v<T, GaussianStart>) {
          std::normal_distribution<double> nd(0.0, std::sqrt(law.gamma));
          for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = nd(rng);
        } else if constexpr (std::is_same_v<T, DiracStart>) {
          out.rowwise() = law.point.transpose();
        } else {
          law.density->sample_into(rng, out);
        }
      },
      init.law);
  return out;
}

/// Draws a bank of n target samples from stream (seed, Bank).
inline SampleBank draw_bank(const Density& target, std::size_t n, std::uint64_t seed,
                            std::uint64_t substream = 0) {
  CounterRng rng(seed, {tag(Stream::Bank), substream});
  std::ostringstream src;
  src << target.kind() << ":seed=" << seed << ":stream=" << substream;
  return SampleBank(sample(target, n, rng), src.str());
}

// ---------------------------------------------------------------------------
// Gaussian affine convolution

struct AffineConvolution {
  double density;  // N(x | beta m, A)
  Vector vector;   // a A^{-1}(beta Sigma x + sigma m) + b
};

/// For xi ~ N(m, Sigma) and A = sigma I + beta^2 Sigma, returns the pair whose
/// product is E[(a xi + b) phi_sigma(x - beta xi)]. A is factorized by
/// Cholesky, so Sigma may be singular.
inline AffineConvolution gaussian_affine_convolution(const Vector& m, const Matrix& sigma_cov,
                                                     double beta, double sigma, double a,
                                                     const Vector& b, const Vector& x) {
  const Eigen::Index d = m.size();
  if (sigma_cov.rows() != d || sigma_cov.cols() != d || b.size() != d || x.size() != d)
    throw DomainError("gaussian_affine_convolution: dimension mismatch");
  if (!(sigma > 0.0) || !(beta > 0.0))
    throw DomainError("gaussian_affine_convolution: requires sigma > 0 and beta > 0");
  if (sigma_cov.isZero(0.0)) {
    // Dirac xi = m.
    const Vector r = x - beta * m;
    const double logd =
        -0.5 * (static_cast<double>(d) * (kLog2Pi + std::log(sigma)) + r.squaredNorm() / sigma);
    return {std::exp(logd), a * m + b};
  }
  // Validates symmetry and PSD.
  (void)Covariance::full(sigma_cov);
  Eigen::MatrixXd A = sigma * Eigen::MatrixXd::Identity(d, d) + beta * beta * sigma_cov;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw DomainError("sigma I + beta^2 Sigma is not SPD");
  const Vector r = x - beta * m;
  const Vector half = llt.matrixL().solve(r);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double logd = -0.5 * (static_cast<double>(d) * kLog2Pi + logdet + half.squaredNorm());
  // A^{-1}(beta Sigma x + sigma m) = m + beta A^{-1} Sigma (x - beta m)
  const Vector corr = llt.solve(Vector(sigma_cov * r));
  return {std::exp(logd), a * (m + beta * corr) + b};
}

}  // namespace stmap
