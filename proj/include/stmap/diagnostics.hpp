#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stmap/distributions.hpp"
#include "stmap/drift.hpp"
#include "stmap/error.hpp"
#include "stmap/integrate.hpp"
#include "stmap/rng.hpp"
#include "stmap/schedule.hpp"
#include "stmap/types.hpp"

namespace stmap {

// ---------------------------------------------------------------------------
// One-dimensional Wasserstein distance

/// W1 between the empirical measures of `a` and `b`: the integral over
/// u in (0, 1) of |F_a^{-1}(u) - F_b^{-1}(u)|. For equal sizes this is the
/// mean absolute difference of the sorted samples; unequal sizes are handled
/// exactly by merging the quantile breakpoints i/n_a and j/n_b.
inline double wasserstein1_1d(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DomainError("wasserstein1_1d: empty sample");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const std::size_t n = x.size(), m = y.size();
  if (n == m) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::abs(x[i] - y[i]);
    return s / static_cast<double>(n);
  }
  // Walk the merged grid with integer arithmetic: breakpoints i*m and j*n on
  // a common denominator n*m.
  double s = 0.0;
  std::size_t i = 0, j = 0;
  std::uint64_t u = 0;
  const std::uint64_t total = static_cast<std::uint64_t>(n) * m;
  while (u < total) {
    const std::uint64_t next = std::min<std::uint64_t>((i + 1) * m, (j + 1) * static_cast<std::uint64_t>(n));
    s += static_cast<double>(next - u) * std::abs(x[i] - y[j]);
    u = next;
    if (u == (i + 1) * m) ++i;
    if (u == (j + 1) * static_cast<std::uint64_t>(n)) ++j;
  }
  return s / static_cast<double>(total);
}

inline double wasserstein1_1d(const Matrix& a, const Matrix& b, Eigen::Index column = 0) {
  const Vector ca = a.col(column), cb = b.col(column);
  return wasserstein1_1d(std::span<const double>(ca.data(), static_cast<std::size_t>(ca.size())),
                         std::span<const double>(cb.data(), static_cast<std::size_t>(cb.size())));
}

// ---------------------------------------------------------------------------
// Moments

struct MomentReport {
  Vector mean;
  Matrix covariance;             // unbiased; NaN when fewer than two samples
  std::map<double, double> p_norms;  // p -> (mean |x|^p)^{1/p}
};

inline MomentReport empirical_moments(const Matrix& samples, std::vector<double> ps = {1.0, 2.0}) {
  const Eigen::Index n = samples.rows(), d = samples.cols();
  if (n < 1) throw DomainError("empirical_moments: no samples");
  MomentReport r;
  r.mean = samples.colwise().mean().transpose();
  if (n >= 2) {
    const Matrix c = samples.rowwise() - r.mean.transpose();
    r.covariance = (c.transpose() * c) / static_cast<double>(n - 1);
    r.covariance = 0.5 * (r.covariance + r.covariance.transpose()).eval();
  } else {
    r.covariance = Matrix::Constant(d, d, std::numeric_limits<double>::quiet_NaN());
  }
  const Vector norms = samples.rowwise().norm();
  for (double p : ps) {
    if (!(p >= 1.0)) throw DomainError("empirical_moments: p must be >= 1");
    r.p_norms[p] = std::pow(norms.array().pow(p).mean(), 1.0 / p);
  }
  return r;
}

/// (E|Z|^p)^{1/p} for Z ~ N(0, I_d): (2^{p/2} Gamma((d+p)/2) / Gamma(d/2))^{1/p}.
inline double gaussian_moment_constant(double p, std::size_t d) {
  if (!(p >= 1.0) || d < 1) throw DomainError("gaussian_moment_constant: need p >= 1, d >= 1");
  const double dd = static_cast<double>(d);
  return std::exp((0.5 * p * std::log(2.0) + std::lgamma(0.5 * (dd + p)) - std::lgamma(0.5 * dd)) / p);
}

// ---------------------------------------------------------------------------
// Kernel density estimate

struct KdeGrid {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;

  /// Trapezoid integral of |density - f| over the grid.
  double l1_distance(const std::function<double(double)>& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < x.size(); ++i)
      s += 0.5 * (x[i + 1] - x[i]) * (std::abs(density[i] - f(x[i])) + std::abs(density[i + 1] - f(x[i + 1])));
    return s;
  }
};

inline constexpr std::size_t kKdeGridPoints = 512;

inline double silverman_bandwidth(std::span<const double> v) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (!(sd > 0.0)) return 1e-3 * (1.0 + std::abs(mean));
  return 1.06 * sd * std::pow(n, -0.2);
}

/// Gaussian-kernel estimate on 512 points spanning [min - 3h, max + 3h]. The
/// grid values are rescaled so that their trapezoid integral is exactly 1;
/// the correction is the kernel mass beyond +-3h, well under 1%.
inline KdeGrid kde_1d(std::span<const double> samples, std::optional<double> bandwidth = std::nullopt,
                      std::size_t grid_points = kKdeGridPoints) {
  if (samples.size() < 2) throw DomainError("kde_1d: need at least two samples");
  if (grid_points < 2) throw DomainError("kde_1d: grid needs at least two points");
  double h = bandwidth ? *bandwidth : silverman_bandwidth(samples);
  if (!(h > 0.0) || !std::isfinite(h)) throw DomainError("kde_1d: bandwidth must be positive");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  KdeGrid g;
  g.bandwidth = h;
  const double lo = s.front() - 3.0 * h, hi = s.back() + 3.0 * h;
  g.x.resize(grid_points);
  g.density.assign(grid_points, 0.0);
  const double step = (hi - lo) / static_cast<double>(grid_points - 1);
  const double norm = 1.0 / (static_cast<double>(s.size()) * h * std::sqrt(2.0 * kPi));
  const double cutoff = 9.0 * h;  // kernel < 1e-17 relative beyond this
  for (std::size_t k = 0; k < grid_points; ++k) {
    const double x = lo + step * static_cast<double>(k);
    g.x[k] = x;
    auto first = std::lower_bound(s.begin(), s.end(), x - cutoff);
    auto last = std::upper_bound(first, s.end(), x + cutoff);
    double acc = 0.0;
    for (auto it = first; it != last; ++it) {
      const double u = (x - *it) / h;
      acc += std::exp(-0.5 * u * u);
    }
    g.density[k] = acc * norm;
  }
  double mass = 0.0;
  for (std::size_t k = 0; k + 1 < grid_points; ++k) mass += 0.5 * step * (g.density[k] + g.density[k + 1]);
  for (double& v : g.density) v /= mass;
  return g;
}

inline KdeGrid kde_1d(const Matrix& samples, std::optional<double> bandwidth = std::nullopt,
                      Eigen::Index column = 0) {
  const Vector c = samples.col(column);
  return kde_1d(std::span<const double>(c.data(), static_cast<std::size_t>(c.size())), bandwidth);
}

// ---------------------------------------------------------------------------
// Wasserstein bound along a recorded trajectory

struct BoundRow {
  double t;
  double empirical_w1;
  double bound;   // sigma_t ||xi_0 - eta||_p (+ 2 sqrt(d eps sigma_t) for SDE runs)
  double slack;
  bool pass;
  double margin;  // bound + slack - empirical_w1
};

struct BoundCheckOptions {
  double slack_factor = 3.0;
};

/// J = int sqrt(F (1 - F)) dx of an empirical distribution; E W1 between an
/// n-sample empirical measure and its law is at most J / sqrt(n).
inline double wasserstein_j_functional(std::span<const double> v) {
  std::vector<double> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double j = 0.0;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    const double f = static_cast<double>(i + 1) / n;
    j += (s[i + 1] - s[i]) * std::sqrt(f * (1.0 - f));
  }
  return j;
}

/// (||xi_0 - eta||_1, ||xi_0 - eta||_2) under the product coupling of the
/// empirical measures of `x0` and `bank`, i.e. averaged over all n N pairs.
/// O((n + N) log N) through the sorted bank's prefix sums.
inline std::pair<double, double> product_coupling_norms(std::span<const double> x0, std::span<const double> bank) {
  std::vector<double> b(bank.begin(), bank.end());
  std::sort(b.begin(), b.end());
  std::vector<double> prefix(b.size() + 1, 0.0);
  for (std::size_t k = 0; k < b.size(); ++k) prefix[k + 1] = prefix[k] + b[k];
  const double total = prefix.back(), nb = static_cast<double>(b.size());
  double sq_bank = 0.0;
  for (double v : b) sq_bank += v * v;
  double l1 = 0.0, l2 = 0.0;
  for (double x : x0) {
    const auto k = static_cast<std::size_t>(std::lower_bound(b.begin(), b.end(), x) - b.begin());
    const double below = x * static_cast<double>(k) - prefix[k];
    const double above = (total - prefix[k]) - x * (nb - static_cast<double>(k));
    l1 += (below + above) / nb;
    l2 += x * x - 2.0 * x * total / nb + sq_bank / nb;
  }
  const double n = static_cast<double>(x0.size());
  return {l1 / n, std::sqrt(std::max(0.0, l2 / n))};
}

/// At every recorded time compares W1(cloud_t, bank) with the bound
///   ODE:  sigma_t ||xi_0 - eta||_1
///   SDE:  sigma_t ||xi_0 - eta||_2 + 2 sqrt(d eps sigma_t)
/// plus slack_factor * J (n^{-1/2} + N^{-1/2}), where J is the target bank's
/// J-functional, n the particle count and N the bank size. The norms pair the
/// recorded initial cloud with the bank independently (product coupling), so
/// the t = 0 row holds exactly even when rho_0 has no finite moments.
inline std::vector<BoundRow> bound_check_wasserstein(const Trajectory& traj, const SampleBank& target_bank,
                                                     const Schedule& schedule, bool stochastic,
                                                     const NoiseConfig& noise, const BoundCheckOptions& opt = {}) {
  if (traj.positions.empty()) throw DomainError("bound_check_wasserstein: empty trajectory");
  if (target_bank.dim() != 1 || traj.positions.front().cols() != 1)
    throw CapabilityError("bound_check_wasserstein: only one-dimensional runs have an exact W1");
  if (traj.times.front() != 0.0) throw DomainError("bound_check_wasserstein: trajectory must start at t = 0");
  const Vector bank = target_bank.samples.col(0);
  const std::span<const double> bank_span(bank.data(), static_cast<std::size_t>(bank.size()));
  const Vector x0 = traj.positions.front().col(0);
  const auto [l1, l2] =
      product_coupling_norms(std::span<const double>(x0.data(), static_cast<std::size_t>(x0.size())), bank_span);

  const double j = wasserstein_j_functional(bank_span);
  std::vector<BoundRow> rows;
  for (std::size_t r = 0; r < traj.positions.size(); ++r) {
    const Matrix& x = traj.positions[r];
    const double t = traj.times[r];
    const double sigma = schedule.evaluate(t).sigma;
    BoundRow row;
    row.t = t;
    row.empirical_w1 = wasserstein1_1d(x, target_bank.samples);
    // sigma_1 = 0 kills the term even when the norm estimate is huge.
    const double transport = sigma == 0.0 ? 0.0 : sigma * (stochastic ? l2 : l1);
    row.bound = stochastic ? transport + 2.0 * std::sqrt(noise.epsilon * sigma) : transport;
    row.slack = opt.slack_factor * j *
                (1.0 / std::sqrt(static_cast<double>(x.rows())) + 1.0 / std::sqrt(static_cast<double>(bank.size())));
    row.margin = row.bound + row.slack - row.empirical_w1;
    row.pass = row.margin >= 0.0;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Convergence in the bank size

struct ConvergenceReport {
  std::vector<std::size_t> bank_sizes;
  std::vector<double> errors;
  double fitted_slope = std::numeric_limits<double>::quiet_NaN();
  double slope_stderr = std::numeric_limits<double>::quiet_NaN();
  bool degenerate = false;  // some error is zero or non-finite: no slope
};

/// Least-squares fit of log error against log N.
inline ConvergenceReport fit_convergence(std::vector<std::size_t> sizes, std::vector<double> errors) {
  if (sizes.size() != errors.size()) throw ConfigError("convergence: sizes and errors differ in length");
  if (sizes.size() < 3) throw ConfigError("convergence: need at least 3 bank sizes");
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1]) throw ConfigError("convergence: bank sizes must be strictly increasing");
  ConvergenceReport r;
  r.bank_sizes = std::move(sizes);
  r.errors = std::move(errors);
  for (double e : r.errors)
    if (!(e > 0.0) || !std::isfinite(e)) r.degenerate = true;
  if (r.degenerate) return r;
  const std::size_t n = r.errors.size();
  std::vector<double> lx(n), ly(n);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lx[i] = std::log(static_cast<double>(r.bank_sizes[i]));
    ly[i] = std::log(r.errors[i]);
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  r.fitted_slope = sxy / sxx;
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double res = ly[i] - my - r.fitted_slope * (lx[i] - mx);
    rss += res * res;
  }
  r.slope_stderr = n > 2 ? std::sqrt(rss / static_cast<double>(n - 2) / sxx) : 0.0;
  return r;
}

enum class ProbeMode { DriftField, TerminalTvProxy, StrongCoupled };

inline const char* probe_mode_name(ProbeMode m) {
  switch (m) {
    case ProbeMode::DriftField: return "drift-field";
    case ProbeMode::TerminalTvProxy: return "terminal-tv-proxy";
    case ProbeMode::StrongCoupled: return "strong-coupled";
  }
  return "unknown";
}

inline ProbeMode probe_mode_from_name(const std::string& s) {
  if (s == "drift-field") return ProbeMode::DriftField;
  if (s == "terminal-tv-proxy") return ProbeMode::TerminalTvProxy;
  if (s == "strong-coupled") return ProbeMode::StrongCoupled;
  throw ConfigError("unknown probe mode '" + s + "'");
}

/// A family of particle drifts indexed by bank size. `make(N, r)` builds the
/// scheme of repetition r with a fresh bank of size N.
struct SchemeFamily {
  std::function<DriftScheme(std::size_t bank_size, std::uint64_t repetition)> make;
  /// Reference drift; defaults to make(100 * max N, r) per repetition.
  std::optional<DriftScheme> reference;
};

struct SweepOptions {
  ProbeMode mode = ProbeMode::DriftField;
  std::size_t repetitions = 16;
  std::vector<double> probe_times{0.25, 0.5, 0.75};  // drift-field mode
  Matrix probe_points;                               // drift-field mode, rows are points
  RunConfig run;                                     // terminal modes
  std::optional<InitialDistribution> initial;        // terminal modes; scheme default otherwise
  std::size_t reference_factor = 100;
};

/// Error of the bank-size-N drift against a reference, per N, then the
/// log-log slope. Modes:
///   drift-field        RMSE of b^N - b^ref over the probe (t, x) grid
///   terminal-tv-proxy  L1 distance between KDEs of the first coordinate of
///                      the terminal clouds
///   strong-coupled     ||X^N_1 - X^ref_1||_2 with shared initial points and
///                      Brownian increments
inline ConvergenceReport convergence_sweep(const SchemeFamily& family, std::vector<std::size_t> sizes,
                                           const SweepOptions& opt) {
  if (sizes.size() < 3) throw ConfigError("convergence: need at least 3 bank sizes");
  if (opt.repetitions < 1) throw ConfigError("convergence: repetitions must be >= 1");
  const std::size_t n_max = *std::max_element(sizes.begin(), sizes.end());
  std::vector<double> acc(sizes.size(), 0.0);
  for (std::size_t r = 0; r < opt.repetitions; ++r) {
    const DriftScheme reference =
        family.reference ? *family.reference : family.make(opt.reference_factor * n_max, 1000000 + r);
    if (opt.mode == ProbeMode::DriftField) {
      if (opt.probe_points.rows() == 0) throw ConfigError("drift-field mode needs probe points");
      std::vector<Matrix> ref_values;
      for (double t : opt.probe_times) {
        Matrix v;
        reference.prepare(t)->evaluate(opt.probe_points, v);
        ref_values.push_back(std::move(v));
      }
      for (std::size_t i = 0; i < sizes.size(); ++i) {
        const DriftScheme s = family.make(sizes[i], r);
        double se = 0.0;
        for (std::size_t k = 0; k < opt.probe_times.size(); ++k) {
          Matrix v;
          s.prepare(opt.probe_times[k])->evaluate(opt.probe_points, v);
          se += (v - ref_values[k]).squaredNorm();
        }
        acc[i] += se / static_cast<double>(opt.probe_times.size() * static_cast<std::size_t>(opt.probe_points.rows()));
      }
      continue;
    }
    RunConfig cfg = opt.run;
    cfg.seed = opt.run.seed + r;
    cfg.record_stride = 0;
    const InitialDistribution init = opt.initial ? *opt.initial : default_initial(reference);
    const ParticleCloud start = initial_cloud(init, cfg.num_particles, cfg.seed);
    const ParticleCloud ref = integrate(start, reference, cfg);
    std::optional<KdeGrid> ref_kde;
    if (opt.mode == ProbeMode::TerminalTvProxy) ref_kde = kde_1d(ref.positions);
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      const ParticleCloud out = integrate(start, family.make(sizes[i], r), cfg);
      if (opt.mode == ProbeMode::StrongCoupled) {
        acc[i] += (out.positions - ref.positions).rowwise().squaredNorm().mean();
      } else {
        const KdeGrid k = kde_1d(out.positions, ref_kde->bandwidth);
        // Linear interpolation of the reference estimate, zero outside its grid.
        const auto& g = *ref_kde;
        auto f = [&g](double x) {
          if (x <= g.x.front() || x >= g.x.back()) return 0.0;
          const double pos = (x - g.x.front()) / (g.x[1] - g.x[0]);
          const auto j = static_cast<std::size_t>(pos);
          const double w = pos - static_cast<double>(j);
          return (1.0 - w) * g.density[j] + w * g.density[std::min(j + 1, g.x.size() - 1)];
        };
        const double d = k.l1_distance(f);
        acc[i] += d * d;
      }
    }
  }
  std::vector<double> errors;
  for (double a : acc) errors.push_back(std::sqrt(a / static_cast<double>(opt.repetitions)));
  return fit_convergence(std::move(sizes), std::move(errors));
}

// ---------------------------------------------------------------------------
// Maximum norm of a Gaussian bank

struct MaxNormRow {
  std::size_t n;
  double mean_max;  // E max_i |xi_i| over repetitions
  double stderr_max;
  double ratio;     // mean_max / sqrt(ln N); NaN for N = 1
};

inline std::vector<MaxNormRow> max_norm_stat(const std::vector<std::size_t>& sizes, std::size_t repetitions,
                                             std::size_t dim = 1, std::uint64_t seed = 0) {
  if (repetitions < 2) throw DomainError("max_norm_stat: need at least two repetitions");
  std::vector<MaxNormRow> rows;
  for (std::size_t n : sizes) {
    if (n < 1) throw DomainError("max_norm_stat: bank size must be >= 1");
    double s = 0.0, ss = 0.0;
    for (std::size_t r = 0; r < repetitions; ++r) {
      CounterRng rng(seed, {tag(Stream::Repetition), n, r});
      std::normal_distribution<double> nd;
      double mx = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double q = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          const double z = nd(rng);
          q += z * z;
        }
        mx = std::max(mx, q);
      }
      mx = std::sqrt(mx);
      s += mx;
      ss += mx * mx;
    }
    const double reps = static_cast<double>(repetitions);
    const double mean = s / reps;
    const double var = std::max(0.0, (ss - reps * mean * mean) / (reps - 1.0));
    const double ln = std::log(static_cast<double>(n));
    rows.push_back({n, mean, std::sqrt(var / reps),
                    n > 1 ? mean / std::sqrt(ln) : std::numeric_limits<double>::quiet_NaN()});
  }
  return rows;
}

}  // namespace stmap
