#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stmap/error.hpp"
#include "stmap/types.hpp"

namespace stmap {

enum class ScheduleKind { Linear, CosineSquared, Exponential, Custom };

/// The interpolation weights and their time derivatives at one instant.
struct ScheduleValues {
  double sigma;
  double beta;
  double sigma_prime;
  double beta_prime;
};

/// Time schedule (sigma_t, beta_t) on [0, 1] with sigma_0 = 1, sigma_1 = 0,
/// beta = 1 - sigma and sigma' < 0 on the open interval.
///
/// beta is always computed as 1 - sigma, so sigma + beta == 1 holds exactly in
/// floating point. Custom schedules supply all four functions; the supplied
/// beta is only used by validate() to cross-check the pair.
class Schedule {
 public:
  using Fn = std::function<double(double)>;

  static Schedule linear() { return Schedule(ScheduleKind::Linear); }
  static Schedule cosine_squared() { return Schedule(ScheduleKind::CosineSquared); }
  static Schedule exponential() { return Schedule(ScheduleKind::Exponential); }

  static Schedule custom(Fn sigma, Fn beta, Fn sigma_prime, Fn beta_prime) {
    Schedule s(ScheduleKind::Custom);
    s.sigma_ = std::move(sigma);
    s.beta_ = std::move(beta);
    s.sigma_prime_ = std::move(sigma_prime);
    s.beta_prime_ = std::move(beta_prime);
    return s;
  }

  /// Parses the config names "linear", "cosine2" and "exp".
  static Schedule from_name(const std::string& name) {
    if (name == "linear") return linear();
    if (name == "cosine2") return cosine_squared();
    if (name == "exp") return exponential();
    throw ConfigError("unknown schedule '" + name + "' (expected linear, cosine2 or exp)");
  }

  ScheduleKind kind() const noexcept { return kind_; }

  std::string name() const {
    switch (kind_) {
      case ScheduleKind::Linear: return "linear";
      case ScheduleKind::CosineSquared: return "cosine2";
      case ScheduleKind::Exponential: return "exp";
      case ScheduleKind::Custom: return "custom";
    }
    return "custom";
  }

  /// Largest time at which the exponential schedule is evaluated directly.
  static constexpr double kExponentialClamp = 1.0 - 1e-9;

  ScheduleValues evaluate(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) {
      std::ostringstream os;
      os << "schedule time " << t << " outside [0, 1]";
      throw DomainError(os.str());
    }
    double sigma = 0.0, sigma_prime = 0.0, beta_prime = 0.0;
    switch (kind_) {
      case ScheduleKind::Linear:
        sigma = 1.0 - t;
        sigma_prime = -1.0;
        beta_prime = 1.0;
        break;
      case ScheduleKind::CosineSquared:
        // cos^2(pi t / 2) written as (1 + cos(pi t)) / 2: exact at t = 0, 1/2, 1.
        sigma = 0.5 * (1.0 + std::cos(kPi * t));
        sigma_prime = -0.5 * kPi * std::sin(kPi * t);
        beta_prime = -sigma_prime;
        break;
      case ScheduleKind::Exponential:
        if (t >= kExponentialClamp) {
          sigma = 0.0;
          sigma_prime = 0.0;
        } else {
          const double u = 1.0 - t;
          sigma = std::exp(-t / u);
          sigma_prime = -sigma / (u * u);
        }
        beta_prime = -sigma_prime;
        break;
      case ScheduleKind::Custom:
        sigma = sigma_(t);
        sigma_prime = sigma_prime_(t);
        beta_prime = beta_prime_(t);
        break;
    }
    return {sigma, 1.0 - sigma, sigma_prime, beta_prime};
  }

  /// The independently supplied beta of a custom schedule; 1 - sigma otherwise.
  double supplied_beta(double t) const {
    return kind_ == ScheduleKind::Custom ? beta_(t) : evaluate(t).beta;
  }

 private:
  explicit Schedule(ScheduleKind k) : kind_(k) {}

  ScheduleKind kind_;
  Fn sigma_, beta_, sigma_prime_, beta_prime_;
};

inline ScheduleValues evaluate(const Schedule& schedule, double t) {
  return schedule.evaluate(t);
}

/// Noise intensities: epsilon (Brownian), gamma (variance of the Gaussian
/// start N(0, gamma I)) and lambda (precision of the auxiliary Gaussian bank
/// of the first/second-order drifts).
///
/// gamma = 0 is accepted and means the SDE starts from a Dirac mass at the
/// origin; it then requires epsilon > 0 so that ell_t > 0 on (0, 1].
struct NoiseConfig {
  double epsilon = 1.0;
  double gamma = 2.0;
  double lambda = 1.0;

  /// Every violated constraint, empty when valid.
  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon))
      v.emplace_back("noise.epsilon: must satisfy epsilon >= 0");
    if (!(gamma >= 0.0) || !std::isfinite(gamma))
      v.emplace_back("noise.gamma: must satisfy gamma > 0 (gamma = 0 selects a Dirac start at the origin)");
    if (!(lambda > 0.0) || !std::isfinite(lambda))
      v.emplace_back("noise.lambda: must satisfy lambda > 0");
    if (epsilon == 0.0 && gamma == 0.0)
      v.emplace_back("noise: epsilon and gamma cannot both be 0 (ell_t would vanish)");
    return v;
  }

  void validate() const {
    auto v = violations();
    if (!v.empty()) throw ConfigError(v.front());
  }

  bool operator==(const NoiseConfig&) const = default;
};

/// ell_t = epsilon beta_t + gamma sigma_t.
inline double ell(const ScheduleValues& s, const NoiseConfig& noise) {
  return noise.epsilon * s.beta + noise.gamma * s.sigma;
}

inline double ell(const Schedule& schedule, const NoiseConfig& noise, double t) {
  return ell(schedule.evaluate(t), noise);
}

/// First schedule invariant found broken by validate().
struct ScheduleViolation {
  std::string code;  // e.g. "sigma_0 != 1", "sigma' sign"
  double t;
  double value;
  double expected;

  std::string message() const {
    std::ostringstream os;
    os.precision(17);
    os << code << " at t=" << t << " (value " << value << ", expected " << expected << ")";
    return os.str();
  }
};

namespace detail {

inline double centered_difference(const std::function<double(double)>& f, double t,
                                  double h) {
  return (f(t + h) - f(t - h)) / (2.0 * h);
}

}  // namespace detail

/// Checks every schedule invariant on a 1000-point grid over [0, 1] and the
/// supplied derivatives against centered finite differences on [0.01, 0.99].
/// Never throws for a misbehaving schedule; returns the first violation.
inline std::optional<ScheduleViolation> validate(const Schedule& schedule,
                                                 std::size_t grid_points = 1000) {
  auto eval = [&](double t) { return schedule.evaluate(t); };

  const ScheduleValues s0 = eval(0.0), s1 = eval(1.0);
  if (s0.sigma != 1.0) return ScheduleViolation{"sigma_0 != 1", 0.0, s0.sigma, 1.0};
  if (s1.sigma != 0.0) return ScheduleViolation{"sigma_1 != 0", 1.0, s1.sigma, 0.0};
  if (std::abs(schedule.supplied_beta(0.0)) > 1e-12)
    return ScheduleViolation{"beta_0 != 0", 0.0, schedule.supplied_beta(0.0), 0.0};
  if (std::abs(schedule.supplied_beta(1.0) - 1.0) > 1e-12)
    return ScheduleViolation{"beta_1 != 1", 1.0, schedule.supplied_beta(1.0), 1.0};

  const double n = static_cast<double>(grid_points - 1);
  for (std::size_t k = 0; k < grid_points; ++k) {
    const double t = static_cast<double>(k) / n;
    const ScheduleValues s = eval(t);
    if (!std::isfinite(s.sigma) || !std::isfinite(s.sigma_prime) || !std::isfinite(s.beta_prime))
      return ScheduleViolation{"non-finite value", t, s.sigma, s.sigma};
    const double supplied_beta = schedule.supplied_beta(t);
    if (std::abs(s.sigma + supplied_beta - 1.0) > 1e-12)
      return ScheduleViolation{"sigma + beta != 1", t, s.sigma + supplied_beta, 1.0};
    if (std::abs(s.sigma_prime + s.beta_prime) > 1e-12)
      return ScheduleViolation{"sigma' + beta' != 0", t, s.sigma_prime + s.beta_prime, 0.0};
    if (k > 0 && k + 1 < grid_points) {
      // sigma' may only vanish where sigma itself has underflowed to 0.
      const bool bad_sigma = s.sigma_prime > 0.0 || (s.sigma_prime == 0.0 && s.sigma > 0.0);
      if (bad_sigma) return ScheduleViolation{"sigma' sign", t, s.sigma_prime, -1.0};
      const bool bad_beta = s.beta_prime < 0.0 || (s.beta_prime == 0.0 && s.sigma > 0.0);
      if (bad_beta) return ScheduleViolation{"beta' sign", t, s.beta_prime, 1.0};
    }
  }

  const double h = 1e-6;
  std::function<double(double)> sigma_fn = [&](double t) { return eval(t).sigma; };
  std::function<double(double)> beta_fn = [&](double t) { return schedule.supplied_beta(t); };
  for (std::size_t k = 0; k < grid_points; ++k) {
    const double t = 0.01 + 0.98 * static_cast<double>(k) / n;
    const ScheduleValues s = eval(t);
    const double fd_sigma = detail::centered_difference(sigma_fn, t, h);
    if (std::abs(fd_sigma - s.sigma_prime) > 1e-6 * std::max(1.0, std::abs(s.sigma_prime)))
      return ScheduleViolation{"sigma' != finite difference", t, s.sigma_prime, fd_sigma};
    const double fd_beta = detail::centered_difference(beta_fn, t, h);
    if (std::abs(fd_beta - s.beta_prime) > 1e-6 * std::max(1.0, std::abs(s.beta_prime)))
      return ScheduleViolation{"beta' != finite difference", t, s.beta_prime, fd_beta};
  }
  return std::nullopt;
}

}  // namespace stmap
