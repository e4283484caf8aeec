#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>
#include <utility>
#include <vector>

#include "stmap/distributions.hpp"
#include "stmap/drift.hpp"
#include "stmap/error.hpp"
#include "stmap/rng.hpp"
#include "stmap/types.hpp"

namespace stmap {

struct RunConfig {
  std::size_t num_steps = 100;
  std::size_t num_particles = 1000;
  std::uint64_t seed = 0;
  std::size_t record_stride = 0;  // 0: terminal cloud only
  std::size_t threads = 1;

  void validate() const {
    if (num_steps < 1) throw ConfigError("run.num_steps: must be >= 1");
    if (threads < 1) throw ConfigError("run.threads: must be >= 1");
  }

  bool operator==(const RunConfig&) const = default;
};

/// Positions recorded at steps 0, stride, 2 stride, ... and at the final step.
struct Trajectory {
  std::vector<std::size_t> steps;
  std::vector<double> times;
  std::vector<Matrix> positions;
};

struct ParticleCloud {
  Matrix positions;
  double time = 0.0;
  std::optional<Trajectory> trajectory;

  std::size_t size() const { return static_cast<std::size_t>(positions.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(positions.cols()); }
};

/// Particle i is drawn from stream (seed, Initial, i) alone.
inline ParticleCloud initial_cloud(const InitialDistribution& init, std::size_t n, std::uint64_t seed) {
  ParticleCloud c;
  c.positions.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(init.dim));
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(seed, {tag(Stream::Initial), i});
    c.positions.row(static_cast<Eigen::Index>(i)) = sample(init, 1, rng).row(0);
  }
  return c;
}

namespace detail {

inline constexpr double kDivergenceLimit = 1e12;
inline constexpr Eigen::Index kParticleBlock = 64;
inline constexpr int kDegenerateRetries = 3;

/// Runs fn(begin, end) over fixed particle blocks. Block boundaries do not
/// depend on the thread count, so neither do the results. The exception of
/// the lowest failing block is rethrown.
inline void for_each_block(Eigen::Index n, std::size_t threads,
                           const std::function<void(Eigen::Index, Eigen::Index)>& fn) {
  const Eigen::Index blocks = (n + kParticleBlock - 1) / kParticleBlock;
  auto run = [&](Eigen::Index b) { fn(b * kParticleBlock, std::min(n, (b + 1) * kParticleBlock)); };
  if (threads <= 1 || blocks <= 1) {
    for (Eigen::Index b = 0; b < blocks; ++b) run(b);
    return;
  }
  std::atomic<Eigen::Index> next{0};
  std::mutex mu;
  Eigen::Index failed_block = blocks;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const Eigen::Index b = next.fetch_add(1);
      if (b >= blocks) return;
      try {
        run(b);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (b < failed_block) {
          failed_block = b;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t count = std::min<std::size_t>(threads, static_cast<std::size_t>(blocks));
  for (std::size_t i = 1; i < count; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

inline void check_finite(const Matrix& x, std::size_t step) {
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double v = x(i, j);
      if (!std::isfinite(v) || std::abs(v) > kDivergenceLimit) {
        std::ostringstream os;
        os << "particle " << i << " diverged at step " << step << " (value " << v << ")";
        throw DivergenceError(step, static_cast<std::size_t>(i), os.str());
      }
    }
}

inline void record(ParticleCloud& c, std::size_t step, double t) {
  c.trajectory->steps.push_back(step);
  c.trajectory->times.push_back(t);
  c.trajectory->positions.push_back(c.positions);
}

inline std::string step_context(std::size_t step, double t, const std::string& what) {
  std::ostringstream os;
  os << "step " << step << " (t=" << t << "): " << what;
  return os.str();
}

/// Shared Euler / Euler-Maruyama loop on t_k = k / num_steps, k < num_steps.
inline ParticleCloud propagate(ParticleCloud cloud, const DriftScheme& scheme, const RunConfig& config,
                               bool stochastic) {
  config.validate();
  if (cloud.dim() != scheme.dim() && cloud.size() > 0)
    throw ConfigError("particle and drift dimensions differ");
  const std::size_t steps = config.num_steps;
  const double dt = 1.0 / static_cast<double>(steps);
  const Eigen::Index n = cloud.positions.rows(), d = cloud.positions.cols();
  if (config.record_stride > 0) {
    cloud.trajectory = Trajectory{};
    record(cloud, 0, 0.0);
  }
  if (n == 0) {
    cloud.time = 1.0;
    if (cloud.trajectory) record(cloud, steps, 1.0);
    return cloud;
  }
  const double eps = scheme.noise().epsilon;
  const bool per_step = scheme.resample_policy() == ResamplePolicy::PerStep;
  Matrix next(n, d);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(steps);
    const double amp = stochastic ? std::sqrt(eps * scheme.schedule().evaluate(t).beta_prime * dt) : 0.0;
    for (int attempt = 0;; ++attempt) {
      try {
        std::optional<DriftScheme> fresh;
        if (per_step && (k > 0 || attempt > 0))
          fresh = scheme.resample(config.seed, (static_cast<std::uint64_t>(attempt) << 32) + k + 1);
        const DriftScheme& active = fresh ? *fresh : scheme;
        const auto field = active.prepare(t);
        for_each_block(n, config.threads, [&](Eigen::Index b, Eigen::Index e) {
          Matrix block = cloud.positions.middleRows(b, e - b);
          Matrix drift;
          field->evaluate(block, drift);
          Matrix upd = block + dt * drift;
          if (amp > 0.0) {
            for (Eigen::Index i = b; i < e; ++i) {
              // One distribution per stream: libstdc++ caches the second polar draw.
              std::normal_distribution<double> nd(0.0, 1.0);
              CounterRng rng(config.seed, {tag(Stream::Brownian), static_cast<std::uint64_t>(i), k});
              for (Eigen::Index j = 0; j < d; ++j) upd(i - b, j) += amp * nd(rng);
            }
          }
          next.middleRows(b, e - b) = upd;
        });
        break;
      } catch (const DegenerateWeightsError& err) {
        if (per_step && attempt + 1 < kDegenerateRetries) continue;
        throw DegenerateWeightsError(step_context(k, t, err.what()));
      } catch (const DivergenceError&) {
        throw;
      } catch (const DomainError& err) {
        throw DomainError(step_context(k, t, err.what()));
      }
    }
    check_finite(next, k);
    cloud.positions.swap(next);
    const std::size_t done = k + 1;
    if (cloud.trajectory && (done % config.record_stride == 0 || done == steps))
      record(cloud, done, done == steps ? 1.0 : static_cast<double>(done) / static_cast<double>(steps));
  }
  cloud.time = 1.0;
  return cloud;
}

}  // namespace detail

/// Euler: X <- X + b_{t_k}(X) dt. The drift is never evaluated at t = 1.
inline ParticleCloud euler_ode(ParticleCloud cloud, const DriftScheme& scheme, const RunConfig& config) {
  return detail::propagate(std::move(cloud), scheme, config, false);
}

/// Euler-Maruyama: X <- X + b_{t_k}(X) dt + sqrt(eps beta'_{t_k} dt) Z, with Z
/// for particle i at step k drawn from stream (seed, Brownian, i, k).
inline ParticleCloud euler_maruyama(ParticleCloud cloud, const DriftScheme& scheme, const RunConfig& config) {
  return detail::propagate(std::move(cloud), scheme, config, true);
}

/// Euler for deterministic schemes, Euler-Maruyama otherwise.
inline ParticleCloud integrate(ParticleCloud cloud, const DriftScheme& scheme, const RunConfig& config) {
  return scheme.stochastic() ? euler_maruyama(std::move(cloud), scheme, config)
                             : euler_ode(std::move(cloud), scheme, config);
}

/// Law of X_0 implied by a scheme: N(0, gamma I) (origin when gamma = 0) for
/// the SDE schemes; the ODE scheme's own rho_0.
inline InitialDistribution default_initial(const DriftScheme& scheme) {
  if (!scheme.stochastic()) {
    if (!scheme.initial_density()) throw ConfigError("ODE scheme without an initial density");
    return InitialDistribution::from_density(
        DensityPtr(std::shared_ptr<const Density>{}, scheme.initial_density()));
  }
  return InitialDistribution::for_noise(scheme.dim(), scheme.noise().gamma);
}

struct CoupledPair {
  ParticleCloud a;
  ParticleCloud b;
};

/// Propagates both schemes from the same initial points with the same
/// Brownian increments (synchronous coupling).
inline CoupledPair coupled_pair_run(const RunConfig& config, const DriftScheme& scheme_a,
                                    const DriftScheme& scheme_b, const InitialDistribution& init) {
  if (scheme_a.dim() != scheme_b.dim() || scheme_a.dim() != init.dim)
    throw ConfigError("coupled schemes have mismatched dimensions");
  if (scheme_a.stochastic() != scheme_b.stochastic())
    throw ConfigError("coupled schemes must both be ODE or both be SDE");
  const ParticleCloud start = initial_cloud(init, config.num_particles, config.seed);
  return {integrate(start, scheme_a, config), integrate(start, scheme_b, config)};
}

inline CoupledPair coupled_pair_run(const RunConfig& config, const DriftScheme& scheme_a,
                                    const DriftScheme& scheme_b) {
  return coupled_pair_run(config, scheme_a, scheme_b, default_initial(scheme_a));
}

}  // namespace stmap
