#pragma once

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stmap/config.hpp"
#include "stmap/diagnostics.hpp"
#include "stmap/io.hpp"

namespace stmap {

/// Process exit code of each failure class.
inline int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Config:
    case ErrorCategory::Domain:
    case ErrorCategory::Capability: return 2;
    case ErrorCategory::Divergence: return 3;
    case ErrorCategory::DegenerateWeights: return 4;
    case ErrorCategory::Io: return 5;
  }
  return 1;
}

struct RunOverrides {
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

struct ExperimentResult {
  std::filesystem::path out_dir;
  std::vector<std::string> files;  // written, in order, relative to out_dir
  std::vector<ReportRow> report;
  Matrix samples;
};

inline ExperimentConfig apply_overrides(ExperimentConfig c, const RunOverrides& o) {
  if (o.out_dir) c.output.dir = o.out_dir->string();
  if (o.seed) c.run.seed = *o.seed;
  if (o.threads) {
    if (*o.threads < 1) throw ConfigError("threads: must be >= 1");
    c.run.threads = *o.threads;
  }
  return c;
}

/// Scheme of the config with banks of `bank_size` drawn from substream
/// `substream` of the run seed.
inline DriftScheme build_scheme(const ExperimentConfig& c, std::size_t bank_size, std::uint64_t substream) {
  const DensityPtr target = make_density(c.target);
  const Schedule schedule = Schedule::from_name(c.schedule);
  const std::uint64_t seed = c.run.seed;
  const std::size_t d = c.dim();
  switch (c.scheme.kind) {
    case SchemeKind::Ode:
      return DriftScheme::ode(draw_bank(*target, bank_size, seed, substream), make_density(*c.initial->density),
                              schedule, c.scheme.accelerate, target);
    case SchemeKind::ZeroOrder:
      return DriftScheme::zero_order(draw_bank(*target, bank_size, seed, substream), schedule, c.noise, target,
                                     c.scheme.resample);
    case SchemeKind::FirstOrder:
      return DriftScheme::first_order(GaussianBank::draw(bank_size, d, c.noise.lambda, seed, substream), target,
                                      schedule, c.noise, c.scheme.resample);
    case SchemeKind::SecondOrder:
      return DriftScheme::second_order(GaussianBank::draw(bank_size, d, c.noise.lambda, seed, substream), target,
                                       schedule, c.noise, c.scheme.resample);
    case SchemeKind::Piecewise:
      return DriftScheme::piecewise(GaussianBank::draw(bank_size, d, c.noise.lambda, seed, substream), target,
                                    schedule, c.noise, c.scheme.resample);
    case SchemeKind::MixtureClosed:
      return DriftScheme::mixture_closed(make_mixture(c.target), schedule, c.noise);
    case SchemeKind::FunnelReduced: {
      CounterRng rng(seed, {tag(Stream::Probe), substream});
      Vector xi(static_cast<Eigen::Index>(bank_size));
      fill_standard_normal(rng, xi);
      return DriftScheme::funnel_reduced(std::static_pointer_cast<const Funnel>(target), std::move(xi), schedule,
                                         c.noise, c.scheme.resample);
    }
    case SchemeKind::Custom: break;
  }
  throw ConfigError("scheme cannot be built from a config");
}

inline InitialDistribution build_initial(const ExperimentConfig& c, const DriftScheme& scheme) {
  if (c.initial) {
    if (!c.initial->dirac.empty())
      return InitialDistribution::dirac(
          Eigen::Map<const Vector>(c.initial->dirac.data(), static_cast<Eigen::Index>(c.initial->dirac.size())));
    return InitialDistribution::from_density(make_density(*c.initial->density));
  }
  return default_initial(scheme);
}

/// Mean and covariance of a Gaussian mixture.
inline std::pair<Vector, Matrix> mixture_moments(const GaussianMixture& g) {
  const auto d = static_cast<Eigen::Index>(g.dim());
  Vector mean = Vector::Zero(d);
  Matrix second = Matrix::Zero(d, d);
  for (const auto& c : g.components()) {
    mean += c.weight * c.mean;
    second += c.weight * (c.cov.dense() + c.mean * c.mean.transpose());
  }
  return {mean, second - mean * mean.transpose()};
}

namespace detail {

inline Json manifest_json(const ExperimentConfig& c, const std::string& status, const std::vector<std::string>& files,
                          const std::string& error_category = {}, const std::string& error = {}) {
  const Json cfg = to_json(c);
  Json m;
  m["config_hash"] = "fnv1a64:" + hex64(fnv1a64(cfg.dump()));
  m["seed"] = c.run.seed;
  m["command"] = command_name(c.command);
  m["status"] = status;
  m["versions"] = {{"stmap", STMAP_VERSION},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"compiler", __VERSION__},
                   {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  m["files"] = files;
  if (!error_category.empty()) m["error"] = {{"category", error_category}, {"message", error}};
  m["config"] = cfg;
  return m;
}

/// Moment rows for every coordinate; with a known law, verdicts use a
/// 4-standard-error allowance on the mean and 7% plus 4 standard errors on
/// the variance.
inline void moment_rows(const Matrix& x, const std::optional<std::pair<Vector, Matrix>>& law,
                        std::vector<ReportRow>& rows) {
  const MomentReport m = empirical_moments(x);
  const auto n = static_cast<double>(x.rows());
  double mean_tol = 0.0;
  if (law) {
    const Eigen::SelfAdjointEigenSolver<Matrix> es(law->second, Eigen::EigenvaluesOnly);
    mean_tol = 4.0 / std::sqrt(n) * std::max(1.0, std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff())));
  }
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    ReportRow r{"mean", double(j), m.mean[j]};
    if (law) {
      r.reference = law->first[j];
      r.pass = std::abs(m.mean[j] - law->first[j]) <= mean_tol;
    }
    rows.push_back(r);
  }
  if (x.rows() < 2) return;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double var = m.covariance(j, j);
    ReportRow r{"variance", double(j), var};
    if (law) {
      const double ref = law->second(j, j);
      const double m4 = (x.col(j).array() - m.mean[j]).pow(4).mean();
      const double se = std::sqrt(std::max(0.0, m4 - var * var) / n);
      r.reference = ref;
      r.pass = std::abs(var - ref) <= 0.07 * ref + 4.0 * se;
    }
    rows.push_back(r);
  }
}

inline void log_row(std::ostream& os, const ReportRow& r) {
  os << "  " << r.metric;
  if (!std::isnan(r.index)) os << '[' << format_double(r.index) << ']';
  os << " = " << format_double(r.value);
  if (r.reference) os << " (reference " << format_double(*r.reference) << ')';
  if (r.pass) os << (*r.pass ? " ok" : " OUT OF TOLERANCE");
  os << '\n';
}

}  // namespace detail

/// Runs the configured experiment and writes its artifacts into
/// output.dir: manifest.json first, then samples.csv, optional
/// trajectories.csv and kde.csv, then report.csv. Errors propagate as
/// stmap::Error after the manifest is marked failed.
inline ExperimentResult run_experiment(const ExperimentConfig& c, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  ExperimentResult res;
  res.out_dir = c.output.dir;
  const fs::path manifest = res.out_dir / "manifest.json";
  write_atomic(manifest, detail::manifest_json(c, "running", {}).dump(2) + "\n");
  auto emit = [&](const std::string& name, const std::string& body) {
    write_atomic(res.out_dir / name, body);
    res.files.push_back(name);
  };
  try {
    if (log) *log << "stmap " << command_name(c.command) << ": target " << c.target.kind << " (d=" << c.dim()
                  << "), scheme " << scheme_name(c.scheme.kind) << ", seed " << c.run.seed << '\n';
    const DensityPtr target = make_density(c.target);
    std::vector<ReportRow>& rows = res.report;

    if (c.command == Command::Convergence) {
      const SweepSpec& sw = *c.sweep;
      SchemeFamily family;
      family.make = [&c](std::size_t n, std::uint64_t r) { return build_scheme(c, n, derive_key(r, {n})); };
      SweepOptions opt;
      opt.mode = sw.mode;
      opt.repetitions = sw.repetitions;
      opt.probe_times = sw.probe_times;
      opt.reference_factor = sw.reference_factor;
      opt.run = c.run;
      if (c.initial) opt.initial = build_initial(c, family.make(sw.bank_sizes.front(), 0));
      opt.probe_points.resize(static_cast<Eigen::Index>(sw.probe_points.size()), static_cast<Eigen::Index>(c.dim()));
      for (std::size_t i = 0; i < sw.probe_points.size(); ++i)
        for (std::size_t j = 0; j < c.dim(); ++j)
          opt.probe_points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = sw.probe_points[i][j];
      const ConvergenceReport rep = convergence_sweep(family, sw.bank_sizes, opt);
      for (std::size_t i = 0; i < rep.bank_sizes.size(); ++i)
        rows.push_back({std::string("error_") + probe_mode_name(sw.mode), double(rep.bank_sizes[i]), rep.errors[i]});
      rows.push_back({"fitted_slope", std::numeric_limits<double>::quiet_NaN(), rep.fitted_slope});
      rows.push_back({"slope_stderr", std::numeric_limits<double>::quiet_NaN(), rep.slope_stderr});
      rows.push_back({"degenerate", std::numeric_limits<double>::quiet_NaN(), rep.degenerate ? 1.0 : 0.0});
    }

    // Terminal run of the configured scheme; for sweeps, at the largest bank.
    const std::size_t bank = c.scheme.bank_size > 0 ? c.scheme.bank_size
                                                    : (c.sweep ? c.sweep->bank_sizes.back() : std::size_t{0});
    const DriftScheme scheme = build_scheme(c, bank, 0);
    const InitialDistribution init = build_initial(c, scheme);
    RunConfig run = c.run;
    const bool need_traj = c.output.trajectories || c.diagnostics.bound_check;
    if (!need_traj) run.record_stride = 0;
    const ParticleCloud out = integrate(initial_cloud(init, run.num_particles, run.seed), scheme, run);
    res.samples = out.positions;

    emit("samples.csv", samples_csv(out.positions, c.output.format == "wide" ? SampleLayout::Wide : SampleLayout::Long));
    if (c.output.trajectories && out.trajectory) emit("trajectories.csv", trajectories_csv(*out.trajectory));

    std::optional<std::pair<Vector, Matrix>> law;
    if (c.target.kind == "mixture") law = mixture_moments(*make_mixture(c.target));
    if (c.target.kind == "gaussian")
      law = std::make_pair(Vector::Zero(static_cast<Eigen::Index>(c.dim())),
                           Matrix(c.target.variance * Matrix::Identity(static_cast<Eigen::Index>(c.dim()),
                                                                        static_cast<Eigen::Index>(c.dim()))));
    detail::moment_rows(out.positions, law, rows);

    if (c.target.kind == "funnel") {
      // x_1 is N(0, 1) under the funnel law.
      const Vector x1 = out.positions.col(0);
      const double m = x1.mean();
      const double v = (x1.array() - m).square().sum() / std::max(1.0, double(x1.size() - 1));
      rows.push_back({"x1_mean", 0.0, m, 0.0, std::abs(m) <= 0.05});
      rows.push_back({"x1_variance", 0.0, v, 1.0, v >= 0.9 && v <= 1.1});
    }
    if (c.target.kind == "sinusoid1d") {
      const double m = out.positions.col(0).mean();
      rows.push_back({"sinusoid_mean", 0.0, m, Sinusoid1d::mean(), std::nullopt});
    }

    std::optional<KdeGrid> kde;
    if (c.output.kde || c.target.kind == "sinusoid1d") kde = kde_1d(out.positions);
    if (kde && c.target.kind == "sinusoid1d")
      rows.push_back({"kde_l1", 0.0, kde->l1_distance(&Sinusoid1d::density), 0.0, std::nullopt});
    if (c.output.kde) emit("kde.csv", kde_csv(*kde));

    if (c.diagnostics.reference_bank > 0) {
      const SampleBank ref = draw_bank(*target, c.diagnostics.reference_bank, c.run.seed, 0xFEEDu);
      if (c.dim() == 1)
        rows.push_back({"w1_reference", 0.0, wasserstein1_1d(out.positions, ref.samples), 0.0, std::nullopt});
      if (c.diagnostics.bound_check) {
        BoundCheckOptions bo;
        bo.slack_factor = c.diagnostics.slack_factor;
        for (const BoundRow& b : bound_check_wasserstein(*out.trajectory, ref, scheme.schedule(),
                                                         scheme.stochastic(), scheme.noise(), bo))
          rows.push_back({"w1_bound", b.t, b.empirical_w1, b.bound + b.slack, b.pass});
      }
    }

    emit("report.csv", report_csv(rows));
    if (log) {
      for (const auto& r : rows)
        if (r.metric != "mean" && r.metric != "variance") detail::log_row(*log, r);
      std::size_t failed = 0;
      for (const auto& r : rows)
        if (r.pass && !*r.pass) ++failed;
      *log << "  moments: " << out.dim() << " coordinate(s), " << failed << " row(s) out of tolerance\n";
      *log << "  wrote " << res.out_dir.string() << "/{";
      for (std::size_t i = 0; i < res.files.size(); ++i) *log << (i ? "," : "") << res.files[i];
      *log << "}\n";
    }
    write_atomic(manifest, detail::manifest_json(c, "complete", res.files).dump(2) + "\n");
  } catch (const Error& e) {
    try {
      write_atomic(manifest, detail::manifest_json(c, "failed", res.files, category_name(e.category()), e.what()).dump(2) + "\n");
    } catch (const Error&) {
    }
    throw;
  }
  return res;
}

}  // namespace stmap
