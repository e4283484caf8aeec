#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stmap/diagnostics.hpp"
#include "stmap/distributions.hpp"
#include "stmap/drift.hpp"
#include "stmap/error.hpp"
#include "stmap/integrate.hpp"
#include "stmap/io.hpp"
#include "stmap/schedule.hpp"

namespace stmap {

using Json = nlohmann::json;

enum class Command { Sample, TransportOde, Convergence, Funnel, Mixture, Diagnose };

inline const char* command_name(Command c) {
  switch (c) {
    case Command::Sample: return "sample";
    case Command::TransportOde: return "transport-ode";
    case Command::Convergence: return "convergence";
    case Command::Funnel: return "funnel";
    case Command::Mixture: return "mixture";
    case Command::Diagnose: return "diagnose";
  }
  return "sample";
}

inline std::optional<Command> command_from_name(const std::string& s) {
  for (auto c : {Command::Sample, Command::TransportOde, Command::Convergence, Command::Funnel, Command::Mixture,
                 Command::Diagnose})
    if (s == command_name(c)) return c;
  return std::nullopt;
}

/// Density descriptor. Only the fields of the named kind are meaningful:
///   mixture     weights, means, cov_form in {diag, full, factor}, covs
///   funnel      dim, alpha
///   gaussian    dim, variance          (N(0, variance I))
///   sinusoid1d, cauchy1d               no fields
struct TargetSpec {
  std::string kind;
  std::size_t dim = 0;
  double alpha = 0.0;
  double variance = 0.0;
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::string cov_form;
  std::vector<std::vector<double>> cov_diag;                   // one row per component
  std::vector<std::vector<std::vector<double>>> cov_matrices;  // full or factor, row-major

  std::size_t dimension() const {
    if (kind == "sinusoid1d" || kind == "cauchy1d") return 1;
    if (kind == "mixture") return means.empty() ? 0 : means.front().size();
    return dim;
  }

  bool operator==(const TargetSpec&) const = default;
};

/// Law of X_0 when it is not implied by the scheme: a Dirac mass or a density.
struct InitialSpec {
  std::vector<double> dirac;         // non-empty selects a Dirac mass
  std::optional<TargetSpec> density;

  bool operator==(const InitialSpec&) const = default;
};

struct SchemeSpec {
  SchemeKind kind = SchemeKind::Ode;
  std::size_t bank_size = 0;  // target bank, Gaussian probes or funnel xi bank
  bool accelerate = true;
  ResamplePolicy resample = ResamplePolicy::FixedPerRun;

  bool operator==(const SchemeSpec&) const = default;
};

struct OutputSpec {
  std::string dir = "out";
  std::string format = "long";  // samples.csv layout: long or wide
  bool trajectories = false;
  bool kde = false;  // kde.csv of the first coordinate

  bool operator==(const OutputSpec&) const = default;
};

struct DiagnosticsSpec {
  bool bound_check = false;
  double slack_factor = 3.0;
  std::size_t reference_bank = 0;  // direct target draws for W1 and the bound table; 0 disables

  bool operator==(const DiagnosticsSpec&) const = default;
};

struct SweepSpec {
  std::vector<std::size_t> bank_sizes;
  std::size_t repetitions = 16;
  ProbeMode mode = ProbeMode::DriftField;
  std::vector<double> probe_times{0.25, 0.5, 0.75};
  std::vector<std::vector<double>> probe_points;
  std::size_t reference_factor = 100;

  bool operator==(const SweepSpec&) const = default;
};

struct ExperimentConfig {
  Command command = Command::Sample;
  std::string description;
  TargetSpec target;
  std::optional<InitialSpec> initial;
  std::string schedule = "cosine2";
  NoiseConfig noise;
  RunConfig run;
  SchemeSpec scheme;
  OutputSpec output;
  DiagnosticsSpec diagnostics;
  std::optional<SweepSpec> sweep;
  std::vector<std::string> warnings;  // advisory, filled at load; not serialized

  std::size_t dim() const { return target.dimension(); }

  bool operator==(const ExperimentConfig& o) const {
    return command == o.command && description == o.description && target == o.target && initial == o.initial &&
           schedule == o.schedule && noise == o.noise && run == o.run && scheme == o.scheme && output == o.output &&
           diagnostics == o.diagnostics && sweep == o.sweep;
  }
};

/// Thrown by load_config with every violation found, not only the first.
class ConfigViolations : public ConfigError {
 public:
  explicit ConfigViolations(std::vector<std::string> v) : ConfigError(join(v)), list_(std::move(v)) {}
  const std::vector<std::string>& violations() const { return list_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = std::to_string(v.size()) + " config violation(s):";
    for (const auto& m : v) s += "\n  " + m;
    return s;
  }
  std::vector<std::string> list_;
};

// ---------------------------------------------------------------------------
// Building densities from descriptors

inline std::shared_ptr<const GaussianMixture> make_mixture(const TargetSpec& t) {
  const std::size_t n = t.weights.size();
  if (n == 0) throw DomainError("mixture: weights must be non-empty");
  if (t.means.size() != n) throw DomainError("mixture: means must have one row per weight");
  const std::size_t k = t.cov_form == "diag" ? t.cov_diag.size() : t.cov_matrices.size();
  if (k != n) throw DomainError("mixture: covs must have one entry per weight");
  std::vector<GaussianComponent> comps;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t d = t.means[i].size();
    const Vector mean = Eigen::Map<const Vector>(t.means[i].data(), static_cast<Eigen::Index>(d));
    Covariance cov;
    if (t.cov_form == "diag") {
      if (t.cov_diag[i].size() != d) throw DomainError("mixture: covs.diag row length differs from the mean");
      cov = Covariance::diagonal(Eigen::Map<const Vector>(t.cov_diag[i].data(), static_cast<Eigen::Index>(d)));
    } else {
      const auto& rows = t.cov_matrices[i];
      if (rows.size() != d) throw DomainError("mixture: covariance matrix must have d rows");
      const std::size_t cols = rows.empty() ? 0 : rows.front().size();
      Matrix m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(cols));
      for (std::size_t r = 0; r < d; ++r) {
        if (rows[r].size() != cols) throw DomainError("mixture: ragged covariance matrix");
        for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
      }
      if (t.cov_form == "full") {
        cov = Covariance::full(m);
      } else if (t.cov_form == "factor") {
        if (cols < 1) throw DomainError("mixture: covariance factor needs at least one column");
        cov = Covariance::factor(m);
      } else {
        throw DomainError("mixture: unknown covariance form '" + t.cov_form + "'");
      }
    }
    comps.push_back({t.weights[i], mean, std::move(cov)});
  }
  return std::make_shared<const GaussianMixture>(std::move(comps));
}

inline DensityPtr make_density(const TargetSpec& t) {
  if (t.kind == "mixture") return make_mixture(t);
  if (t.kind == "funnel") return std::make_shared<const Funnel>(t.dim, t.alpha);
  if (t.kind == "gaussian") return std::make_shared<const IsotropicGaussian>(t.dim, t.variance);
  if (t.kind == "sinusoid1d") return std::make_shared<const Sinusoid1d>();
  if (t.kind == "cauchy1d") return std::make_shared<const Cauchy1d>();
  throw ConfigError("unknown target kind '" + t.kind + "'");
}

// ---------------------------------------------------------------------------
// Serialization

inline Json to_json(const TargetSpec& t) {
  Json j{{"kind", t.kind}};
  if (t.kind == "funnel") {
    j["dim"] = t.dim;
    j["alpha"] = t.alpha;
  } else if (t.kind == "gaussian") {
    j["dim"] = t.dim;
    j["variance"] = t.variance;
  } else if (t.kind == "mixture") {
    j["weights"] = t.weights;
    j["means"] = t.means;
    if (t.cov_form == "diag")
      j["covs"] = Json{{"diag", t.cov_diag}};
    else
      j["covs"] = Json{{t.cov_form, t.cov_matrices}};
  }
  return j;
}

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["command"] = command_name(c.command);
  if (!c.description.empty()) j["description"] = c.description;
  j["target"] = to_json(c.target);
  if (c.initial) {
    if (!c.initial->dirac.empty())
      j["initial"] = Json{{"kind", "dirac"}, {"point", c.initial->dirac}};
    else if (c.initial->density)
      j["initial"] = to_json(*c.initial->density);
  }
  j["schedule"] = c.schedule;
  j["noise"] = {{"epsilon", c.noise.epsilon}, {"gamma", c.noise.gamma}, {"lambda", c.noise.lambda}};
  j["run"] = {{"num_steps", c.run.num_steps},
              {"num_particles", c.run.num_particles},
              {"seed", c.run.seed},
              {"record_stride", c.run.record_stride},
              {"threads", c.run.threads}};
  j["scheme"] = {{"kind", scheme_name(c.scheme.kind)},
                 {"bank_size", c.scheme.bank_size},
                 {"accelerate", c.scheme.accelerate},
                 {"resample", resample_name(c.scheme.resample)}};
  j["output"] = {{"dir", c.output.dir},
                 {"format", c.output.format},
                 {"trajectories", c.output.trajectories},
                 {"kde", c.output.kde}};
  j["diagnostics"] = {{"bound_check", c.diagnostics.bound_check},
                      {"slack_factor", c.diagnostics.slack_factor},
                      {"reference_bank", c.diagnostics.reference_bank}};
  if (c.sweep) {
    j["sweep"] = {{"bank_sizes", c.sweep->bank_sizes},
                  {"repetitions", c.sweep->repetitions},
                  {"mode", probe_mode_name(c.sweep->mode)},
                  {"probe_times", c.sweep->probe_times},
                  {"probe_points", c.sweep->probe_points},
                  {"reference_factor", c.sweep->reference_factor}};
  }
  return j;
}

namespace detail {

/// Reads typed fields while collecting every violation with its JSON path.
class SchemaReader {
 public:
  std::vector<std::string> violations;

  void fail(const std::string& where, const std::string& what) { violations.push_back(where + ": " + what); }

  /// Rejects keys outside `allowed`; false when `obj` is not an object.
  bool object(const Json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) {
      fail(where, "expected an object");
      return false;
    }
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& item : obj.items())
      if (!ok.count(item.key())) fail(where.empty() ? item.key() : where + "." + item.key(), "unknown key '" + item.key() + "'");
    return true;
  }

  static std::string path(const std::string& where, const char* key) {
    return where.empty() ? std::string(key) : where + "." + key;
  }

  template <typename T>
  void read(const Json& obj, const std::string& where, const char* key, T& out, bool required) {
    const auto it = obj.find(key);
    if (it == obj.end()) {
      if (required) fail(path(where, key), "required");
      return;
    }
    convert(*it, path(where, key), out);
  }

  void convert(const Json& v, const std::string& where, double& out) {
    if (!v.is_number()) return fail(where, "expected a number");
    out = v.get<double>();
    if (!std::isfinite(out)) fail(where, "must be finite");
  }
  void convert(const Json& v, const std::string& where, std::uint64_t& out) {
    const bool ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    if (!ok) return fail(where, "expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  void convert(const Json& v, const std::string& where, bool& out) {
    if (!v.is_boolean()) return fail(where, "expected true or false");
    out = v.get<bool>();
  }
  void convert(const Json& v, const std::string& where, std::string& out) {
    if (!v.is_string()) return fail(where, "expected a string");
    out = v.get<std::string>();
  }
  template <typename T>
  void convert(const Json& v, const std::string& where, std::vector<T>& out) {
    if (!v.is_array()) return fail(where, "expected an array");
    out.assign(v.size(), T{});
    for (std::size_t i = 0; i < v.size(); ++i) convert(v[i], where + "[" + std::to_string(i) + "]", out[i]);
  }
};

inline TargetSpec read_target(SchemaReader& r, const Json& j, const std::string& where) {
  TargetSpec t;
  if (!j.is_object()) {
    r.fail(where, "expected an object");
    return t;
  }
  r.read(j, where, "kind", t.kind, true);
  if (t.kind == "mixture") {
    if (!r.object(j, where, {"kind", "weights", "means", "covs"})) return t;
    r.read(j, where, "weights", t.weights, true);
    r.read(j, where, "means", t.means, true);
    const auto it = j.find("covs");
    if (it == j.end()) {
      r.fail(where + ".covs", "required");
    } else if (r.object(*it, where + ".covs", {"diag", "full", "factor"})) {
      if (it->size() != 1) {
        r.fail(where + ".covs", "exactly one of diag, full or factor");
      } else {
        t.cov_form = it->begin().key();
        if (t.cov_form == "diag")
          r.read(*it, where + ".covs", "diag", t.cov_diag, true);
        else
          r.read(*it, where + ".covs", t.cov_form.c_str(), t.cov_matrices, true);
      }
    }
  } else if (t.kind == "funnel") {
    r.object(j, where, {"kind", "dim", "alpha"});
    std::uint64_t d = 0;
    r.read(j, where, "dim", d, true);
    t.dim = d;
    r.read(j, where, "alpha", t.alpha, true);
  } else if (t.kind == "gaussian") {
    r.object(j, where, {"kind", "dim", "variance"});
    std::uint64_t d = 0;
    r.read(j, where, "dim", d, true);
    t.dim = d;
    r.read(j, where, "variance", t.variance, true);
  } else if (t.kind == "sinusoid1d" || t.kind == "cauchy1d") {
    r.object(j, where, {"kind"});
  } else if (!t.kind.empty()) {
    r.fail(where + ".kind", "unknown target kind '" + t.kind + "' (expected mixture, funnel, gaussian, sinusoid1d or cauchy1d)");
  }
  return t;
}

inline void require_positive(SchemaReader& r, const std::string& where, std::uint64_t v) {
  if (v < 1) r.fail(where, "must be >= 1");
}

}  // namespace detail

/// Parses and validates a config document. Throws ConfigViolations listing
/// every problem found.
inline ExperimentConfig config_from_json(const Json& j) {
  detail::SchemaReader r;
  ExperimentConfig c;
  if (!r.object(j, "", {"command", "description", "target", "initial", "schedule", "noise", "run", "scheme",
                        "output", "diagnostics", "sweep"}))
    throw ConfigViolations(r.violations);

  std::string command;
  r.read(j, "", "command", command, true);
  if (!command.empty()) {
    if (auto cmd = command_from_name(command))
      c.command = *cmd;
    else
      r.fail("command", "unknown command '" + command + "' (expected sample, transport-ode, convergence, funnel, mixture or diagnose)");
  }
  r.read(j, "", "description", c.description, false);

  bool have_target = false;
  if (auto it = j.find("target"); it != j.end()) {
    const std::size_t before = r.violations.size();
    c.target = detail::read_target(r, *it, "target");
    have_target = r.violations.size() == before;
  } else {
    r.fail("target", "required (no default target)");
  }

  if (auto it = j.find("initial"); it != j.end()) {
    InitialSpec init;
    if (it->is_object() && it->value("kind", "") == "dirac") {
      r.object(*it, "initial", {"kind", "point"});
      r.read(*it, "initial", "point", init.dirac, true);
      if (init.dirac.empty()) r.fail("initial.point", "must be non-empty");
    } else {
      init.density = detail::read_target(r, *it, "initial");
    }
    c.initial = std::move(init);
  }

  r.read(j, "", "schedule", c.schedule, true);
  if (!c.schedule.empty() && c.schedule != "linear" && c.schedule != "cosine2" && c.schedule != "exp")
    r.fail("schedule", "unknown schedule '" + c.schedule + "' (expected linear, cosine2 or exp)");

  if (auto it = j.find("noise"); it != j.end()) {
    if (r.object(*it, "noise", {"epsilon", "gamma", "lambda"})) {
      r.read(*it, "noise", "epsilon", c.noise.epsilon, true);
      r.read(*it, "noise", "gamma", c.noise.gamma, true);
      r.read(*it, "noise", "lambda", c.noise.lambda, true);
      for (auto& v : c.noise.violations()) r.violations.push_back(std::move(v));
    }
  } else {
    r.fail("noise", "required");
  }

  if (auto it = j.find("run"); it != j.end()) {
    if (r.object(*it, "run", {"num_steps", "num_particles", "seed", "record_stride", "threads"})) {
      std::uint64_t steps = c.run.num_steps, particles = c.run.num_particles, stride = 0, threads = 1;
      r.read(*it, "run", "num_steps", steps, true);
      r.read(*it, "run", "num_particles", particles, true);
      if (!it->contains("seed"))
        r.fail("run.seed", "required (runs are never seeded from the clock)");
      else
        r.read(*it, "run", "seed", c.run.seed, true);
      r.read(*it, "run", "record_stride", stride, false);
      r.read(*it, "run", "threads", threads, false);
      detail::require_positive(r, "run.num_steps", steps);
      detail::require_positive(r, "run.num_particles", particles);
      detail::require_positive(r, "run.threads", threads);
      c.run.num_steps = steps;
      c.run.num_particles = particles;
      c.run.record_stride = stride;
      c.run.threads = threads;
    }
  } else {
    r.fail("run", "required");
    r.fail("run.seed", "required (runs are never seeded from the clock)");
  }

  bool have_scheme = false;
  if (auto it = j.find("scheme"); it != j.end()) {
    if (r.object(*it, "scheme", {"kind", "bank_size", "accelerate", "resample"})) {
      std::string kind, resample = "fixed";
      std::uint64_t bank = 0;
      r.read(*it, "scheme", "kind", kind, true);
      r.read(*it, "scheme", "bank_size", bank, false);
      r.read(*it, "scheme", "accelerate", c.scheme.accelerate, false);
      r.read(*it, "scheme", "resample", resample, false);
      c.scheme.bank_size = bank;
      if (!kind.empty()) {
        try {
          c.scheme.kind = scheme_from_name(kind);
          have_scheme = true;
        } catch (const ConfigError& e) {
          r.fail("scheme.kind", e.what());
        }
      }
      if (resample == "per-step")
        c.scheme.resample = ResamplePolicy::PerStep;
      else if (resample != "fixed")
        r.fail("scheme.resample", "expected fixed or per-step");
    }
  } else {
    r.fail("scheme", "required (no default scheme)");
  }

  if (auto it = j.find("output"); it != j.end()) {
    if (r.object(*it, "output", {"dir", "format", "trajectories", "kde"})) {
      r.read(*it, "output", "dir", c.output.dir, false);
      r.read(*it, "output", "format", c.output.format, false);
      r.read(*it, "output", "trajectories", c.output.trajectories, false);
      r.read(*it, "output", "kde", c.output.kde, false);
      if (c.output.format != "long" && c.output.format != "wide") r.fail("output.format", "expected long or wide");
      if (c.output.dir.empty()) r.fail("output.dir", "must be non-empty");
    }
  }

  if (auto it = j.find("diagnostics"); it != j.end()) {
    if (r.object(*it, "diagnostics", {"bound_check", "slack_factor", "reference_bank"})) {
      std::uint64_t ref = 0;
      r.read(*it, "diagnostics", "bound_check", c.diagnostics.bound_check, false);
      r.read(*it, "diagnostics", "slack_factor", c.diagnostics.slack_factor, false);
      r.read(*it, "diagnostics", "reference_bank", ref, false);
      c.diagnostics.reference_bank = ref;
      if (!(c.diagnostics.slack_factor >= 0.0)) r.fail("diagnostics.slack_factor", "must be >= 0");
    }
  }

  if (auto it = j.find("sweep"); it != j.end()) {
    SweepSpec s;
    if (r.object(*it, "sweep", {"bank_sizes", "repetitions", "mode", "probe_times", "probe_points", "reference_factor"})) {
      std::vector<std::uint64_t> sizes;
      std::uint64_t reps = s.repetitions, factor = s.reference_factor;
      std::string mode = probe_mode_name(s.mode);
      r.read(*it, "sweep", "bank_sizes", sizes, true);
      r.read(*it, "sweep", "repetitions", reps, false);
      r.read(*it, "sweep", "mode", mode, false);
      r.read(*it, "sweep", "probe_times", s.probe_times, false);
      r.read(*it, "sweep", "probe_points", s.probe_points, false);
      r.read(*it, "sweep", "reference_factor", factor, false);
      s.bank_sizes.assign(sizes.begin(), sizes.end());
      s.repetitions = reps;
      s.reference_factor = factor;
      if (sizes.size() < 3) r.fail("sweep.bank_sizes", "need at least 3 sizes");
      for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] < 1) r.fail("sweep.bank_sizes", "sizes must be >= 1");
        if (i > 0 && sizes[i] <= sizes[i - 1]) r.fail("sweep.bank_sizes", "sizes must be strictly increasing");
      }
      detail::require_positive(r, "sweep.repetitions", reps);
      detail::require_positive(r, "sweep.reference_factor", factor);
      try {
        s.mode = probe_mode_from_name(mode);
      } catch (const ConfigError& e) {
        r.fail("sweep.mode", e.what());
      }
      for (double t : s.probe_times)
        if (!(t >= 0.0 && t < 1.0)) r.fail("sweep.probe_times", "times must lie in [0, 1)");
      for (const auto& p : s.probe_points)
        if (have_target && p.size() != c.target.dimension()) r.fail("sweep.probe_points", "point dimension differs from the target");
      if (s.mode == ProbeMode::DriftField && s.probe_points.empty())
        r.fail("sweep.probe_points", "drift-field mode needs probe points");
    }
    c.sweep = std::move(s);
  }

  // Cross-field checks need a well-formed target and scheme.
  DensityPtr target;
  if (have_target) {
    try {
      target = make_density(c.target);
    } catch (const Error& e) {
      r.fail("target", e.what());
    }
  }
  DensityPtr rho0;
  if (c.initial && c.initial->density && r.violations.empty()) {
    try {
      rho0 = make_density(*c.initial->density);
    } catch (const Error& e) {
      r.fail("initial", e.what());
    }
  }
  const std::size_t d = c.target.dimension();
  if (c.initial) {
    const std::size_t di = c.initial->dirac.empty() ? (c.initial->density ? c.initial->density->dimension() : 0)
                                                    : c.initial->dirac.size();
    if (have_target && di != d) r.fail("initial", "dimension differs from the target");
  }
  if (target && have_scheme) {
    const SchemeKind k = c.scheme.kind;
    const bool banked = k == SchemeKind::Ode || k == SchemeKind::ZeroOrder || k == SchemeKind::FirstOrder ||
                        k == SchemeKind::SecondOrder || k == SchemeKind::Piecewise || k == SchemeKind::FunnelReduced;
    if (banked && c.scheme.bank_size < 1 && c.command != Command::Convergence)
      r.fail("scheme.bank_size", "must be >= 1 for the " + std::string(scheme_name(k)) + " scheme");
    if ((k == SchemeKind::Ode || k == SchemeKind::ZeroOrder) && !target->has_sampler())
      r.fail("scheme.kind", std::string(scheme_name(k)) + " needs a target sampler");
    if ((k == SchemeKind::SecondOrder || k == SchemeKind::Piecewise) && !target->has_gradient())
      r.fail("scheme.kind", std::string(scheme_name(k)) + " needs the target log-density gradient");
    if (k == SchemeKind::MixtureClosed && c.target.kind != "mixture")
      r.fail("scheme.kind", "mixture-closed needs a mixture target");
    if (k == SchemeKind::FunnelReduced && c.target.kind != "funnel")
      r.fail("scheme.kind", "funnel-reduced needs a funnel target");
    if (k == SchemeKind::Ode) {
      if (!c.initial || !c.initial->density)
        r.fail("initial", "the ode scheme needs an initial density rho_0");
      else if (rho0 && !rho0->has_sampler())
        r.fail("initial", "initial density needs a sampler");
    } else if (c.initial && c.initial->density && rho0 && !rho0->has_sampler()) {
      r.fail("initial", "initial density needs a sampler");
    }
    if (c.command == Command::TransportOde && k != SchemeKind::Ode)
      r.fail("scheme.kind", "transport-ode runs the ode scheme");
  }
  if (have_target) {
    if (c.command == Command::Funnel && c.target.kind != "funnel") r.fail("target.kind", "the funnel command needs a funnel target");
    if (c.command == Command::Mixture && c.target.kind != "mixture") r.fail("target.kind", "the mixture command needs a mixture target");
  }
  if (c.command == Command::Convergence && !c.sweep) r.fail("sweep", "required by the convergence command");
  if (c.diagnostics.bound_check && have_target && d != 1)
    r.fail("diagnostics.bound_check", "the Wasserstein bound table is one-dimensional only");
  if (c.diagnostics.bound_check && c.run.record_stride < 1)
    r.fail("diagnostics.bound_check", "needs run.record_stride >= 1 to record times");
  if (c.diagnostics.bound_check && c.diagnostics.reference_bank < 1)
    r.fail("diagnostics.reference_bank", "the bound table needs a reference bank");
  if (c.diagnostics.reference_bank > 0 && target && !target->has_sampler())
    r.fail("diagnostics.reference_bank", "target has no sampler");

  if (!r.violations.empty()) throw ConfigViolations(r.violations);

  // Advisory only.
  const SchemeKind k = c.scheme.kind;
  if ((k == SchemeKind::FirstOrder || k == SchemeKind::SecondOrder || k == SchemeKind::Piecewise) &&
      c.noise.lambda >= 0.5)
    c.warnings.push_back("noise.lambda >= 0.5: the moment condition behind the probe-scheme error bounds needs lambda < q/(3q-4) = 0.5 for q = 4");
  if (c.initial && c.initial->density && c.initial->density->kind == "sinusoid1d")
    c.warnings.push_back("initial density has compact support; the ode drift is undefined where rho_0 vanishes");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigViolations({path.string() + ": malformed JSON: " + e.what()});
  }
  return config_from_json(j);
}

inline void write_config(const std::filesystem::path& path, const ExperimentConfig& c) {
  write_atomic(path, to_json(c).dump(2) + "\n");
}

}  // namespace stmap
