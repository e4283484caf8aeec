#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <system_error>
#include <vector>

#include <Eigen/Core>

#include "stmap/diagnostics.hpp"
#include "stmap/error.hpp"
#include "stmap/integrate.hpp"
#include "stmap/types.hpp"

namespace stmap {

/// Shortest decimal string that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw IoError("not a number: '" + s + "'");
  return v;
}

/// 64-bit FNV-1a, used to fingerprint canonical config text.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Writes `content` to a sibling temp file, then renames it over `path`.
/// A failed write leaves neither the temp file nor a partial target behind.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp, ec);
      throw IoError("write to '" + tmp.string() + "' failed");
    }
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    std::error_code ignore;
    fs::remove(tmp, ignore);
    throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
  }
}

// ---------------------------------------------------------------------------
// CSV tables

enum class SampleLayout { Long, Wide };

/// Long: "particle,dim,value", one row per coordinate. Wide: "x0,x1,...".
inline std::string samples_csv(const Matrix& x, SampleLayout layout) {
  if (x.rows() == 0) throw DomainError("no samples to write");
  std::string s;
  s.reserve(static_cast<std::size_t>(x.size()) * 28 + 64);
  if (layout == SampleLayout::Long) {
    s += "particle,dim,value\n";
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        s += std::to_string(i);
        s += ',';
        s += std::to_string(j);
        s += ',';
        s += format_double(x(i, j));
        s += '\n';
      }
    return s;
  }
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (j) s += ',';
    s += "x" + std::to_string(j);
  }
  s += '\n';
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (j) s += ',';
      s += format_double(x(i, j));
    }
    s += '\n';
  }
  return s;
}

/// "particle,step,t,dim,value"; rows = particles * recorded steps * dim.
inline std::string trajectories_csv(const Trajectory& traj) {
  if (traj.positions.empty() || traj.positions.front().rows() == 0) throw DomainError("no trajectories to write");
  std::string s = "particle,step,t,dim,value\n";
  const Eigen::Index n = traj.positions.front().rows(), d = traj.positions.front().cols();
  s.reserve(static_cast<std::size_t>(n * d) * traj.positions.size() * 40);
  for (Eigen::Index i = 0; i < n; ++i)
    for (std::size_t k = 0; k < traj.positions.size(); ++k) {
      const std::string prefix =
          std::to_string(i) + ',' + std::to_string(traj.steps[k]) + ',' + format_double(traj.times[k]) + ',';
      for (Eigen::Index j = 0; j < d; ++j) {
        s += prefix;
        s += std::to_string(j);
        s += ',';
        s += format_double(traj.positions[k](i, j));
        s += '\n';
      }
    }
  return s;
}

/// "x,density", one row per grid point.
inline std::string kde_csv(const KdeGrid& g) {
  if (g.x.empty()) throw DomainError("empty density grid");
  std::string s = "x,density\n";
  for (std::size_t i = 0; i < g.x.size(); ++i) s += format_double(g.x[i]) + ',' + format_double(g.density[i]) + '\n';
  return s;
}

/// One diagnostics row: a named metric at an index (coordinate, time or bank
/// size), with an optional reference value and verdict.
struct ReportRow {
  std::string metric;
  double index = std::numeric_limits<double>::quiet_NaN();
  double value = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> reference;
  std::optional<bool> pass;
};

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string s = "metric,index,value,reference,pass\n";
  for (const auto& r : rows) {
    s += r.metric + ',';
    if (!std::isnan(r.index)) s += format_double(r.index);
    s += ',' + format_double(r.value) + ',';
    if (r.reference) s += format_double(*r.reference);
    s += ',';
    if (r.pass) s += *r.pass ? "true" : "false";
    s += '\n';
  }
  return s;
}

/// Splits a CSV body into numeric columns (header skipped; text cells read as NaN).
inline std::vector<std::vector<double>> read_numeric_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      const std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      double v = std::numeric_limits<double>::quiet_NaN();
      try {
        if (!cell.empty()) v = parse_double(cell);
      } catch (const IoError&) {
      }
      row.push_back(v);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace stmap
