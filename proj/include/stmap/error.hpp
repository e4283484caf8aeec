#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stmap {

/// Failure classes. The CLI maps each one to a fixed process exit code.
enum class ErrorCategory {
  Domain,           // argument outside the operation's domain
  Capability,       // object lacks a required capability (sampler, gradient)
  Config,           // invalid or inconsistent configuration
  Divergence,       // particle left the finite range during integration
  DegenerateWeights,// every log-weight was -inf
  Io,
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Domain: return "domain";
    case ErrorCategory::Capability: return "capability";
    case ErrorCategory::Config: return "config";
    case ErrorCategory::Divergence: return "divergence";
    case ErrorCategory::DegenerateWeights: return "degenerate-weights";
    case ErrorCategory::Io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what)
      : Error(ErrorCategory::Domain, what) {}
};

class CapabilityError : public Error {
 public:
  explicit CapabilityError(const std::string& what)
      : Error(ErrorCategory::Capability, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorCategory::Config, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

/// Raised when every particle log-weight is -inf: the evaluation point sits
/// outside the effective support of the target.
class DegenerateWeightsError : public Error {
 public:
  explicit DegenerateWeightsError(const std::string& what)
      : Error(ErrorCategory::DegenerateWeights, what) {}
};

class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, std::size_t particle, const std::string& what)
      : Error(ErrorCategory::Divergence, what), step_(step), particle_(particle) {}
  std::size_t step() const noexcept { return step_; }
  std::size_t particle() const noexcept { return particle_; }

 private:
  std::size_t step_;
  std::size_t particle_;
};

}  // namespace stmap
