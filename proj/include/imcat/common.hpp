#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace imcat {

using Real = double;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using Index = std::uint32_t;

// Error hierarchy. Every failure the library reports derives from Error so
// callers (CLI, bindings) can map it to an exit code or a Python exception.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define IMCAT_DEFINE_ERROR(Name)          \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  };

IMCAT_DEFINE_ERROR(MissingFile)
IMCAT_DEFINE_ERROR(EmptyAfterFilter)
IMCAT_DEFINE_ERROR(NoNegativeAvailable)
IMCAT_DEFINE_ERROR(DimError)
IMCAT_DEFINE_ERROR(StaleCache)
IMCAT_DEFINE_ERROR(DegenerateCluster)
IMCAT_DEFINE_ERROR(NonFiniteLoss)
IMCAT_DEFINE_ERROR(CheckFailed)
IMCAT_DEFINE_ERROR(DimMismatch)
IMCAT_DEFINE_ERROR(EmptySubset)
IMCAT_DEFINE_ERROR(FormatError)
IMCAT_DEFINE_ERROR(ConfigError)

#undef IMCAT_DEFINE_ERROR

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& reason)
      : Error("line " + std::to_string(line) + ": " + reason), line_(line), reason_(reason) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t line_;
  std::string reason_;
};

/// Seeded random source. Bounded integers and reals are derived from the raw
/// mt19937_64 stream directly (not through std::*_distribution), so a seed
/// produces the same sequence on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);

  /// Uniform real in [0, 1).
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  void save(std::ostream& os) const;
  void load(std::istream& is);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Writes a line to standard error with a level prefix. Quiet mode drops info.
void log_info(std::string_view message);
void log_warn(std::string_view message);
void set_quiet(bool quiet);

}  // namespace imcat
