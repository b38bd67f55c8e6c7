#include "imcat/common.hpp"

#include <atomic>
#include <iostream>
#include <limits>

namespace imcat {

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  // Rejection on the top of the range removes modulo bias.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

void Rng::save(std::ostream& os) const { os << engine_; }

void Rng::load(std::istream& is) {
  is >> engine_;
  if (!is) throw FormatError("corrupt RNG state");
}

namespace {
std::atomic<bool> g_quiet{false};
}

void set_quiet(bool quiet) { g_quiet = quiet; }

void log_info(std::string_view message) {
  if (!g_quiet) std::cerr << "[imcat] " << message << '\n';
}

void log_warn(std::string_view message) { std::cerr << "[imcat][warn] " << message << '\n'; }

}  // namespace imcat
