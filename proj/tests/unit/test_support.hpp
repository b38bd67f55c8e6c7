#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "imcat/dataset.hpp"

namespace imcat::testing {

/// Directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("imcat_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

/// Small split dataset with community structure: users, items and tags fall
/// into `groups` blocks and most interactions stay inside a block.
inline Dataset community_dataset(std::size_t n_users, std::size_t n_items, std::size_t n_tags,
                                 std::size_t groups, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<RawInteraction> ui;
  std::vector<RawTagging> it;
  for (std::size_t u = 0; u < n_users; ++u) {
    const std::size_t g = u % groups;
    for (std::size_t i = 0; i < n_items; ++i) {
      const bool same = i % groups == g;
      if (rng.uniform01() < (same ? 0.6 : 0.05))
        ui.push_back({"u" + std::to_string(u), "i" + std::to_string(i), std::nullopt, std::nullopt});
    }
  }
  for (std::size_t i = 0; i < n_items; ++i) {
    const std::size_t g = i % groups;
    for (std::size_t t = 0; t < n_tags; ++t) {
      const bool same = t % groups == g;
      if (rng.uniform01() < (same ? 0.5 : 0.03))
        it.push_back({"i" + std::to_string(i), "t" + std::to_string(t)});
    }
  }
  const Dataset filtered = apply_filters(ui, it, {4.0, 5, 5, 2});
  return split_dataset(filtered, {}, seed);
}

}  // namespace imcat::testing
