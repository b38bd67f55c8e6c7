#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "imcat/common.hpp"
#include "imcat/sparse.hpp"

namespace imcat {

// ---------------------------------------------------------------------------
// Raw ingestion
// ---------------------------------------------------------------------------

struct RawInteraction {
  std::string user_ref;
  std::string item_ref;
  std::optional<double> rating;
  std::optional<std::int64_t> timestamp;

  bool operator==(const RawInteraction&) const = default;
};

struct RawTagging {
  std::string item_ref;
  std::string tag_ref;

  bool operator==(const RawTagging&) const = default;
};

enum class Column { User, Item, Rating, Timestamp, Tag, Skip };

/// Column layout of a tab-separated input file. Every line must have exactly
/// one field per column; `skip` columns are read and discarded.
struct Schema {
  std::vector<Column> columns;
  bool skip_header = false;
  double rating_min = 0.0;
  double rating_max = 5.0;

  /// Parses "user,item,rating" style lists (names: user, item, rating,
  /// timestamp, tag, skip).
  static Schema parse(const std::string& spec, bool skip_header = false);
  static Schema user_item() { return parse("user,item"); }
  static Schema item_tag() { return parse("item,tag"); }

  bool has(Column c) const;
};

std::vector<RawInteraction> load_interactions(const std::filesystem::path& path,
                                              const Schema& schema);
std::vector<RawTagging> load_taggings(const std::filesystem::path& path, const Schema& schema);

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Bijection between external string IDs and dense IDs in [0, size()).
class IdMap {
 public:
  Index intern(const std::string& external);
  std::optional<Index> find(const std::string& external) const;
  Index encode(const std::string& external) const;
  const std::string& decode(Index dense) const { return external_.at(dense); }
  std::size_t size() const noexcept { return external_.size(); }
  const std::vector<std::string>& externals() const noexcept { return external_; }

  bool operator==(const IdMap& other) const { return external_ == other.external_; }

 private:
  std::vector<std::string> external_;
  std::unordered_map<std::string, Index> dense_;
};

struct Dataset {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_tags = 0;

  Csr ui_all;  // filtered interactions before splitting
  Csr ui_train;
  Csr ui_valid;
  Csr ui_test;
  Csr it_labels;  // item x tag; never split

  IdMap users;
  IdMap items;
  IdMap tags;

  bool is_split = false;
  std::size_t filter_passes = 0;
};

struct FilterConfig {
  double rating_threshold = 4.0;
  std::size_t min_user = 10;
  std::size_t min_item = 10;
  std::size_t min_tag = 5;
};

/// Binarizes ratings and removes low-degree users/items/tags until every
/// degree constraint holds at once. Dense IDs follow first appearance in the
/// raw input among surviving entities.
Dataset apply_filters(const std::vector<RawInteraction>& raw_ui,
                      const std::vector<RawTagging>& raw_it, const FilterConfig& config = {});

struct SplitRatios {
  double train = 0.7;
  double valid = 0.1;
  double test = 0.2;
};

/// Split sizes for a user with n interactions: valid = max(1, floor(r_v n)),
/// test = max(1, floor(r_t n)), train gets the remainder.
struct SplitCounts {
  std::size_t train, valid, test;
};
SplitCounts split_counts(std::size_t n, const SplitRatios& ratios);

/// Per-user random partition. Same (dataset, seed) gives identical output.
Dataset split_dataset(const Dataset& dataset, const SplitRatios& ratios, std::uint64_t seed);

struct DatasetStats {
  std::size_t n_users = 0, n_items = 0, n_tags = 0;
  std::size_t ui_pairs = 0, it_pairs = 0;
  double ui_density = 0, ui_avg_degree = 0;
  double it_density = 0, it_avg_degree = 0;

  nlohmann::json to_json() const;
};

DatasetStats compute_stats(const Dataset& dataset);

// ---------------------------------------------------------------------------
// BPR sampling
// ---------------------------------------------------------------------------

enum class SampleMode { UserItem, ItemTag };

struct BprTriplet {
  Index anchor;
  Index positive;
  Index negative;

  bool operator==(const BprTriplet&) const = default;
};

inline constexpr int kMaxNegativeRetries = 100;
inline constexpr int kMaxAnchorResamples = 100;

/// Anchors are drawn uniformly over observed training pairs; one negative per
/// positive by rejection sampling over unobserved columns.
std::vector<BprTriplet> sample_bpr_batch(const Dataset& dataset, SampleMode mode,
                                         std::size_t batch_size, Rng& rng);
std::vector<BprTriplet> sample_bpr_batch(const Csr& observed, std::size_t batch_size, Rng& rng);

// ---------------------------------------------------------------------------
// Bundle on disk
// ---------------------------------------------------------------------------
//
// A bundle directory holds ui_train.imct, ui_valid.imct, ui_test.imct,
// it_labels.imct, users.tsv, items.tsv, tags.tsv and stats.json.
//
// .imct layout (little-endian):
//   char[4]   magic "IMCT"
//   u32       version (1)
//   u64       rows
//   u64       cols
//   u64[rows+1] row pointers
//   u32[nnz]    column indices, nnz = row_pointers[rows]
//
// ID maps are "dense<TAB>external" lines ordered by dense ID.

void write_incidence(const std::filesystem::path& path, const Csr& matrix);
Csr read_incidence(const std::filesystem::path& path);

void write_bundle(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_bundle(const std::filesystem::path& dir);

}  // namespace imcat
