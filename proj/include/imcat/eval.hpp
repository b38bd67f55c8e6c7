#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"

#include "imcat/common.hpp"
#include "imcat/dataset.hpp"
#include "imcat/model.hpp"
#include "imcat/sparse.hpp"

namespace imcat {

struct RankedList {
  Index user = 0;
  std::vector<Index> items;
  std::vector<Real> scores;
};

/// Top-N items by score (descending, lowest item id first on ties), skipping
/// every item present in a row `user` of any exclusion matrix.
RankedList rank_for_user(Index user, const Vector& scores, std::span<const Csr* const> exclude,
                         std::size_t N);
RankedList rank_for_user(const Model& model, Index user, const Csr& train, std::size_t N);

/// Ranks every user that has at least one entry in `targets`. Scoring runs
/// over `threads` workers; the output order is by user id regardless.
std::vector<RankedList> rank_users(const Model& model, const Csr& targets,
                                   std::span<const Csr* const> exclude, std::size_t N,
                                   std::size_t threads = 1);

struct UserMetrics {
  Index user = 0;
  Real recall = 0;
  Real ndcg = 0;
};

struct Metrics {
  Real recall = 0;
  Real ndcg = 0;
  std::size_t users = 0;

  nlohmann::json to_json(std::size_t N) const;
};

/// Recall@N = |top-N ∩ test| / |test|; NDCG@N with binary gain and log2
/// discount. Lists for users without test items are skipped.
std::vector<UserMetrics> per_user_metrics(std::span<const RankedList> lists, const Csr& test,
                                          std::size_t N);
Metrics average_metrics(std::span<const UserMetrics> per_user);
Metrics compute_metrics(std::span<const RankedList> lists, const Csr& test, std::size_t N);

/// Recall and NDCG of `model` on `targets`, excluding `exclude` rows.
Metrics evaluate_model(const Model& model, const Csr& targets,
                       std::span<const Csr* const> exclude, std::size_t N,
                       std::size_t threads = 1);

struct GroupReport {
  std::vector<std::vector<Index>> groups;  // item ids, G1 = least popular
  std::vector<Real> contributions;         // per-group share of overall recall
  std::vector<Real> normalization;         // divisor per group (1 unless normalized)
  Real overall_recall = 0;

  /// Writes group,n_items,min_degree,max_degree,contribution,normalized rows.
  void write_csv(const std::filesystem::path& path, std::span<const std::size_t> degrees) const;
};

/// Equal-count partition of `degrees.size()` items by ascending training
/// degree (ties by item id); sizes differ by at most one.
std::vector<std::vector<Index>> popularity_groups(std::span<const std::size_t> degrees,
                                                  std::size_t n_groups);

GroupReport popularity_group_report(std::span<const std::size_t> item_degrees,
                                    std::span<const RankedList> lists, const Csr& test,
                                    std::size_t n_groups = 5, std::size_t N = 20);

/// Divides each report's group contribution by the best report's value for
/// that group.
void normalize_group_reports(std::span<GroupReport> reports);

/// Metrics restricted to users whose training degree is below `threshold`.
/// Throws EmptySubset if none qualifies.
Metrics cold_start_report(std::span<const UserMetrics> per_user,
                          std::span<const std::size_t> user_train_degrees,
                          std::size_t threshold = 10);

/// Sparse-user protocol: each user with at least `threshold` training items is
/// selected with probability `fraction` and has its training row sub-sampled
/// to threshold - 1 items. Validation and test rows are unchanged.
Dataset make_sparse_user_protocol(const Dataset& dataset, std::size_t threshold, Real fraction,
                                  std::uint64_t seed);

struct TimingPoint {
  Real seconds = 0;      // cumulative wall clock
  Real best_recall = 0;  // running maximum of validation recall
};

struct EpochTiming {
  Real seconds;
  Real valid_recall;
};

std::vector<TimingPoint> timing_report(std::span<const EpochTiming> history);
void write_timing_csv(const std::filesystem::path& path, std::span<const TimingPoint> points);

std::vector<std::size_t> row_degrees(const Csr& m);
std::vector<std::size_t> column_degrees(const Csr& m);

}  // namespace imcat
