#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "imcat/common.hpp"
#include "imcat/sparse.hpp"

namespace imcat {

inline constexpr Real kLogClamp = 1e-12;

/// Student-t soft assignment of tags to centers:
/// Q[l,k] ∝ (1 + |t_l - mu_k|^2 / eta)^(-(eta+1)/2), rows normalized.
Matrix soft_assign(const Matrix& tags, const Matrix& centers, Real eta);

/// Sharpened target Q̂[l,k] ∝ Q[l,k]^2 / f_k with f_k = sum_l Q[l,k].
/// Throws DegenerateCluster when some f_k is zero.
Matrix target_distribution(const Matrix& q);

/// KL(target || Q(tags, centers)) summed over tags, with the target held
/// constant. Gradients w.r.t. tags and centers are accumulated (times
/// `weight`) when the output pointers are non-null.
Real kl_loss(const Matrix& target, const Matrix& tags, const Matrix& centers, Real eta,
             Matrix* grad_tags = nullptr, Matrix* grad_centers = nullptr, Real weight = 1.0);

/// KL divergence between two row-stochastic matrices (no gradients).
Real kl_divergence(const Matrix& target, const Matrix& q);

/// argmax per row, lowest index on ties.
std::vector<Index> hard_assign(const Matrix& q);

/// Softmax over intents of the per-cluster tag count of each item.
Matrix relatedness_matrix(const Csr& it_labels, const std::vector<Index>& assignment,
                          std::size_t K);

/// Per-cluster tag counts of one item.
std::vector<std::size_t> cluster_counts(std::span<const Index> item_tags,
                                        const std::vector<Index>& assignment, std::size_t K);

/// k-means++ seeding, one assignment pass, centers set to cluster means.
Matrix kmeanspp_init(const Matrix& points, std::size_t K, Rng& rng);

/// Snapshot of clustering results refreshed between optimizer steps.
struct ClusterState {
  Matrix q;       // n_tags x K
  Matrix target;  // n_tags x K
  std::vector<Index> assignment;
  Matrix relatedness;  // n_items x K
  Real eta = 1.0;
  std::size_t recoveries = 0;
};

/// Recomputes Q, Q̂, the hard assignment and M from the current tags and
/// centers. An empty cluster gets its center moved onto the tag farthest from
/// its assigned center and Q is recomputed; `centers` is modified in place.
ClusterState refresh_clusters(const Matrix& tags, Matrix& centers, const Csr& it_labels,
                              Real eta);

/// Per-cluster membership listing for inspection.
nlohmann::json cluster_membership_json(const std::vector<Index>& assignment, std::size_t K,
                                       const std::vector<std::string>* tag_names = nullptr);

bool rows_stochastic(const Matrix& m, Real tol = 1e-6);

}  // namespace imcat
