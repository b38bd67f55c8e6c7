#pragma once

#include <span>
#include <vector>

#include "json.hpp"

#include "imcat/common.hpp"
#include "imcat/model.hpp"
#include "imcat/sparse.hpp"

namespace imcat {

// ---------------------------------------------------------------------------
// Positive-sample construction
// ---------------------------------------------------------------------------

/// Mean of chunk k over the training users of `item`; zero if it has none.
Vector aggregate_users(Index item, const Csr& item_users, const Matrix& user_table,
                       std::size_t k, std::size_t chunk);

/// Mean of the full tag rows over the item's tags assigned to cluster k;
/// zero if the item has no tag in that cluster.
Vector aggregate_tags(Index item, const Csr& it_labels, const std::vector<Index>& assignment,
                      const Matrix& tag_table, std::size_t k);

/// x / |x|, or zero for a zero vector.
Vector l2_normalize(const Vector& x);

/// z = normalize(W0 t + b0) + normalize(v_k).
Vector fuse_item_tag(const Vector& tag_mean, const Vector& item_chunk, const IntentHead& head);

/// W2 * LeakyReLU(W1 x + b1).
Vector project(const Vector& x, const IntentHead& head);

// ---------------------------------------------------------------------------
// Contrastive objectives on projected views
// ---------------------------------------------------------------------------

/// Projected aggregated users and fused item-tag vectors of one intent (B x c).
struct IntentViews {
  Matrix users;
  Matrix fused;
};

/// Positive lists of one intent: positives[a] holds batch positions, and
/// always starts with a itself.
using PositiveSets = std::vector<std::vector<Index>>;

struct AlignmentBatch {
  std::vector<Index> items;          // distinct item ids, length B
  std::vector<IntentViews> intents;  // length K
  Matrix relatedness;                // B x K rows of M
  std::vector<PositiveSets> positives;  // per intent; ignored by contrastive_loss
};

/// Bidirectional relatedness-weighted InfoNCE with in-batch negatives and the
/// item itself as the only positive:
///   (1/2K) sum_k sum_a M[a,k] * (-log softmax_a(U Z^T/tau)[a] - log softmax_a(Z U^T/tau)[a]).
/// Gradients w.r.t. the views (times `weight`) go to `grads` when non-null.
Real contrastive_loss(const AlignmentBatch& batch, Real tau,
                      std::vector<IntentViews>* grads = nullptr, Real weight = 1.0);

/// Same objective where each anchor averages its -log softmax terms over its
/// positive set.
Real set_to_set_loss(const AlignmentBatch& batch, Real tau,
                     std::vector<IntentViews>* grads = nullptr, Real weight = 1.0);

// ---------------------------------------------------------------------------
// Set-to-set neighbourhoods
// ---------------------------------------------------------------------------

/// |a ∩ b| / |a ∪ b| over sorted id lists; 0 when both are empty.
Real jaccard_similarity(std::span<const Index> a, std::span<const Index> b);

/// Per-item sorted tag lists restricted to cluster k.
std::vector<std::vector<Index>> intent_tag_sets(const Csr& it_labels,
                                                const std::vector<Index>& assignment,
                                                std::size_t k);

struct SimilarSets {
  Real delta = 0.7;
  std::vector<std::vector<std::vector<Index>>> sets;  // [k][item] sorted, self excluded

  std::size_t K() const { return sets.size(); }
  const std::vector<Index>& of(std::size_t k, Index item) const { return sets[k][item]; }
  std::size_t pair_count(std::size_t k) const;
  nlohmann::json to_json(const std::vector<std::string>* item_names = nullptr) const;

  /// Sets with no neighbours, for disabling set-to-set alignment.
  static SimilarSets empty(std::size_t K, std::size_t n_items);
};

/// All item pairs whose intent-k Jaccard similarity is strictly above delta.
SimilarSets build_similar_sets(const Csr& it_labels, const std::vector<Index>& assignment,
                               std::size_t K, Real delta);

/// Positive sets for each intent: the anchor itself plus up to p_max - 1
/// distinct neighbours sampled uniformly from the ones present in the batch.
std::vector<PositiveSets> sample_positive_sets(const std::vector<Index>& items,
                                               const SimilarSets& similar, std::size_t p_max,
                                               Rng& rng);

/// Adds sampled neighbours of each item to the batch (until `cap` items) so
/// that they can serve as in-batch positives.
std::vector<Index> expand_with_similar(std::vector<Index> items, const SimilarSets& similar,
                                       std::size_t p_max, std::size_t cap, Rng& rng);

// ---------------------------------------------------------------------------
// Full alignment term
// ---------------------------------------------------------------------------

struct AlignmentOptions {
  Real tau = 1.0;
  bool use_tags = true;        // false: align users with items only ("w/o UT")
  bool use_items = true;       // false: align users with tags only ("w/o UI")
  bool use_projection = true;  // false: no projection head ("w/o NLT")
  bool propagated = false;     // LightGCN: aggregate propagated rather than raw rows
};

struct AlignmentContext {
  const Csr* item_users = nullptr;  // item x user, training split
  const Csr* it_labels = nullptr;
  const std::vector<Index>* assignment = nullptr;
  const Matrix* relatedness = nullptr;  // n_items x K
};

/// Builds projected views for `items` from the current parameters.
AlignmentBatch build_alignment_batch(const Model& model, const AlignmentContext& ctx,
                                     const std::vector<Index>& items,
                                     std::vector<PositiveSets> positives,
                                     const AlignmentOptions& options);

/// Set-to-set alignment loss for `items` with fixed positive sets, including
/// backpropagation into every embedding and head parameter.
Real alignment_loss(const Model& model, const AlignmentContext& ctx,
                    const std::vector<Index>& items, const std::vector<PositiveSets>& positives,
                    const AlignmentOptions& options, ParamSet* grads = nullptr,
                    Real weight = 1.0);

}  // namespace imcat
