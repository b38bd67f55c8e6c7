#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "imcat/alignment.hpp"
#include "imcat/clustering.hpp"
#include "imcat/config.hpp"
#include "imcat/dataset.hpp"
#include "imcat/eval.hpp"
#include "imcat/model.hpp"
#include "imcat/optimizer.hpp"

namespace imcat {

// ---------------------------------------------------------------------------
// Joint objective
// ---------------------------------------------------------------------------

struct LossWeights {
  Real alpha = 1.0;
  Real beta = 0.1;
  Real gamma = 0.1;
  Real lambda_ind = 1e-2;
  Real eta = 1.0;
  AlignmentOptions align;
  bool ind_on_chunks = false;

  static LossWeights from_config(const RunConfig& config);
};

/// Inputs of one optimizer step.
struct StepBatches {
  std::vector<BprTriplet> ui;
  std::vector<BprTriplet> vt;
  std::vector<Index> align_items;
  std::vector<PositiveSets> positives;  // per intent, over align_items
};

/// Clustering snapshot the clustering-dependent terms read. Null pointers in
/// joint_loss mean clustering is not active yet.
struct ClusterInputs {
  const Matrix* target = nullptr;  // Q̂, n_tags x K
  AlignmentContext align;
};

struct JointLoss {
  Real total = 0;
  Real uv = 0;
  Real vt = 0;
  Real ca = 0;
  Real kl = 0;
  Real ind = 0;

  nlohmann::json to_json() const;
};

/// L = L_UV + alpha L_VT + beta L_CA* + gamma L_KL + lambda_ind * independence.
/// Terms with zero weight are skipped; the clustering-dependent terms are
/// skipped when `cluster` is null. Throws NonFiniteLoss on a non-finite value.
JointLoss joint_loss(const Model& model, const StepBatches& batches, const ClusterInputs* cluster,
                     const LossWeights& weights, ParamSet* grads);

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Tracks the best validation value. Training stops once `patience` epochs
/// have passed since the later of the best epoch and `hold_until`.
class EarlyStopper {
 public:
  EarlyStopper(std::size_t patience = 100, std::size_t hold_until = 0)
      : patience_(patience), hold_until_(hold_until) {}

  /// Records an evaluated epoch; returns true on strict improvement.
  bool update(std::size_t epoch, Real value);
  bool should_stop(std::size_t epoch) const;

  std::size_t best_epoch() const { return best_epoch_; }
  Real best_value() const { return best_value_; }
  bool has_best() const { return has_best_; }
  void restore(std::size_t best_epoch, Real best_value, bool has_best) {
    best_epoch_ = best_epoch;
    best_value_ = best_value;
    has_best_ = has_best;
  }

 private:
  std::size_t patience_;
  std::size_t hold_until_;
  std::size_t best_epoch_ = 0;
  Real best_value_ = 0;
  bool has_best_ = false;
};

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct TrainState {
  std::size_t epoch = 0;          // completed epochs
  std::uint64_t iteration = 0;    // optimizer steps
  AdamState adam;
  Rng rng;
  bool clustering_active = false;
  std::optional<ClusterState> cluster;
  Real best_recall = 0;
  Real best_ndcg = 0;
  std::size_t best_epoch = 0;
  bool has_best = false;
  ParamSet best_params;
  Real elapsed_seconds = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  JointLoss loss;  // mean over the epoch's steps
  std::optional<Metrics> valid;
  Real seconds = 0;
  Real elapsed = 0;
  bool clustering_active = false;

  /// History line; `with_time` false drops the wall-clock fields.
  nlohmann::json to_json(std::size_t topn, bool with_time = true) const;
};

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  Metrics best_valid;
  Metrics test;
  bool stopped_early = false;
};

class Trainer {
 public:
  Trainer(const Dataset& dataset, RunConfig config);

  const RunConfig& config() const { return config_; }
  const Dataset& dataset() const { return *dataset_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const SimilarSets& similar() const { return similar_; }
  std::size_t steps_per_epoch() const;

  /// Samples the next step's batches from the trainer's RNG.
  StepBatches draw_batches();
  /// One optimizer step on freshly drawn batches.
  JointLoss step();
  /// k-means++ on the current tag table, then a full refresh.
  void activate_clustering();
  /// Recomputes Q̂, the hard assignment, M and the similar-item sets.
  void refresh();
  /// One epoch of steps, followed by validation when due.
  EpochRecord run_epoch();
  /// Trains until early stopping or max_epochs. With a run directory, writes
  /// history.jsonl, ckpt_best, ckpt_last (+ .state) and summary.json there.
  FitResult fit(const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                const std::function<void(const EpochRecord&)>& on_epoch = {});

  /// Ranking metrics of the current parameters (LightGCN is re-propagated).
  Metrics evaluate(const Csr& targets, bool with_valid_exclusion);

  void save_state(const std::filesystem::path& path) const;
  /// Restores everything save_state wrote. Throws DimMismatch on shape
  /// disagreement with the current model.
  void load_state(const std::filesystem::path& path);

 private:
  ClusterInputs cluster_inputs() const;
  bool clustering_due() const;
  void ensure_propagated(bool every_step);

  const Dataset* dataset_;
  RunConfig config_;
  LossWeights weights_;
  Model model_;
  TrainState state_;
  Csr item_users_;
  SimilarSets similar_;
};

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

enum class LossSelector { UV, VT, KL, CA, CaStar, Ind };

std::string to_string(LossSelector s);
LossSelector parse_loss_selector(const std::string& name);

/// A tiny synthetic problem with every input a loss term needs.
struct GradCheckInstance {
  Model model;
  Dataset dataset;
  Csr item_users;
  StepBatches batches;
  ClusterState cluster;
  SimilarSets similar;
  AlignmentOptions align;
  Real eta = 1.0;
};

/// Random instance with at most `n` users, items and tags.
GradCheckInstance make_grad_check_instance(std::uint64_t seed, Backbone backbone = Backbone::BprMf,
                                           std::size_t n = 6, std::size_t d = 8,
                                           std::size_t K = 2);

struct GradCheckReport {
  LossSelector selector = LossSelector::UV;
  Real max_rel_error = 0;
  std::string worst;  // "param[index]"
  std::size_t checked = 0;
  std::vector<std::pair<std::string, Real>> per_param;  // max error per table
};

inline constexpr Real kGradCheckStep = 1e-5;
inline constexpr Real kGradCheckFloor = 1e-6;
/// Instances keep every LeakyReLU input at least this far from zero.
inline constexpr Real kGradCheckKinkMargin = 1e-3;

/// Central differences against the analytic gradient of one loss term, over
/// every entry of every parameter table. Relative error is
/// |a - n| / max(|a|, |n|, kGradCheckFloor). Throws CheckFailed listing the
/// offending tables when the maximum exceeds `tolerance`.
GradCheckReport grad_check(GradCheckInstance& instance, LossSelector selector,
                           Real tolerance = 1e-4);

}  // namespace imcat
