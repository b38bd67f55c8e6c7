#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "imcat/common.hpp"
#include "imcat/dataset.hpp"
#include "imcat/sparse.hpp"

namespace imcat {

enum class Backbone : std::uint32_t { BprMf = 0, NeuMf = 1, LightGcn = 2 };

std::string to_string(Backbone b);
Backbone parse_backbone(std::string_view name);

struct ModelDims {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_tags = 0;
  std::size_t d = 64;
  std::size_t K = 4;

  std::size_t chunk() const { return d / K; }
  bool operator==(const ModelDims&) const = default;
};

/// Per-intent alignment parameters: the tag transform (w0, b0) and the
/// two-layer projection head (w1, b1, w2). Biases are stored as 1 x c rows.
struct IntentHead {
  Matrix w0;  // c x d
  Matrix b0;  // 1 x c
  Matrix w1;  // c x c
  Matrix b1;  // 1 x c
  Matrix w2;  // c x c
};

struct DenseLayer {
  Matrix w;  // out x in
  Matrix b;  // 1 x out
};

/// Every learnable table. The visit order is the checkpoint order.
struct ParamSet {
  Matrix user;     // n_users x d
  Matrix item;     // n_items x d
  Matrix tag;      // n_tags x d
  Matrix centers;  // K x d
  std::vector<IntentHead> heads;
  std::vector<DenseLayer> mlp;  // NeuMF scorer, empty otherwise

  // f(name, matrix, is_weight). Biases report is_weight = false.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  ParamSet zeros_like() const;
  void set_zero();
  void axpy(Real a, const ParamSet& x);
  std::size_t size() const;
  bool all_finite() const;
  bool operator==(const ParamSet& other) const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f("user", self.user, true);
    f("item", self.item, true);
    f("tag", self.tag, true);
    f("centers", self.centers, true);
    for (std::size_t k = 0; k < self.heads.size(); ++k) {
      const std::string p = "head" + std::to_string(k) + ".";
      f(p + "w0", self.heads[k].w0, true);
      f(p + "b0", self.heads[k].b0, false);
      f(p + "w1", self.heads[k].w1, true);
      f(p + "b1", self.heads[k].b1, false);
      f(p + "w2", self.heads[k].w2, true);
    }
    for (std::size_t l = 0; l < self.mlp.size(); ++l) {
      const std::string p = "mlp" + std::to_string(l) + ".";
      f(p + "w", self.mlp[l].w, true);
      f(p + "b", self.mlp[l].b, false);
    }
  }
};

inline constexpr Real kLeakySlope = 0.01;

inline Real leaky_relu(Real x) { return x > 0 ? x : kLeakySlope * x; }
inline Real leaky_relu_grad(Real x) { return x > 0 ? 1.0 : kLeakySlope; }

/// -log(sigmoid(x)) evaluated without overflow.
Real softplus_neg(Real x);
/// sigmoid(x) evaluated without overflow.
Real sigmoid(Real x);

/// Symmetric degree-normalized bipartite adjacency D^-1/2 A D^-1/2 over
/// n_users + n_items nodes (users first). Zero-degree nodes get empty rows.
WeightedCsr normalized_adjacency(const Csr& ui_train);

struct PropagatedTables {
  Matrix user;
  Matrix item;
};

/// Mean of layers 0..n_layers, where layer l+1 = A * layer l.
PropagatedTables lightgcn_propagate(const Matrix& user, const Matrix& item,
                                    const WeightedCsr& adjacency, int n_layers);

/// Parameters plus the backbone-specific scoring state.
class Model {
 public:
  ModelDims dims;
  Backbone backbone = Backbone::BprMf;
  ParamSet params;
  int gcn_layers = 2;

  /// Installs the LightGCN graph from the training split. Invalidates the
  /// propagation cache.
  void set_graph(const Csr& ui_train);
  bool has_graph() const { return adjacency_.n > 0; }
  const WeightedCsr& adjacency() const { return adjacency_; }

  /// Recomputes propagated tables from the current parameters.
  void propagate();
  /// True when the cache was built against the current graph.
  bool cache_fresh() const;
  const PropagatedTables& propagated() const;

  /// Maps gradients w.r.t. propagated tables onto the raw tables:
  /// g_raw += scale * mean_l A^l g_prop (A is symmetric).
  void backprop_propagation(const Matrix& g_user_prop, const Matrix& g_item_prop,
                            ParamSet& grads, Real scale = 1.0) const;

 private:
  WeightedCsr adjacency_;
  std::uint64_t graph_version_ = 0;
  std::uint64_t cache_version_ = 0;
  PropagatedTables cache_;
};

/// Xavier-uniform weights, zero biases. Throws DimError if K does not divide d.
Model init_parameters(const ModelDims& dims, Backbone backbone, std::uint64_t seed);

/// Draws every weight of `params` from U(-b, b), b = sqrt(6 / (rows + cols)),
/// in visit order; biases are zeroed.
void xavier_fill(ParamSet& params, Rng& rng);

/// Relevance score for a (user, item) pair under the model's backbone.
Real score(const Model& model, Index user, Index item);

/// Scores of one user against every item (length n_items).
Vector score_all_items(const Model& model, Index user);

/// NeuMF tower evaluated on explicit user/item rows.
Real neumf_forward(const std::vector<DenseLayer>& mlp, const Eigen::Ref<const Vector>& user,
                   const Eigen::Ref<const Vector>& item);

/// Mean over the batch of -log sigmoid(s+ - s-). For user-item mode the score
/// is the backbone score; item-tag mode always uses the raw item/tag inner
/// product. Gradients (times `weight`) are accumulated into `grads` if given.
Real bpr_loss(const Model& model, std::span<const BprTriplet> batch, SampleMode mode,
              ParamSet* grads = nullptr, Real weight = 1.0);

}  // namespace imcat
