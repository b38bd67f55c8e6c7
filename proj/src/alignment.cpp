#include "imcat/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace imcat {

Vector aggregate_users(Index item, const Csr& item_users, const Matrix& user_table,
                       std::size_t k, std::size_t chunk) {
  Vector out = Vector::Zero(static_cast<Eigen::Index>(chunk));
  auto users = item_users.row(item);
  if (users.empty()) return out;
  const auto off = static_cast<Eigen::Index>(k * chunk);
  for (Index u : users) out += user_table.row(u).segment(off, out.size()).transpose();
  return out / static_cast<Real>(users.size());
}

Vector aggregate_tags(Index item, const Csr& it_labels, const std::vector<Index>& assignment,
                      const Matrix& tag_table, std::size_t k) {
  Vector out = Vector::Zero(tag_table.cols());
  std::size_t n = 0;
  for (Index t : it_labels.row(item)) {
    if (assignment[t] != k) continue;
    out += tag_table.row(t).transpose();
    ++n;
  }
  return n ? Vector(out / static_cast<Real>(n)) : out;
}

Vector l2_normalize(const Vector& x) {
  const Real n = x.norm();
  return n > 0 ? Vector(x / n) : Vector::Zero(x.size());
}

Vector fuse_item_tag(const Vector& tag_mean, const Vector& item_chunk, const IntentHead& head) {
  const Vector t_hat = head.w0 * tag_mean + head.b0.transpose();
  return l2_normalize(t_hat) + l2_normalize(item_chunk);
}

Vector project(const Vector& x, const IntentHead& head) {
  const Vector h = head.w1 * x + head.b1.transpose();
  return head.w2 * h.unaryExpr([](Real v) { return leaky_relu(v); });
}

// ---------------------------------------------------------------------------
// Loss core
// ---------------------------------------------------------------------------

namespace {

// One direction: anchors are rows of `sim`. Returns sum_a w_a * mean_p
// (lse_a - sim[a,p]); adds d/dsim (times scale) to `gsim` if non-null,
// transposed when `transposed` is set.
Real info_nce_direction(const Matrix& sim, const Eigen::VectorXd& weights,
                        const PositiveSets& positives, Matrix* gsim, bool transposed, Real scale) {
  Real total = 0;
  const Eigen::Index B = sim.rows();
  Eigen::RowVectorXd prob(B);
  for (Eigen::Index a = 0; a < B; ++a) {
    const auto& pos = positives[static_cast<std::size_t>(a)];
    const Real w = weights(a);
    const Real mx = sim.row(a).maxCoeff();
    prob = (sim.row(a).array() - mx).exp();
    const Real z = prob.sum();
    const Real lse = mx + std::log(z);
    Real term = 0;
    for (Index p : pos) term += lse - sim(a, p);
    const Real inv_p = 1.0 / static_cast<Real>(pos.size());
    total += w * term * inv_p;
    if (gsim && w != 0) {
      prob /= z;
      const Real c = scale * w;
      for (Eigen::Index b = 0; b < B; ++b) {
        Real g = c * prob(b);
        if (transposed) (*gsim)(b, a) += g;
        else (*gsim)(a, b) += g;
      }
      for (Index p : pos) {
        if (transposed) (*gsim)(p, a) -= c * inv_p;
        else (*gsim)(a, p) -= c * inv_p;
      }
    }
  }
  return total;
}

Real set_loss_core(const AlignmentBatch& batch, const std::vector<PositiveSets>& positives,
                   Real tau, std::vector<IntentViews>* grads, Real weight) {
  if (!(tau > 0)) throw Error("tau must be positive");
  const std::size_t K = batch.intents.size();
  const auto B = static_cast<Eigen::Index>(batch.items.size());
  if (K == 0 || B == 0) return 0;
  if (positives.size() != K) throw DimError("positive sets must be given per intent");
  if (batch.relatedness.rows() != B || batch.relatedness.cols() != static_cast<Eigen::Index>(K))
    throw DimError("relatedness rows must match the batch");
  const Real norm = 1.0 / (2.0 * static_cast<Real>(K));
  if (grads) {
    grads->resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      auto& g = (*grads)[k];
      if (g.users.rows() != B) g.users = Matrix::Zero(B, batch.intents[k].users.cols());
      if (g.fused.rows() != B) g.fused = Matrix::Zero(B, batch.intents[k].fused.cols());
    }
  }
  Real total = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& v = batch.intents[k];
    if (positives[k].size() != static_cast<std::size_t>(B))
      throw DimError("positive sets must cover every anchor");
    const Matrix sim = (v.users * v.fused.transpose()) / tau;
    const Eigen::VectorXd w = batch.relatedness.col(static_cast<Eigen::Index>(k));
    Matrix gsim;
    if (grads) gsim = Matrix::Zero(B, B);
    const Real scale = norm * weight;
    // user -> item-tag: anchors are rows of sim
    Real lk = info_nce_direction(sim, w, positives[k], grads ? &gsim : nullptr, false, scale);
    // item-tag -> user: anchors are rows of sim^T
    const Matrix sim_t = sim.transpose();
    lk += info_nce_direction(sim_t, w, positives[k], grads ? &gsim : nullptr, true, scale);
    total += lk;
    if (grads) {
      (*grads)[k].users.noalias() += gsim * v.fused / tau;
      (*grads)[k].fused.noalias() += gsim.transpose() * v.users / tau;
    }
  }
  return total * norm;
}

}  // namespace

Real contrastive_loss(const AlignmentBatch& batch, Real tau, std::vector<IntentViews>* grads,
                      Real weight) {
  PositiveSets self(batch.items.size());
  for (std::size_t a = 0; a < self.size(); ++a) self[a] = {static_cast<Index>(a)};
  const std::vector<PositiveSets> positives(batch.intents.size(), self);
  return set_loss_core(batch, positives, tau, grads, weight);
}

Real set_to_set_loss(const AlignmentBatch& batch, Real tau, std::vector<IntentViews>* grads,
                     Real weight) {
  for (const auto& per_intent : batch.positives)
    for (std::size_t a = 0; a < per_intent.size(); ++a) {
      const auto& p = per_intent[a];
      if (p.empty() || p.front() != a) throw Error("positive set must start with the anchor");
      std::vector<Index> sorted = p;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw Error("positive set contains duplicates");
      if (sorted.back() >= batch.items.size()) throw DimError("positive outside the batch");
    }
  return set_loss_core(batch, batch.positives, tau, grads, weight);
}

// ---------------------------------------------------------------------------
// Similar sets
// ---------------------------------------------------------------------------

Real jaccard_similarity(std::span<const Index> a, std::span<const Index> b) {
  std::size_t inter = 0, i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) ++i;
    else if (b[j] < a[i]) ++j;
    else ++inter, ++i, ++j;
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return uni ? static_cast<Real>(inter) / static_cast<Real>(uni) : 0.0;
}

std::vector<std::vector<Index>> intent_tag_sets(const Csr& it_labels,
                                                const std::vector<Index>& assignment,
                                                std::size_t k) {
  std::vector<std::vector<Index>> out(it_labels.rows());
  for (std::size_t j = 0; j < it_labels.rows(); ++j)
    for (Index t : it_labels.row(j))
      if (assignment[t] == k) out[j].push_back(t);
  return out;
}

std::size_t SimilarSets::pair_count(std::size_t k) const {
  std::size_t n = 0;
  for (const auto& s : sets[k]) n += s.size();
  return n / 2;
}

nlohmann::json SimilarSets::to_json(const std::vector<std::string>* item_names) const {
  nlohmann::json intents = nlohmann::json::array();
  for (std::size_t k = 0; k < sets.size(); ++k) {
    nlohmann::json items = nlohmann::json::object();
    for (std::size_t j = 0; j < sets[k].size(); ++j) {
      if (sets[k][j].empty()) continue;
      nlohmann::json members = nlohmann::json::array();
      for (Index o : sets[k][j]) {
        if (item_names) members.push_back(item_names->at(o));
        else members.push_back(o);
      }
      items[item_names ? item_names->at(j) : std::to_string(j)] = members;
    }
    intents.push_back({{"intent", k}, {"pairs", pair_count(k)}, {"similar", items}});
  }
  return {{"delta", delta}, {"intents", intents}};
}

SimilarSets SimilarSets::empty(std::size_t K, std::size_t n_items) {
  SimilarSets s;
  s.sets.assign(K, std::vector<std::vector<Index>>(n_items));
  return s;
}

SimilarSets build_similar_sets(const Csr& it_labels, const std::vector<Index>& assignment,
                               std::size_t K, Real delta) {
  if (!(delta > 0 && delta < 1)) throw ConfigError("delta must lie in (0, 1)");
  const std::size_t n = it_labels.rows();
  const Csr tag_items = it_labels.transpose();
  SimilarSets out = SimilarSets::empty(K, n);
  out.delta = delta;
  std::vector<std::size_t> overlap(n, 0);
  std::vector<Index> touched;
  for (std::size_t k = 0; k < K; ++k) {
    const auto tag_sets = intent_tag_sets(it_labels, assignment, k);
    for (std::size_t j = 0; j < n; ++j) {
      if (tag_sets[j].empty()) continue;
      touched.clear();
      // Only items sharing a tag can exceed a positive threshold.
      for (Index t : tag_sets[j])
        for (Index o : tag_items.row(t))
          if (o > j) {
            if (overlap[o]++ == 0) touched.push_back(o);
          }
      for (Index o : touched) {
        const std::size_t inter = overlap[o];
        overlap[o] = 0;
        const Real s = static_cast<Real>(inter) /
                       static_cast<Real>(tag_sets[j].size() + tag_sets[o].size() - inter);
        if (s > delta) {
          out.sets[k][j].push_back(o);
          out.sets[k][o].push_back(static_cast<Index>(j));
        }
      }
    }
    for (auto& s : out.sets[k]) std::sort(s.begin(), s.end());
  }
  return out;
}

namespace {

// Partial Fisher-Yates: the first m entries become a uniform sample.
void sample_prefix(std::vector<Index>& v, std::size_t m, Rng& rng) {
  m = std::min(m, v.size());
  for (std::size_t i = 0; i < m; ++i) std::swap(v[i], v[i + rng.uniform_index(v.size() - i)]);
  v.resize(m);
}

}  // namespace

std::vector<PositiveSets> sample_positive_sets(const std::vector<Index>& items,
                                               const SimilarSets& similar, std::size_t p_max,
                                               Rng& rng) {
  if (p_max == 0) throw ConfigError("p_max must be at least 1");
  std::unordered_map<Index, Index> pos_of;
  for (std::size_t a = 0; a < items.size(); ++a)
    if (!pos_of.emplace(items[a], static_cast<Index>(a)).second)
      throw Error("alignment batch items must be distinct");
  std::vector<PositiveSets> out(similar.K(), PositiveSets(items.size()));
  std::vector<Index> candidates;
  for (std::size_t k = 0; k < similar.K(); ++k) {
    for (std::size_t a = 0; a < items.size(); ++a) {
      candidates.clear();
      if (p_max > 1)
        for (Index o : similar.of(k, items[a]))
          if (auto it = pos_of.find(o); it != pos_of.end()) candidates.push_back(it->second);
      sample_prefix(candidates, p_max - 1, rng);
      auto& p = out[k][a];
      p.push_back(static_cast<Index>(a));
      p.insert(p.end(), candidates.begin(), candidates.end());
    }
  }
  return out;
}

std::vector<Index> expand_with_similar(std::vector<Index> items, const SimilarSets& similar,
                                       std::size_t p_max, std::size_t cap, Rng& rng) {
  if (p_max <= 1) return items;
  std::unordered_map<Index, char> present;
  for (Index j : items) present.emplace(j, 1);
  const std::size_t base = items.size();
  std::vector<Index> candidates;
  for (std::size_t a = 0; a < base && items.size() < cap; ++a) {
    for (std::size_t k = 0; k < similar.K() && items.size() < cap; ++k) {
      const auto& s = similar.of(k, items[a]);
      candidates.assign(s.begin(), s.end());
      sample_prefix(candidates, p_max - 1, rng);
      for (Index o : candidates) {
        if (items.size() >= cap) break;
        if (present.emplace(o, 1).second) items.push_back(o);
      }
    }
  }
  return items;
}

// ---------------------------------------------------------------------------
// Full forward / backward
// ---------------------------------------------------------------------------

namespace {

struct IntentTrace {
  Matrix user_mean;  // B x c
  Matrix tag_mean;   // B x d
  Matrix tag_hat;    // B x c
  Matrix item_chunk; // B x c
  Matrix fused;      // B x c
  Matrix user_pre;   // B x c, W1 x + b1 (projection only)
  Matrix fused_pre;
  IntentViews out;
};

Matrix leaky(const Matrix& m) { return m.unaryExpr([](Real x) { return leaky_relu(x); }); }

Matrix row_normalize(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Real n = m.row(r).norm();
    if (n > 0) out.row(r) /= n;
    else out.row(r).setZero();
  }
  return out;
}

// Backprop of y = x/|x| row-wise; zero rows pass no gradient.
Matrix row_normalize_backward(const Matrix& x, const Matrix& gy) {
  Matrix gx = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real n = x.row(r).norm();
    if (n == 0) continue;
    const Eigen::RowVectorXd y = x.row(r) / n;
    gx.row(r) = (gy.row(r) - y * y.dot(gy.row(r))) / n;
  }
  return gx;
}

struct Sources {
  const Matrix* user;
  const Matrix* item;
};

Sources sources_for(const Model& model, const AlignmentOptions& options) {
  if (options.propagated && model.backbone == Backbone::LightGcn) {
    const auto& p = model.propagated();
    return {&p.user, &p.item};
  }
  return {&model.params.user, &model.params.item};
}

std::vector<IntentTrace> forward(const Model& model, const AlignmentContext& ctx,
                                 const std::vector<Index>& items,
                                 const AlignmentOptions& options) {
  const std::size_t K = model.dims.K, c = model.dims.chunk();
  const auto B = static_cast<Eigen::Index>(items.size());
  const auto d = static_cast<Eigen::Index>(model.dims.d);
  const auto cc = static_cast<Eigen::Index>(c);
  const Sources src = sources_for(model, options);
  std::vector<IntentTrace> traces(K);
  for (std::size_t k = 0; k < K; ++k) {
    const IntentHead& h = model.params.heads[k];
    IntentTrace& t = traces[k];
    t.user_mean.resize(B, cc);
    t.tag_mean.resize(B, d);
    t.item_chunk.resize(B, cc);
    for (Eigen::Index a = 0; a < B; ++a) {
      const Index j = items[static_cast<std::size_t>(a)];
      t.user_mean.row(a) = aggregate_users(j, *ctx.item_users, *src.user, k, c).transpose();
      t.tag_mean.row(a) =
          aggregate_tags(j, *ctx.it_labels, *ctx.assignment, model.params.tag, k).transpose();
      t.item_chunk.row(a) = src.item->row(j).segment(static_cast<Eigen::Index>(k * c), cc);
    }
    t.tag_hat = t.tag_mean * h.w0.transpose();
    t.tag_hat.rowwise() += h.b0.row(0);
    t.fused = Matrix::Zero(B, cc);
    if (options.use_tags) t.fused += row_normalize(t.tag_hat);
    if (options.use_items) t.fused += row_normalize(t.item_chunk);
    if (options.use_projection) {
      t.user_pre = t.user_mean * h.w1.transpose();
      t.user_pre.rowwise() += h.b1.row(0);
      t.fused_pre = t.fused * h.w1.transpose();
      t.fused_pre.rowwise() += h.b1.row(0);
      t.out.users = leaky(t.user_pre) * h.w2.transpose();
      t.out.fused = leaky(t.fused_pre) * h.w2.transpose();
    } else {
      t.out.users = t.user_mean;
      t.out.fused = t.fused;
    }
  }
  return traces;
}

Matrix gather_relatedness(const Matrix& m, const std::vector<Index>& items) {
  Matrix out(static_cast<Eigen::Index>(items.size()), m.cols());
  for (std::size_t a = 0; a < items.size(); ++a) out.row(static_cast<Eigen::Index>(a)) = m.row(items[a]);
  return out;
}

// Projection-head backward for one side; returns gradient w.r.t. its input.
Matrix projection_backward(const IntentHead& h, IntentHead& gh, const Matrix& input,
                           const Matrix& pre, const Matrix& gout) {
  const Matrix act = leaky(pre);
  gh.w2.noalias() += gout.transpose() * act;
  Matrix gpre = (gout * h.w2).cwiseProduct(pre.unaryExpr([](Real x) { return leaky_relu_grad(x); }));
  gh.w1.noalias() += gpre.transpose() * input;
  gh.b1.noalias() += gpre.colwise().sum();
  return gpre * h.w1;
}

}  // namespace

AlignmentBatch build_alignment_batch(const Model& model, const AlignmentContext& ctx,
                                     const std::vector<Index>& items,
                                     std::vector<PositiveSets> positives,
                                     const AlignmentOptions& options) {
  auto traces = forward(model, ctx, items, options);
  AlignmentBatch batch;
  batch.items = items;
  for (auto& t : traces) batch.intents.push_back(std::move(t.out));
  batch.relatedness = gather_relatedness(*ctx.relatedness, items);
  batch.positives = std::move(positives);
  return batch;
}

Real alignment_loss(const Model& model, const AlignmentContext& ctx,
                    const std::vector<Index>& items, const std::vector<PositiveSets>& positives,
                    const AlignmentOptions& options, ParamSet* grads, Real weight) {
  const std::size_t K = model.dims.K, c = model.dims.chunk();
  auto traces = forward(model, ctx, items, options);
  AlignmentBatch batch;
  batch.items = items;
  for (auto& t : traces) batch.intents.push_back(t.out);
  batch.relatedness = gather_relatedness(*ctx.relatedness, items);
  batch.positives = positives;
  if (!grads) return set_to_set_loss(batch, options.tau);

  std::vector<IntentViews> gviews;
  const Real value = set_to_set_loss(batch, options.tau, &gviews, weight);

  const bool via_prop = options.propagated && model.backbone == Backbone::LightGcn;
  Matrix g_user_prop, g_item_prop;
  if (via_prop) {
    g_user_prop = Matrix::Zero(model.params.user.rows(), model.params.user.cols());
    g_item_prop = Matrix::Zero(model.params.item.rows(), model.params.item.cols());
  }
  Matrix& g_user = via_prop ? g_user_prop : grads->user;
  Matrix& g_item = via_prop ? g_item_prop : grads->item;
  const auto cc = static_cast<Eigen::Index>(c);

  for (std::size_t k = 0; k < K; ++k) {
    const IntentHead& h = model.params.heads[k];
    IntentHead& gh = grads->heads[k];
    const IntentTrace& t = traces[k];
    Matrix g_user_mean, g_fused;
    if (options.use_projection) {
      g_user_mean = projection_backward(h, gh, t.user_mean, t.user_pre, gviews[k].users);
      g_fused = projection_backward(h, gh, t.fused, t.fused_pre, gviews[k].fused);
    } else {
      g_user_mean = gviews[k].users;
      g_fused = gviews[k].fused;
    }
    const auto off = static_cast<Eigen::Index>(k * c);
    if (options.use_items) {
      const Matrix g_chunk = row_normalize_backward(t.item_chunk, g_fused);
      for (std::size_t a = 0; a < items.size(); ++a)
        g_item.row(items[a]).segment(off, cc) += g_chunk.row(static_cast<Eigen::Index>(a));
    }
    if (options.use_tags) {
      const Matrix g_hat = row_normalize_backward(t.tag_hat, g_fused);
      gh.w0.noalias() += g_hat.transpose() * t.tag_mean;
      gh.b0.noalias() += g_hat.colwise().sum();
      const Matrix g_tag_mean = g_hat * h.w0;
      for (std::size_t a = 0; a < items.size(); ++a) {
        std::size_t n = 0;
        for (Index tg : ctx.it_labels->row(items[a])) n += (*ctx.assignment)[tg] == k;
        if (!n) continue;
        const Eigen::RowVectorXd share = g_tag_mean.row(static_cast<Eigen::Index>(a)) / static_cast<Real>(n);
        for (Index tg : ctx.it_labels->row(items[a]))
          if ((*ctx.assignment)[tg] == k) grads->tag.row(tg) += share;
      }
    }
    for (std::size_t a = 0; a < items.size(); ++a) {
      auto users = ctx.item_users->row(items[a]);
      if (users.empty()) continue;
      const Eigen::RowVectorXd share = g_user_mean.row(static_cast<Eigen::Index>(a)) / static_cast<Real>(users.size());
      for (Index u : users) g_user.row(u).segment(off, cc) += share;
    }
  }
  if (via_prop) model.backprop_propagation(g_user_prop, g_item_prop, *grads);
  return value;
}

}  // namespace imcat
