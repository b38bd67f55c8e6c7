#include "imcat/model.hpp"

#include <cmath>

namespace imcat {

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::BprMf: return "bprmf";
    case Backbone::NeuMf: return "neumf";
    case Backbone::LightGcn: return "lightgcn";
  }
  return "unknown";
}

Backbone parse_backbone(std::string_view name) {
  if (name == "bprmf") return Backbone::BprMf;
  if (name == "neumf") return Backbone::NeuMf;
  if (name == "lightgcn") return Backbone::LightGcn;
  throw ConfigError("unknown backbone '" + std::string(name) + "'");
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z = *this;
  z.set_zero();
  return z;
}

void ParamSet::set_zero() {
  visit([](const std::string&, Matrix& m, bool) { m.setZero(); });
}

void ParamSet::axpy(Real a, const ParamSet& x) {
  std::vector<const Matrix*> src;
  x.visit([&](const std::string&, const Matrix& m, bool) { src.push_back(&m); });
  std::size_t i = 0;
  visit([&](const std::string&, Matrix& m, bool) { m.noalias() += a * *src[i++]; });
}

std::size_t ParamSet::size() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Matrix& m, bool) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

bool ParamSet::all_finite() const {
  bool ok = true;
  visit([&](const std::string&, const Matrix& m, bool) { ok = ok && m.allFinite(); });
  return ok;
}

bool ParamSet::operator==(const ParamSet& other) const {
  std::vector<const Matrix*> mine, theirs;
  visit([&](const std::string&, const Matrix& m, bool) { mine.push_back(&m); });
  other.visit([&](const std::string&, const Matrix& m, bool) { theirs.push_back(&m); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i]->rows() != theirs[i]->rows() || mine[i]->cols() != theirs[i]->cols()) return false;
    if (*mine[i] != *theirs[i]) return false;
  }
  return true;
}

Real softplus_neg(Real x) {
  // -log sigmoid(x) = softplus(-x)
  return x < 0 ? -x + std::log1p(std::exp(x)) : std::log1p(std::exp(-x));
}

Real sigmoid(Real x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

WeightedCsr normalized_adjacency(const Csr& ui) {
  const std::size_t nu = ui.rows(), ni = ui.cols();
  WeightedCsr a;
  a.n = nu + ni;
  std::vector<Real> deg(a.n, 0.0);
  for (std::size_t u = 0; u < nu; ++u) {
    deg[u] = static_cast<Real>(ui.degree(u));
    for (Index i : ui.row(u)) deg[nu + i] += 1.0;
  }
  const Csr iu = ui.transpose();
  a.row_ptr.assign(a.n + 1, 0);
  a.col_idx.reserve(2 * ui.nnz());
  a.values.reserve(2 * ui.nnz());
  for (std::size_t u = 0; u < nu; ++u) {
    for (Index i : ui.row(u)) {
      a.col_idx.push_back(static_cast<Index>(nu + i));
      a.values.push_back(1.0 / std::sqrt(deg[u] * deg[nu + i]));
    }
    a.row_ptr[u + 1] = a.col_idx.size();
  }
  for (std::size_t i = 0; i < ni; ++i) {
    for (Index u : iu.row(i)) {
      a.col_idx.push_back(u);
      a.values.push_back(1.0 / std::sqrt(deg[u] * deg[nu + i]));
    }
    a.row_ptr[nu + i + 1] = a.col_idx.size();
  }
  return a;
}

namespace {

Matrix stack(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out << top, bottom;
  return out;
}

// mean_l A^l x for l = 0..n_layers
Matrix propagate_mean(const WeightedCsr& a, const Matrix& x, int n_layers) {
  Matrix sum = x;
  Matrix layer = x, next;
  for (int l = 0; l < n_layers; ++l) {
    a.multiply(layer, next);
    sum += next;
    layer.swap(next);
  }
  return sum / static_cast<Real>(n_layers + 1);
}

}  // namespace

PropagatedTables lightgcn_propagate(const Matrix& user, const Matrix& item,
                                    const WeightedCsr& adjacency, int n_layers) {
  if (adjacency.n != static_cast<std::size_t>(user.rows() + item.rows()))
    throw DimError("adjacency size does not match embedding tables");
  Matrix mean = propagate_mean(adjacency, stack(user, item), n_layers);
  return {mean.topRows(user.rows()), mean.bottomRows(item.rows())};
}

void Model::set_graph(const Csr& ui_train) {
  if (ui_train.rows() != dims.n_users || ui_train.cols() != dims.n_items)
    throw DimError("graph shape does not match model");
  adjacency_ = normalized_adjacency(ui_train);
  ++graph_version_;
}

void Model::propagate() {
  if (!has_graph()) throw StaleCache("LightGCN graph not installed");
  cache_ = lightgcn_propagate(params.user, params.item, adjacency_, gcn_layers);
  cache_version_ = graph_version_;
}

bool Model::cache_fresh() const { return has_graph() && cache_version_ == graph_version_; }

const PropagatedTables& Model::propagated() const {
  if (!cache_fresh()) throw StaleCache("propagation cache is stale; call propagate()");
  return cache_;
}

void Model::backprop_propagation(const Matrix& g_user_prop, const Matrix& g_item_prop,
                                 ParamSet& grads, Real scale) const {
  Matrix g = propagate_mean(adjacency_, stack(g_user_prop, g_item_prop), gcn_layers);
  grads.user.noalias() += scale * g.topRows(g_user_prop.rows());
  grads.item.noalias() += scale * g.bottomRows(g_item_prop.rows());
}

void xavier_fill(ParamSet& params, Rng& rng) {
  params.visit([&](const std::string&, Matrix& m, bool is_weight) {
    if (!is_weight) {
      m.setZero();
      return;
    }
    const Real bound = std::sqrt(6.0 / static_cast<Real>(m.rows() + m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  });
}

Model init_parameters(const ModelDims& dims, Backbone backbone, std::uint64_t seed) {
  if (dims.K == 0 || dims.d == 0 || dims.d % dims.K != 0)
    throw DimError("intent count K=" + std::to_string(dims.K) + " must divide d=" +
                   std::to_string(dims.d));
  if (backbone == Backbone::NeuMf && dims.d % 2 != 0)
    throw DimError("NeuMF scorer needs an even embedding size");
  const auto d = static_cast<Eigen::Index>(dims.d);
  const auto c = static_cast<Eigen::Index>(dims.chunk());
  Model m;
  m.dims = dims;
  m.backbone = backbone;
  ParamSet& p = m.params;
  p.user = Matrix::Zero(static_cast<Eigen::Index>(dims.n_users), d);
  p.item = Matrix::Zero(static_cast<Eigen::Index>(dims.n_items), d);
  p.tag = Matrix::Zero(static_cast<Eigen::Index>(dims.n_tags), d);
  p.centers = Matrix::Zero(static_cast<Eigen::Index>(dims.K), d);
  p.heads.resize(dims.K);
  for (auto& h : p.heads) {
    h.w0 = Matrix::Zero(c, d);
    h.b0 = Matrix::Zero(1, c);
    h.w1 = Matrix::Zero(c, c);
    h.b1 = Matrix::Zero(1, c);
    h.w2 = Matrix::Zero(c, c);
  }
  if (backbone == Backbone::NeuMf) {
    // concat(u, v) -> d -> d/2 -> 1
    p.mlp = {{Matrix::Zero(d, 2 * d), Matrix::Zero(1, d)},
             {Matrix::Zero(d / 2, d), Matrix::Zero(1, d / 2)},
             {Matrix::Zero(1, d / 2), Matrix::Zero(1, 1)}};
  }
  Rng rng(seed);
  xavier_fill(p, rng);
  return m;
}

Real neumf_forward(const std::vector<DenseLayer>& mlp, const Eigen::Ref<const Vector>& user,
                   const Eigen::Ref<const Vector>& item) {
  Vector h(user.size() + item.size());
  h << user, item;
  for (std::size_t l = 0; l < mlp.size(); ++l) {
    Vector a = mlp[l].w * h + mlp[l].b.transpose();
    if (l + 1 < mlp.size()) a = a.unaryExpr([](Real x) { return leaky_relu(x); });
    h = std::move(a);
  }
  return h(0);
}

namespace {

struct NeuMfTrace {
  std::vector<Vector> inputs;       // input of each layer
  std::vector<Vector> activations;  // pre-activation of each layer
};

Real neumf_trace(const std::vector<DenseLayer>& mlp, const Vector& h0, NeuMfTrace& tr) {
  tr.inputs.clear();
  tr.activations.clear();
  Vector h = h0;
  for (std::size_t l = 0; l < mlp.size(); ++l) {
    tr.inputs.push_back(h);
    Vector a = mlp[l].w * h + mlp[l].b.transpose();
    tr.activations.push_back(a);
    h = (l + 1 < mlp.size()) ? Vector(a.unaryExpr([](Real x) { return leaky_relu(x); })) : a;
  }
  return h(0);
}

// Backpropagates d(out) = g through the tower; returns gradient w.r.t. input.
Vector neumf_backward(const std::vector<DenseLayer>& mlp, const NeuMfTrace& tr, Real g,
                      std::vector<DenseLayer>* gmlp, Real weight) {
  Vector grad = Vector::Constant(1, g);
  for (std::size_t l = mlp.size(); l-- > 0;) {
    if (l + 1 < mlp.size())
      grad = grad.cwiseProduct(tr.activations[l].unaryExpr([](Real x) { return leaky_relu_grad(x); }));
    if (gmlp) {
      (*gmlp)[l].w.noalias() += weight * grad * tr.inputs[l].transpose();
      (*gmlp)[l].b.noalias() += weight * grad.transpose();
    }
    grad = mlp[l].w.transpose() * grad;
  }
  return grad;
}

}  // namespace

Real score(const Model& model, Index user, Index item) {
  switch (model.backbone) {
    case Backbone::BprMf: return model.params.user.row(user).dot(model.params.item.row(item));
    case Backbone::NeuMf:
      return neumf_forward(model.params.mlp, model.params.user.row(user).transpose(),
                           model.params.item.row(item).transpose());
    case Backbone::LightGcn: {
      const auto& p = model.propagated();
      return p.user.row(user).dot(p.item.row(item));
    }
  }
  return 0;
}

Vector score_all_items(const Model& model, Index user) {
  switch (model.backbone) {
    case Backbone::BprMf: return model.params.item * model.params.user.row(user).transpose();
    case Backbone::LightGcn: {
      const auto& p = model.propagated();
      return p.item * p.user.row(user).transpose();
    }
    case Backbone::NeuMf: {
      // The first layer splits into a per-user and a per-item part.
      const auto& mlp = model.params.mlp;
      const auto d = model.params.user.cols();
      const Vector user_part = mlp[0].w.leftCols(d) * model.params.user.row(user).transpose() +
                               mlp[0].b.transpose();
      const Matrix item_part = model.params.item * mlp[0].w.rightCols(d).transpose();
      Vector out(model.params.item.rows());
      for (Eigen::Index i = 0; i < out.size(); ++i) {
        Vector h = (user_part + item_part.row(i).transpose()).unaryExpr(
            [](Real x) { return leaky_relu(x); });
        for (std::size_t l = 1; l < mlp.size(); ++l) {
          Vector a = mlp[l].w * h + mlp[l].b.transpose();
          h = (l + 1 < mlp.size()) ? Vector(a.unaryExpr([](Real x) { return leaky_relu(x); })) : a;
        }
        out(i) = h(0);
      }
      return out;
    }
  }
  return {};
}

Real bpr_loss(const Model& model, std::span<const BprTriplet> batch, SampleMode mode,
              ParamSet* grads, Real weight) {
  if (batch.empty()) throw Error("bpr_loss on an empty batch");
  const Real inv_n = 1.0 / static_cast<Real>(batch.size());
  const ParamSet& p = model.params;
  Real total = 0;

  if (mode == SampleMode::ItemTag || model.backbone == Backbone::BprMf) {
    const Matrix& anchors = mode == SampleMode::ItemTag ? p.item : p.user;
    const Matrix& targets = mode == SampleMode::ItemTag ? p.tag : p.item;
    Matrix* g_anchor = grads ? (mode == SampleMode::ItemTag ? &grads->item : &grads->user) : nullptr;
    Matrix* g_target = grads ? (mode == SampleMode::ItemTag ? &grads->tag : &grads->item) : nullptr;
    for (const auto& t : batch) {
      const Real diff = anchors.row(t.anchor).dot(targets.row(t.positive) - targets.row(t.negative));
      total += softplus_neg(diff);
      if (grads) {
        const Real g = -sigmoid(-diff) * inv_n * weight;
        g_anchor->row(t.anchor) += g * (targets.row(t.positive) - targets.row(t.negative));
        g_target->row(t.positive) += g * anchors.row(t.anchor);
        g_target->row(t.negative) -= g * anchors.row(t.anchor);
      }
    }
    return total * inv_n;
  }

  if (model.backbone == Backbone::LightGcn) {
    const auto& prop = model.propagated();
    Matrix gu, gi;
    if (grads) {
      gu = Matrix::Zero(prop.user.rows(), prop.user.cols());
      gi = Matrix::Zero(prop.item.rows(), prop.item.cols());
    }
    for (const auto& t : batch) {
      const Real diff =
          prop.user.row(t.anchor).dot(prop.item.row(t.positive) - prop.item.row(t.negative));
      total += softplus_neg(diff);
      if (grads) {
        const Real g = -sigmoid(-diff) * inv_n;
        gu.row(t.anchor) += g * (prop.item.row(t.positive) - prop.item.row(t.negative));
        gi.row(t.positive) += g * prop.user.row(t.anchor);
        gi.row(t.negative) -= g * prop.user.row(t.anchor);
      }
    }
    if (grads) model.backprop_propagation(gu, gi, *grads, weight);
    return total * inv_n;
  }

  // NeuMF
  const auto d = p.user.cols();
  NeuMfTrace pos_tr, neg_tr;
  Vector h0(2 * d);
  for (const auto& t : batch) {
    h0 << p.user.row(t.anchor).transpose(), p.item.row(t.positive).transpose();
    const Real s_pos = neumf_trace(p.mlp, h0, pos_tr);
    h0 << p.user.row(t.anchor).transpose(), p.item.row(t.negative).transpose();
    const Real s_neg = neumf_trace(p.mlp, h0, neg_tr);
    const Real diff = s_pos - s_neg;
    total += softplus_neg(diff);
    if (grads) {
      const Real g = -sigmoid(-diff) * inv_n;
      Vector gin_pos = neumf_backward(p.mlp, pos_tr, g, &grads->mlp, weight);
      Vector gin_neg = neumf_backward(p.mlp, neg_tr, -g, &grads->mlp, weight);
      grads->user.row(t.anchor) += weight * (gin_pos.head(d) + gin_neg.head(d)).transpose();
      grads->item.row(t.positive) += weight * gin_pos.tail(d).transpose();
      grads->item.row(t.negative) += weight * gin_neg.tail(d).transpose();
    }
  }
  return total * inv_n;
}

}  // namespace imcat
