#include "imcat/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace imcat {

namespace {

// Squared distances, n x K.
Matrix squared_distances(const Matrix& points, const Matrix& centers) {
  Matrix d2(points.rows(), centers.rows());
  for (Eigen::Index l = 0; l < points.rows(); ++l)
    for (Eigen::Index k = 0; k < centers.rows(); ++k)
      d2(l, k) = (points.row(l) - centers.row(k)).squaredNorm();
  return d2;
}

}  // namespace

Matrix soft_assign(const Matrix& tags, const Matrix& centers, Real eta) {
  if (!(eta > 0)) throw Error("soft_assign requires eta > 0");
  const Matrix d2 = squared_distances(tags, centers);
  const Real power = -(eta + 1.0) / 2.0;
  Matrix q(d2.rows(), d2.cols());
  for (Eigen::Index l = 0; l < q.rows(); ++l) {
    // Log-domain normalization keeps rows valid when every kernel underflows.
    for (Eigen::Index k = 0; k < q.cols(); ++k) q(l, k) = power * std::log1p(d2(l, k) / eta);
    const Real mx = q.row(l).maxCoeff();
    // std::exp underflows to exactly 0; Eigen's vectorized exp clamps instead.
    for (Eigen::Index k = 0; k < q.cols(); ++k) q(l, k) = std::exp(q(l, k) - mx);
    q.row(l) /= q.row(l).sum();
  }
  return q;
}

Matrix target_distribution(const Matrix& q) {
  const Eigen::RowVectorXd f = q.colwise().sum();
  for (Eigen::Index k = 0; k < f.size(); ++k)
    if (!(f(k) > 0)) throw DegenerateCluster("cluster " + std::to_string(k) + " is empty");
  Matrix t(q.rows(), q.cols());
  for (Eigen::Index l = 0; l < q.rows(); ++l) {
    t.row(l) = q.row(l).array().square() / f.array();
    t.row(l) /= t.row(l).sum();
  }
  return t;
}

Real kl_divergence(const Matrix& target, const Matrix& q) {
  if (target.rows() != q.rows() || target.cols() != q.cols())
    throw DimError("kl_divergence shape mismatch");
  Real total = 0;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    const Real p = target.data()[i];
    if (p > 0) total += p * (std::log(std::max(p, kLogClamp)) - std::log(std::max(q.data()[i], kLogClamp)));
  }
  return total;
}

Real kl_loss(const Matrix& target, const Matrix& tags, const Matrix& centers, Real eta,
             Matrix* grad_tags, Matrix* grad_centers, Real weight) {
  const Matrix q = soft_assign(tags, centers, eta);
  const Real value = kl_divergence(target, q);
  if (grad_tags || grad_centers) {
    const Real scale = weight * (eta + 1.0) / eta;
    for (Eigen::Index l = 0; l < tags.rows(); ++l) {
      for (Eigen::Index k = 0; k < centers.rows(); ++k) {
        const Eigen::RowVectorXd diff = tags.row(l) - centers.row(k);
        const Real coef = scale * (target(l, k) - q(l, k)) / (1.0 + diff.squaredNorm() / eta);
        if (grad_tags) grad_tags->row(l) += coef * diff;
        if (grad_centers) grad_centers->row(k) -= coef * diff;
      }
    }
  }
  return value;
}

std::vector<Index> hard_assign(const Matrix& q) {
  std::vector<Index> out(static_cast<std::size_t>(q.rows()), 0);
  for (Eigen::Index l = 0; l < q.rows(); ++l) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < q.cols(); ++k)
      if (q(l, k) > q(l, best)) best = k;
    out[static_cast<std::size_t>(l)] = static_cast<Index>(best);
  }
  return out;
}

std::vector<std::size_t> cluster_counts(std::span<const Index> item_tags,
                                        const std::vector<Index>& assignment, std::size_t K) {
  std::vector<std::size_t> counts(K, 0);
  for (Index t : item_tags) ++counts.at(assignment.at(t));
  return counts;
}

Matrix relatedness_matrix(const Csr& it_labels, const std::vector<Index>& assignment,
                          std::size_t K) {
  if (assignment.size() != it_labels.cols()) throw DimError("assignment size != tag count");
  Matrix m(static_cast<Eigen::Index>(it_labels.rows()), static_cast<Eigen::Index>(K));
  for (std::size_t j = 0; j < it_labels.rows(); ++j) {
    auto counts = cluster_counts(it_labels.row(j), assignment, K);
    const auto mx = static_cast<Real>(*std::max_element(counts.begin(), counts.end()));
    Real sum = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const Real e = std::exp(static_cast<Real>(counts[k]) - mx);
      m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = e;
      sum += e;
    }
    m.row(static_cast<Eigen::Index>(j)) /= sum;
  }
  return m;
}

Matrix kmeanspp_init(const Matrix& points, std::size_t K, Rng& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n == 0 || K == 0) throw DimError("kmeans++ needs points and K > 0");
  Matrix centers(static_cast<Eigen::Index>(K), points.cols());
  centers.row(0) = points.row(static_cast<Eigen::Index>(rng.uniform_index(n)));
  std::vector<Real> best(n, std::numeric_limits<Real>::infinity());
  for (std::size_t k = 1; k < K; ++k) {
    Real total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      best[i] = std::min(best[i], (points.row(ii) - centers.row(static_cast<Eigen::Index>(k - 1))).squaredNorm());
      total += best[i];
    }
    std::size_t pick = n - 1;
    if (total > 0) {
      Real r = rng.uniform01() * total;
      for (std::size_t i = 0; i < n; ++i) {
        r -= best[i];
        if (r < 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_index(n);
    }
    centers.row(static_cast<Eigen::Index>(k)) = points.row(static_cast<Eigen::Index>(pick));
  }
  // One Lloyd assignment pass; an empty cluster keeps its seed point.
  const auto assign = hard_assign(-squared_distances(points, centers));
  Matrix sums = Matrix::Zero(centers.rows(), centers.cols());
  std::vector<std::size_t> counts(K, 0);
  for (std::size_t i = 0; i < n; ++i) {
    sums.row(assign[i]) += points.row(static_cast<Eigen::Index>(i));
    ++counts[assign[i]];
  }
  for (std::size_t k = 0; k < K; ++k)
    if (counts[k]) centers.row(static_cast<Eigen::Index>(k)) = sums.row(static_cast<Eigen::Index>(k)) / static_cast<Real>(counts[k]);
  return centers;
}

ClusterState refresh_clusters(const Matrix& tags, Matrix& centers, const Csr& it_labels,
                              Real eta) {
  ClusterState s;
  s.eta = eta;
  const auto K = static_cast<std::size_t>(centers.rows());
  for (std::size_t attempt = 0;; ++attempt) {
    s.q = soft_assign(tags, centers, eta);
    const Eigen::RowVectorXd f = s.q.colwise().sum();
    Eigen::Index empty = -1;
    for (Eigen::Index k = 0; k < f.size() && empty < 0; ++k)
      if (!(f(k) > 0)) empty = k;
    if (empty < 0) break;
    if (attempt >= K) throw DegenerateCluster("could not revive empty clusters");
    const auto assign = hard_assign(s.q);
    Eigen::Index far = 0;
    Real far_d = -1;
    for (Eigen::Index l = 0; l < tags.rows(); ++l) {
      const Real d = (tags.row(l) - centers.row(assign[static_cast<std::size_t>(l)])).squaredNorm();
      if (d > far_d) far_d = d, far = l;
    }
    centers.row(empty) = tags.row(far);
    ++s.recoveries;
    log_warn("cluster " + std::to_string(empty) + " was empty; center moved to tag " +
             std::to_string(far));
  }
  s.target = target_distribution(s.q);
  s.assignment = hard_assign(s.q);
  s.relatedness = relatedness_matrix(it_labels, s.assignment, K);
  return s;
}

nlohmann::json cluster_membership_json(const std::vector<Index>& assignment, std::size_t K,
                                       const std::vector<std::string>* tag_names) {
  nlohmann::json clusters = nlohmann::json::array();
  for (std::size_t k = 0; k < K; ++k) {
    nlohmann::json members = nlohmann::json::array();
    for (std::size_t l = 0; l < assignment.size(); ++l)
      if (assignment[l] == k) {
        if (tag_names) members.push_back(tag_names->at(l));
        else members.push_back(l);
      }
    clusters.push_back({{"cluster", k}, {"count", members.size()}, {"tags", members}});
  }
  return {{"K", K}, {"n_tags", assignment.size()}, {"clusters", clusters}};
}

bool rows_stochastic(const Matrix& m, Real tol) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (std::abs(m.row(r).sum() - 1.0) > tol) return false;
    if ((m.row(r).array() < 0).any() || (m.row(r).array() > 1).any()) return false;
  }
  return true;
}

}  // namespace imcat
