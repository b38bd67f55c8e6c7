#include "imcat/independence.hpp"

#include <cmath>

namespace imcat {

namespace {

Matrix abs_diff(const Vector& x) {
  const auto n = x.size();
  Matrix a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = std::abs(x(i) - x(j));
  return a;
}

Matrix double_center(const Matrix& a) {
  const Eigen::VectorXd row_mean = a.rowwise().mean();
  const Eigen::RowVectorXd col_mean = a.colwise().mean();
  const Real grand = a.mean();
  Matrix c = a;
  c.colwise() -= row_mean;
  c.rowwise() -= col_mean;
  c.array() += grand;
  return c;
}

// d/dx_i of sum_ij G_ij |x_i - x_j| for symmetric G.
Vector pull_back(const Vector& x, const Matrix& g) {
  Vector out = Vector::Zero(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i)
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      const Real diff = x(i) - x(j);
      if (diff != 0) out(i) += 2.0 * g(i, j) * (diff > 0 ? 1.0 : -1.0);
    }
  return out;
}

}  // namespace

Real distance_correlation(const Eigen::Ref<const Vector>& a_in, const Eigen::Ref<const Vector>& b_in,
                          Vector* grad_a, Vector* grad_b, Real weight) {
  if (a_in.size() != b_in.size()) throw DimError("distance_correlation length mismatch");
  const Vector a = a_in, b = b_in;
  const Real n2 = static_cast<Real>(a.size()) * static_cast<Real>(a.size());
  const Matrix A = double_center(abs_diff(a));
  const Matrix B = double_center(abs_diff(b));
  const Real s_ab = (A.array() * B.array()).sum() / n2;
  const Real s_aa = A.squaredNorm() / n2;
  const Real s_bb = B.squaredNorm() / n2;
  if (!(s_aa > 0 && s_bb > 0)) return 0.0;
  const Real root = std::sqrt(s_aa * s_bb);
  const Real r = std::max<Real>(0.0, s_ab / root);
  const Real dcor = std::sqrt(r);
  if ((grad_a || grad_b) && r > 0) {
    const Real d_r = weight / (2.0 * dcor);
    // dR/dS_ab = 1/root, dR/dS_aa = -R/(2 S_aa), dR/dS_bb = -R/(2 S_bb)
    if (grad_a) {
      const Matrix g = d_r * (B / root - (r / s_aa) * A) / n2;
      *grad_a += pull_back(a, g);
    }
    if (grad_b) {
      const Matrix g = d_r * (A / root - (r / s_bb) * B) / n2;
      *grad_b += pull_back(b, g);
    }
  }
  return dcor;
}

Real independence_penalty(const Matrix& centers, Matrix* grad, Real weight) {
  const Eigen::Index K = centers.rows();
  if (K < 2) return 0.0;
  const Real pairs = static_cast<Real>(K * (K - 1) / 2);
  Real total = 0;
  for (Eigen::Index a = 0; a < K; ++a)
    for (Eigen::Index b = a + 1; b < K; ++b) {
      if (grad) {
        Vector ga = Vector::Zero(centers.cols()), gb = Vector::Zero(centers.cols());
        total += distance_correlation(centers.row(a).transpose(), centers.row(b).transpose(), &ga,
                                      &gb, weight / pairs);
        grad->row(a) += ga.transpose();
        grad->row(b) += gb.transpose();
      } else {
        total += distance_correlation(centers.row(a).transpose(), centers.row(b).transpose());
      }
    }
  return total / pairs;
}

Real chunk_independence_penalty(const Matrix& table, std::span<const Index> rows, std::size_t K,
                                Matrix* grad, Real weight) {
  if (K < 2 || rows.empty()) return 0.0;
  const auto c = table.cols() / static_cast<Eigen::Index>(K);
  const Real denom = static_cast<Real>(rows.size() * K * (K - 1) / 2);
  Real total = 0;
  for (Index r : rows) {
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = a + 1; b < K; ++b) {
        const auto oa = static_cast<Eigen::Index>(a) * c, ob = static_cast<Eigen::Index>(b) * c;
        const Vector va = table.row(r).segment(oa, c).transpose();
        const Vector vb = table.row(r).segment(ob, c).transpose();
        if (grad) {
          Vector ga = Vector::Zero(c), gb = Vector::Zero(c);
          total += distance_correlation(va, vb, &ga, &gb, weight / denom);
          grad->row(r).segment(oa, c) += ga.transpose();
          grad->row(r).segment(ob, c) += gb.transpose();
        } else {
          total += distance_correlation(va, vb);
        }
      }
  }
  return total / denom;
}

}  // namespace imcat
