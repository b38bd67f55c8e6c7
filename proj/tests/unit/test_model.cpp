#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "imcat/checkpoint.hpp"
#include "imcat/independence.hpp"
#include "imcat/model.hpp"
#include "imcat/optimizer.hpp"
#include "imcat/trainer.hpp"
#include "test_support.hpp"

using namespace imcat;
using imcat::testing::TempDir;

namespace {

Model tiny_model(Backbone b = Backbone::BprMf) {
  return init_parameters({3, 4, 2, 4, 2}, b, 7);
}

}  // namespace

TEST_CASE("softplus is stable at the extremes") {
  CHECK(softplus_neg(20.0) == doctest::Approx(2.061153620314381e-09).epsilon(1e-12));
  CHECK(softplus_neg(-800.0) == doctest::Approx(800.0));
  CHECK(std::isfinite(softplus_neg(800.0)));
  CHECK(softplus_neg(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(0.0) == 0.5);
}

TEST_CASE("BPR loss of a single hand-computed triplet") {
  Model m = tiny_model();
  m.params.user.setZero();
  m.params.item.setZero();
  m.params.user(0, 0) = 1;
  m.params.item(1, 0) = 2;
  m.params.item(2, 1) = 1;
  const BprTriplet t{0, 1, 2};
  ParamSet g = m.params.zeros_like();
  const Real loss = bpr_loss(m, std::span(&t, 1), SampleMode::UserItem, &g);
  CHECK(loss == doctest::Approx(0.1269280110429725).epsilon(1e-12));
  // d/dx softplus(-x) at x = 2 is -sigmoid(-2)
  const Real s = -sigmoid(-2.0);
  CHECK(g.item(1, 0) == doctest::Approx(s * 1.0));
  CHECK(g.user(0, 0) == doctest::Approx(s * 2.0));
  CHECK(g.user(0, 1) == doctest::Approx(-s * 1.0));
}

TEST_CASE("init rejects K that does not divide d") {
  CHECK_THROWS_AS(init_parameters({3, 3, 3, 64, 5}, Backbone::BprMf, 1), DimError);
  CHECK_THROWS_AS(init_parameters({3, 3, 3, 64, 0}, Backbone::BprMf, 1), DimError);
  CHECK_NOTHROW(init_parameters({3, 3, 3, 64, 16}, Backbone::BprMf, 1));
}

TEST_CASE("init shapes and Xavier bounds") {
  const Model m = init_parameters({5, 6, 7, 8, 2}, Backbone::NeuMf, 3);
  CHECK(m.params.user.rows() == 5);
  CHECK(m.params.tag.cols() == 8);
  CHECK(m.params.heads.size() == 2);
  CHECK(m.params.heads[0].w0.rows() == 4);
  CHECK(m.params.heads[0].w0.cols() == 8);
  REQUIRE(m.params.mlp.size() == 3);
  CHECK(m.params.mlp[0].w.cols() == 16);
  CHECK(m.params.mlp[2].w.rows() == 1);
  const Real bound = std::sqrt(6.0 / (5 + 8));
  CHECK(m.params.user.cwiseAbs().maxCoeff() <= bound);
  CHECK(m.params.heads[1].b0.isZero());
  CHECK(init_parameters({5, 6, 7, 8, 2}, Backbone::NeuMf, 3).params == m.params);
}

TEST_CASE("LightGCN propagation matches a dense brute force") {
  const Csr ui = Csr::from_pairs(3, 4, {{0, 0}, {0, 1}, {1, 1}, {1, 2}, {2, 3}, {2, 0}});
  Model m = init_parameters({3, 4, 2, 4, 2}, Backbone::LightGcn, 9);
  m.gcn_layers = 3;
  CHECK_THROWS_AS(m.propagated(), StaleCache);
  m.set_graph(ui);
  m.propagate();

  Matrix A = Matrix::Zero(7, 7);
  std::vector<Real> deg(7, 0);
  for (auto [u, i] : ui.pairs()) {
    deg[u] += 1;
    deg[3 + i] += 1;
  }
  for (auto [u, i] : ui.pairs()) {
    A(u, 3 + i) = A(3 + i, u) = 1.0 / std::sqrt(deg[u] * deg[3 + i]);
  }
  Matrix X(7, 4);
  X << m.params.user, m.params.item;
  Matrix sum = X, layer = X;
  for (int l = 0; l < 3; ++l) {
    layer = A * layer;
    sum += layer;
  }
  sum /= 4.0;
  CHECK((m.propagated().user - sum.topRows(3)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((m.propagated().item - sum.bottomRows(4)).cwiseAbs().maxCoeff() < 1e-12);

  m.set_graph(ui);
  CHECK_FALSE(m.cache_fresh());
}

TEST_CASE("score_all_items agrees with score") {
  for (Backbone b : {Backbone::BprMf, Backbone::NeuMf, Backbone::LightGcn}) {
    Model m = tiny_model(b);
    if (b == Backbone::LightGcn) {
      m.set_graph(Csr::from_pairs(3, 4, {{0, 0}, {1, 1}, {2, 2}, {2, 3}}));
      m.propagate();
    }
    const Vector all = score_all_items(m, 1);
    for (Index i = 0; i < 4; ++i) CHECK(all(i) == doctest::Approx(score(m, 1, i)).epsilon(1e-12));
  }
}

TEST_CASE("BPR gradients match finite differences for every backbone") {
  for (Backbone b : {Backbone::BprMf, Backbone::NeuMf, Backbone::LightGcn}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      CAPTURE(to_string(b));
      CAPTURE(seed);
      auto inst = make_grad_check_instance(seed, b);
      CHECK(grad_check(inst, LossSelector::UV).max_rel_error < 1e-4);
      CHECK(grad_check(inst, LossSelector::VT).max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("Adam first step and decoupled decay") {
  Model m = init_parameters({1, 1, 1, 2, 1}, Backbone::BprMf, 1);
  m.params.user.setConstant(1.0);
  ParamSet g = m.params.zeros_like();
  g.user.setConstant(0.5);
  AdamState st = AdamState::for_params(m.params);
  adam_step(m.params, g, st, {1e-3, 0.9, 0.999, 1e-8, 0.0});
  CHECK(st.t == 1);
  CHECK(m.params.user(0, 0) == doctest::Approx(0.99900000002).epsilon(1e-12));

  // zero gradient: weights shrink by (1 - lr wd), biases do not
  Model d = init_parameters({1, 1, 1, 2, 1}, Backbone::BprMf, 1);
  d.params.user.setConstant(1.0);
  d.params.heads[0].b0.setConstant(1.0);
  AdamState st2 = AdamState::for_params(d.params);
  adam_step(d.params, d.params.zeros_like(), st2, {1e-3, 0.9, 0.999, 1e-8, 1e-3});
  CHECK(d.params.user(0, 0) == doctest::Approx(1.0 - 1e-6).epsilon(1e-15));
  CHECK(d.params.heads[0].b0(0, 0) == 1.0);
}

TEST_CASE("distance correlation brute force") {
  Vector a(5), b(5);
  a << 1, 2, 3, 4, 5;
  b << 2, -1, 4, 0, 3;
  auto dcov2 = [](const Vector& x, const Vector& y) {
    const auto n = x.size();
    auto centred = [n](const Vector& v) {
      Matrix D(n, n);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) D(i, j) = std::abs(v(i) - v(j));
      const Vector rm = D.rowwise().mean();
      const Vector cm = D.colwise().mean().transpose();
      const Real gm = D.mean();
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) D(i, j) += gm - rm(i) - cm(j);
      return D;
    };
    return centred(x).cwiseProduct(centred(y)).mean();
  };
  const Real expected = std::sqrt(dcov2(a, b)) / std::sqrt(std::sqrt(dcov2(a, a) * dcov2(b, b)));
  CHECK(distance_correlation(a, b) == doctest::Approx(expected).epsilon(1e-10));
  CHECK(distance_correlation(a, (2 * a).array() + 3) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(distance_correlation(a, Vector::Constant(5, 2.0)) == 0.0);

  Matrix one = Matrix::Random(1, 4);
  CHECK(independence_penalty(one) == 0.0);
}

TEST_CASE("independence gradients match finite differences") {
  for (std::uint64_t seed : {4u, 5u}) {
    auto inst = make_grad_check_instance(seed);
    CHECK(grad_check(inst, LossSelector::Ind).max_rel_error < 1e-4);
  }
}

TEST_CASE("checkpoint round trip within f32 precision") {
  TempDir dir("ckpt");
  for (Backbone b : {Backbone::BprMf, Backbone::NeuMf, Backbone::LightGcn}) {
    const Model m = init_parameters({4, 5, 6, 8, 2}, b, 11);
    write_checkpoint(dir / "m.ckpt", m);
    const Model back = read_checkpoint(dir / "m.ckpt");
    CHECK(back.backbone == b);
    CHECK(back.dims == m.dims);
    std::vector<const Matrix*> xs;
    m.params.visit([&](const std::string&, const Matrix& x, bool) { xs.push_back(&x); });
    std::size_t k = 0;
    back.params.visit([&](const std::string&, const Matrix& x, bool) {
      CHECK((x - *xs[k++]).cwiseAbs().maxCoeff() <= 1e-7);
    });
  }
}

TEST_CASE("checkpoint rejects corrupt files and mismatched datasets") {
  TempDir dir("ckpt_bad");
  imcat::testing::write_file(dir / "x.ckpt", "IMCK\x01");
  CHECK_THROWS_AS(read_checkpoint(dir / "x.ckpt"), FormatError);
  CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), MissingFile);

  const Model m = init_parameters({4, 5, 6, 8, 2}, Backbone::BprMf, 1);
  Dataset ds;
  ds.n_users = 4;
  ds.n_items = 5;
  ds.n_tags = 7;
  CHECK_THROWS_AS(check_compatible(m, ds), DimMismatch);
  ds.n_tags = 6;
  CHECK_NOTHROW(check_compatible(m, ds));
}
