#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "imcat/alignment.hpp"
#include "imcat/trainer.hpp"

using namespace imcat;

namespace {

AlignmentBatch two_item_batch(const Matrix& users, const Matrix& fused) {
  AlignmentBatch b;
  b.items = {0, 1};
  b.intents = {{users, fused}};
  b.relatedness = Matrix::Ones(2, 1);
  return b;
}

// Per-entry finite differences of a view-level loss.
template <typename F>
Real view_grad_error(AlignmentBatch batch, F loss) {
  std::vector<IntentViews> g;
  loss(batch, &g);
  Real worst = 0;
  for (std::size_t k = 0; k < batch.intents.size(); ++k)
    for (Matrix* m : {&batch.intents[k].users, &batch.intents[k].fused}) {
      const Matrix& an = m == &batch.intents[k].users ? g[k].users : g[k].fused;
      for (Eigen::Index i = 0; i < m->size(); ++i) {
        const Real x = m->data()[i];
        m->data()[i] = x + 1e-6;
        const Real up = loss(batch, nullptr);
        m->data()[i] = x - 1e-6;
        const Real dn = loss(batch, nullptr);
        m->data()[i] = x;
        const Real num = (up - dn) / 2e-6, a = an.data()[i];
        worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
      }
    }
  return worst;
}

}  // namespace

TEST_CASE("InfoNCE on orthonormal views") {
  const AlignmentBatch b = two_item_batch(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  // -log(e / (e + 1)) per anchor and direction
  const Real term = std::log(std::exp(1.0) + 1.0) - 1.0;
  CHECK(term == doctest::Approx(0.3132616875182228).epsilon(1e-14));
  CHECK(contrastive_loss(b, 1.0) == doctest::Approx(2.0 * term).epsilon(1e-12));
}

TEST_CASE("set-to-set loss averages over positives") {
  Matrix z(2, 2);
  z << 1, 0.5, 0.5, 1;
  AlignmentBatch b = two_item_batch(Matrix::Identity(2, 2), z);
  b.positives = {{{0, 1}, {1, 0}}};
  const Real per = std::log(std::exp(1.0) + std::exp(0.5)) - 0.75;
  CHECK(per == doctest::Approx(0.7240769841801068).epsilon(1e-14));
  CHECK(set_to_set_loss(b, 1.0) == doctest::Approx(1.4481539683602136).epsilon(1e-12));

  // singleton positive sets reduce to the plain contrastive loss
  b.positives = {{{0}, {1}}};
  CHECK(set_to_set_loss(b, 1.0) == contrastive_loss(b, 1.0));
}

TEST_CASE("set-to-set validates positive sets") {
  AlignmentBatch b = two_item_batch(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  b.positives = {{{1}, {1}}};
  CHECK_THROWS(set_to_set_loss(b, 1.0));
  b.positives = {{{0, 0}, {1}}};
  CHECK_THROWS(set_to_set_loss(b, 1.0));
  b.positives = {{{0, 5}, {1}}};
  CHECK_THROWS_AS(set_to_set_loss(b, 1.0), DimError);
  CHECK_THROWS(contrastive_loss(b, 0.0));
}

TEST_CASE("relatedness weights scale each anchor") {
  AlignmentBatch b = two_item_batch(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  b.relatedness << 1.0, 0.0;
  const Real term = std::log(std::exp(1.0) + 1.0) - 1.0;
  CHECK(contrastive_loss(b, 1.0) == doctest::Approx(term).epsilon(1e-12));
}

TEST_CASE("view gradients of both objectives match finite differences") {
  Rng rng(5);
  AlignmentBatch b;
  b.items = {0, 1, 2, 3};
  for (int k = 0; k < 2; ++k) {
    IntentViews v{Matrix(4, 3), Matrix(4, 3)};
    for (Eigen::Index i = 0; i < 12; ++i) v.users.data()[i] = rng.uniform(-1, 1);
    for (Eigen::Index i = 0; i < 12; ++i) v.fused.data()[i] = rng.uniform(-1, 1);
    b.intents.push_back(v);
  }
  b.relatedness = Matrix(4, 2);
  for (Eigen::Index i = 0; i < 8; ++i) b.relatedness.data()[i] = rng.uniform(0, 1);
  b.positives = {{{0, 2}, {1}, {2, 0, 3}, {3}}, {{0}, {1, 3}, {2}, {3, 1}}};
  CHECK(view_grad_error(b, [](const AlignmentBatch& x, std::vector<IntentViews>* g) {
          return contrastive_loss(x, 0.5, g);
        }) < 1e-6);
  CHECK(view_grad_error(b, [](const AlignmentBatch& x, std::vector<IntentViews>* g) {
          return set_to_set_loss(x, 0.5, g);
        }) < 1e-6);
}

TEST_CASE("Jaccard oracles") {
  const std::vector<Index> a = {1, 2, 3}, b = {2, 3, 4, 5}, e = {};
  CHECK(jaccard_similarity(a, b) == doctest::Approx(0.4));
  CHECK(jaccard_similarity(a, a) == 1.0);
  CHECK(jaccard_similarity(e, e) == 0.0);
  CHECK(jaccard_similarity(a, e) == 0.0);
}

TEST_CASE("similar sets use a strict threshold and match brute force") {
  // items 0 and 1 share 1 of 2 tags (J = 1/3); items 2 and 3 share 2 of 2 (J = 1)
  const Csr it = Csr::from_pairs(4, 6, {{0, 0}, {0, 1}, {1, 1}, {1, 2}, {2, 3}, {2, 4}, {3, 3}, {3, 4}});
  const std::vector<Index> assign(6, 0);
  const SimilarSets at = build_similar_sets(it, assign, 1, 1.0 / 3.0);
  CHECK(at.of(0, 0).empty());
  CHECK(at.of(0, 2) == std::vector<Index>{3});
  const SimilarSets below = build_similar_sets(it, assign, 1, 0.3);
  CHECK(below.of(0, 0) == std::vector<Index>{1});
  CHECK(below.pair_count(0) == 2);
  CHECK_THROWS_AS(build_similar_sets(it, assign, 1, 1.0), ConfigError);

  Rng rng(8);
  std::vector<std::pair<Index, Index>> pairs;
  for (Index j = 0; j < 30; ++j)
    for (Index t = 0; t < 12; ++t)
      if (rng.uniform01() < 0.3) pairs.emplace_back(j, t);
  const Csr big = Csr::from_pairs(30, 12, pairs);
  std::vector<Index> a2(12);
  for (auto& x : a2) x = static_cast<Index>(rng.uniform_index(3));
  for (Real delta : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const SimilarSets s = build_similar_sets(big, a2, 3, delta);
    for (std::size_t k = 0; k < 3; ++k) {
      const auto tags = intent_tag_sets(big, a2, k);
      for (Index i = 0; i < 30; ++i) {
        std::vector<Index> expected;
        for (Index j = 0; j < 30; ++j)
          if (j != i && jaccard_similarity(tags[i], tags[j]) > delta) expected.push_back(j);
        CHECK(s.of(k, i) == expected);
      }
    }
  }
}

TEST_CASE("positive sets start with the anchor and stay in the batch") {
  SimilarSets s = SimilarSets::empty(2, 6);
  s.sets[0][0] = {1, 2, 3, 5};
  s.sets[0][1] = {0};
  s.sets[1][4] = {0};
  const std::vector<Index> items = {0, 1, 2, 4};
  Rng rng(3);
  const auto p = sample_positive_sets(items, s, 3, rng);
  REQUIRE(p.size() == 2);
  CHECK(p[0][0].size() == 3);
  CHECK(p[0][0][0] == 0);
  for (Index pos : p[0][0]) CHECK(pos < items.size());
  CHECK(p[0][1] == std::vector<Index>{1, 0});
  CHECK(p[1][3] == std::vector<Index>{3, 0});
  CHECK(p[1][0] == std::vector<Index>{0});

  Rng rng2(3);
  const auto single = sample_positive_sets(items, s, 1, rng2);
  for (const auto& per : single)
    for (std::size_t a = 0; a < items.size(); ++a) CHECK(per[a] == std::vector<Index>{static_cast<Index>(a)});
  CHECK_THROWS(sample_positive_sets({0, 0}, s, 2, rng2));
}

TEST_CASE("expansion adds distinct neighbours up to the cap") {
  SimilarSets s = SimilarSets::empty(1, 10);
  s.sets[0][0] = {5, 6, 7};
  s.sets[0][1] = {5, 8};
  Rng rng(1);
  const auto out = expand_with_similar({0, 1}, s, 4, 4, rng);
  CHECK(out.size() == 4);
  CHECK(out[0] == 0);
  CHECK(out[1] == 1);
  CHECK(std::set<Index>(out.begin(), out.end()).size() == 4);
  CHECK(expand_with_similar({0, 1}, s, 1, 10, rng).size() == 2);
}

TEST_CASE("aggregation of users and tags") {
  Matrix users(3, 4);
  users << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
  const Csr item_users = Csr::from_pairs(2, 3, {{0, 0}, {0, 2}});
  const Vector u = aggregate_users(0, item_users, users, 1, 2);
  CHECK(u(0) == 7.0);
  CHECK(u(1) == 8.0);
  CHECK(aggregate_users(1, item_users, users, 0, 2).isZero());

  Matrix tags(3, 2);
  tags << 1, 1, 3, 3, 100, 100;
  const Csr it = Csr::from_pairs(1, 3, {{0, 0}, {0, 1}, {0, 2}});
  const Vector t = aggregate_tags(0, it, {0, 0, 1}, tags, 0);
  CHECK(t(0) == 2.0);
  CHECK(aggregate_tags(0, it, {0, 0, 0}, tags, 1).isZero());
  CHECK(l2_normalize(Vector::Zero(3)).isZero());
}

TEST_CASE("full alignment gradients match finite differences") {
  for (Backbone b : {Backbone::BprMf, Backbone::NeuMf, Backbone::LightGcn}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      CAPTURE(to_string(b));
      CAPTURE(seed);
      auto inst = make_grad_check_instance(seed, b);
      CHECK(grad_check(inst, LossSelector::CA).max_rel_error < 1e-4);
      CHECK(grad_check(inst, LossSelector::CaStar).max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("alignment gradients through LightGCN propagation") {
  for (std::uint64_t seed : {1u, 2u}) {
    auto inst = make_grad_check_instance(seed, Backbone::LightGcn);
    inst.align.propagated = true;
    CHECK(grad_check(inst, LossSelector::CaStar).max_rel_error < 1e-4);
  }
}

TEST_CASE("ablation variants keep exact gradients") {
  auto inst = make_grad_check_instance(6);
  inst.align.use_tags = false;
  CHECK(grad_check(inst, LossSelector::CaStar).max_rel_error < 1e-4);
  inst.align.use_tags = true;
  inst.align.use_items = false;
  CHECK(grad_check(inst, LossSelector::CaStar).max_rel_error < 1e-4);
  inst.align.use_items = true;
  inst.align.use_projection = false;
  CHECK(grad_check(inst, LossSelector::CaStar).max_rel_error < 1e-4);
}
