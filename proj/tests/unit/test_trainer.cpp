#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <sstream>

#include "imcat/checkpoint.hpp"
#include "imcat/config.hpp"
#include "imcat/trainer.hpp"
#include "test_support.hpp"

using namespace imcat;
using imcat::testing::TempDir;

namespace {

const Dataset& shared_dataset() {
  static const Dataset ds = imcat::testing::community_dataset(48, 40, 16, 2, 21);
  return ds;
}

RunConfig small_config(Backbone b = Backbone::BprMf) {
  RunConfig c;
  c.backbone = b;
  c.d = 8;
  c.K = 2;
  c.batch = 64;
  c.align_batch = 16;
  c.max_epochs = 6;
  c.pretrain_epochs = 2;
  c.cluster_update_every = 3;
  c.checkpoint_every = 2;
  c.lr = 1e-2;
  c.quiet = true;
  return c;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<nlohmann::json> history_without_time(const std::vector<EpochRecord>& h, std::size_t topn) {
  std::vector<nlohmann::json> out;
  for (const auto& r : h) out.push_back(r.to_json(topn, false));
  return out;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config round trips through JSON and overrides") {
  RunConfig c;
  c.set("beta=0.5");
  c.set("lightgcn.layers=3");
  c.set("ablation.no_isa=true");
  c.set("backbone=neumf");
  const RunConfig back = RunConfig::from_json(c.to_json());
  CHECK(back.beta == 0.5);
  CHECK(back.lightgcn_layers == 3);
  CHECK(back.no_isa);
  CHECK(back.backbone == Backbone::NeuMf);
  CHECK(back.to_json() == c.to_json());
  CHECK(RunConfig::keys().size() == c.to_json().size());
}

TEST_CASE("config rejects unknown keys, bad types and bad values") {
  RunConfig c;
  CHECK_THROWS_AS(c.set("nonsense=1"), ConfigError);
  CHECK_THROWS_AS(c.set("K=two"), ConfigError);
  CHECK_THROWS_AS(c.set("K"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"beta", "high"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"unknown", 1}}), ConfigError);
  c.set("K=5");
  CHECK_THROWS_AS(c.validate(), ConfigError);
  RunConfig d;
  d.delta = 1.0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  CHECK_THROWS_AS(sweep_values("zeta"), ConfigError);
  CHECK(sweep_values("K").size() == 5);
}

TEST_CASE("clustering need follows the loss weights") {
  RunConfig c;
  CHECK(c.clustering_needed());
  c.beta = 0;
  c.gamma = 0;
  CHECK_FALSE(c.clustering_needed());
  c.beta = 0.1;
  c.no_uit = true;
  CHECK_FALSE(c.alignment_active());
  CHECK_FALSE(c.clustering_needed());
}

TEST_CASE("early stopping counts patience from the hold epoch") {
  EarlyStopper s(100, 500);
  for (std::size_t e = 1; e <= 600; ++e) s.update(e, static_cast<Real>(e) / 1000.0);
  for (std::size_t e = 601; e < 700; ++e) {
    s.update(e, 0.6);
    CHECK_FALSE(s.should_stop(e));
  }
  CHECK(s.should_stop(700));
  CHECK(s.best_epoch() == 600);

  EarlyStopper held(10, 50);
  held.update(1, 0.5);
  CHECK_FALSE(held.should_stop(30));
  CHECK(held.should_stop(60));
}

TEST_CASE("joint loss skips zero weights and clustering terms before activation") {
  auto inst = make_grad_check_instance(3);
  LossWeights w;
  w.alpha = 0;
  w.lambda_ind = 0;
  const JointLoss only_uv = joint_loss(inst.model, inst.batches, nullptr, w, nullptr);
  CHECK(only_uv.vt == 0);
  CHECK(only_uv.ca == 0);
  CHECK(only_uv.kl == 0);
  CHECK(only_uv.total == doctest::Approx(only_uv.uv));
  CHECK(only_uv.to_json().contains("loss"));

  LossWeights full;
  ClusterInputs ci;
  ci.target = &inst.cluster.target;
  ci.align = {&inst.item_users, &inst.dataset.it_labels, &inst.cluster.assignment,
              &inst.cluster.relatedness};
  const JointLoss all = joint_loss(inst.model, inst.batches, &ci, full, nullptr);
  CHECK(all.total == doctest::Approx(all.uv + full.alpha * all.vt + full.beta * all.ca +
                                     full.gamma * all.kl + full.lambda_ind * all.ind));

  inst.model.params.user.setConstant(std::numeric_limits<Real>::quiet_NaN());
  CHECK_THROWS_AS(joint_loss(inst.model, inst.batches, &ci, full, nullptr), NonFiniteLoss);
}

TEST_CASE("every loss term passes the gradient check") {
  for (LossSelector s : {LossSelector::UV, LossSelector::VT, LossSelector::KL, LossSelector::CA,
                         LossSelector::CaStar, LossSelector::Ind}) {
    CAPTURE(to_string(s));
    auto inst = make_grad_check_instance(9);
    const auto r = grad_check(inst, s);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-4);
    CHECK(parse_loss_selector(to_string(s)) == s);
  }
  CHECK_THROWS_AS(parse_loss_selector("xyz"), ConfigError);
}

TEST_CASE("grad check reports a broken gradient") {
  auto inst = make_grad_check_instance(2);
  CHECK_THROWS_AS(grad_check(inst, LossSelector::UV, 0.0), CheckFailed);
}

TEST_CASE("training is deterministic for a fixed seed") {
  for (Backbone b : {Backbone::BprMf, Backbone::LightGcn}) {
    Trainer a(shared_dataset(), small_config(b));
    Trainer c(shared_dataset(), small_config(b));
    const auto ra = a.fit();
    const auto rc = c.fit();
    CHECK(history_without_time(ra.history, 20) == history_without_time(rc.history, 20));
    CHECK(a.model().params == c.model().params);
    CHECK(ra.test.recall == rc.test.recall);
  }
}

TEST_CASE("clustering activates after pretraining and losses stay finite") {
  Trainer t(shared_dataset(), small_config());
  const auto r = t.fit();
  REQUIRE(r.history.size() == 6);
  CHECK_FALSE(r.history[0].clustering_active);
  CHECK_FALSE(r.history[1].clustering_active);
  CHECK(r.history[2].clustering_active);
  CHECK(r.history[1].loss.kl == 0);
  CHECK(r.history[3].loss.kl > 0);
  CHECK(r.history[3].loss.ca > 0);
  REQUIRE(t.state().cluster);
  CHECK(rows_stochastic(t.state().cluster->relatedness));
  CHECK(t.steps_per_epoch() == (shared_dataset().ui_train.nnz() + 63) / 64);
  CHECK(t.state().iteration == 6 * t.steps_per_epoch());
}

TEST_CASE("training improves over the initial parameters") {
  RunConfig c = small_config();
  c.max_epochs = 20;
  Trainer t(shared_dataset(), c);
  const Real before = t.evaluate(shared_dataset().ui_valid, false).recall;
  const auto r = t.fit();
  CHECK(r.best_valid.recall > before);
}

TEST_CASE("run directory artefacts") {
  TempDir dir("fit");
  Trainer t(shared_dataset(), small_config());
  t.fit(dir.path());
  for (const char* f : {"config.json", "history.jsonl", "ckpt_best", "ckpt_last", "ckpt_last.state",
                        "summary.json"})
    CHECK(std::filesystem::exists(dir / f));
  CHECK(read_lines(dir / "history.jsonl").size() == 6);
  const auto summary = nlohmann::json::parse(file_bytes(dir / "summary.json"));
  CHECK(summary["epochs_run"] == 6);
  CHECK(summary["test"].contains("recall@20"));
  const Model best = read_checkpoint(dir / "ckpt_best");
  check_compatible(best, shared_dataset());
}

TEST_CASE("resume reproduces an uninterrupted run bit for bit") {
  TempDir full_dir("full"), part_dir("part");
  RunConfig c = small_config();
  Trainer full(shared_dataset(), c);
  const auto rf = full.fit(full_dir.path());

  RunConfig half = c;
  half.max_epochs = 4;
  Trainer first(shared_dataset(), half);
  first.fit(part_dir.path());
  Trainer second(shared_dataset(), c);
  second.load_state(part_dir / "ckpt_last.state");
  CHECK(second.state().epoch == 4);
  const auto rs = second.fit(part_dir.path());

  std::vector<nlohmann::json> a, b;
  for (const auto& l : read_lines(full_dir / "history.jsonl")) {
    auto j = nlohmann::json::parse(l);
    j.erase("seconds");
    j.erase("elapsed");
    a.push_back(j);
  }
  for (const auto& l : read_lines(part_dir / "history.jsonl")) {
    auto j = nlohmann::json::parse(l);
    j.erase("seconds");
    j.erase("elapsed");
    b.push_back(j);
  }
  CHECK(a == b);
  CHECK(file_bytes(full_dir / "ckpt_last") == file_bytes(part_dir / "ckpt_last"));
  CHECK(rf.test.recall == rs.test.recall);
}

TEST_CASE("state file rejects a mismatched model") {
  TempDir dir("state");
  Trainer t(shared_dataset(), small_config());
  t.save_state(dir / "s.state");
  RunConfig other = small_config();
  other.d = 16;
  Trainer u(shared_dataset(), other);
  CHECK_THROWS_AS(u.load_state(dir / "s.state"), DimMismatch);
  CHECK_THROWS_AS(u.load_state(dir / "none.state"), MissingFile);
}

TEST_CASE("trainer refuses unsplit data") {
  Dataset ds = shared_dataset();
  ds.is_split = false;
  CHECK_THROWS_AS(Trainer(ds, small_config()), ConfigError);
}
