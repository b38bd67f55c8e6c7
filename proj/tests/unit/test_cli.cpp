#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "imcat/common.hpp"
#include "json.hpp"
#include "test_support.hpp"

using imcat::testing::TempDir;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(IMCAT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

// Raw tab-separated inputs with two communities.
struct RawFiles {
  TempDir dir{"cli"};
  RawFiles() {
    imcat::Rng rng(3);
    std::ofstream ui(dir / "ui.tsv"), it(dir / "it.tsv");
    for (int u = 0; u < 40; ++u)
      for (int i = 0; i < 30; ++i)
        if (rng.uniform01() < (i % 2 == u % 2 ? 0.6 : 0.05)) ui << "u" << u << "\ti" << i << "\n";
    for (int i = 0; i < 30; ++i)
      for (int t = 0; t < 12; ++t)
        if (rng.uniform01() < (t % 2 == i % 2 ? 0.5 : 0.03)) it << "i" << i << "\tt" << t << "\n";
  }
  std::string path(const char* name) const { return (dir / name).string(); }
};

const char* kSmall =
    " --set d=8 --set K=2 --set batch=64 --set align_batch=16 --set max_epochs=4"
    " --set pretrain_epochs=1 --set cluster_update_every=3 --set quiet=true";

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run("") == 2);
  CHECK(run("prepare --ui /nonexistent --it /nonexistent --out x") == 2);
  CHECK(run("train --set nonsense=1") == 2);
  CHECK(run("train --bundle /nonexistent --set K=5") == 2);
  CHECK(run("gradcheck --loss bogus") == 2);
}

TEST_CASE("prepare, train, evaluate and inspect end to end") {
  RawFiles raw;
  const std::string bundle = raw.path("bundle"), runs = raw.path("run");
  REQUIRE(run("prepare --ui " + raw.path("ui.tsv") + " --it " + raw.path("it.tsv") + " --out " + bundle + " --ui-schema user,item" +
              " --min-user 5 --min-item 5 --min-tag 2 --seed 1") == 0);
  CHECK(std::filesystem::exists(raw.dir / "bundle"));

  REQUIRE(run("train --bundle " + bundle + " --out " + runs + kSmall) == 0);
  for (const char* f : {"config.json", "history.jsonl", "ckpt_best", "ckpt_last", "summary.json"})
    CHECK(std::filesystem::exists(raw.dir / "run" / f));
  CHECK(read_json(raw.dir / "run" / "summary.json")["epochs_run"] == 4);

  REQUIRE(run("evaluate --ckpt " + raw.path("run/ckpt_best") + " --groups --timing") == 0);
  const auto metrics = read_json(raw.dir / "run" / "metrics.json");
  CHECK(metrics.dump().find("recall@20") != std::string::npos);
  CHECK(std::filesystem::exists(raw.dir / "run" / "groups.csv"));
  CHECK(std::filesystem::exists(raw.dir / "run" / "timing.csv"));

  CHECK(run("inspect-clusters --ckpt " + raw.path("run/ckpt_best") + " --relatedness-csv " +
            raw.path("m.csv") + " --similar-json " + raw.path("s.json")) == 0);
  CHECK(std::filesystem::exists(raw.dir / "m.csv"));
  CHECK(read_json(raw.dir / "s.json").contains("intents"));

  // resume continues to a larger epoch budget
  CHECK(run("train --resume " + raw.path("run/ckpt_last") + " --set max_epochs=6") == 0);
  CHECK(read_json(raw.dir / "run" / "summary.json")["epochs_run"] == 6);

  // a checkpoint evaluated against a config of another shape is rejected
  std::ofstream(raw.dir / "other.json") << R"({"d": 16, "K": 2, "data.bundle": ")" << bundle << "\"}";
  CHECK(run("evaluate --ckpt " + raw.path("run/ckpt_best") + " --config " + raw.path("other.json")) == 1);
}

TEST_CASE("gradcheck subcommand passes for every backbone") {
  for (const char* b : {"bprmf", "neumf", "lightgcn"}) CHECK(run(std::string("gradcheck --backbone ") + b) == 0);
}
