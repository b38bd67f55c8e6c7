// imcat command-line tool: prepare, train, evaluate, sweep, inspect-clusters,
// gradcheck.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "imcat/checkpoint.hpp"
#include "imcat/config.hpp"
#include "imcat/dataset.hpp"
#include "imcat/eval.hpp"
#include "imcat/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace imcat;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

struct PrepareArgs {
  std::string ui, it, out, preset;
  std::string ui_schema = "user,item,rating";
  std::string it_schema = "item,tag";
  bool skip_header = false;
  FilterConfig filters;
  std::vector<double> split{0.7, 0.1, 0.2};
  std::uint64_t seed = 2024;
};

int cmd_prepare(const PrepareArgs& a) {
  Schema ui = Schema::parse(a.ui_schema, a.skip_header);
  Schema it = Schema::parse(a.it_schema, a.skip_header);
  if (a.preset == "hetrec-fm") {
    // user_artists.dat / user_taggedartists.dat: headers, listening counts are not ratings
    ui = Schema::parse("user,item,skip", true);
    it = Schema::parse("skip,item,tag,skip,skip,skip", true);
  } else if (!a.preset.empty()) {
    throw ConfigError("unknown preset '" + a.preset + "'");
  }
  if (a.split.size() != 3) throw ConfigError("--split needs three ratios");
  const auto raw_ui = load_interactions(a.ui, ui);
  const auto raw_it = load_taggings(a.it, it);
  const Dataset filtered = apply_filters(raw_ui, raw_it, a.filters);
  const Dataset ds = split_dataset(filtered, {a.split[0], a.split[1], a.split[2]}, a.seed);
  write_bundle(a.out, ds);
  std::cout << compute_stats(ds).to_json().dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, resume, bundle, out;
  std::vector<std::string> sets;
};

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::load(path);
  for (const auto& s : sets) cfg.set(s);
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  fs::path run_dir;
  std::string config_path = a.config;
  if (!a.resume.empty()) {
    run_dir = fs::path(a.resume).parent_path();
    if (run_dir.empty()) run_dir = ".";
    if (config_path.empty()) config_path = (run_dir / "config.json").string();
  }
  RunConfig cfg = resolve_config(config_path, a.sets);
  if (!a.bundle.empty()) cfg.bundle = a.bundle;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.resume.empty()) run_dir = cfg.out_dir;
  else cfg.out_dir = run_dir.string();
  if (cfg.bundle.empty()) throw ConfigError("no dataset bundle (set data.bundle or --bundle)");
  set_quiet(cfg.quiet);

  const Dataset bundle = read_bundle(cfg.bundle);
  const Dataset ds =
      cfg.cold_start
          ? make_sparse_user_protocol(bundle, cfg.cold_start_threshold, cfg.cold_start_fraction,
                                      cfg.seed)
          : bundle;
  Trainer trainer(ds, cfg);
  fs::create_directories(run_dir);
  if (!a.resume.empty()) {
    trainer.load_state(a.resume + ".state");
    log_info("resumed at epoch " + std::to_string(trainer.state().epoch));
  }
  write_json(run_dir / "config.json", cfg.to_json());
  const FitResult r = trainer.fit(run_dir);
  std::ifstream summary(run_dir / "summary.json");
  std::cout << summary.rdbuf();
  (void)r;
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, bundle, config, out;
  bool groups = false, cold_start = false, timing = false;
  std::size_t topn = 0;
  std::size_t threads = 0;
};

std::optional<RunConfig> run_config_near(const fs::path& ckpt, const std::string& explicit_path) {
  if (!explicit_path.empty()) return RunConfig::load(explicit_path);
  const fs::path guess = ckpt.parent_path() / "config.json";
  if (fs::exists(guess)) return RunConfig::load(guess);
  return std::nullopt;
}

int cmd_evaluate(const EvalArgs& a) {
  const fs::path ckpt = a.ckpt;
  const auto cfg = run_config_near(ckpt, a.config);
  std::string bundle_path = a.bundle;
  if (bundle_path.empty() && cfg) bundle_path = cfg->bundle;
  if (bundle_path.empty()) throw ConfigError("no bundle given and none recorded in the run config");

  Model model = read_checkpoint(ckpt);
  const Dataset bundle = read_bundle(bundle_path);
  check_compatible(model, bundle);
  if (cfg && (cfg->d != model.dims.d || cfg->K != model.dims.K || cfg->backbone != model.backbone))
    throw DimMismatch("checkpoint (d=" + std::to_string(model.dims.d) + ", K=" +
                      std::to_string(model.dims.K) + ", " + to_string(model.backbone) +
                      ") does not match the run config (d=" + std::to_string(cfg->d) + ", K=" +
                      std::to_string(cfg->K) + ", " + to_string(cfg->backbone) + ")");
  const Dataset ds = (cfg && cfg->cold_start)
                         ? make_sparse_user_protocol(bundle, cfg->cold_start_threshold,
                                                     cfg->cold_start_fraction, cfg->seed)
                         : bundle;
  if (model.backbone == Backbone::LightGcn) {
    model.gcn_layers = cfg ? cfg->lightgcn_layers : 2;
    model.set_graph(ds.ui_train);
    model.propagate();
  }
  const std::size_t topn = a.topn ? a.topn : (cfg ? cfg->topn : 20);
  const std::size_t threads = a.threads ? a.threads : (cfg ? cfg->threads : 1);
  std::vector<const Csr*> exclude = {&ds.ui_train};
  if (cfg && cfg->exclude_valid) exclude.push_back(&ds.ui_valid);

  const fs::path out = a.out.empty() ? ckpt.parent_path() : fs::path(a.out);
  if (!out.empty()) fs::create_directories(out);
  const auto lists = rank_users(model, ds.ui_test, exclude, topn, threads);
  const auto per_user = per_user_metrics(lists, ds.ui_test, topn);
  json result = {{"checkpoint", ckpt.string()}, {"test", average_metrics(per_user).to_json(topn)}};

  if (a.groups) {
    const auto degrees = column_degrees(ds.ui_train);
    const GroupReport g = popularity_group_report(degrees, lists, ds.ui_test, 5, topn);
    g.write_csv(out / "groups.csv", degrees);
    result["groups"] = {{"contributions", g.contributions}, {"overall_recall", g.overall_recall}};
  }
  if (a.cold_start) {
    const auto degrees = row_degrees(ds.ui_train);
    const std::size_t thr = cfg ? cfg->cold_start_threshold : 10;
    result["cold_start"] = cold_start_report(per_user, degrees, thr).to_json(topn);
    result["cold_start"]["threshold"] = thr;
  }
  if (a.timing) {
    const fs::path hist = ckpt.parent_path() / "history.jsonl";
    std::ifstream in(hist);
    if (!in) throw MissingFile("cannot open " + hist.string());
    std::vector<EpochTiming> epochs;
    std::string line;
    Real last = 0;
    const std::string key = "recall@" + std::to_string(cfg ? cfg->topn : 20);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (j.contains(key)) last = j[key].get<Real>();
      epochs.push_back({j.value("seconds", 0.0), last});
    }
    write_timing_csv(out / "timing.csv", timing_report(epochs));
  }
  write_json(out / "metrics.json", result);
  std::cout << result.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string config, out = "runs/sweep";
  std::vector<std::string> sets, axes;
  std::size_t jobs = 1;
};

std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

int cmd_sweep(const SweepArgs& a) {
  const RunConfig base = resolve_config(a.config, a.sets);
  if (a.axes.empty()) throw ConfigError("sweep needs at least one --axis");
  std::vector<std::vector<std::pair<std::string, std::string>>> cells = {{}};
  for (const auto& axis : a.axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& cell : cells)
      for (const auto& v : sweep_values(axis)) {
        auto c = cell;
        c.emplace_back(axis, v);
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  const fs::path root = a.out;
  fs::create_directories(root);
  const std::string self = fs::read_symlink("/proc/self/exe").string();

  std::vector<json> rows(cells.size());
  std::vector<std::string> commands(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    RunConfig cfg = base;
    std::string name;
    for (const auto& [axis, v] : cells[i]) {
      cfg.set(axis + "=" + v);
      name += (name.empty() ? "" : "_") + axis + "=" + v;
    }
    cfg.validate();
    cfg.out_dir = (root / name).string();
    fs::create_directories(cfg.out_dir);
    const fs::path cell_cfg = fs::path(cfg.out_dir) / "config.json";
    write_json(cell_cfg, cfg.to_json());
    commands[i] = shell_quote(self) + " train --config " + shell_quote(cell_cfg.string()) +
                  " > " + shell_quote((fs::path(cfg.out_dir) / "train.log").string()) + " 2>&1";
    rows[i] = {{"cell", name}, {"run_dir", cfg.out_dir}};
  }

  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= commands.size()) return;
        i = next++;
      }
      log_info("sweep cell " + rows[i]["cell"].get<std::string>());
      const int status = std::system(commands[i].c_str());
      std::lock_guard lock(mu);
      rows[i]["exit_status"] = status;
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < std::max<std::size_t>(1, a.jobs); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  json index = json::array();
  bool all_ok = true;
  for (auto& row : rows) {
    const fs::path summary = fs::path(row["run_dir"].get<std::string>()) / "summary.json";
    if (fs::exists(summary)) {
      std::ifstream in(summary);
      row["summary"] = json::parse(in);
    }
    all_ok = all_ok && row["exit_status"] == 0;
    index.push_back(row);
  }
  write_json(root / "sweep.json", index);
  std::cout << index.dump(2) << '\n';
  return all_ok ? 0 : kExitRuntime;
}

// ---------------------------------------------------------------------------
// inspect-clusters
// ---------------------------------------------------------------------------

struct InspectArgs {
  std::string ckpt, bundle, config, relatedness_csv, similar_json;
  double delta = 0;
};

int cmd_inspect(const InspectArgs& a) {
  const auto cfg = run_config_near(a.ckpt, a.config);
  std::string bundle_path = a.bundle;
  if (bundle_path.empty() && cfg) bundle_path = cfg->bundle;
  if (bundle_path.empty()) throw ConfigError("no bundle given and none recorded in the run config");
  Model model = read_checkpoint(a.ckpt);
  const Dataset ds = read_bundle(bundle_path);
  check_compatible(model, ds);
  const Real eta = cfg ? cfg->eta : 1.0;
  Matrix centers = model.params.centers;
  const ClusterState s = refresh_clusters(model.params.tag, centers, ds.it_labels, eta);
  json out = cluster_membership_json(s.assignment, model.dims.K, &ds.tags.externals());
  if (!a.relatedness_csv.empty()) {
    std::ofstream csv(a.relatedness_csv);
    if (!csv) throw Error("cannot write " + a.relatedness_csv);
    csv << "item";
    for (std::size_t k = 0; k < model.dims.K; ++k) csv << ",intent" << k;
    csv << '\n';
    for (Eigen::Index j = 0; j < s.relatedness.rows(); ++j) {
      csv << ds.items.decode(static_cast<Index>(j));
      for (Eigen::Index k = 0; k < s.relatedness.cols(); ++k) csv << ',' << s.relatedness(j, k);
      csv << '\n';
    }
  }
  if (!a.similar_json.empty()) {
    const Real delta = a.delta > 0 ? a.delta : (cfg ? cfg->delta : 0.7);
    const SimilarSets sim = build_similar_sets(ds.it_labels, s.assignment, model.dims.K, delta);
    write_json(a.similar_json, sim.to_json(&ds.items.externals()));
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradArgs {
  std::vector<std::string> losses{"uv", "vt", "kl", "ca", "ca_star", "ind"};
  std::string backbone = "bprmf";
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradArgs& a) {
  json out = json::array();
  bool ok = true;
  for (const auto& name : a.losses) {
    const LossSelector sel = parse_loss_selector(name);
    GradCheckInstance inst = make_grad_check_instance(a.seed, parse_backbone(a.backbone));
    try {
      const GradCheckReport r = grad_check(inst, sel, a.tolerance);
      out.push_back({{"loss", name}, {"max_rel_error", r.max_rel_error}, {"worst", r.worst},
                     {"checked", r.checked}, {"ok", true}});
    } catch (const CheckFailed& e) {
      ok = false;
      out.push_back({{"loss", name}, {"ok", false}, {"error", e.what()}});
    }
  }
  std::cout << out.dump(2) << '\n';
  return ok ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"IMCAT tag-enhanced recommendation: data preparation, training, evaluation"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "filter and split raw files into a dataset bundle");
  p->add_option("--ui", prep.ui, "user-item file (tab-separated)")->required()->check(CLI::ExistingFile);
  p->add_option("--it", prep.it, "item-tag file (tab-separated)")->required()->check(CLI::ExistingFile);
  p->add_option("--out", prep.out, "bundle directory")->required();
  p->add_option("--preset", prep.preset, "input layout preset (hetrec-fm)");
  p->add_option("--ui-schema", prep.ui_schema, "user-item columns")->capture_default_str();
  p->add_option("--it-schema", prep.it_schema, "item-tag columns")->capture_default_str();
  p->add_flag("--skip-header", prep.skip_header, "skip the first line of each file");
  p->add_option("--rating-threshold", prep.filters.rating_threshold)->capture_default_str();
  p->add_option("--min-user", prep.filters.min_user)->capture_default_str();
  p->add_option("--min-item", prep.filters.min_item)->capture_default_str();
  p->add_option("--min-tag", prep.filters.min_tag)->capture_default_str();
  p->add_option("--split", prep.split, "train,valid,test ratios")->delimiter(',')->expected(3);
  p->add_option("--seed", prep.seed, "split seed")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model; writes a run directory");
  t->add_option("--config", tr.config, "JSON config with flat dotted keys");
  t->add_option("--set", tr.sets, "key=value override (repeatable)");
  t->add_option("--resume", tr.resume, "continue from a run's ckpt_last");
  t->add_option("--bundle", tr.bundle, "dataset bundle (overrides data.bundle)");
  t->add_option("--out", tr.out, "run directory (overrides out_dir)");

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "test metrics and reports for a checkpoint");
  e->add_option("--ckpt", ev.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--bundle", ev.bundle, "dataset bundle (default: from the run config)");
  e->add_option("--config", ev.config, "run config (default: config.json next to the checkpoint)");
  e->add_flag("--groups", ev.groups, "5-group popularity report");
  e->add_flag("--cold-start", ev.cold_start, "metrics on users below the cold-start threshold");
  e->add_flag("--timing", ev.timing, "wall-clock vs best validation recall from history.jsonl");
  e->add_option("--topn", ev.topn, "list length N (default 20)");
  e->add_option("--threads", ev.threads, "ranking threads");
  e->add_option("--out", ev.out, "output directory (default: checkpoint directory)");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "grid sweep; one run directory per cell");
  s->add_option("--config", sw.config, "base config");
  s->add_option("--set", sw.sets, "key=value override applied to every cell");
  s->add_option("--axis", sw.axes, "alpha, beta, gamma, delta or K (repeatable)")->required();
  s->add_option("--jobs", sw.jobs, "concurrent child runs")->capture_default_str();
  s->add_option("--out", sw.out, "sweep root directory")->capture_default_str();

  InspectArgs in;
  auto* ic = app.add_subcommand("inspect-clusters", "tag cluster membership of a checkpoint");
  ic->add_option("--ckpt", in.ckpt)->required()->check(CLI::ExistingFile);
  ic->add_option("--bundle", in.bundle);
  ic->add_option("--config", in.config);
  ic->add_option("--relatedness-csv", in.relatedness_csv, "write M as CSV");
  ic->add_option("--similar-json", in.similar_json, "write similar-item sets as JSON");
  ic->add_option("--delta", in.delta, "Jaccard threshold for --similar-json");

  GradArgs gc;
  auto* g = app.add_subcommand("gradcheck", "finite-difference check of every loss term");
  g->add_option("--loss", gc.losses, "uv, vt, kl, ca, ca_star, ind (repeatable)");
  g->add_option("--backbone", gc.backbone)->capture_default_str();
  g->add_option("--seed", gc.seed)->capture_default_str();
  g->add_option("--tolerance", gc.tolerance)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*p) return cmd_prepare(prep);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_evaluate(ev);
    if (*s) return cmd_sweep(sw);
    if (*ic) return cmd_inspect(in);
    if (*g) return cmd_gradcheck(gc);
  } catch (const ConfigError& err) {
    std::cerr << "imcat: " << err.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "imcat: " << err.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
