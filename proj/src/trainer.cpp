#include "imcat/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "imcat/checkpoint.hpp"
#include "imcat/independence.hpp"

#include "binary_io.hpp"

namespace imcat {

// ---------------------------------------------------------------------------
// Joint objective
// ---------------------------------------------------------------------------

LossWeights LossWeights::from_config(const RunConfig& c) {
  LossWeights w;
  w.alpha = c.alpha;
  w.beta = c.no_uit ? 0.0 : c.beta;
  w.gamma = c.gamma;
  w.lambda_ind = c.lambda_ind;
  w.eta = c.eta;
  w.align.tau = c.tau;
  w.align.use_tags = !c.no_ut;
  w.align.use_items = !c.no_ui;
  w.align.use_projection = !c.no_projection;
  w.align.propagated = c.align_propagated;
  w.ind_on_chunks = c.independence_on_chunks;
  return w;
}

nlohmann::json JointLoss::to_json() const {
  return {{"loss", total}, {"uv", uv}, {"vt", vt}, {"ca", ca}, {"kl", kl}, {"ind", ind}};
}

namespace {

std::vector<Index> distinct(std::vector<Index> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace

JointLoss joint_loss(const Model& model, const StepBatches& b, const ClusterInputs* cluster,
                     const LossWeights& w, ParamSet* grads) {
  JointLoss out;
  out.uv = bpr_loss(model, b.ui, SampleMode::UserItem, grads, 1.0);
  if (w.alpha != 0 && !b.vt.empty())
    out.vt = bpr_loss(model, b.vt, SampleMode::ItemTag, grads, w.alpha);
  if (cluster) {
    if (w.beta != 0 && !b.align_items.empty())
      out.ca = alignment_loss(model, cluster->align, b.align_items, b.positives, w.align, grads,
                              w.beta);
    if (w.gamma != 0)
      out.kl = kl_loss(*cluster->target, model.params.tag, model.params.centers, w.eta,
                       grads ? &grads->tag : nullptr, grads ? &grads->centers : nullptr, w.gamma);
    if (w.lambda_ind != 0) {
      if (w.ind_on_chunks) {
        std::vector<Index> users, items;
        for (const auto& t : b.ui) {
          users.push_back(t.anchor);
          items.push_back(t.positive);
          items.push_back(t.negative);
        }
        users = distinct(std::move(users));
        items = distinct(std::move(items));
        const Real half = 0.5 * w.lambda_ind;
        out.ind = 0.5 * (chunk_independence_penalty(model.params.user, users, model.dims.K,
                                                    grads ? &grads->user : nullptr, half) +
                         chunk_independence_penalty(model.params.item, items, model.dims.K,
                                                    grads ? &grads->item : nullptr, half));
      } else {
        out.ind = independence_penalty(model.params.centers, grads ? &grads->centers : nullptr,
                                       w.lambda_ind);
      }
    }
  }
  out.total = out.uv + w.alpha * out.vt + w.beta * out.ca + w.gamma * out.kl +
              w.lambda_ind * out.ind;
  if (!std::isfinite(out.total))
    throw NonFiniteLoss("non-finite loss: " + out.to_json().dump());
  return out;
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

bool EarlyStopper::update(std::size_t epoch, Real value) {
  if (has_best_ && !(value > best_value_)) return false;
  has_best_ = true;
  best_value_ = value;
  best_epoch_ = epoch;
  return true;
}

bool EarlyStopper::should_stop(std::size_t epoch) const {
  const std::size_t anchor = std::max(best_epoch_, hold_until_);
  return epoch >= anchor + patience_;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

nlohmann::json EpochRecord::to_json(std::size_t topn, bool with_time) const {
  nlohmann::json j = {{"epoch", epoch}};
  j.update(loss.to_json());
  if (valid) {
    j["recall@" + std::to_string(topn)] = valid->recall;
    j["ndcg@" + std::to_string(topn)] = valid->ndcg;
  }
  j["clustering"] = clustering_active;
  if (with_time) {
    j["seconds"] = seconds;
    j["elapsed"] = elapsed;
  }
  return j;
}

Trainer::Trainer(const Dataset& dataset, RunConfig config)
    : dataset_(&dataset), config_(std::move(config)) {
  config_.validate();
  if (!dataset.is_split) throw ConfigError("training needs a split dataset");
  if (dataset.ui_train.nnz() == 0) throw ConfigError("training split is empty");
  weights_ = LossWeights::from_config(config_);
  ModelDims dims{dataset.n_users, dataset.n_items, dataset.n_tags, config_.d, config_.K};
  model_ = init_parameters(dims, config_.backbone, config_.seed);
  model_.gcn_layers = config_.lightgcn_layers;
  if (model_.backbone == Backbone::LightGcn) {
    model_.set_graph(dataset.ui_train);
    model_.propagate();
  }
  state_.adam = AdamState::for_params(model_.params);
  state_.rng = Rng(config_.seed + 1);
  item_users_ = dataset.ui_train.transpose();
  similar_ = SimilarSets::empty(config_.K, dataset.n_items);
}

std::size_t Trainer::steps_per_epoch() const {
  const std::size_t n = dataset_->ui_train.nnz();
  return std::max<std::size_t>(1, (n + config_.batch - 1) / config_.batch);
}

ClusterInputs Trainer::cluster_inputs() const {
  ClusterInputs in;
  in.target = &state_.cluster->target;
  in.align.item_users = &item_users_;
  in.align.it_labels = &dataset_->it_labels;
  in.align.assignment = &state_.cluster->assignment;
  in.align.relatedness = &state_.cluster->relatedness;
  return in;
}

bool Trainer::clustering_due() const {
  return config_.clustering_needed() && !state_.clustering_active &&
         state_.epoch >= config_.pretrain_epochs;
}

void Trainer::ensure_propagated(bool every_step) {
  if (model_.backbone != Backbone::LightGcn) return;
  if (every_step && !config_.lightgcn_propagate_every_step) return;
  model_.propagate();
}

StepBatches Trainer::draw_batches() {
  StepBatches b;
  Rng& rng = state_.rng;
  b.ui = sample_bpr_batch(dataset_->ui_train, config_.batch, rng);
  if (weights_.alpha != 0 && dataset_->it_labels.nnz() > 0)
    b.vt = sample_bpr_batch(dataset_->it_labels, config_.batch, rng);
  if (state_.clustering_active && weights_.beta != 0) {
    const std::size_t n = dataset_->n_items;
    const std::size_t B = std::min(config_.align_batch, n);
    std::vector<Index> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 0; i < B; ++i)
      std::swap(perm[i], perm[i + rng.uniform_index(n - i)]);
    perm.resize(B);
    const std::size_t p_max = config_.no_isa ? 1 : config_.p_max;
    const auto cap = std::min<std::size_t>(
        n, static_cast<std::size_t>(std::floor(config_.align_expand * static_cast<Real>(B))));
    b.align_items = expand_with_similar(std::move(perm), similar_, p_max, cap, rng);
    b.positives = sample_positive_sets(b.align_items, similar_, p_max, rng);
  }
  return b;
}

void Trainer::activate_clustering() {
  model_.params.centers = kmeanspp_init(model_.params.tag, config_.K, state_.rng);
  state_.clustering_active = true;
  refresh();
  log_info("clustering active at epoch " + std::to_string(state_.epoch) + " (iteration " +
           std::to_string(state_.iteration) + ")");
}

void Trainer::refresh() {
  std::vector<Index> previous;
  if (state_.cluster) previous = state_.cluster->assignment;
  ClusterState s = refresh_clusters(model_.params.tag, model_.params.centers, dataset_->it_labels,
                                    config_.eta);
  if (state_.cluster) s.recoveries += state_.cluster->recoveries;
  const bool changed = s.assignment != previous;
  state_.cluster = std::move(s);
  if (changed && weights_.beta != 0 && !config_.no_isa)
    similar_ = build_similar_sets(dataset_->it_labels, state_.cluster->assignment, config_.K,
                                  config_.delta);
}

JointLoss Trainer::step() {
  ensure_propagated(true);
  if (state_.clustering_active && state_.iteration % config_.cluster_update_every == 0 &&
      state_.iteration > 0)
    refresh();
  const StepBatches batches = draw_batches();
  ParamSet grads = model_.params.zeros_like();
  ClusterInputs in;
  const ClusterInputs* cluster = nullptr;
  if (state_.clustering_active) {
    in = cluster_inputs();
    cluster = &in;
  }
  const JointLoss loss = joint_loss(model_, batches, cluster, weights_, &grads);
  if (!grads.all_finite())
    throw NonFiniteLoss("non-finite gradient at iteration " + std::to_string(state_.iteration) +
                        ": " + loss.to_json().dump());
  AdamConfig adam;
  adam.lr = config_.lr;
  adam.weight_decay = config_.weight_decay;
  adam_step(model_.params, grads, state_.adam, adam);
  if (!model_.params.all_finite())
    throw NonFiniteLoss("non-finite parameters after iteration " +
                        std::to_string(state_.iteration));
  ++state_.iteration;
  return loss;
}

Metrics Trainer::evaluate(const Csr& targets, bool with_valid_exclusion) {
  if (model_.backbone == Backbone::LightGcn) model_.propagate();
  std::vector<const Csr*> exclude = {&dataset_->ui_train};
  if (with_valid_exclusion) exclude.push_back(&dataset_->ui_valid);
  return evaluate_model(model_, targets, exclude, config_.topn, config_.threads);
}

EpochRecord Trainer::run_epoch() {
  const auto t0 = std::chrono::steady_clock::now();
  if (clustering_due()) activate_clustering();
  ensure_propagated(false);
  EpochRecord rec;
  const std::size_t steps = steps_per_epoch();
  for (std::size_t s = 0; s < steps; ++s) {
    const JointLoss l = step();
    rec.loss.total += l.total;
    rec.loss.uv += l.uv;
    rec.loss.vt += l.vt;
    rec.loss.ca += l.ca;
    rec.loss.kl += l.kl;
    rec.loss.ind += l.ind;
  }
  const Real inv = 1.0 / static_cast<Real>(steps);
  rec.loss.total *= inv;
  rec.loss.uv *= inv;
  rec.loss.vt *= inv;
  rec.loss.ca *= inv;
  rec.loss.kl *= inv;
  rec.loss.ind *= inv;
  ++state_.epoch;
  rec.epoch = state_.epoch;
  rec.clustering_active = state_.clustering_active;
  if (state_.epoch % config_.eval_every == 0 && dataset_->ui_valid.nnz() > 0)
    rec.valid = evaluate(dataset_->ui_valid, false);
  rec.seconds = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
  state_.elapsed_seconds += rec.seconds;
  rec.elapsed = state_.elapsed_seconds;
  return rec;
}

namespace {

void truncate_history(const std::filesystem::path& path, std::size_t last_epoch) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("epoch")) continue;
    if (j["epoch"].get<std::size_t>() <= last_epoch) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

FitResult Trainer::fit(const std::optional<std::filesystem::path>& run_dir,
                       const std::function<void(const EpochRecord&)>& on_epoch) {
  std::ofstream history;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    const auto cfg_path = *run_dir / "config.json";
    if (!std::filesystem::exists(cfg_path)) write_json(cfg_path, config_.to_json());
    truncate_history(*run_dir / "history.jsonl", state_.epoch);
    history.open(*run_dir / "history.jsonl", std::ios::app);
  }
  const std::size_t hold = config_.clustering_needed() ? config_.pretrain_epochs : 0;
  EarlyStopper stopper(config_.patience, hold);
  stopper.restore(state_.best_epoch, state_.best_recall, state_.has_best);

  auto save_last = [&] {
    if (!run_dir) return;
    write_checkpoint(*run_dir / "ckpt_last", model_);
    save_state(*run_dir / "ckpt_last.state");
  };

  FitResult result;
  while (state_.epoch < config_.max_epochs) {
    EpochRecord rec;
    try {
      rec = run_epoch();
    } catch (const NonFiniteLoss& e) {
      if (run_dir)
        write_json(*run_dir / "diagnostics.json",
                   {{"error", e.what()}, {"epoch", state_.epoch + 1},
                    {"iteration", state_.iteration}});
      throw;
    }
    if (rec.valid && stopper.update(rec.epoch, rec.valid->recall)) {
      state_.has_best = true;
      state_.best_epoch = rec.epoch;
      state_.best_recall = rec.valid->recall;
      state_.best_ndcg = rec.valid->ndcg;
      state_.best_params = model_.params;
      if (run_dir) write_checkpoint(*run_dir / "ckpt_best", model_);
    }
    if (history.is_open()) history << rec.to_json(config_.topn).dump() << std::endl;
    if (!config_.quiet) {
      std::ostringstream msg;
      msg << "epoch " << rec.epoch << " loss " << rec.loss.total;
      if (rec.valid) msg << " valid recall@" << config_.topn << " " << rec.valid->recall;
      log_info(msg.str());
    }
    if (on_epoch) on_epoch(rec);
    result.history.push_back(std::move(rec));
    if (state_.epoch % config_.checkpoint_every == 0) save_last();
    if (stopper.should_stop(state_.epoch)) {
      result.stopped_early = true;
      break;
    }
  }
  save_last();

  if (state_.has_best) model_.params = state_.best_params;
  if (model_.backbone == Backbone::LightGcn) model_.propagate();
  result.best_epoch = state_.best_epoch;
  result.best_valid.recall = state_.best_recall;
  result.best_valid.ndcg = state_.best_ndcg;
  result.test = evaluate(dataset_->ui_test, config_.exclude_valid);
  if (run_dir) {
    if (!state_.has_best) write_checkpoint(*run_dir / "ckpt_best", model_);
    const std::string n = std::to_string(config_.topn);
    write_json(*run_dir / "summary.json",
               {{"best_epoch", result.best_epoch},
                {"epochs_run", state_.epoch},
                {"iterations", state_.iteration},
                {"stopped_early", result.stopped_early},
                {"valid", {{"recall@" + n, state_.best_recall}, {"ndcg@" + n, state_.best_ndcg}}},
                {"test", result.test.to_json(config_.topn)},
                {"elapsed_seconds", state_.elapsed_seconds},
                {"cluster_recoveries", state_.cluster ? state_.cluster->recoveries : 0}});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Resumable state
// ---------------------------------------------------------------------------

namespace {

constexpr char kStateMagic[5] = "IMCS";
constexpr std::uint32_t kStateVersion = 1;

void write_params(std::ostream& os, const ParamSet& p) {
  p.visit([&](const std::string&, const Matrix& m, bool) {
    for (Eigen::Index i = 0; i < m.size(); ++i) io::write_le<double>(os, m.data()[i]);
  });
}

void read_params(std::istream& is, ParamSet& p) {
  p.visit([&](const std::string&, Matrix& m, bool) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = io::read_le<double>(is);
  });
}

}  // namespace

void Trainer::save_state(const std::filesystem::path& path) const {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    io::write_magic(os, kStateMagic);
    io::write_le<std::uint32_t>(os, kStateVersion);
    const auto& d = model_.dims;
    for (std::size_t v : {d.n_users, d.n_items, d.n_tags, d.d, d.K})
      io::write_le<std::uint64_t>(os, v);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model_.backbone));
    io::write_le<std::uint64_t>(os, state_.epoch);
    io::write_le<std::uint64_t>(os, state_.iteration);
    io::write_le<std::uint64_t>(os, state_.adam.t);
    io::write_le<std::uint8_t>(os, state_.clustering_active);
    io::write_le<std::uint8_t>(os, state_.has_best);
    io::write_le<std::uint64_t>(os, state_.best_epoch);
    io::write_le<double>(os, state_.best_recall);
    io::write_le<double>(os, state_.best_ndcg);
    io::write_le<double>(os, state_.elapsed_seconds);
    std::ostringstream rng;
    state_.rng.save(rng);
    const std::string text = rng.str();
    io::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_params(os, model_.params);
    write_params(os, state_.adam.m);
    write_params(os, state_.adam.v);
    if (state_.has_best) write_params(os, state_.best_params);
    io::write_le<std::uint8_t>(os, state_.cluster.has_value());
    if (state_.cluster) {
      const auto& c = *state_.cluster;
      for (Eigen::Index i = 0; i < c.target.size(); ++i)
        io::write_le<double>(os, c.target.data()[i]);
      for (Index a : c.assignment) io::write_le<std::uint32_t>(os, a);
      io::write_le<std::uint64_t>(os, c.recoveries);
    }
    if (!os) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void Trainer::load_state(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFile("cannot open training state " + path.string());
  io::expect_magic(is, kStateMagic, path.string());
  if (io::read_le<std::uint32_t>(is) != kStateVersion)
    throw FormatError(path.string() + ": unsupported state version");
  const auto& d = model_.dims;
  for (std::size_t expected : {d.n_users, d.n_items, d.n_tags, d.d, d.K})
    if (io::read_le<std::uint64_t>(is) != expected)
      throw DimMismatch(path.string() + ": state dimensions differ from the configured model");
  if (io::read_le<std::uint32_t>(is) != static_cast<std::uint32_t>(model_.backbone))
    throw DimMismatch(path.string() + ": state backbone differs from the configured model");
  state_.epoch = io::read_le<std::uint64_t>(is);
  state_.iteration = io::read_le<std::uint64_t>(is);
  state_.adam.t = io::read_le<std::uint64_t>(is);
  state_.clustering_active = io::read_le<std::uint8_t>(is) != 0;
  state_.has_best = io::read_le<std::uint8_t>(is) != 0;
  state_.best_epoch = io::read_le<std::uint64_t>(is);
  state_.best_recall = io::read_le<double>(is);
  state_.best_ndcg = io::read_le<double>(is);
  state_.elapsed_seconds = io::read_le<double>(is);
  const auto len = io::read_le<std::uint64_t>(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len)))
    throw FormatError(path.string() + ": truncated RNG state");
  std::istringstream rng(text);
  state_.rng.load(rng);
  read_params(is, model_.params);
  read_params(is, state_.adam.m);
  read_params(is, state_.adam.v);
  if (state_.has_best) {
    state_.best_params = model_.params.zeros_like();
    read_params(is, state_.best_params);
  }
  state_.cluster.reset();
  similar_ = SimilarSets::empty(config_.K, dataset_->n_items);
  if (io::read_le<std::uint8_t>(is) != 0) {
    ClusterState c;
    c.eta = config_.eta;
    c.target.resize(static_cast<Eigen::Index>(d.n_tags), static_cast<Eigen::Index>(d.K));
    for (Eigen::Index i = 0; i < c.target.size(); ++i) c.target.data()[i] = io::read_le<double>(is);
    c.assignment.resize(d.n_tags);
    for (auto& a : c.assignment) a = io::read_le<std::uint32_t>(is);
    c.recoveries = io::read_le<std::uint64_t>(is);
    c.q = soft_assign(model_.params.tag, model_.params.centers, config_.eta);
    c.relatedness = relatedness_matrix(dataset_->it_labels, c.assignment, d.K);
    state_.cluster = std::move(c);
    if (weights_.beta != 0 && !config_.no_isa)
      similar_ = build_similar_sets(dataset_->it_labels, state_.cluster->assignment, config_.K,
                                    config_.delta);
  }
  if (model_.backbone == Backbone::LightGcn) model_.propagate();
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

std::string to_string(LossSelector s) {
  switch (s) {
    case LossSelector::UV: return "uv";
    case LossSelector::VT: return "vt";
    case LossSelector::KL: return "kl";
    case LossSelector::CA: return "ca";
    case LossSelector::CaStar: return "ca_star";
    case LossSelector::Ind: return "ind";
  }
  return "?";
}

LossSelector parse_loss_selector(const std::string& name) {
  for (auto s : {LossSelector::UV, LossSelector::VT, LossSelector::KL, LossSelector::CA,
                 LossSelector::CaStar, LossSelector::Ind})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown loss '" + name + "' (uv, vt, kl, ca, ca_star, ind)");
}

namespace {

// Smallest |input| of any LeakyReLU the loss terms evaluate on this instance,
// over every alignment variant the checks toggle.
Real kink_margin(GradCheckInstance& inst) {
  const Model& m = inst.model;
  const std::size_t K = m.dims.K, c = m.dims.chunk();
  const auto cc = static_cast<Eigen::Index>(c);
  Real margin = std::numeric_limits<Real>::infinity();
  auto visit = [&](const Vector& pre) { margin = std::min(margin, pre.cwiseAbs().minCoeff()); };
  std::vector<const Matrix*> user_src = {&m.params.user}, item_src = {&m.params.item};
  if (m.backbone == Backbone::LightGcn) {
    user_src.push_back(&m.propagated().user);
    item_src.push_back(&m.propagated().item);
  }
  for (std::size_t s = 0; s < user_src.size(); ++s)
    for (std::size_t k = 0; k < K; ++k) {
      const IntentHead& h = m.params.heads[k];
      for (Index j : inst.batches.align_items) {
        visit(h.w1 * aggregate_users(j, inst.item_users, *user_src[s], k, c) + h.b1.transpose());
        const Vector t = fuse_item_tag(aggregate_tags(j, inst.dataset.it_labels,
                                                      inst.cluster.assignment, m.params.tag, k),
                                       item_src[s]->row(j).segment(static_cast<Eigen::Index>(k * c), cc).transpose(),
                                       h);
        const Vector tag_only = l2_normalize(h.w0 * aggregate_tags(j, inst.dataset.it_labels,
                                                                   inst.cluster.assignment,
                                                                   m.params.tag, k) +
                                             h.b0.transpose());
        const Vector item_only =
            l2_normalize(item_src[s]->row(j).segment(static_cast<Eigen::Index>(k * c), cc).transpose());
        for (const Vector* x : {&t, &tag_only, &item_only}) visit(h.w1 * *x + h.b1.transpose());
      }
    }
  if (m.backbone == Backbone::NeuMf)
    for (const auto& tr : inst.batches.ui)
      for (Index item : {tr.positive, tr.negative}) {
        Vector x(2 * m.params.user.cols());
        x << m.params.user.row(tr.anchor).transpose(), m.params.item.row(item).transpose();
        for (std::size_t l = 0; l + 1 < m.params.mlp.size(); ++l) {
          const Vector pre = m.params.mlp[l].w * x + m.params.mlp[l].b.transpose();
          visit(pre);
          x = pre.unaryExpr([](Real v) { return leaky_relu(v); });
        }
      }
  return margin;
}

GradCheckInstance draw_grad_check_instance(Rng& rng, Backbone backbone, std::size_t n,
                                           std::size_t d, std::size_t K) {
  GradCheckInstance inst;
  Dataset& ds = inst.dataset;
  ds.n_users = ds.n_items = ds.n_tags = n;
  // each row observes between 1 and n-1 columns so negatives always exist
  auto random_incidence = [&] {
    std::vector<std::pair<Index, Index>> pairs;
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<Index> cols(n);
      std::iota(cols.begin(), cols.end(), 0);
      const std::size_t m = 1 + rng.uniform_index(n - 1);
      for (std::size_t i = 0; i < m; ++i) {
        std::swap(cols[i], cols[i + rng.uniform_index(n - i)]);
        pairs.emplace_back(static_cast<Index>(r), cols[i]);
      }
    }
    return Csr::from_pairs(n, n, std::move(pairs));
  };
  ds.ui_train = random_incidence();
  ds.ui_all = ds.ui_train;
  ds.ui_valid = Csr(n, n);
  ds.ui_test = Csr(n, n);
  ds.it_labels = random_incidence();
  ds.is_split = true;
  inst.item_users = ds.ui_train.transpose();

  inst.model = init_parameters({n, n, n, d, K}, backbone, rng.next());
  inst.model.params.visit([&](const std::string&, Matrix& m, bool is_weight) {
    if (!is_weight)
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-0.5, 0.5);
  });
  inst.model.params.centers =
      Matrix::NullaryExpr(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(d),
                          [&] { return rng.uniform(-1.0, 1.0); });
  if (backbone == Backbone::LightGcn) {
    inst.model.set_graph(ds.ui_train);
    inst.model.propagate();
  }

  inst.batches.ui = sample_bpr_batch(ds.ui_train, n, rng);
  inst.batches.vt = sample_bpr_batch(ds.it_labels, n, rng);
  inst.cluster = refresh_clusters(inst.model.params.tag, inst.model.params.centers, ds.it_labels,
                                  inst.eta);
  // perturb M away from its count-based values so every weight differs
  for (Eigen::Index j = 0; j < inst.cluster.relatedness.rows(); ++j) {
    for (Eigen::Index k = 0; k < inst.cluster.relatedness.cols(); ++k)
      inst.cluster.relatedness(j, k) *= rng.uniform(0.5, 1.5);
    inst.cluster.relatedness.row(j) /= inst.cluster.relatedness.row(j).sum();
  }
  inst.similar = build_similar_sets(ds.it_labels, inst.cluster.assignment, K, 0.3);

  inst.batches.align_items.resize(n);
  std::iota(inst.batches.align_items.begin(), inst.batches.align_items.end(), 0);
  for (std::size_t k = 0; k < K; ++k) {
    PositiveSets sets(n);
    for (std::size_t a = 0; a < n; ++a) {
      sets[a].push_back(static_cast<Index>(a));
      for (std::size_t o = 0; o < n; ++o)
        if (o != a && rng.uniform01() < 0.3 && sets[a].size() < 3)
          sets[a].push_back(static_cast<Index>(o));
    }
    inst.batches.positives.push_back(std::move(sets));
  }
  return inst;
}

}  // namespace

GradCheckInstance make_grad_check_instance(std::uint64_t seed, Backbone backbone, std::size_t n,
                                           std::size_t d, std::size_t K) {
  if (n < 3) throw ConfigError("grad-check instances need at least 3 entities per class");
  Rng rng(seed);
  // Redraw until no LeakyReLU input sits near its kink, where central
  // differences straddle the slope change.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    GradCheckInstance inst = draw_grad_check_instance(rng, backbone, n, d, K);
    if (kink_margin(inst) > kGradCheckKinkMargin) return inst;
  }
  throw CheckFailed("could not draw a grad-check instance away from activation kinks");
}

namespace {

Real selected_loss(GradCheckInstance& inst, LossSelector s, ParamSet* grads) {
  Model& m = inst.model;
  if (m.backbone == Backbone::LightGcn) m.propagate();
  AlignmentContext ctx{&inst.item_users, &inst.dataset.it_labels, &inst.cluster.assignment,
                       &inst.cluster.relatedness};
  switch (s) {
    case LossSelector::UV: return bpr_loss(m, inst.batches.ui, SampleMode::UserItem, grads);
    case LossSelector::VT: return bpr_loss(m, inst.batches.vt, SampleMode::ItemTag, grads);
    case LossSelector::KL:
      return kl_loss(inst.cluster.target, m.params.tag, m.params.centers, inst.eta,
                     grads ? &grads->tag : nullptr, grads ? &grads->centers : nullptr);
    case LossSelector::CA: {
      std::vector<PositiveSets> self(m.dims.K, PositiveSets(inst.batches.align_items.size()));
      for (auto& sets : self)
        for (std::size_t a = 0; a < sets.size(); ++a) sets[a] = {static_cast<Index>(a)};
      return alignment_loss(m, ctx, inst.batches.align_items, self, inst.align, grads);
    }
    case LossSelector::CaStar:
      return alignment_loss(m, ctx, inst.batches.align_items, inst.batches.positives, inst.align,
                            grads);
    case LossSelector::Ind:
      return independence_penalty(m.params.centers, grads ? &grads->centers : nullptr);
  }
  return 0;
}

}  // namespace

GradCheckReport grad_check(GradCheckInstance& inst, LossSelector selector, Real tolerance) {
  ParamSet analytic = inst.model.params.zeros_like();
  selected_loss(inst, selector, &analytic);
  std::vector<const Matrix*> g;
  analytic.visit([&](const std::string&, const Matrix& m, bool) { g.push_back(&m); });

  GradCheckReport report;
  report.selector = selector;
  std::size_t t = 0;
  inst.model.params.visit([&](const std::string& name, Matrix& p, bool) {
    Real table_max = 0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const Real x = p.data()[i];
      p.data()[i] = x + kGradCheckStep;
      const Real fp = selected_loss(inst, selector, nullptr);
      p.data()[i] = x - kGradCheckStep;
      const Real fm = selected_loss(inst, selector, nullptr);
      p.data()[i] = x;
      const Real num = (fp - fm) / (2 * kGradCheckStep);
      const Real ana = g[t]->data()[i];
      const Real err =
          std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), kGradCheckFloor});
      table_max = std::max(table_max, err);
      if (err > report.max_rel_error || report.checked == 0) {
        report.max_rel_error = err;
        report.worst = name + "[" + std::to_string(i) + "]";
      }
      ++report.checked;
    }
    report.per_param.emplace_back(name, table_max);
    ++t;
  });
  if (inst.model.backbone == Backbone::LightGcn) inst.model.propagate();
  if (report.max_rel_error > tolerance) {
    std::string bad;
    for (const auto& [name, err] : report.per_param)
      if (err > tolerance) bad += " " + name + "=" + std::to_string(err);
    throw CheckFailed("gradient check failed for " + to_string(selector) + ":" + bad);
  }
  return report;
}

}  // namespace imcat
