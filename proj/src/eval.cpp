#include "imcat/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <thread>

namespace imcat {

RankedList rank_for_user(Index user, const Vector& scores, std::span<const Csr* const> exclude,
                         std::size_t N) {
  std::vector<Index> candidates;
  candidates.reserve(static_cast<std::size_t>(scores.size()));
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const auto item = static_cast<Index>(i);
    bool skip = false;
    for (const Csr* m : exclude) skip = skip || m->contains(user, item);
    if (!skip) candidates.push_back(item);
  }
  auto better = [&](Index a, Index b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return a < b;
  };
  const std::size_t n = std::min(N, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n),
                    candidates.end(), better);
  RankedList out;
  out.user = user;
  out.items.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n));
  for (Index i : out.items) out.scores.push_back(scores(i));
  return out;
}

RankedList rank_for_user(const Model& model, Index user, const Csr& train, std::size_t N) {
  const Csr* exclude[] = {&train};
  return rank_for_user(user, score_all_items(model, user), exclude, N);
}

std::vector<RankedList> rank_users(const Model& model, const Csr& targets,
                                   std::span<const Csr* const> exclude, std::size_t N,
                                   std::size_t threads) {
  std::vector<Index> users;
  for (std::size_t u = 0; u < targets.rows(); ++u)
    if (targets.degree(u) > 0) users.push_back(static_cast<Index>(u));
  std::vector<RankedList> out(users.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t k = begin; k < users.size(); k += step)
      out[k] = rank_for_user(users[k], score_all_items(model, users[k]), exclude, N);
  };
  threads = std::max<std::size_t>(1, std::min(threads, users.size()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& th : pool) th.join();
  }
  return out;
}

nlohmann::json Metrics::to_json(std::size_t N) const {
  return {{"recall@" + std::to_string(N), recall},
          {"ndcg@" + std::to_string(N), ndcg},
          {"users", users}};
}

std::vector<UserMetrics> per_user_metrics(std::span<const RankedList> lists, const Csr& test,
                                          std::size_t N) {
  std::vector<UserMetrics> out;
  for (const auto& list : lists) {
    const std::size_t n_test = test.degree(list.user);
    if (n_test == 0) continue;
    Real dcg = 0, idcg = 0;
    std::size_t hits = 0;
    const std::size_t depth = std::min(N, list.items.size());
    for (std::size_t r = 0; r < depth; ++r)
      if (test.contains(list.user, list.items[r])) {
        ++hits;
        dcg += 1.0 / std::log2(static_cast<Real>(r) + 2.0);
      }
    for (std::size_t r = 0; r < std::min(N, n_test); ++r)
      idcg += 1.0 / std::log2(static_cast<Real>(r) + 2.0);
    out.push_back({list.user, static_cast<Real>(hits) / static_cast<Real>(n_test), dcg / idcg});
  }
  return out;
}

Metrics average_metrics(std::span<const UserMetrics> per_user) {
  Metrics m;
  m.users = per_user.size();
  if (per_user.empty()) return m;
  for (const auto& u : per_user) {
    m.recall += u.recall;
    m.ndcg += u.ndcg;
  }
  m.recall /= static_cast<Real>(per_user.size());
  m.ndcg /= static_cast<Real>(per_user.size());
  return m;
}

Metrics compute_metrics(std::span<const RankedList> lists, const Csr& test, std::size_t N) {
  const auto per_user = per_user_metrics(lists, test, N);
  return average_metrics(per_user);
}

Metrics evaluate_model(const Model& model, const Csr& targets,
                       std::span<const Csr* const> exclude, std::size_t N, std::size_t threads) {
  const auto lists = rank_users(model, targets, exclude, N, threads);
  return compute_metrics(lists, targets, N);
}

std::vector<std::vector<Index>> popularity_groups(std::span<const std::size_t> degrees,
                                                  std::size_t n_groups) {
  std::vector<Index> order(degrees.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return degrees[a] < degrees[b]; });
  std::vector<std::vector<Index>> groups(n_groups);
  const std::size_t base = degrees.size() / n_groups, extra = degrees.size() % n_groups;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::size_t size = base + (g < extra ? 1 : 0);
    groups[g].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                     order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  return groups;
}

GroupReport popularity_group_report(std::span<const std::size_t> item_degrees,
                                    std::span<const RankedList> lists, const Csr& test,
                                    std::size_t n_groups, std::size_t N) {
  GroupReport r;
  r.groups = popularity_groups(item_degrees, n_groups);
  std::vector<std::size_t> group_of(item_degrees.size());
  for (std::size_t g = 0; g < n_groups; ++g)
    for (Index i : r.groups[g]) group_of[i] = g;
  r.contributions.assign(n_groups, 0.0);
  r.normalization.assign(n_groups, 1.0);
  std::size_t users = 0;
  for (const auto& list : lists) {
    const std::size_t n_test = test.degree(list.user);
    if (n_test == 0) continue;
    ++users;
    const std::size_t depth = std::min(N, list.items.size());
    for (std::size_t k = 0; k < depth; ++k)
      if (test.contains(list.user, list.items[k]))
        r.contributions[group_of[list.items[k]]] += 1.0 / static_cast<Real>(n_test);
  }
  for (auto& c : r.contributions) c = users ? c / static_cast<Real>(users) : 0.0;
  r.overall_recall = compute_metrics(lists, test, N).recall;
  return r;
}

void normalize_group_reports(std::span<GroupReport> reports) {
  if (reports.empty()) return;
  const std::size_t n = reports.front().contributions.size();
  for (std::size_t g = 0; g < n; ++g) {
    Real best = 0;
    for (const auto& r : reports) best = std::max(best, r.contributions.at(g));
    for (auto& r : reports) r.normalization[g] = best > 0 ? best : 1.0;
  }
}

void GroupReport::write_csv(const std::filesystem::path& path,
                            std::span<const std::size_t> degrees) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << std::setprecision(12) << "group,n_items,min_degree,max_degree,contribution,normalized\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    std::size_t lo = 0, hi = 0;
    if (!groups[g].empty()) {
      lo = degrees[groups[g].front()];
      hi = degrees[groups[g].back()];
    }
    out << "G" << g + 1 << ',' << groups[g].size() << ',' << lo << ',' << hi << ','
        << contributions[g] << ',' << contributions[g] / normalization[g] << '\n';
  }
}

Metrics cold_start_report(std::span<const UserMetrics> per_user,
                          std::span<const std::size_t> user_train_degrees, std::size_t threshold) {
  std::vector<UserMetrics> subset;
  for (const auto& u : per_user)
    if (user_train_degrees[u.user] < threshold) subset.push_back(u);
  if (subset.empty())
    throw EmptySubset("no evaluated user has fewer than " + std::to_string(threshold) +
                      " training interactions");
  return average_metrics(subset);
}

Dataset make_sparse_user_protocol(const Dataset& ds, std::size_t threshold, Real fraction,
                                  std::uint64_t seed) {
  if (threshold < 2) throw ConfigError("cold-start threshold must be at least 2");
  Dataset out = ds;
  Rng rng(seed);
  std::vector<std::pair<Index, Index>> train;
  for (std::size_t u = 0; u < ds.n_users; ++u) {
    auto row = ds.ui_train.row(u);
    std::vector<Index> items(row.begin(), row.end());
    if (items.size() >= threshold && rng.uniform01() < fraction) {
      for (std::size_t i = 0; i < threshold - 1; ++i)
        std::swap(items[i], items[i + rng.uniform_index(items.size() - i)]);
      items.resize(threshold - 1);
    }
    for (Index i : items) train.emplace_back(static_cast<Index>(u), i);
  }
  out.ui_train = Csr::from_pairs(ds.n_users, ds.n_items, std::move(train));
  return out;
}

std::vector<TimingPoint> timing_report(std::span<const EpochTiming> history) {
  std::vector<TimingPoint> out;
  Real elapsed = 0, best = 0;
  for (const auto& e : history) {
    elapsed += e.seconds;
    best = out.empty() ? e.valid_recall : std::max(best, e.valid_recall);
    out.push_back({elapsed, best});
  }
  return out;
}

void write_timing_csv(const std::filesystem::path& path, std::span<const TimingPoint> points) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << std::setprecision(12) << "seconds,best_recall\n";
  for (const auto& p : points) out << p.seconds << ',' << p.best_recall << '\n';
}

std::vector<std::size_t> row_degrees(const Csr& m) {
  std::vector<std::size_t> d(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) d[r] = m.degree(r);
  return d;
}

std::vector<std::size_t> column_degrees(const Csr& m) {
  std::vector<std::size_t> d(m.cols(), 0);
  for (Index c : m.col_idx()) ++d[c];
  return d;
}

}  // namespace imcat
