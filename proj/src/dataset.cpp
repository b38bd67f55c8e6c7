#include "imcat/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace imcat {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

double parse_real(std::string_view s, std::size_t line) {
  // std::from_chars for double is not available on every toolchain we target.
  std::string tmp(s);
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size() || errno == ERANGE)
    throw ParseError(line, "not a number: '" + tmp + "'");
  return v;
}

std::int64_t parse_int(std::string_view s, std::size_t line) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError(line, "not an integer: '" + std::string(s) + "'");
  return v;
}

// Calls on_fields(fields, line_number) for every non-empty data line.
template <typename F>
void for_each_record(const std::filesystem::path& path, const Schema& schema, F&& on_fields) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && schema.skip_header) continue;
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (fields.size() != schema.columns.size())
      throw ParseError(line_no, "expected " + std::to_string(schema.columns.size()) +
                                    " tab-separated fields, found " +
                                    std::to_string(fields.size()));
    for (std::size_t i = 0; i < fields.size(); ++i)
      if (fields[i].empty() && schema.columns[i] != Column::Skip)
        throw ParseError(line_no, "empty field in column " + std::to_string(i + 1));
    on_fields(fields, line_no);
  }
}

}  // namespace

Schema Schema::parse(const std::string& spec, bool skip_header) {
  Schema schema;
  schema.skip_header = skip_header;
  std::stringstream ss(spec);
  std::string name;
  while (std::getline(ss, name, ',')) {
    if (name == "user") schema.columns.push_back(Column::User);
    else if (name == "item") schema.columns.push_back(Column::Item);
    else if (name == "rating") schema.columns.push_back(Column::Rating);
    else if (name == "timestamp") schema.columns.push_back(Column::Timestamp);
    else if (name == "tag") schema.columns.push_back(Column::Tag);
    else if (name == "skip") schema.columns.push_back(Column::Skip);
    else throw ConfigError("unknown schema column '" + name + "'");
  }
  for (Column c : {Column::User, Column::Item, Column::Rating, Column::Timestamp, Column::Tag})
    if (std::count(schema.columns.begin(), schema.columns.end(), c) > 1)
      throw ConfigError("schema column repeated: " + spec);
  return schema;
}

bool Schema::has(Column c) const {
  return std::find(columns.begin(), columns.end(), c) != columns.end();
}

std::vector<RawInteraction> load_interactions(const std::filesystem::path& path,
                                              const Schema& schema) {
  if (!schema.has(Column::User) || !schema.has(Column::Item))
    throw ConfigError("interaction schema needs user and item columns");
  std::vector<RawInteraction> rows;
  for_each_record(path, schema, [&](const auto& fields, std::size_t line) {
    RawInteraction r;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      switch (schema.columns[i]) {
        case Column::User: r.user_ref = std::string(fields[i]); break;
        case Column::Item: r.item_ref = std::string(fields[i]); break;
        case Column::Rating: {
          double v = parse_real(fields[i], line);
          if (!std::isfinite(v) || v < schema.rating_min || v > schema.rating_max)
            throw ParseError(line, "rating out of range: " + std::string(fields[i]));
          r.rating = v;
          break;
        }
        case Column::Timestamp: r.timestamp = parse_int(fields[i], line); break;
        case Column::Tag:
        case Column::Skip: break;
      }
    }
    rows.push_back(std::move(r));
  });
  return rows;
}

std::vector<RawTagging> load_taggings(const std::filesystem::path& path, const Schema& schema) {
  if (!schema.has(Column::Item) || !schema.has(Column::Tag))
    throw ConfigError("tagging schema needs item and tag columns");
  std::vector<RawTagging> rows;
  for_each_record(path, schema, [&](const auto& fields, std::size_t) {
    RawTagging r;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (schema.columns[i] == Column::Item) r.item_ref = std::string(fields[i]);
      if (schema.columns[i] == Column::Tag) r.tag_ref = std::string(fields[i]);
    }
    rows.push_back(std::move(r));
  });
  return rows;
}

Index IdMap::intern(const std::string& external) {
  auto [it, inserted] = dense_.try_emplace(external, static_cast<Index>(external_.size()));
  if (inserted) external_.push_back(external);
  return it->second;
}

std::optional<Index> IdMap::find(const std::string& external) const {
  auto it = dense_.find(external);
  if (it == dense_.end()) return std::nullopt;
  return it->second;
}

Index IdMap::encode(const std::string& external) const {
  auto id = find(external);
  if (!id) throw Error("unknown external id '" + external + "'");
  return *id;
}

Dataset apply_filters(const std::vector<RawInteraction>& raw_ui,
                      const std::vector<RawTagging>& raw_it, const FilterConfig& config) {
  if (raw_ui.empty() || raw_it.empty()) throw EmptyAfterFilter("raw input is empty");

  // Provisional IDs in first-appearance order over the binarized rows. Rows
  // without a rating count as implicit positives.
  IdMap users0, items0, tags0;
  std::set<std::pair<Index, Index>> ui_set, it_set;
  for (const auto& r : raw_ui) {
    if (r.rating && *r.rating < config.rating_threshold) continue;
    Index u = users0.intern(r.user_ref);
    Index i = items0.intern(r.item_ref);
    ui_set.emplace(u, i);
  }
  for (const auto& r : raw_it) {
    auto i = items0.find(r.item_ref);
    if (!i) continue;  // items never interacted with are not part of the catalogue
    it_set.emplace(*i, tags0.intern(r.tag_ref));
  }
  std::vector<std::pair<Index, Index>> ui(ui_set.begin(), ui_set.end());
  std::vector<std::pair<Index, Index>> it(it_set.begin(), it_set.end());

  std::vector<char> user_alive(users0.size(), 1), item_alive(items0.size(), 1),
      tag_alive(tags0.size(), 1);
  std::size_t passes = 0;
  while (true) {
    ++passes;
    std::vector<std::size_t> udeg(users0.size(), 0), ideg(items0.size(), 0),
        tdeg(tags0.size(), 0);
    for (auto [u, i] : ui)
      if (user_alive[u] && item_alive[i]) ++udeg[u], ++ideg[i];
    for (auto [i, t] : it)
      if (item_alive[i] && tag_alive[t]) ++tdeg[t];
    bool changed = false;
    for (std::size_t u = 0; u < udeg.size(); ++u)
      if (user_alive[u] && udeg[u] < config.min_user) user_alive[u] = 0, changed = true;
    for (std::size_t i = 0; i < ideg.size(); ++i)
      if (item_alive[i] && ideg[i] < config.min_item) item_alive[i] = 0, changed = true;
    for (std::size_t t = 0; t < tdeg.size(); ++t)
      if (tag_alive[t] && tdeg[t] < config.min_tag) tag_alive[t] = 0, changed = true;
    if (!changed) break;
  }
  log_info("degree filtering passes: " + std::to_string(passes));

  Dataset ds;
  ds.filter_passes = passes;
  auto renumber = [](const IdMap& from, const std::vector<char>& alive, IdMap& to) {
    std::vector<Index> remap(from.size(), static_cast<Index>(-1));
    for (Index k = 0; k < from.size(); ++k)
      if (alive[k]) remap[k] = to.intern(from.decode(k));
    return remap;
  };
  auto user_map = renumber(users0, user_alive, ds.users);
  auto item_map = renumber(items0, item_alive, ds.items);
  auto tag_map = renumber(tags0, tag_alive, ds.tags);
  ds.n_users = ds.users.size();
  ds.n_items = ds.items.size();
  ds.n_tags = ds.tags.size();
  if (ds.n_users == 0 || ds.n_items == 0 || ds.n_tags == 0)
    throw EmptyAfterFilter("filtering left " + std::to_string(ds.n_users) + " users, " +
                           std::to_string(ds.n_items) + " items, " +
                           std::to_string(ds.n_tags) + " tags");

  std::vector<std::pair<Index, Index>> ui_pairs, it_pairs;
  for (auto [u, i] : ui)
    if (user_alive[u] && item_alive[i]) ui_pairs.emplace_back(user_map[u], item_map[i]);
  for (auto [i, t] : it)
    if (item_alive[i] && tag_alive[t]) it_pairs.emplace_back(item_map[i], tag_map[t]);
  ds.ui_all = Csr::from_pairs(ds.n_users, ds.n_items, std::move(ui_pairs));
  ds.it_labels = Csr::from_pairs(ds.n_items, ds.n_tags, std::move(it_pairs));
  ds.ui_train = ds.ui_all;
  ds.ui_valid = Csr(ds.n_users, ds.n_items);
  ds.ui_test = Csr(ds.n_users, ds.n_items);
  return ds;
}

SplitCounts split_counts(std::size_t n, const SplitRatios& ratios) {
  // The epsilon absorbs representation error such as 0.1 * 30 = 3.0000000000000004.
  auto part = [n](double r) {
    auto k = static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
    return std::max<std::size_t>(1, k);
  };
  SplitCounts c{0, part(ratios.valid), part(ratios.test)};
  if (c.valid + c.test >= n)
    throw Error("user with " + std::to_string(n) + " interactions cannot be split");
  c.train = n - c.valid - c.test;
  return c;
}

Dataset split_dataset(const Dataset& dataset, const SplitRatios& ratios, std::uint64_t seed) {
  Dataset out = dataset;
  Rng rng(seed);
  std::vector<std::pair<Index, Index>> train, valid, test;
  for (std::size_t u = 0; u < dataset.n_users; ++u) {
    auto row = dataset.ui_all.row(u);
    std::vector<Index> items(row.begin(), row.end());
    for (std::size_t i = items.size(); i > 1; --i)
      std::swap(items[i - 1], items[rng.uniform_index(i)]);
    auto c = split_counts(items.size(), ratios);
    const auto uu = static_cast<Index>(u);
    for (std::size_t k = 0; k < items.size(); ++k) {
      if (k < c.test) test.emplace_back(uu, items[k]);
      else if (k < c.test + c.valid) valid.emplace_back(uu, items[k]);
      else train.emplace_back(uu, items[k]);
    }
  }
  out.ui_train = Csr::from_pairs(dataset.n_users, dataset.n_items, std::move(train));
  out.ui_valid = Csr::from_pairs(dataset.n_users, dataset.n_items, std::move(valid));
  out.ui_test = Csr::from_pairs(dataset.n_users, dataset.n_items, std::move(test));
  out.is_split = true;
  return out;
}

nlohmann::json DatasetStats::to_json() const {
  return {{"n_users", n_users},       {"n_items", n_items},
          {"n_tags", n_tags},         {"ui_pairs", ui_pairs},
          {"ui_density", ui_density}, {"ui_avg_degree", ui_avg_degree},
          {"it_pairs", it_pairs},     {"it_density", it_density},
          {"it_avg_degree", it_avg_degree}};
}

DatasetStats compute_stats(const Dataset& ds) {
  DatasetStats s;
  s.n_users = ds.n_users;
  s.n_items = ds.n_items;
  s.n_tags = ds.n_tags;
  s.ui_pairs = ds.ui_all.nnz();
  s.it_pairs = ds.it_labels.nnz();
  auto density = [](std::size_t pairs, std::size_t r, std::size_t c) {
    return r && c ? static_cast<double>(pairs) / (static_cast<double>(r) * static_cast<double>(c))
                  : 0.0;
  };
  s.ui_density = density(s.ui_pairs, s.n_users, s.n_items);
  s.ui_avg_degree = s.n_users ? static_cast<double>(s.ui_pairs) / s.n_users : 0.0;
  s.it_density = density(s.it_pairs, s.n_items, s.n_tags);
  s.it_avg_degree = s.n_items ? static_cast<double>(s.it_pairs) / s.n_items : 0.0;
  return s;
}

std::vector<BprTriplet> sample_bpr_batch(const Csr& observed, std::size_t batch_size, Rng& rng) {
  if (observed.nnz() == 0) throw Error("cannot sample from an empty training matrix");
  std::vector<BprTriplet> batch;
  batch.reserve(batch_size);
  const std::size_t cols = observed.cols();
  int anchor_failures = 0;
  while (batch.size() < batch_size) {
    const std::size_t entry = rng.uniform_index(observed.nnz());
    const std::size_t row = observed.row_of_entry(entry);
    const Index pos = observed.col_idx()[entry];
    bool found = false;
    if (observed.degree(row) < cols) {
      for (int attempt = 0; attempt < kMaxNegativeRetries; ++attempt) {
        auto neg = static_cast<Index>(rng.uniform_index(cols));
        if (!observed.contains(row, neg)) {
          batch.push_back({static_cast<Index>(row), pos, neg});
          found = true;
          break;
        }
      }
    }
    if (found) {
      anchor_failures = 0;
    } else if (++anchor_failures >= kMaxAnchorResamples) {
      throw NoNegativeAvailable("no negative found after " +
                                std::to_string(kMaxAnchorResamples) + " anchor resamples");
    }
  }
  return batch;
}

std::vector<BprTriplet> sample_bpr_batch(const Dataset& dataset, SampleMode mode,
                                         std::size_t batch_size, Rng& rng) {
  return sample_bpr_batch(mode == SampleMode::UserItem ? dataset.ui_train : dataset.it_labels,
                          batch_size, rng);
}

}  // namespace imcat
