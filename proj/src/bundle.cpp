#include <fstream>

#include "binary_io.hpp"
#include "imcat/dataset.hpp"

namespace imcat {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kIncidenceVersion = 1;

void write_id_map(const fs::path& path, const IdMap& map) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t k = 0; k < map.size(); ++k) out << k << '\t' << map.decode(k) << '\n';
}

IdMap read_id_map(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open " + path.string());
  IdMap map;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(line_no, "expected dense<TAB>external");
    if (std::stoull(line.substr(0, tab)) != map.size())
      throw ParseError(line_no, "dense ids must be contiguous and ordered");
    map.intern(line.substr(tab + 1));
  }
  return map;
}

Csr union_of(const Csr& a, const Csr& b, const Csr& c) {
  auto pairs = a.pairs();
  for (const auto* m : {&b, &c}) {
    auto more = m->pairs();
    pairs.insert(pairs.end(), more.begin(), more.end());
  }
  return Csr::from_pairs(a.rows(), a.cols(), std::move(pairs));
}

}  // namespace

void write_incidence(const fs::path& path, const Csr& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  io::write_magic(out, "IMCT");
  io::write_le<std::uint32_t>(out, kIncidenceVersion);
  io::write_le<std::uint64_t>(out, m.rows());
  io::write_le<std::uint64_t>(out, m.cols());
  for (auto p : m.row_ptr()) io::write_le<std::uint64_t>(out, p);
  for (auto c : m.col_idx()) io::write_le<std::uint32_t>(out, c);
  if (!out) throw Error("write failed: " + path.string());
}

Csr read_incidence(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile("cannot open " + path.string());
  io::expect_magic(in, "IMCT", path.string());
  auto version = io::read_le<std::uint32_t>(in);
  if (version != kIncidenceVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  auto rows = io::read_le<std::uint64_t>(in);
  auto cols = io::read_le<std::uint64_t>(in);
  std::vector<std::uint64_t> row_ptr(rows + 1);
  for (auto& p : row_ptr) p = io::read_le<std::uint64_t>(in);
  std::vector<Index> col_idx(row_ptr.back());
  for (auto& c : col_idx) c = io::read_le<std::uint32_t>(in);
  return Csr(rows, cols, std::move(row_ptr), std::move(col_idx));
}

void write_bundle(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  write_incidence(dir / "ui_train.imct", ds.ui_train);
  write_incidence(dir / "ui_valid.imct", ds.ui_valid);
  write_incidence(dir / "ui_test.imct", ds.ui_test);
  write_incidence(dir / "it_labels.imct", ds.it_labels);
  write_id_map(dir / "users.tsv", ds.users);
  write_id_map(dir / "items.tsv", ds.items);
  write_id_map(dir / "tags.tsv", ds.tags);
  std::ofstream(dir / "stats.json") << compute_stats(ds).to_json().dump(2) << '\n';
}

Dataset read_bundle(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingFile("bundle directory not found: " + dir.string());
  Dataset ds;
  ds.ui_train = read_incidence(dir / "ui_train.imct");
  ds.ui_valid = read_incidence(dir / "ui_valid.imct");
  ds.ui_test = read_incidence(dir / "ui_test.imct");
  ds.it_labels = read_incidence(dir / "it_labels.imct");
  ds.users = read_id_map(dir / "users.tsv");
  ds.items = read_id_map(dir / "items.tsv");
  ds.tags = read_id_map(dir / "tags.tsv");
  ds.n_users = ds.users.size();
  ds.n_items = ds.items.size();
  ds.n_tags = ds.tags.size();
  for (const auto* m : {&ds.ui_train, &ds.ui_valid, &ds.ui_test})
    if (m->rows() != ds.n_users || m->cols() != ds.n_items)
      throw DimMismatch("interaction matrix shape disagrees with id maps");
  if (ds.it_labels.rows() != ds.n_items || ds.it_labels.cols() != ds.n_tags)
    throw DimMismatch("item-tag matrix shape disagrees with id maps");
  ds.ui_all = union_of(ds.ui_train, ds.ui_valid, ds.ui_test);
  ds.is_split = true;
  return ds;
}

}  // namespace imcat
