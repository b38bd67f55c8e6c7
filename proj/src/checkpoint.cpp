#include "imcat/checkpoint.hpp"

#include <fstream>

#include "binary_io.hpp"

namespace imcat {

namespace {
constexpr char kMagic[5] = "IMCK";
constexpr std::uint32_t kVersion = 1;
}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Model& model) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    io::write_magic(os, kMagic);
    io::write_le<std::uint32_t>(os, kVersion);
    io::write_le<std::uint64_t>(os, model.dims.n_users);
    io::write_le<std::uint64_t>(os, model.dims.n_items);
    io::write_le<std::uint64_t>(os, model.dims.n_tags);
    io::write_le<std::uint64_t>(os, model.dims.d);
    io::write_le<std::uint64_t>(os, model.dims.K);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.backbone));
    model.params.visit([&](const std::string&, const Matrix& m, bool) {
      for (Eigen::Index i = 0; i < m.size(); ++i)
        io::write_le<float>(os, static_cast<float>(m.data()[i]));
    });
    if (!os) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Model read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFile("cannot open checkpoint " + path.string());
  io::expect_magic(is, kMagic, path.string());
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " +
                      std::to_string(version));
  ModelDims dims;
  dims.n_users = io::read_le<std::uint64_t>(is);
  dims.n_items = io::read_le<std::uint64_t>(is);
  dims.n_tags = io::read_le<std::uint64_t>(is);
  dims.d = io::read_le<std::uint64_t>(is);
  dims.K = io::read_le<std::uint64_t>(is);
  const auto tag = io::read_le<std::uint32_t>(is);
  if (tag > 2) throw FormatError(path.string() + ": unknown backbone tag " + std::to_string(tag));
  Model model = init_parameters(dims, static_cast<Backbone>(tag), 0);
  model.params.visit([&](const std::string&, Matrix& m, bool) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = io::read_le<float>(is);
  });
  if (is.peek() != std::char_traits<char>::eof())
    throw FormatError(path.string() + ": trailing bytes after parameter tables");
  return model;
}

void check_compatible(const Model& model, const Dataset& ds) {
  const auto& d = model.dims;
  if (d.n_users != ds.n_users || d.n_items != ds.n_items || d.n_tags != ds.n_tags)
    throw DimMismatch("checkpoint has " + std::to_string(d.n_users) + " users, " +
                      std::to_string(d.n_items) + " items, " + std::to_string(d.n_tags) +
                      " tags; bundle has " + std::to_string(ds.n_users) + ", " +
                      std::to_string(ds.n_items) + ", " + std::to_string(ds.n_tags));
}

}  // namespace imcat
