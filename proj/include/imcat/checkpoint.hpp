#pragma once

#include <filesystem>

#include "imcat/model.hpp"

namespace imcat {

// Checkpoint layout (little-endian):
//   char[4] magic "IMCK"
//   u32     version (1)
//   u64     n_users, n_items, n_tags, d, K
//   u32     backbone (0 bprmf, 1 neumf, 2 lightgcn)
//   f32     every parameter table, row-major, in ParamSet::visit order
//           (user, item, tag, centers, per-intent heads, scorer layers)

void write_checkpoint(const std::filesystem::path& path, const Model& model);

/// Rebuilds a model from a checkpoint. The LightGCN graph is not stored; call
/// Model::set_graph before scoring.
Model read_checkpoint(const std::filesystem::path& path);

/// Throws DimMismatch unless the model's entity counts match the dataset.
void check_compatible(const Model& model, const Dataset& dataset);

}  // namespace imcat
