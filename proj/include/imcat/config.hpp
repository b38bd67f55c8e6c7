#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "imcat/common.hpp"
#include "imcat/model.hpp"

namespace imcat {

/// Every knob of a training run. The JSON form uses flat dotted keys
/// ("lightgcn.layers"); unknown keys are rejected.
struct RunConfig {
  std::string bundle;  // data.bundle
  std::string out_dir = "runs/run";
  Backbone backbone = Backbone::BprMf;

  std::size_t d = 64;
  std::size_t K = 4;
  std::size_t batch = 1024;
  std::size_t align_batch = 1024;
  Real lr = 1e-3;
  Real weight_decay = 1e-3;
  Real eta = 1.0;
  Real tau = 1.0;
  Real alpha = 1.0;
  Real beta = 0.1;
  Real gamma = 0.1;
  Real delta = 0.7;
  Real lambda_ind = 1e-2;
  std::size_t p_max = 4;
  std::size_t max_epochs = 3000;
  std::size_t patience = 100;
  std::size_t pretrain_epochs = 500;
  std::size_t cluster_update_every = 10;
  std::uint64_t seed = 2024;
  bool deterministic = true;
  std::size_t threads = 1;

  int lightgcn_layers = 2;
  bool lightgcn_propagate_every_step = false;
  bool align_propagated = false;
  Real align_expand = 2.0;  // batch cap after adding similar items, as a multiple
  bool independence_on_chunks = false;

  bool no_ui = false;
  bool no_ut = false;
  bool no_projection = false;
  bool no_isa = false;
  bool no_uit = false;

  std::size_t topn = 20;
  std::size_t eval_every = 1;
  bool exclude_valid = false;
  std::size_t checkpoint_every = 10;

  bool cold_start = false;
  std::size_t cold_start_threshold = 10;
  Real cold_start_fraction = 0.5;

  bool quiet = false;

  nlohmann::json to_json() const;
  /// Starts from defaults and applies every key of `j`.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  /// Applies one "key=value" override; the value is parsed with the type of
  /// the key's default.
  void set(const std::string& assignment);
  void validate() const;

  bool alignment_active() const { return beta != 0 && !no_uit; }
  bool clustering_needed() const { return gamma != 0 || alignment_active(); }

  /// Documented keys in output order.
  static std::vector<std::string> keys();
};

/// Grid values per sweep axis: alpha, beta, gamma, delta, K.
std::vector<std::string> sweep_values(const std::string& axis);

}  // namespace imcat
