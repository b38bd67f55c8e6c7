#include "imcat/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <type_traits>

namespace imcat {

namespace {

using nlohmann::json;

struct Field {
  std::string key;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> put;
};

template <typename T>
T convert(const std::string& key, const json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(key + ": expected a boolean");
    return v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(key + ": expected an integer");
    if constexpr (std::is_unsigned_v<T>)
      if (v.get<std::int64_t>() < 0 && !v.is_number_unsigned())
        throw ConfigError(key + ": expected a non-negative integer");
    return v.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(key + ": expected a number");
    return v.get<T>();
  } else {
    if (!v.is_string()) throw ConfigError(key + ": expected a string");
    return v.get<T>();
  }
}

template <typename T>
Field field(std::string key, T RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return json(c.*member); },
          [key, member](RunConfig& c, const json& v) { c.*member = convert<T>(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(field("data.bundle", &RunConfig::bundle));
    f.push_back(field("out_dir", &RunConfig::out_dir));
    f.push_back({"backbone", [](const RunConfig& c) { return json(to_string(c.backbone)); },
                 [](RunConfig& c, const json& v) {
                   c.backbone = parse_backbone(convert<std::string>("backbone", v));
                 }});
    f.push_back(field("d", &RunConfig::d));
    f.push_back(field("K", &RunConfig::K));
    f.push_back(field("batch", &RunConfig::batch));
    f.push_back(field("align_batch", &RunConfig::align_batch));
    f.push_back(field("lr", &RunConfig::lr));
    f.push_back(field("weight_decay", &RunConfig::weight_decay));
    f.push_back(field("eta", &RunConfig::eta));
    f.push_back(field("tau", &RunConfig::tau));
    f.push_back(field("alpha", &RunConfig::alpha));
    f.push_back(field("beta", &RunConfig::beta));
    f.push_back(field("gamma", &RunConfig::gamma));
    f.push_back(field("delta", &RunConfig::delta));
    f.push_back(field("lambda_ind", &RunConfig::lambda_ind));
    f.push_back(field("p_max", &RunConfig::p_max));
    f.push_back(field("max_epochs", &RunConfig::max_epochs));
    f.push_back(field("patience", &RunConfig::patience));
    f.push_back(field("pretrain_epochs", &RunConfig::pretrain_epochs));
    f.push_back(field("cluster_update_every", &RunConfig::cluster_update_every));
    f.push_back(field("seed", &RunConfig::seed));
    f.push_back(field("deterministic", &RunConfig::deterministic));
    f.push_back(field("threads", &RunConfig::threads));
    f.push_back(field("lightgcn.layers", &RunConfig::lightgcn_layers));
    f.push_back(field("lightgcn.propagate_every_step", &RunConfig::lightgcn_propagate_every_step));
    f.push_back(field("align.propagated", &RunConfig::align_propagated));
    f.push_back(field("align.expand", &RunConfig::align_expand));
    f.push_back(field("independence.on_chunks", &RunConfig::independence_on_chunks));
    f.push_back(field("ablation.no_ui", &RunConfig::no_ui));
    f.push_back(field("ablation.no_ut", &RunConfig::no_ut));
    f.push_back(field("ablation.no_projection", &RunConfig::no_projection));
    f.push_back(field("ablation.no_isa", &RunConfig::no_isa));
    f.push_back(field("ablation.no_uit", &RunConfig::no_uit));
    f.push_back(field("eval.topn", &RunConfig::topn));
    f.push_back(field("eval.every", &RunConfig::eval_every));
    f.push_back(field("eval.exclude_valid", &RunConfig::exclude_valid));
    f.push_back(field("checkpoint.every", &RunConfig::checkpoint_every));
    f.push_back(field("cold_start.enabled", &RunConfig::cold_start));
    f.push_back(field("cold_start.threshold", &RunConfig::cold_start_threshold));
    f.push_back(field("cold_start.fraction", &RunConfig::cold_start_fraction));
    f.push_back(field("quiet", &RunConfig::quiet));
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

json parse_scalar(const std::string& key, const std::string& text, const json& like) {
  if (like.is_boolean()) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + text + "'");
  }
  if (like.is_string()) return text;
  if (like.is_number_integer()) {
    std::int64_t v = 0;
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size())
      throw ConfigError(key + ": expected an integer, got '" + text + "'");
    return v;
  }
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty())
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  return v;
}

}  // namespace

json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) find_field(key).put(c, value);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const Field& f = find_field(key);
  f.put(*this, parse_scalar(key, assignment.substr(eq + 1), f.get(*this)));
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(d > 0 && K > 0, "d and K must be positive");
  require(d % K == 0, "K must divide d");
  require(batch > 0 && align_batch > 0, "batch sizes must be positive");
  require(lr > 0 && std::isfinite(lr), "lr must be positive");
  require(weight_decay >= 0, "weight_decay must be non-negative");
  require(eta > 0 && tau > 0, "eta and tau must be positive");
  require(alpha >= 0 && beta >= 0 && gamma >= 0 && lambda_ind >= 0,
          "loss weights must be non-negative");
  require(delta > 0 && delta < 1, "delta must lie in (0, 1)");
  require(p_max >= 1, "p_max must be at least 1");
  require(cluster_update_every >= 1, "cluster_update_every must be at least 1");
  require(lightgcn_layers >= 0, "lightgcn.layers must be non-negative");
  require(align_expand >= 1, "align.expand must be at least 1");
  require(!(no_ui && no_ut) || no_uit, "ablation.no_ui together with no_ut means no_uit");
  require(topn > 0 && eval_every > 0, "eval.topn and eval.every must be positive");
  require(cold_start_fraction >= 0 && cold_start_fraction <= 1,
          "cold_start.fraction must lie in [0, 1]");
  require(cold_start_threshold >= 2, "cold_start.threshold must be at least 2");
  require(threads >= 1, "threads must be at least 1");
  require(checkpoint_every >= 1, "checkpoint.every must be at least 1");
}

std::vector<std::string> sweep_values(const std::string& axis) {
  if (axis == "alpha" || axis == "beta" || axis == "gamma")
    return {"0.001", "0.01", "0.1", "1", "5", "10"};
  if (axis == "delta") return {"0.1", "0.3", "0.5", "0.7", "0.9"};
  if (axis == "K") return {"1", "2", "4", "8", "16"};
  throw ConfigError("unknown sweep axis '" + axis + "' (alpha, beta, gamma, delta, K)");
}

}  // namespace imcat
