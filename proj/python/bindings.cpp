#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "imcat/alignment.hpp"
#include "imcat/checkpoint.hpp"
#include "imcat/clustering.hpp"
#include "imcat/config.hpp"
#include "imcat/dataset.hpp"
#include "imcat/eval.hpp"
#include "imcat/model.hpp"
#include "imcat/trainer.hpp"

namespace py = pybind11;
using namespace imcat;

namespace {

py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

Csr csr_from_pairs(std::size_t rows, std::size_t cols,
                   const std::vector<std::pair<Index, Index>>& pairs) {
  return Csr::from_pairs(rows, cols, pairs);
}

py::dict params_dict(const ParamSet& p) {
  py::dict out;
  p.visit([&](const std::string& name, const Matrix& m, bool) { out[py::str(name)] = m; });
  return out;
}

AlignmentBatch make_batch(const std::vector<Matrix>& users, const std::vector<Matrix>& fused,
                          const Matrix& relatedness, const std::vector<PositiveSets>& positives) {
  if (users.size() != fused.size()) throw DimError("users and fused need one matrix per intent");
  AlignmentBatch b;
  for (std::size_t k = 0; k < users.size(); ++k) b.intents.push_back({users[k], fused[k]});
  const auto B = users.empty() ? 0 : static_cast<std::size_t>(users[0].rows());
  for (std::size_t a = 0; a < B; ++a) b.items.push_back(static_cast<Index>(a));
  b.relatedness = relatedness;
  b.positives = positives;
  return b;
}

std::vector<const Csr*> exclusions(const Dataset& ds, bool with_valid) {
  std::vector<const Csr*> ex = {&ds.ui_train};
  if (with_valid) ex.push_back(&ds.ui_valid);
  return ex;
}

}  // namespace

PYBIND11_MODULE(_imcat, m) {
  m.doc() = "Tag-enhanced recommendation with intent clustering and alignment";

  auto error = py::register_exception<Error>(m, "Error");
  py::register_exception<MissingFile>(m, "MissingFile", error);
  py::register_exception<EmptyAfterFilter>(m, "EmptyAfterFilter", error);
  py::register_exception<NoNegativeAvailable>(m, "NoNegativeAvailable", error);
  py::register_exception<DimError>(m, "DimError", error);
  py::register_exception<StaleCache>(m, "StaleCache", error);
  py::register_exception<DegenerateCluster>(m, "DegenerateCluster", error);
  py::register_exception<NonFiniteLoss>(m, "NonFiniteLoss", error);
  py::register_exception<CheckFailed>(m, "CheckFailed", error);
  py::register_exception<DimMismatch>(m, "DimMismatch", error);
  py::register_exception<EmptySubset>(m, "EmptySubset", error);
  py::register_exception<FormatError>(m, "FormatError", error);
  py::register_exception<ConfigError>(m, "ConfigError", error);
  py::register_exception<ParseError>(m, "ParseError", error);

  m.def("set_quiet", &set_quiet);

  // sparse

  py::class_<Csr>(m, "Csr")
      .def(py::init(&csr_from_pairs), py::arg("rows"), py::arg("cols"), py::arg("pairs"))
      .def_property_readonly("rows", &Csr::rows)
      .def_property_readonly("cols", &Csr::cols)
      .def_property_readonly("nnz", &Csr::nnz)
      .def("row", [](const Csr& c, std::size_t r) {
        if (r >= c.rows()) throw py::index_error("row out of range");
        const auto s = c.row(r);
        return std::vector<Index>(s.begin(), s.end());
      })
      .def("degree", &Csr::degree)
      .def("contains", &Csr::contains)
      .def("pairs", &Csr::pairs)
      .def("transpose", &Csr::transpose)
      .def("__eq__", [](const Csr& a, const Csr& b) { return a == b; });

  // dataset

  py::class_<FilterConfig>(m, "FilterConfig")
      .def(py::init<>())
      .def_readwrite("rating_threshold", &FilterConfig::rating_threshold)
      .def_readwrite("min_user", &FilterConfig::min_user)
      .def_readwrite("min_item", &FilterConfig::min_item)
      .def_readwrite("min_tag", &FilterConfig::min_tag);

  py::class_<SplitRatios>(m, "SplitRatios")
      .def(py::init<>())
      .def(py::init([](double tr, double va, double te) { return SplitRatios{tr, va, te}; }),
           py::arg("train"), py::arg("valid"), py::arg("test"))
      .def_readwrite("train", &SplitRatios::train)
      .def_readwrite("valid", &SplitRatios::valid)
      .def_readwrite("test", &SplitRatios::test);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("n_users", &Dataset::n_users)
      .def_readonly("n_items", &Dataset::n_items)
      .def_readonly("n_tags", &Dataset::n_tags)
      .def_readonly("ui_all", &Dataset::ui_all)
      .def_readonly("ui_train", &Dataset::ui_train)
      .def_readonly("ui_valid", &Dataset::ui_valid)
      .def_readonly("ui_test", &Dataset::ui_test)
      .def_readonly("it_labels", &Dataset::it_labels)
      .def_readonly("is_split", &Dataset::is_split)
      .def_property_readonly("users", [](const Dataset& d) { return d.users.externals(); })
      .def_property_readonly("items", [](const Dataset& d) { return d.items.externals(); })
      .def_property_readonly("tags", [](const Dataset& d) { return d.tags.externals(); })
      .def("stats", [](const Dataset& d) { return to_py(compute_stats(d).to_json()); });

  m.def(
      "load_dataset",
      [](const std::filesystem::path& ui, const std::filesystem::path& it,
         const std::string& ui_schema, const std::string& it_schema, bool skip_header,
         const FilterConfig& filters) {
        return apply_filters(load_interactions(ui, Schema::parse(ui_schema, skip_header)),
                             load_taggings(it, Schema::parse(it_schema, skip_header)), filters);
      },
      py::arg("ui_path"), py::arg("it_path"), py::arg("ui_schema") = "user,item",
      py::arg("it_schema") = "item,tag", py::arg("skip_header") = false,
      py::arg("filters") = FilterConfig{},
      "Reads tab-separated interaction and tagging files and applies the degree filters.");
  m.def(
      "from_pairs",
      [](const std::vector<std::pair<std::string, std::string>>& ui,
         const std::vector<std::pair<std::string, std::string>>& it, const FilterConfig& filters) {
        std::vector<RawInteraction> raw_ui;
        for (const auto& [u, i] : ui) raw_ui.push_back({u, i, std::nullopt, std::nullopt});
        std::vector<RawTagging> raw_it;
        for (const auto& [i, t] : it) raw_it.push_back({i, t});
        return apply_filters(raw_ui, raw_it, filters);
      },
      py::arg("ui"), py::arg("it"), py::arg("filters") = FilterConfig{},
      "Builds a filtered dataset from (user, item) and (item, tag) string pairs.");
  m.def("split_dataset", &split_dataset, py::arg("dataset"), py::arg("ratios") = SplitRatios{},
        py::arg("seed") = 2024);
  m.def("write_bundle", &write_bundle, py::arg("dir"), py::arg("dataset"));
  m.def("read_bundle", &read_bundle, py::arg("dir"));

  // model

  py::enum_<Backbone>(m, "Backbone")
      .value("BprMf", Backbone::BprMf)
      .value("NeuMf", Backbone::NeuMf)
      .value("LightGcn", Backbone::LightGcn);
  m.def("parse_backbone", [](const std::string& s) { return parse_backbone(s); });

  py::class_<ModelDims>(m, "ModelDims")
      .def(py::init([](std::size_t nu, std::size_t ni, std::size_t nt, std::size_t d,
                       std::size_t K) { return ModelDims{nu, ni, nt, d, K}; }),
           py::arg("n_users"), py::arg("n_items"), py::arg("n_tags"), py::arg("d") = 64,
           py::arg("K") = 4)
      .def_readonly("n_users", &ModelDims::n_users)
      .def_readonly("n_items", &ModelDims::n_items)
      .def_readonly("n_tags", &ModelDims::n_tags)
      .def_readonly("d", &ModelDims::d)
      .def_readonly("K", &ModelDims::K);

  py::class_<Model>(m, "Model")
      .def_readonly("dims", &Model::dims)
      .def_readonly("backbone", &Model::backbone)
      .def("params", [](const Model& mo) { return params_dict(mo.params); },
           "Copies of every parameter table keyed by name.")
      .def("set_graph", &Model::set_graph)
      .def("propagate", &Model::propagate)
      .def("score", [](const Model& mo, Index u, Index i) { return score(mo, u, i); })
      .def("score_all_items", [](const Model& mo, Index u) { return score_all_items(mo, u); });

  m.def("init_parameters", &init_parameters, py::arg("dims"),
        py::arg("backbone") = Backbone::BprMf, py::arg("seed") = 2024);
  m.def("write_checkpoint", &write_checkpoint, py::arg("path"), py::arg("model"));
  m.def("read_checkpoint", &read_checkpoint, py::arg("path"));
  m.def("check_compatible", &check_compatible, py::arg("model"), py::arg("dataset"));

  // clustering

  m.def("soft_assign", &soft_assign, py::arg("tags"), py::arg("centers"), py::arg("eta") = 1.0);
  m.def("target_distribution", &target_distribution, py::arg("q"));
  m.def("kl_divergence", &kl_divergence, py::arg("target"), py::arg("q"));
  m.def("hard_assign", &hard_assign, py::arg("q"));
  m.def("relatedness_matrix", &relatedness_matrix, py::arg("it_labels"), py::arg("assignment"),
        py::arg("K"));

  py::class_<ClusterState>(m, "ClusterState")
      .def_readonly("q", &ClusterState::q)
      .def_readonly("target", &ClusterState::target)
      .def_readonly("assignment", &ClusterState::assignment)
      .def_readonly("relatedness", &ClusterState::relatedness)
      .def_readonly("recoveries", &ClusterState::recoveries);

  m.def(
      "refresh_clusters",
      [](const Matrix& tags, Matrix centers, const Csr& it, Real eta) {
        ClusterState s = refresh_clusters(tags, centers, it, eta);
        return py::make_tuple(s, centers);
      },
      py::arg("tags"), py::arg("centers"), py::arg("it_labels"), py::arg("eta") = 1.0,
      "Returns (state, centers); empty clusters get their center moved.");

  // alignment

  m.def("jaccard_similarity", [](const std::vector<Index>& a, const std::vector<Index>& b) {
    return jaccard_similarity(a, b);
  });
  m.def(
      "contrastive_loss",
      [](const std::vector<Matrix>& users, const std::vector<Matrix>& fused,
         const Matrix& relatedness, Real tau) {
        return contrastive_loss(make_batch(users, fused, relatedness, {}), tau);
      },
      py::arg("users"), py::arg("fused"), py::arg("relatedness"), py::arg("tau") = 1.0);
  m.def(
      "set_to_set_loss",
      [](const std::vector<Matrix>& users, const std::vector<Matrix>& fused,
         const Matrix& relatedness, const std::vector<PositiveSets>& positives, Real tau) {
        return set_to_set_loss(make_batch(users, fused, relatedness, positives), tau);
      },
      py::arg("users"), py::arg("fused"), py::arg("relatedness"), py::arg("positives"),
      py::arg("tau") = 1.0);

  // training

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init([](const py::dict& overrides) {
             return RunConfig::from_json(from_py(overrides));
           }),
           py::arg("overrides") = py::dict())
      .def_static("load", &RunConfig::load)
      .def("set", &RunConfig::set)
      .def("validate", &RunConfig::validate)
      .def("to_dict", [](const RunConfig& c) { return to_py(c.to_json()); })
      .def_static("keys", &RunConfig::keys);

  py::class_<Metrics>(m, "Metrics")
      .def_readonly("recall", &Metrics::recall)
      .def_readonly("ndcg", &Metrics::ndcg)
      .def_readonly("users", &Metrics::users);

  py::class_<FitResult>(m, "FitResult")
      .def_readonly("best_epoch", &FitResult::best_epoch)
      .def_readonly("best_valid", &FitResult::best_valid)
      .def_readonly("test", &FitResult::test)
      .def_readonly("stopped_early", &FitResult::stopped_early)
      .def_property_readonly("history", [](const FitResult& r) {
        py::list out;
        for (const auto& e : r.history) out.append(to_py(e.to_json(20)));
        return out;
      });

  // The trainer keeps a pointer to its dataset, so the Python object pins it.
  py::class_<Trainer>(m, "Trainer")
      .def(py::init<const Dataset&, RunConfig>(), py::arg("dataset"), py::arg("config"),
           py::keep_alive<1, 2>())
      .def(
          "fit",
          [](Trainer& t, std::optional<std::filesystem::path> run_dir) {
            py::gil_scoped_release release;
            return t.fit(run_dir);
          },
          py::arg("run_dir") = py::none())
      .def("step", [](Trainer& t) { return to_py(t.step().to_json()); })
      .def("evaluate", &Trainer::evaluate, py::arg("targets"),
           py::arg("with_valid_exclusion") = false)
      .def_property_readonly("model", [](Trainer& t) { return t.model(); })
      .def("save_state", &Trainer::save_state)
      .def("load_state", &Trainer::load_state)
      .def_property_readonly("epoch", [](const Trainer& t) { return t.state().epoch; });

  // evaluation

  m.def(
      "evaluate",
      [](const Model& model, const Dataset& ds, const std::string& split, std::size_t N,
         std::size_t threads) {
        const bool test = split == "test";
        if (!test && split != "valid") throw ConfigError("split must be valid or test");
        const auto ex = exclusions(ds, false);
        return evaluate_model(model, test ? ds.ui_test : ds.ui_valid, ex, N, threads);
      },
      py::arg("model"), py::arg("dataset"), py::arg("split") = "test", py::arg("N") = 20,
      py::arg("threads") = 1);
  m.def(
      "recommend",
      [](const Model& model, const Dataset& ds, Index user, std::size_t N) {
        return rank_for_user(model, user, ds.ui_train, N).items;
      },
      py::arg("model"), py::arg("dataset"), py::arg("user"), py::arg("N") = 20);
  m.def(
      "popularity_groups",
      [](const std::vector<std::size_t>& degrees, std::size_t n) {
        return popularity_groups(degrees, n);
      },
      py::arg("degrees"), py::arg("n_groups") = 5);

  // gradient checking

  py::class_<GradCheckReport>(m, "GradCheckReport")
      .def_readonly("max_rel_error", &GradCheckReport::max_rel_error)
      .def_readonly("worst", &GradCheckReport::worst)
      .def_readonly("checked", &GradCheckReport::checked)
      .def_readonly("per_param", &GradCheckReport::per_param);

  m.def(
      "grad_check",
      [](const std::string& loss, Backbone backbone, std::uint64_t seed, Real tolerance) {
        GradCheckInstance inst = make_grad_check_instance(seed, backbone);
        return grad_check(inst, parse_loss_selector(loss), tolerance);
      },
      py::arg("loss"), py::arg("backbone") = Backbone::BprMf, py::arg("seed") = 1,
      py::arg("tolerance") = 1e-4,
      "Finite-difference check of one loss term (uv, vt, kl, ca, ca_star, ind).");
}
