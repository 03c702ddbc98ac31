#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cosoc/cli.hpp"
#include "cosoc/cos_seeker.hpp"
#include "cosoc/crop_geometry.hpp"
#include "cosoc/error.hpp"
#include "cosoc/feature.hpp"
#include "cosoc/feature_store.hpp"
#include "cosoc/fsl_eval.hpp"
#include "cosoc/soc_matcher.hpp"
#include "cosoc/synthetic_world.hpp"

namespace py = pybind11;
using namespace cosoc;

namespace {

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

// Rows of a 2-D array as vectors.
std::vector<Vector> rows(const Matrix& m) {
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(m.row(i).transpose());
  return out;
}

Matrix stack(const std::vector<Vector>& vs) {
  Matrix m(static_cast<Eigen::Index>(vs.size()), vs.empty() ? 0 : vs.front().size());
  for (std::size_t i = 0; i < vs.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = vs[i].transpose();
  return m;
}

SupportCrops support_from(const std::vector<Matrix>& images) {
  SupportCrops s;
  for (const auto& m : images) s.push_back(rows(m));
  return s;
}

py::tuple rect_tuple(const CropRect& r) { return py::make_tuple(r.x, r.y, r.w, r.h); }

PrototypeMethod method_from(const std::string& name) {
  if (name == "auto") return PrototypeMethod::Auto;
  if (name == "exact") return PrototypeMethod::Exact;
  if (name == "iterative") return PrototypeMethod::Iterative;
  throw Error(ErrorCode::InvalidArgument, "unknown method '" + name + "'");
}

py::dict trace_dict(const MatchTrace& t) { return to_python(trace_json(t)).cast<py::dict>(); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Foreground-aware few-shot evaluation toolkit";
  // Raised with args (message, error code name).
  PYBIND11_CONSTINIT static py::gil_safe_call_once_and_store<py::object> error_type;
  error_type.call_once_and_store_result([&]() { return py::object(py::exception<Error>(m, "CosocError", PyExc_RuntimeError)); });
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetObject(error_type.get_stored().ptr(), py::make_tuple(e.what(), std::string(to_string(e.code()))).ptr());
    }
  });

  m.def("version", &cli::version);

  m.def("l2_normalize", &l2_normalize, py::arg("v"));
  m.def("cosine_sim", &cosine_sim, py::arg("a"), py::arg("b"));
  m.def(
      "pairwise_cos", [](const Matrix& a, const Matrix& b) { return pairwise_cos(rows(a), rows(b)); }, py::arg("a"),
      py::arg("b"), "Cosine of every row of a against every row of b.");

  m.def(
      "sample_crops",
      [](const std::string& image_id, int count, std::uint64_t seed, double min_area, double aspect_lo,
         double aspect_hi) {
        py::list out;
        for (const auto& r : sample_crops(image_id, count, seed, {min_area, aspect_lo, aspect_hi})) {
          out.append(rect_tuple(r));
        }
        return out;
      },
      py::arg("image_id"), py::arg("count") = 30, py::arg("seed") = 0, py::arg("min_area") = 0.08,
      py::arg("aspect_lo") = 0.75, py::arg("aspect_hi") = 4.0 / 3.0, "Crop rectangles (x, y, w, h) in unit coordinates.");
  m.def(
      "enforce_min_area",
      [](const py::tuple& rect, double min_area) {
        return rect_tuple(enforce_min_area(
            {rect[0].cast<double>(), rect[1].cast<double>(), rect[2].cast<double>(), rect[3].cast<double>()}, min_area));
      },
      py::arg("rect"), py::arg("min_area"));
  m.def(
      "crop_plan",
      [](const std::vector<std::string>& ids, int count, std::uint64_t seed, double min_area, double aspect_lo,
         double aspect_hi) {
        return to_python(plan_to_json(make_crop_plan(ids, count, seed, {min_area, aspect_lo, aspect_hi})));
      },
      py::arg("image_ids"), py::arg("count") = 30, py::arg("seed") = 0, py::arg("min_area") = 0.08,
      py::arg("aspect_lo") = 0.75, py::arg("aspect_hi") = 4.0 / 3.0);

  m.def(
      "load_store",
      [](const std::string& path) {
        const FeatureStore store = load_store(path);
        py::dict classes;
        for (const auto& cls : store.classes) {
          py::dict images;
          for (const auto& img : cls.images) {
            py::list crops;
            for (const auto& c : img.crops) {
              crops.append(py::make_tuple(c.id, c.rect ? py::object(rect_tuple(*c.rect)) : py::none(), c.feature));
            }
            images[py::str(img.id)] = crops;
          }
          classes[py::str(cls.name)] = images;
        }
        return py::dict(py::arg("dim") = store.dim, py::arg("classes") = classes);
      },
      py::arg("path"), "{dim, classes: {class: {image: [(crop_id, rect or None, feature)]}}}");
  m.def(
      "manifest",
      [](const std::string& path) { return to_python(manifest_json(load_store(path))); }, py::arg("path"));

  m.def(
      "kmeans",
      [](const Matrix& points, int clusters, std::uint64_t seed, int max_iter) {
        const ClusterModel model = kmeans_fit(rows(points), clusters, seed, max_iter);
        return py::dict(py::arg("centroids") = stack(model.centroids), py::arg("assignment") = model.assignment,
                        py::arg("inertia") = model.inertia, py::arg("iterations") = model.iterations);
      },
      py::arg("points"), py::arg("clusters"), py::arg("seed") = 0, py::arg("max_iter") = 100);
  m.def(
      "foreground_scores",
      [](const Matrix& crops, const Matrix& centroids) {
        PrunedClusters retained;
        retained.centroids = rows(centroids);
        for (Eigen::Index i = 0; i < centroids.rows(); ++i) retained.indices.push_back(static_cast<int>(i));
        return foreground_scores(rows(crops), retained).scores;
      },
      py::arg("crops"), py::arg("centroids"));
  m.def(
      "topk_and_fusion",
      [](const std::vector<double>& scores, int k) {
        const ForegroundRow row = topk_and_fusion(scores, k);
        py::list patches;
        for (const auto& p : row.patches) {
          patches.append(py::dict(py::arg("crop") = p.crop, py::arg("score") = p.score, py::arg("prob") = p.prob));
        }
        return py::dict(py::arg("p_original") = row.p_original, py::arg("patches") = patches);
      },
      py::arg("scores"), py::arg("k"));
  m.def(
      "seek_store",
      [](const std::string& path, double gamma, int clusters, int topk, std::uint64_t seed, int workers) {
        const FeatureStore store = load_store(path);
        CosParams p;
        p.gamma = gamma;
        p.clusters = clusters;
        p.topk = topk;
        p.seed = seed;
        nlohmann::json out;
        {
          py::gil_scoped_release release;
          out = foreground_json(seek_store(store, p, workers), store);
        }
        return to_python(out);
      },
      py::arg("path"), py::arg("gamma") = 0.5, py::arg("clusters") = 5, py::arg("topk") = 3, py::arg("seed") = 0,
      py::arg("workers") = 1);

  m.def(
      "shared_prototype_bruteforce",
      [](const std::vector<Matrix>& support) {
        const ExactPrototype p = shared_prototype_bruteforce(support_from(support));
        return py::dict(py::arg("omega") = p.omega, py::arg("assignment") = p.assignment,
                        py::arg("objective") = p.objective);
      },
      py::arg("support"), "support: one (V, d) array per image.");
  m.def(
      "shared_prototype_iterative",
      [](const std::vector<Matrix>& support, std::uint64_t seed) {
        const IterativePrototype p = shared_prototype_iterative(support_from(support), seed);
        return py::dict(py::arg("omega") = p.omega, py::arg("objective") = p.objective,
                        py::arg("converged") = p.converged);
      },
      py::arg("support"), py::arg("seed") = 0);
  m.def(
      "sorted_prototypes",
      [](const std::vector<Matrix>& support, const std::string& method, std::uint64_t seed) {
        PrototypeParams params;
        params.method = method_from(method);
        params.seed = seed;
        const SortedPrototypes p = extract_sorted_prototypes(support_from(support), params);
        std::vector<Vector> vs;
        for (const auto& item : p.items) vs.push_back(item.vector);
        return py::make_tuple(stack(vs), p.uniform_rank_weight);
      },
      py::arg("support"), py::arg("method") = "auto", py::arg("seed") = 0,
      "(prototypes in rank order, uniform_rank_weight)");
  m.def(
      "match_query",
      [](const Matrix& query, const Matrix& prototypes, double alpha, double beta, bool uniform_rank_weight) {
        SortedPrototypes p;
        p.uniform_rank_weight = uniform_rank_weight;
        const auto vs = rows(prototypes);
        for (std::size_t i = 0; i < vs.size(); ++i) p.items.push_back({vs[i], static_cast<int>(i) + 1});
        return trace_dict(match_query(rows(query), p, alpha, beta));
      },
      py::arg("query"), py::arg("prototypes"), py::arg("alpha") = 0.8, py::arg("beta") = 0.8,
      py::arg("uniform_rank_weight") = false);

  m.def(
      "cc_pn_score",
      [](const Vector& query, const Matrix& prototypes) { return cc_pn_score(query, rows(prototypes)); },
      py::arg("query"), py::arg("prototypes"));
  m.def(
      "cc_loss",
      [](const Vector& feature, int label, const Matrix& weights) {
        const CcLoss l = cc_loss(feature, label, weights);
        return py::make_tuple(l.loss, l.grad_feature, l.grad_weights);
      },
      py::arg("feature"), py::arg("label"), py::arg("weights"), "(loss, d loss/d feature, d loss/d weights)");
  m.def(
      "mean_ci",
      [](const std::vector<double>& values) {
        const MeanCi r = mean_ci(values);
        return py::make_tuple(r.mean, r.ci95);
      },
      py::arg("values"));
  m.def(
      "run_benchmark",
      [](const std::string& path, const std::string& classifier, int n, int k, int m_, int tasks, int repeats,
         double alpha, double beta, int crops, std::uint64_t seed, int workers) {
        const FeatureStore store = load_store(path);
        BenchmarkConfig c;
        c.classifier = classifier_from_string(classifier);
        c.shape = {n, k, m_};
        c.tasks = tasks;
        c.repeats = repeats;
        c.alpha = alpha;
        c.beta = beta;
        c.crops = crops;
        c.seed = seed;
        c.workers = workers;
        nlohmann::json out;
        {
          py::gil_scoped_release release;
          out = report_json(run_benchmark(store, c));
        }
        return to_python(out);
      },
      py::arg("store"), py::arg("classifier") = "soc", py::arg("n") = 5, py::arg("k") = 5, py::arg("m") = 15,
      py::arg("tasks") = 2000, py::arg("repeats") = 5, py::arg("alpha") = 0.8, py::arg("beta") = 0.8,
      py::arg("crops") = 7, py::arg("seed") = 0, py::arg("workers") = 1);

  m.def(
      "synth",
      [](const std::string& out, const py::dict& config, const std::string& split) {
        if (split != "train" && split != "eval") throw Error(ErrorCode::InvalidArgument, "split must be train or eval");
        const WorldConfig c = config_from_json(from_python(config));
        World w = generate_world(c, split == "eval" ? Split::Eval : Split::Train);
        save_store(w.store, out, {{"world", config_to_json(c)}});
        return to_python(truth_to_json(w.truth));
      },
      py::arg("out"), py::arg("config") = py::dict(), py::arg("split") = "train",
      "Writes a synthetic store to `out`; returns the ground-truth foreground flags.");
  m.def(
      "world_config", [](const py::dict& overrides) { return to_python(config_to_json(config_from_json(from_python(overrides)))); },
      py::arg("overrides") = py::dict(), "Default world configuration with `overrides` applied.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "(exit code, stdout, stderr) of the command-line tool.");
}
