// Acceptance checks for the pipeline. Prints one PASS/FAIL line per
// criterion and exits nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sys/wait.h>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cosoc/cos_seeker.hpp"
#include "cosoc/fsl_eval.hpp"
#include "cosoc/io.hpp"
#include "cosoc/parallel.hpp"
#include "cosoc/soc_matcher.hpp"
#include "cosoc/synthetic_world.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace cosoc;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

SupportCrops random_support(oracle::Gen& gen, int k, int v, int d) {
  SupportCrops s(static_cast<std::size_t>(k));
  for (auto& image : s)
    for (int j = 0; j < v; ++j) image.push_back(gen.unit_eigen(d));
  return s;
}

Outcome soc_exactness() {
  const auto start = std::chrono::steady_clock::now();
  oracle::Gen gen(101);
  const int trials = 200;
  int close = 0, dominated = 0;
  for (int t = 0; t < trials; ++t) {
    const int k = gen.integer(2, 3), v = gen.integer(3, 5);
    const SupportCrops s = random_support(gen, k, v, 16);
    const ExactPrototype exact = shared_prototype_bruteforce(s);
    const IterativePrototype iter = shared_prototype_iterative(s, static_cast<std::uint64_t>(t));
    if (exact.omega.normalized().dot(iter.omega) >= 0.99) ++close;
    std::vector<int> induced;
    for (const auto& image : s) {
      int best = 0;
      for (int j = 1; j < v; ++j) {
        if (image[static_cast<std::size_t>(j)].dot(iter.omega) > image[static_cast<std::size_t>(best)].dot(iter.omega)) best = j;
      }
      induced.push_back(best);
    }
    if (exact.objective >= pairwise_agreement(s, induced) - 1e-12) ++dominated;
  }
  const double elapsed = seconds_since(start);
  const bool pass = close * 100 >= trials * 95 && dominated == trials && elapsed < 60.0;
  return {pass, "cos>=0.99 in " + std::to_string(close) + "/" + std::to_string(trials) + ", brute force dominates in " +
                    std::to_string(dominated) + "/" + std::to_string(trials) + ", " + fmt(elapsed, 3) + " s"};
}

Outcome fusion_simplex() {
  oracle::Gen gen(102);
  double worst = 0.0;
  bool nonneg = true;
  const int sets = 10000;
  for (int t = 0; t < sets; ++t) {
    const int n = gen.integer(1, 30);
    const int k = gen.integer(1, n);
    std::vector<double> scores(static_cast<std::size_t>(n));
    for (double& s : scores) s = gen.uniform();
    if (t % 10 == 0) std::fill(scores.begin(), scores.end(), 0.0);
    if (t % 10 == 1) std::fill(scores.begin(), scores.end(), 1.0);
    if (t % 10 == 2) scores[0] = 1.0;
    const ForegroundRow row = topk_and_fusion(scores, k);
    double total = row.p_original;
    nonneg = nonneg && row.p_original >= 0.0;
    for (const auto& p : row.patches) {
      total += p.prob;
      nonneg = nonneg && p.prob >= 0.0;
    }
    worst = std::max(worst, std::abs(total - 1.0));
  }
  return {worst <= 1e-12 && nonneg, std::to_string(sets) + " rows, max |sum - 1| = " + fmt(worst, 3) +
                                        (nonneg ? ", all components >= 0" : ", negative component")};
}

Outcome cos_oracle() {
  oracle::Gen gen(103);
  double worst = 0.0;
  bool eta_zero = true;
  for (int t = 0; t < 50; ++t) {
    const int images = gen.integer(2, 20), crops = gen.integer(1, 10), d = gen.integer(2, 8);
    const int h = std::min(gen.integer(1, 4), images * crops);
    ClassRecord cls{"c", {}};
    std::vector<oracle::Vec> views;
    for (int n = 0; n < images; ++n) {
      ImageRecord img{"i" + std::to_string(n), {}};
      img.crops.push_back({"whole", CropRect{}, gen.unit_eigen(d)});
      for (int k = 0; k < crops; ++k) {
        img.crops.push_back({"k" + std::to_string(k), std::nullopt, gen.unit_eigen(d) * gen.uniform(0.5, 2.0)});
        views.push_back(oracle::to_vec(img.crops.back().feature));
      }
      cls.images.push_back(std::move(img));
    }
    CosParams params;
    params.clusters = h;
    params.topk = 1;
    params.seed = static_cast<std::uint64_t>(t);
    const ClassForeground out = seek_class(cls, params);
    std::vector<oracle::Vec> centroids;
    for (const auto& z : out.retained.centroids) centroids.push_back(oracle::to_vec(z));
    const std::vector<double> expected = oracle::foreground_scores(views, centroids);
    std::size_t far = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) {
      worst = std::max(worst, std::abs(expected[i] - out.scores.scores[i]));
      if (out.scores.min_distance[i] > out.scores.min_distance[far]) far = i;
    }
    if (!out.scores.degenerate_eta) eta_zero = eta_zero && out.scores.scores[far] == 0.0;
  }
  return {worst <= 1e-9 && eta_zero, "50 classes, max |score - oracle| = " + fmt(worst, 3) +
                                         (eta_zero ? ", eta crop scores 0" : ", eta crop nonzero")};
}

oracle::Vec flat(const Matrix& m) { return oracle::Vec(m.data(), m.data() + m.size()); }

Outcome gradient_checks() {
  oracle::Gen gen(104);
  double worst_cc = 0.0, worst_linear = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int d = gen.integer(2, 8), c = gen.integer(2, 5), label = gen.integer(0, c - 1);
    const Vector f = gen.unit_eigen(d) * gen.uniform(0.5, 2.0);
    Matrix w(c, d);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = gen.normal();
    const CcLoss g = cc_loss(f, label, w);
    oracle::Vec fd_f, fd_w;
    for (int i = 0; i < d; ++i) {
      fd_f.push_back(oracle::central_difference(
          [&](const oracle::Vec& x) { return cc_loss(oracle::to_eigen(x), label, w).loss; }, oracle::to_vec(f),
          static_cast<std::size_t>(i)));
    }
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      fd_w.push_back(oracle::central_difference(
          [&](const oracle::Vec& x) {
            Matrix m = w;
            m.data()[i] = x[0];
            return cc_loss(f, label, m).loss;
          },
          {w.data()[i]}, 0));
    }
    worst_cc = std::max({worst_cc, oracle::vector_relative_error(oracle::to_vec(g.grad_feature), fd_f),
                         oracle::vector_relative_error(flat(g.grad_weights), fd_w)});

    const int e = gen.integer(2, 6), n = gen.integer(1, 6);
    Matrix emb(e, d), cw(c, e), x(n, d);
    for (Matrix* m : {&emb, &cw, &x})
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = gen.normal();
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(gen.integer(0, c - 1));
    const LinearLoss lg = linear_cc_loss(emb, cw, x, labels);
    oracle::Vec fd_e, fd_c;
    for (Eigen::Index i = 0; i < emb.size(); ++i) {
      fd_e.push_back(oracle::central_difference(
          [&](const oracle::Vec& p) {
            Matrix m = emb;
            m.data()[i] = p[0];
            return linear_cc_loss(m, cw, x, labels).loss;
          },
          {emb.data()[i]}, 0));
    }
    for (Eigen::Index i = 0; i < cw.size(); ++i) {
      fd_c.push_back(oracle::central_difference(
          [&](const oracle::Vec& p) {
            Matrix m = cw;
            m.data()[i] = p[0];
            return linear_cc_loss(emb, m, x, labels).loss;
          },
          {cw.data()[i]}, 0));
    }
    worst_linear = std::max({worst_linear, oracle::vector_relative_error(flat(lg.grad_embedding), fd_e),
                             oracle::vector_relative_error(flat(lg.grad_weights), fd_c)});
  }
  return {worst_cc < 1e-4 && worst_linear < 1e-4,
          "20 points, max rel err cc_loss " + fmt(worst_cc, 3) + ", linear step " + fmt(worst_linear, 3)};
}

Outcome shortcut() {
  const auto start = std::chrono::steady_clock::now();
  ShortcutParams p;
  p.workers = default_workers();
  const ShortcutTable t = shortcut_experiment(p);
  const double elapsed = seconds_since(start);
  auto pct = [](const Cell& c) { return fmt(100.0 * c.mean, 4) + "±" + fmt(100.0 * c.ci95, 2); };
  const std::string detail = "fg-eval: fg " + pct(t.cc.at("fg").at("fg")) + " vs ori " + pct(t.cc.at("ori").at("fg")) +
                             "; fuse ori/fg " + pct(t.cc.at("fuse").at("ori")) + "/" + pct(t.cc.at("fuse").at("fg")) +
                             "; ori-eval soc " + pct(t.soc) + " vs multicrop-cc " + pct(t.multicrop_cc) + "; checks a=" +
                             (t.fg_beats_ori ? "ok" : "no") + " b=" + (t.fuse_close ? "ok" : "no") +
                             " c=" + (t.soc_beats_multicrop ? "ok" : "no") + ", " + fmt(elapsed, 3) + " s";
  return {t.fg_beats_ori && t.fuse_close && t.soc_beats_multicrop && elapsed < 600.0, detail};
}

Outcome degenerate_reductions() {
  oracle::Gen gen(105);
  bool v1_exact = true;
  for (int t = 0; t < 200; ++t) {
    const Vector q = gen.unit_eigen(6), w = gen.unit_eigen(6);
    SortedPrototypes p;
    p.items.push_back({w, 1});
    const std::vector<Vector> query{q};
    v1_exact = v1_exact && match_query(query, p, gen.uniform(0.1, 1.0), gen.uniform(0.1, 1.0)).score == cosine_sim(q, w);
  }

  double worst_nearest = 0.0;
  bool same_prediction = true;
  for (int t = 0; t < 200; ++t) {
    const int v = gen.integer(1, 5);
    std::vector<SortedPrototypes> classes;
    std::vector<Vector> shots;
    for (int c = 0; c < 5; ++c) {
      shots.push_back(gen.unit_eigen(8));
      const SupportCrops support{CropSet(static_cast<std::size_t>(v), shots.back())};
      classes.push_back(extract_sorted_prototypes(support));
    }
    const Vector q = gen.unit_eigen(8);
    const std::vector<Vector> query(static_cast<std::size_t>(v), q);
    const Classification r = classify_query(query, classes, 1.0, 1.0);
    int nearest = 0;
    for (int c = 1; c < 5; ++c) {
      if (q.dot(shots[static_cast<std::size_t>(c)]) > q.dot(shots[static_cast<std::size_t>(nearest)])) nearest = c;
    }
    same_prediction = same_prediction && r.predicted == nearest;
    for (int c = 0; c < 5; ++c) {
      worst_nearest = std::max(worst_nearest, std::abs(r.scores[static_cast<std::size_t>(c)] / v -
                                                       q.dot(shots[static_cast<std::size_t>(c)])));
    }
  }

  WorldConfig world;
  world.seed = 7;
  const FeatureStore store = generate_world(world, Split::Eval).store;
  double deviation = 0.0;
  for (ClassifierKind kind : {ClassifierKind::PnProto, ClassifierKind::Cc}) {
    BenchmarkConfig config;
    config.classifier = kind;
    config.tasks = 2000;
    config.repeats = 1;
    config.workers = default_workers();
    deviation = std::max(deviation, run_benchmark(store, config).max_softmax_deviation);
  }
  const bool pass = v1_exact && same_prediction && worst_nearest <= 1e-9 && deviation <= 1e-9;
  return {pass, std::string("V=1 score == cosine: ") + (v1_exact ? "yes" : "no") +
                    "; K=1 identical crops vs nearest prototype: " + (same_prediction ? "same" : "different") +
                    " predictions, max |S/V - cos| = " + fmt(worst_nearest, 3) +
                    "; max |sum exp S - 1| over 2000 tasks = " + fmt(deviation, 3)};
}

Outcome permutation_invariance() {
  oracle::Gen gen(106);
  double worst = 0.0;
  int instances = 0;
  while (instances < 100) {
    const int k = gen.integer(2, 4), v = gen.integer(2, 4);
    SupportCrops s = random_support(gen, k, v, 10);
    std::vector<Vector> query;
    for (int i = 0; i < v; ++i) query.push_back(gen.unit_eigen(10));
    // Distinct pairwise similarities only.
    std::vector<double> sims;
    for (std::size_t a = 0; a < s.size(); ++a)
      for (std::size_t b = a + 1; b < s.size(); ++b)
        for (const auto& x : s[a])
          for (const auto& y : s[b]) sims.push_back(x.dot(y));
    std::sort(sims.begin(), sims.end());
    if (std::adjacent_find(sims.begin(), sims.end(), [](double a, double b) { return b - a < 1e-9; }) != sims.end()) {
      continue;
    }
    ++instances;
    PrototypeParams params;
    params.method = PrototypeMethod::Exact;
    const double base = match_query(query, extract_sorted_prototypes(s, params), 0.8, 0.8).score;
    for (int r = 0; r < 5; ++r) {
      std::shuffle(s.begin(), s.end(), gen.engine());
      for (auto& image : s) std::shuffle(image.begin(), image.end(), gen.engine());
      worst = std::max(worst, std::abs(match_query(query, extract_sorted_prototypes(s, params), 0.8, 0.8).score - base));
    }
  }
  return {worst <= 1e-9, "100 instances x 5 shuffles, max |dS| = " + fmt(worst, 3)};
}

Outcome statistics() {
  const std::vector<double> v{1, 2, 3, 4, 5};
  const MeanCi m = mean_ci(v);
  const std::vector<double> flat_values(10, 0.37);
  const MeanCi c = mean_ci(flat_values);
  const bool pass = std::abs(m.mean - 3.0) <= 1e-3 && std::abs(m.ci95 - 1.386) <= 1e-3 && c.ci95 == 0.0;
  return {pass, "mean_ci([1..5]) = (" + fmt(m.mean, 6) + ", " + fmt(m.ci95, 6) + "), constant ci95 = " + fmt(c.ci95)};
}

int shell(const std::string& command) {
  const int status = std::system(command.c_str());
  return status == -1 ? -1 : WEXITSTATUS(status);
}

Outcome end_to_end(const std::string& tool) {
  test_support::TempDir root;
  const std::vector<std::pair<std::string, std::string>> runs{{"first", "1"}, {"rerun", "1"}, {"workers4", "4"}};
  const std::vector<std::string> outputs{"store/manifest.json", "store/features.f32le", "store/ground_truth.json",
                                         "foreground.json", "report.json"};
  double slowest = 0.0;
  for (const auto& [name, workers] : runs) {
    const auto dir = root.path() / name;
    std::filesystem::create_directories(dir);
    const auto start = std::chrono::steady_clock::now();
    const std::string cd = "cd '" + dir.string() + "' && '" + tool + "' ";
    const std::string w = " --workers " + workers;
    if (shell(cd + "synth --seed 11 --out store" + w) != 0) return {false, name + ": synth failed"};
    if (shell(cd + "cos --store store --seed 11 --out foreground.json" + w) != 0) return {false, name + ": cos failed"};
    if (shell(cd + "eval --store store --classifier soc --cos-select --seed 11 --out report.json" + w) != 0) {
      return {false, name + ": eval failed"};
    }
    slowest = std::max(slowest, seconds_since(start));
  }
  for (const auto& file : outputs) {
    const std::string first = read_text_file(root.path() / "first" / file);
    for (const char* other : {"rerun", "workers4"}) {
      if (read_text_file(root.path() / other / file) != first) return {false, file + " differs in " + other};
    }
  }
  const nlohmann::json report = read_json_file(root.path() / "first" / "report.json");
  return {slowest < 300.0, "synth -> cos -> eval soc (2000 tasks x 5 repeats, accuracy " +
                               fmt(100.0 * report.at("mean").get<double>(), 4) + "%), outputs identical across " +
                               "reruns and --workers 1/4, slowest pipeline " + fmt(slowest, 3) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <path to cosoc executable>\n";
    return 2;
  }
  const std::string tool = std::filesystem::absolute(argv[1]).string();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"soc-exactness", soc_exactness},
      {"fusion-simplex", fusion_simplex},
      {"cos-oracle-equivalence", cos_oracle},
      {"gradient-checks", gradient_checks},
      {"shortcut-reproduction", shortcut},
      {"degenerate-reductions", degenerate_reductions},
      {"permutation-invariance", permutation_invariance},
      {"statistics", statistics},
      {"end-to-end-determinism", [&] { return end_to_end(tool); }},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
