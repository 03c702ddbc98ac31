#include "cosoc/fsl_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cosoc/error.hpp"
#include "cosoc/parallel.hpp"
#include "cosoc/rng.hpp"

namespace cosoc {
namespace {

double log_sum_exp(std::span<const double> values) {
  const double top = *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - top);
  return top + std::log(sum);
}

int argmax(std::span<const double> values) {
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

Vector mean_of(std::span<const Vector> vectors) {
  Vector sum = Vector::Zero(vectors.front().size());
  for (const auto& v : vectors) sum += v;
  return sum / static_cast<double>(vectors.size());
}

// Prototype (mean feature) per way, from `feature(image)`.
template <typename Feature>
std::vector<Vector> way_prototypes(const PreparedStore& store, const Episode& episode, Feature feature) {
  std::vector<Vector> out;
  for (std::size_t w = 0; w < episode.classes.size(); ++w) {
    const auto& images = store.classes[static_cast<std::size_t>(episode.classes[w])];
    std::vector<Vector> support;
    for (int n : episode.support[w]) support.push_back(feature(images[static_cast<std::size_t>(n)]));
    out.push_back(mean_of(support));
  }
  return out;
}

template <typename Feature>
EpisodeOutcome softmax_episode(const PreparedStore& store, const Episode& episode, Feature feature) {
  const std::vector<Vector> prototypes = way_prototypes(store, episode, feature);
  EpisodeOutcome out;
  double loss = 0.0;
  std::size_t count = 0;
  for (std::size_t w = 0; w < episode.classes.size(); ++w) {
    const auto& images = store.classes[static_cast<std::size_t>(episode.classes[w])];
    for (int n : episode.query[w]) {
      const std::vector<double> scores = cc_pn_score(feature(images[static_cast<std::size_t>(n)]), prototypes);
      double mass = 0.0;
      for (double s : scores) mass += std::exp(s);
      out.softmax_deviation = std::max(out.softmax_deviation, std::abs(mass - 1.0));
      out.predictions.push_back(argmax(scores));
      loss -= scores[w];
      ++count;
    }
  }
  out.loss = count ? loss / static_cast<double>(count) : 0.0;
  return out;
}

EpisodeOutcome soc_episode(const PreparedStore& store, const Episode& episode, const BenchmarkConfig& config) {
  const std::vector<SortedPrototypes> classes = soc_prototypes(store, episode, config);
  EpisodeOutcome out;
  for (std::size_t w = 0; w < episode.classes.size(); ++w) {
    const auto& images = store.classes[static_cast<std::size_t>(episode.classes[w])];
    for (int n : episode.query[w]) {
      out.predictions.push_back(
          classify_query(images[static_cast<std::size_t>(n)].crops, classes, config.alpha, config.beta).predicted);
    }
  }
  return out;
}

void check_shape(const EpisodeShape& shape) {
  if (shape.ways < 1 || shape.shots < 1 || shape.queries < 1) {
    throw Error(ErrorCode::InvalidArgument, "ways, shots and queries must be positive");
  }
}

}  // namespace

std::vector<SortedPrototypes> soc_prototypes(const PreparedStore& store, const Episode& episode,
                                             const BenchmarkConfig& config) {
  std::vector<SortedPrototypes> classes;
  for (std::size_t w = 0; w < episode.classes.size(); ++w) {
    const auto& images = store.classes[static_cast<std::size_t>(episode.classes[w])];
    SupportCrops support;
    for (int n : episode.support[w]) support.push_back(images[static_cast<std::size_t>(n)].crops);
    PrototypeParams params = config.prototypes;
    params.seed = derive_seed(config.prototypes.seed, static_cast<std::uint64_t>(episode.task) * 131 + w);
    classes.push_back(extract_sorted_prototypes(support, params));
  }
  return classes;
}

Episode sample_episode(const FeatureStore& store, const EpisodeShape& shape, int task, std::uint64_t seed) {
  check_shape(shape);
  const int num_classes = static_cast<int>(store.classes.size());
  if (num_classes < shape.ways) {
    throw Error(ErrorCode::InsufficientData, std::to_string(shape.ways) + "-way episodes need " +
                                                 std::to_string(shape.ways) + " classes, store has " +
                                                 std::to_string(num_classes));
  }
  const int per_class = shape.shots + shape.queries;
  for (const auto& c : store.classes) {
    if (static_cast<int>(c.images.size()) < per_class) {
      throw Error(ErrorCode::InsufficientData, "class '" + c.name + "' has " + std::to_string(c.images.size()) +
                                                   " images, episodes need " + std::to_string(per_class));
    }
  }
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(task)));
  Episode episode;
  episode.task = task;
  episode.classes = rng.sample_without_replacement(num_classes, shape.ways);
  for (int c : episode.classes) {
    std::vector<int> draw =
        rng.sample_without_replacement(static_cast<int>(store.classes[static_cast<std::size_t>(c)].images.size()),
                                       per_class);
    episode.support.emplace_back(draw.begin(), draw.begin() + shape.shots);
    episode.query.emplace_back(draw.begin() + shape.shots, draw.end());
  }
  return episode;
}

std::vector<Episode> sample_episodes(const FeatureStore& store, const EpisodeShape& shape, int tasks,
                                     std::uint64_t seed) {
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(std::max(tasks, 0)));
  for (int t = 0; t < tasks; ++t) out.push_back(sample_episode(store, shape, t, seed));
  return out;
}

std::vector<double> cc_pn_score(const Vector& query, std::span<const Vector> prototypes) {
  if (prototypes.empty()) throw Error(ErrorCode::InsufficientData, "no prototypes");
  std::vector<double> cos;
  cos.reserve(prototypes.size());
  for (const auto& p : prototypes) cos.push_back(cosine_sim(query, p));
  const double norm = log_sum_exp(cos);
  for (double& c : cos) c -= norm;
  return cos;
}

CcLoss cc_loss(const Vector& feature, int label, const Matrix& weights) {
  const Eigen::Index classes = weights.rows();
  if (label < 0 || label >= classes) throw Error(ErrorCode::InvalidArgument, "label out of range");
  if (weights.cols() != feature.size()) throw Error(ErrorCode::DimMismatch, "feature and weight sizes differ");
  const double feature_norm = feature.norm();
  if (feature_norm < kZeroNormThreshold) throw Error(ErrorCode::ZeroVector, "zero feature");
  const Vector f_hat = feature / feature_norm;

  Matrix w_hat(classes, weights.cols());
  Vector w_norm(classes);
  std::vector<double> cos(static_cast<std::size_t>(classes));
  for (Eigen::Index i = 0; i < classes; ++i) {
    w_norm[i] = weights.row(i).norm();
    if (w_norm[i] < kZeroNormThreshold) throw Error(ErrorCode::ZeroVector, "zero class weight");
    w_hat.row(i) = weights.row(i) / w_norm[i];
    cos[static_cast<std::size_t>(i)] = w_hat.row(i).dot(f_hat);
  }
  const double lse = log_sum_exp(cos);

  CcLoss out;
  out.loss = lse - cos[static_cast<std::size_t>(label)];
  out.grad_feature = Vector::Zero(feature.size());
  out.grad_weights = Matrix::Zero(classes, weights.cols());
  for (Eigen::Index i = 0; i < classes; ++i) {
    const double c = cos[static_cast<std::size_t>(i)];
    // dL/dcos_i = softmax_i - [i == label]
    const double g = std::exp(c - lse) - (i == label ? 1.0 : 0.0);
    out.grad_feature += g * (w_hat.row(i).transpose() - c * f_hat) / feature_norm;
    out.grad_weights.row(i) = g * (f_hat.transpose() - c * w_hat.row(i)) / w_norm[i];
  }
  return out;
}

double pn_episode_loss(const std::vector<std::vector<Vector>>& support, std::span<const LabeledFeature> queries) {
  if (support.empty() || queries.empty()) throw Error(ErrorCode::InsufficientData, "episode needs support and queries");
  std::vector<Vector> prototypes;
  for (const auto& way : support) {
    if (way.empty()) throw Error(ErrorCode::InsufficientData, "a way has no support features");
    prototypes.push_back(mean_of(normalize_all(way)));
  }
  double total = 0.0;
  for (const auto& q : queries) {
    if (q.label < 0 || q.label >= static_cast<int>(prototypes.size())) {
      throw Error(ErrorCode::InvalidArgument, "query label out of range");
    }
    total -= cc_pn_score(q.feature, prototypes)[static_cast<std::size_t>(q.label)];
  }
  return total / static_cast<double>(queries.size());
}

double infonce_loss(const Vector& query, const Vector& positive, std::span<const Vector> negatives, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::InvalidArgument, "temperature must be positive");
  std::vector<double> logits;
  logits.reserve(negatives.size() + 1);
  logits.push_back(cosine_sim(query, positive) / tau);
  for (const auto& n : negatives) logits.push_back(cosine_sim(query, n) / tau);
  return log_sum_exp(logits) - logits.front();
}

Vector multicrop_average(std::span<const Vector> crops) {
  if (crops.empty()) throw Error(ErrorCode::EmptyInput, "no crops to average");
  return l2_normalize(mean_of(normalize_all(crops)));
}

MeanCi mean_ci(std::span<const double> values) {
  if (values.size() < 2) throw Error(ErrorCode::TooFewValues, "a confidence interval needs at least two values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); })) return {values.front(), 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

std::string to_string(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::Cc: return "cc";
    case ClassifierKind::PnProto: return "pn-proto";
    case ClassifierKind::Soc: return "soc";
    case ClassifierKind::MulticropCc: return "multicrop-cc";
  }
  return "unknown";
}

ClassifierKind classifier_from_string(const std::string& name) {
  for (auto kind : {ClassifierKind::Cc, ClassifierKind::PnProto, ClassifierKind::Soc, ClassifierKind::MulticropCc}) {
    if (to_string(kind) == name) return kind;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown classifier '" + name + "'");
}

PreparedStore prepare_store(const FeatureStore& store, int crops) {
  PreparedStore out;
  for (const auto& cls : store.classes) {
    out.class_names.push_back(cls.name);
    std::vector<PreparedImage> images;
    for (const auto& img : cls.images) {
      PreparedImage prepared;
      prepared.whole = l2_normalize(whole_view(img).feature);
      if (crops > 0) {
        const auto views = crop_view_indices(img);
        if (views.size() < static_cast<std::size_t>(crops)) {
          throw Error(ErrorCode::InsufficientData, "image '" + cls.name + "/" + img.id + "' has " +
                                                       std::to_string(views.size()) + " crops, " +
                                                       std::to_string(crops) + " requested");
        }
        for (int v = 0; v < crops; ++v) prepared.crops.push_back(l2_normalize(img.crops[views[static_cast<std::size_t>(v)]].feature));
      }
      images.push_back(std::move(prepared));
    }
    out.classes.push_back(std::move(images));
  }
  return out;
}

EpisodeClassifier make_classifier(const BenchmarkConfig& config) {
  switch (config.classifier) {
    case ClassifierKind::Cc:
    case ClassifierKind::PnProto:
      return [](const PreparedStore& store, const Episode& episode) {
        return softmax_episode(store, episode, [](const PreparedImage& img) -> const Vector& { return img.whole; });
      };
    case ClassifierKind::MulticropCc:
      return [](const PreparedStore& store, const Episode& episode) {
        return softmax_episode(store, episode, [](const PreparedImage& img) { return multicrop_average(img.crops); });
      };
    case ClassifierKind::Soc:
      return [config](const PreparedStore& store, const Episode& episode) { return soc_episode(store, episode, config); };
  }
  throw Error(ErrorCode::InvalidArgument, "unknown classifier");
}

EvalReport run_benchmark(const FeatureStore& store, const BenchmarkConfig& config) {
  return run_benchmark(store, config, make_classifier(config));
}

EvalReport run_benchmark(const FeatureStore& store, const BenchmarkConfig& config,
                         const EpisodeClassifier& classifier) {
  check_shape(config.shape);
  if (config.tasks < 1 || config.repeats < 1) throw Error(ErrorCode::InvalidArgument, "tasks and repeats must be positive");
  const bool uses_crops = config.classifier == ClassifierKind::Soc || config.classifier == ClassifierKind::MulticropCc;
  if (uses_crops && config.crops < 1) throw Error(ErrorCode::InvalidArgument, "crops must be positive");
  const PreparedStore prepared = prepare_store(store, uses_crops ? config.crops : 0);

  // Fail fast on data shortage before spawning workers.
  sample_episode(store, config.shape, 0, config.seed);

  struct TaskResult {
    double accuracy = 0.0;
    std::vector<std::pair<int, bool>> outcomes;  // (store class, correct)
    double softmax_deviation = 0.0;
    double loss = 0.0;
  };
  const std::size_t tasks = static_cast<std::size_t>(config.tasks);
  std::vector<TaskResult> results(tasks * static_cast<std::size_t>(config.repeats));

  parallel_for(results.size(), config.workers, [&](std::size_t index) {
    const int repeat = static_cast<int>(index / tasks);
    const int task = static_cast<int>(index % tasks);
    try {
      const Episode episode =
          sample_episode(store, config.shape, task, derive_seed(config.seed, static_cast<std::uint64_t>(repeat)));
      const EpisodeOutcome outcome = classifier(prepared, episode);
      TaskResult r;
      std::size_t q = 0;
      int correct = 0;
      for (std::size_t w = 0; w < episode.classes.size(); ++w) {
        for (std::size_t m = 0; m < episode.query[w].size(); ++m, ++q) {
          if (q >= outcome.predictions.size()) throw Error(ErrorCode::CountMismatch, "classifier skipped queries");
          const bool ok = outcome.predictions[q] == static_cast<int>(w);
          correct += ok ? 1 : 0;
          r.outcomes.emplace_back(episode.classes[w], ok);
        }
      }
      r.accuracy = static_cast<double>(correct) / static_cast<double>(q);
      r.softmax_deviation = outcome.softmax_deviation;
      r.loss = outcome.loss;
      results[index] = std::move(r);
    } catch (const Error& e) {
      throw Error(e.code(), "repeat " + std::to_string(repeat) + " task " + std::to_string(task) + ": " + e.what());
    }
  });

  EvalReport report;
  report.config = config;
  std::vector<double> task_accuracies;
  double loss_total = 0.0;
  for (int r = 0; r < config.repeats; ++r) {
    double sum = 0.0;
    for (std::size_t t = 0; t < tasks; ++t) {
      const TaskResult& res = results[static_cast<std::size_t>(r) * tasks + t];
      sum += res.accuracy;
      task_accuracies.push_back(res.accuracy);
      report.max_softmax_deviation = std::max(report.max_softmax_deviation, res.softmax_deviation);
      loss_total += res.loss;
      for (const auto& [cls, ok] : res.outcomes) {
        auto& acc = report.per_class[prepared.class_names[static_cast<std::size_t>(cls)]];
        acc.correct += ok ? 1 : 0;
        ++acc.total;
      }
    }
    report.repeat_means.push_back(sum / static_cast<double>(tasks));
  }
  report.mean_loss = loss_total / static_cast<double>(results.size());
  if (report.repeat_means.size() >= 2) {
    const MeanCi ci = mean_ci(report.repeat_means);
    report.mean = ci.mean;
    report.ci95 = ci.ci95;
  } else {
    report.mean = report.repeat_means.front();
  }
  if (task_accuracies.size() >= 2) {
    const MeanCi ci = mean_ci(task_accuracies);
    report.task_mean = ci.mean;
    report.task_ci95 = ci.ci95;
  } else {
    report.task_mean = task_accuracies.front();
  }
  return report;
}

nlohmann::json soc_trace_json(const FeatureStore& store, const BenchmarkConfig& config, int task) {
  const PreparedStore prepared = prepare_store(store, config.crops);
  const Episode episode = sample_episode(store, config.shape, task, derive_seed(config.seed, std::uint64_t{0}));
  const std::vector<SortedPrototypes> classes = soc_prototypes(prepared, episode, config);
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t w = 0; w < episode.classes.size(); ++w) {
    const auto& cls = store.classes[static_cast<std::size_t>(episode.classes[w])];
    for (int n : episode.query[w]) {
      const Classification result =
          classify_query(prepared.classes[static_cast<std::size_t>(episode.classes[w])][static_cast<std::size_t>(n)].crops,
                         classes, config.alpha, config.beta);
      nlohmann::json traces = nlohmann::json::array();
      for (const auto& t : result.traces) traces.push_back(trace_json(t));
      out.push_back({{"query", cls.name + "/" + cls.images[static_cast<std::size_t>(n)].id},
                     {"label", w},
                     {"predicted", result.predicted},
                     {"traces", std::move(traces)}});
    }
  }
  return out;
}

nlohmann::json report_json(const EvalReport& report) {
  const auto& c = report.config;
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [name, acc] : report.per_class) {
    per_class[name] = {{"accuracy", acc.accuracy()}, {"correct", acc.correct}, {"total", acc.total}};
  }
  nlohmann::json out{
      {"classifier", to_string(c.classifier)},
      {"repeat_means", report.repeat_means},
      {"mean", report.mean},
      {"ci95", report.ci95},
      {"task_mean", report.task_mean},
      {"task_ci95", report.task_ci95},
      {"per_class", std::move(per_class)},
      {"config",
       {{"N", c.shape.ways},
        {"K", c.shape.shots},
        {"M", c.shape.queries},
        {"tasks", c.tasks},
        {"repeats", c.repeats},
        {"alpha", c.alpha},
        {"beta", c.beta},
        {"V", c.crops},
        {"seed", c.seed}}},
  };
  if (c.classifier == ClassifierKind::Cc || c.classifier == ClassifierKind::PnProto ||
      c.classifier == ClassifierKind::MulticropCc) {
    out["max_softmax_deviation"] = report.max_softmax_deviation;
  }
  if (c.classifier == ClassifierKind::PnProto) out["mean_episode_loss"] = report.mean_loss;
  return out;
}

}  // namespace cosoc
