#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosoc/feature.hpp"
#include "cosoc/feature_store.hpp"
#include "cosoc/soc_matcher.hpp"

namespace cosoc {

struct EpisodeShape {
  int ways = 5;
  int shots = 5;
  int queries = 15;
};

/// One N-way K-shot task. Way w draws from store class `classes[w]`;
/// `support[w]` / `query[w]` are image indices within that class.
struct Episode {
  int task = 0;
  std::vector<int> classes;
  std::vector<std::vector<int>> support;
  std::vector<std::vector<int>> query;
};

/// The task's draw depends only on (seed, task), so any subset of tasks can
/// be regenerated independently. Throws InsufficientData when the store has
/// fewer than N classes or some class has fewer than K+M images.
Episode sample_episode(const FeatureStore& store, const EpisodeShape& shape, int task, std::uint64_t seed);
std::vector<Episode> sample_episodes(const FeatureStore& store, const EpisodeShape& shape, int tasks,
                                     std::uint64_t seed);

/// log-softmax over cosine similarities to each prototype.
std::vector<double> cc_pn_score(const Vector& query, std::span<const Vector> prototypes);

struct CcLoss {
  double loss = 0.0;
  Vector grad_feature;
  Matrix grad_weights;  // same shape as the weight matrix
};

/// Cosine-classifier cross entropy: -log softmax_i cos(feature, w_i) at
/// `label`, with analytic gradients. `weights` holds one class per row.
CcLoss cc_loss(const Vector& feature, int label, const Matrix& weights);

struct LabeledFeature {
  Vector feature;
  int label = 0;  // way index
};

/// Mean over queries of -S_y with prototypes = mean of each way's
/// (normalized) support features.
double pn_episode_loss(const std::vector<std::vector<Vector>>& support, std::span<const LabeledFeature> queries);

/// Contrastive loss with cosine similarity and temperature `tau`.
double infonce_loss(const Vector& query, const Vector& positive, std::span<const Vector> negatives, double tau);

/// Normalized mean of the (normalized) crop features.
Vector multicrop_average(std::span<const Vector> crops);

struct MeanCi {
  double mean = 0.0;
  double ci95 = 0.0;
};

/// Arithmetic mean and 1.96 * sample standard deviation / sqrt(n).
MeanCi mean_ci(std::span<const double> values);

enum class ClassifierKind { Cc, PnProto, Soc, MulticropCc };

std::string to_string(ClassifierKind kind);
ClassifierKind classifier_from_string(const std::string& name);

/// Store features normalized once up front, in the layout classifiers need.
struct PreparedImage {
  Vector whole;
  std::vector<Vector> crops;  // first `crops` multi-crop views
};

struct PreparedStore {
  std::vector<std::string> class_names;
  std::vector<std::vector<PreparedImage>> classes;
};

/// `crops` = 0 skips the multi-crop views. Throws InsufficientData when an
/// image has fewer than `crops` of them.
PreparedStore prepare_store(const FeatureStore& store, int crops);

struct EpisodeOutcome {
  /// Predicted way for each query, way-major (query[0][0], query[0][1], ...).
  std::vector<int> predictions;
  /// max |sum_c exp(S_c) - 1| over queries (softmax classifiers only).
  double softmax_deviation = 0.0;
  double loss = 0.0;  // pn-proto: episode loss
};

using EpisodeClassifier = std::function<EpisodeOutcome(const PreparedStore&, const Episode&)>;

struct BenchmarkConfig {
  ClassifierKind classifier = ClassifierKind::Soc;
  EpisodeShape shape;
  int tasks = 2000;
  int repeats = 5;
  double alpha = 0.8;
  double beta = 0.8;
  int crops = 7;
  std::uint64_t seed = 0;
  int workers = 1;
  PrototypeParams prototypes;
};

EpisodeClassifier make_classifier(const BenchmarkConfig& config);

struct ClassAccuracy {
  long long correct = 0;
  long long total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

struct EvalReport {
  BenchmarkConfig config;
  std::vector<double> repeat_means;
  double mean = 0.0;
  double ci95 = 0.0;  // over repeat means
  double task_mean = 0.0;
  double task_ci95 = 0.0;  // over individual tasks
  std::map<std::string, ClassAccuracy> per_class;
  double max_softmax_deviation = 0.0;
  double mean_loss = 0.0;
};

/// Runs `repeats` x `tasks` episodes. Repeat r uses seed derive(seed, r);
/// task t within it derive(repeat seed, t). Aggregation is ordered by
/// (repeat, task), so the report does not depend on `workers`. Failures are
/// rethrown with the offending task index.
EvalReport run_benchmark(const FeatureStore& store, const BenchmarkConfig& config);
EvalReport run_benchmark(const FeatureStore& store, const BenchmarkConfig& config,
                         const EpisodeClassifier& classifier);

/// Support prototypes of every way, as the soc classifier builds them.
std::vector<SortedPrototypes> soc_prototypes(const PreparedStore& store, const Episode& episode,
                                             const BenchmarkConfig& config);

/// Match traces of every query of task `task` in the first repeat.
nlohmann::json soc_trace_json(const FeatureStore& store, const BenchmarkConfig& config, int task = 0);

nlohmann::json report_json(const EvalReport& report);

}  // namespace cosoc
