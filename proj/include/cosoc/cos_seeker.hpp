#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosoc/crop_geometry.hpp"
#include "cosoc/feature.hpp"
#include "cosoc/feature_store.hpp"
#include "cosoc/rng.hpp"

namespace cosoc {

// Clustering-based foreground seeking over the crop embeddings of one class:
// cluster, drop clusters that too few images reach, score each crop by its
// distance to the nearest surviving centroid, then turn the top scores of
// every image into a sampling distribution over {original, crop_1..crop_k}.

struct ClusterModel {
  std::vector<Vector> centroids;
  std::vector<int> assignment;  // point index -> cluster index
  double inertia = 0.0;
  int iterations = 0;
  /// Inertia after each assignment step; non-increasing.
  std::vector<double> inertia_history;
};

/// Lloyd's k-means with k-means++ seeding. An emptied cluster is re-seeded at
/// the point farthest from its own centroid. Stops when the assignment is
/// stable, the largest centroid shift drops below `tol`, or after `max_iter`.
/// Nearest-centroid ties go to the lower cluster index.
ClusterModel kmeans_fit(std::span<const Vector> points, int clusters, std::uint64_t seed, int max_iter = 100,
                        double tol = 1e-10);

/// Fraction of images with at least one crop in each cluster.
/// `image_of_point[i]` is the image index (0..num_images-1) of point i.
std::vector<double> membership_ratio(const ClusterModel& model, std::span<const int> image_of_point, int num_images);

struct PrunedClusters {
  std::vector<int> indices;  // into ClusterModel::centroids, ascending
  std::vector<Vector> centroids;
  std::vector<double> ratios;
  bool fallback = false;  // nothing reached gamma; the best cluster was kept
};

PrunedClusters prune_clusters(const ClusterModel& model, std::span<const double> ratios, double gamma);

struct ForegroundScores {
  std::vector<double> scores;
  std::vector<double> min_distance;
  double eta = 0.0;
  /// Every crop sits on a retained centroid; all scores are 1.
  bool degenerate_eta = false;
};

/// s = 1 - min_j ||v - z_j|| / eta with eta the largest such minimum. Crops
/// are normalized first; centroids are used as given.
ForegroundScores foreground_scores(std::span<const Vector> crops, const PrunedClusters& retained);

struct PatchChoice {
  int crop = 0;  // index into the scores; seek_class maps it to the store crop index
  double score = 0.0;
  double prob = 0.0;
};

struct ForegroundRow {
  double p_original = 1.0;
  std::vector<PatchChoice> patches;  // score-descending
  bool all_zero = false;
};

/// Keeps the `k` best-scoring crops (ties -> lower crop index). The original
/// image gets 1 - max score; patch j gets (s_j / sum s) * max score.
ForegroundRow topk_and_fusion(std::span<const double> scores, int k);

struct FusionDraw {
  bool original = true;
  int crop = -1;
  std::optional<CropRect> rect;  // enforce_min_area applied
};

/// One categorical draw from the row's distribution.
FusionDraw fusion_sample(const ForegroundRow& row, Rng& rng, std::span<const CropRect> crop_rects = {},
                         double min_area_ratio = CropConstraints{}.min_area_ratio);
FusionDraw fusion_sample(const ForegroundRow& row, std::uint64_t seed, std::span<const CropRect> crop_rects = {},
                         double min_area_ratio = CropConstraints{}.min_area_ratio);

struct CosParams {
  double gamma = 0.5;
  int clusters = 5;
  int topk = 3;
  std::uint64_t seed = 0;
  int max_iter = 100;
};

struct ClassForeground {
  std::string name;
  ClusterModel model;
  std::vector<double> ratios;
  PrunedClusters retained;
  ForegroundScores scores;  // crop views (whole view excluded), image-major
  std::vector<ForegroundRow> rows;  // one per image
};

/// Runs the whole seeker on one class. Throws InsufficientData (naming the
/// class) when there are fewer crops than clusters or an image has fewer
/// crops than `topk`.
ClassForeground seek_class(const ClassRecord& cls, const CosParams& params);

struct ForegroundTable {
  CosParams params;
  std::vector<ClassForeground> classes;
};

ForegroundTable seek_store(const FeatureStore& store, const CosParams& params, int workers = 1);

/// Copy of `store` whose crop views are sorted by foreground score, best
/// first (ties keep store order). The whole view stays in front.
FeatureStore order_by_foreground(const FeatureStore& store, const ForegroundTable& table);

/// `{gamma, H, k, classes:{<class>:{<image>:{p_original, patches:[{crop_id, score, prob}]}}}}`
nlohmann::json foreground_json(const ForegroundTable& table, const FeatureStore& store);

}  // namespace cosoc
