#include "cosoc/cos_seeker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "cosoc/error.hpp"
#include "cosoc/parallel.hpp"
#include "cosoc/rng.hpp"

namespace cosoc {
namespace {

// Nearest centroid by squared distance; ties go to the lower index.
std::vector<int> assign_points(std::span<const Vector> points, const std::vector<Vector>& centroids,
                               double* inertia) {
  std::vector<int> out(points.size());
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = 0;
    for (std::size_t j = 0; j < centroids.size(); ++j) {
      const double d2 = (points[i] - centroids[j]).squaredNorm();
      if (d2 < best) {
        best = d2;
        best_j = static_cast<int>(j);
      }
    }
    out[i] = best_j;
    total += best;
  }
  if (inertia) *inertia = total;
  return out;
}

std::vector<Vector> kmeans_plus_plus(std::span<const Vector> points, int clusters, Rng& rng) {
  std::vector<Vector> centroids;
  centroids.reserve(static_cast<std::size_t>(clusters));
  centroids.push_back(points[rng.below(points.size())]);
  std::vector<double> d2(points.size(), std::numeric_limits<double>::infinity());
  while (static_cast<int>(centroids.size()) < clusters) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      d2[i] = std::min(d2[i], (points[i] - centroids.back()).squaredNorm());
      total += d2[i];
    }
    std::size_t pick = points.size() - 1;
    if (total <= 0.0) {
      pick = rng.below(points.size());
    } else {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    centroids.push_back(points[pick]);
  }
  return centroids;
}

}  // namespace

ClusterModel kmeans_fit(std::span<const Vector> points, int clusters, std::uint64_t seed, int max_iter, double tol) {
  if (clusters < 1) throw Error(ErrorCode::InvalidArgument, "cluster count must be at least 1");
  if (points.size() < static_cast<std::size_t>(clusters)) {
    throw Error(ErrorCode::TooFewPoints, std::to_string(points.size()) + " points for " + std::to_string(clusters) +
                                             " clusters");
  }
  const Eigen::Index dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw Error(ErrorCode::DimMismatch, "kmeans_fit: inconsistent dimensions");
    require_finite(p);
  }

  Rng rng(seed);
  ClusterModel model;
  model.centroids = kmeans_plus_plus(points, clusters, rng);
  double inertia = 0.0;
  model.assignment = assign_points(points, model.centroids, &inertia);
  model.inertia_history.push_back(inertia);

  std::vector<Vector> sums(static_cast<std::size_t>(clusters));
  std::vector<int> counts(static_cast<std::size_t>(clusters));
  for (int iter = 0; iter < max_iter; ++iter) {
    for (auto& s : sums) s = Vector::Zero(dim);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      sums[static_cast<std::size_t>(model.assignment[i])] += points[i];
      ++counts[static_cast<std::size_t>(model.assignment[i])];
    }
    std::vector<Vector> updated(static_cast<std::size_t>(clusters));
    for (std::size_t j = 0; j < updated.size(); ++j) {
      updated[j] = counts[j] > 0 ? Vector(sums[j] / counts[j]) : model.centroids[j];
    }
    // Empty-cluster repair: move the centroid onto the point that is worst
    // served by its current cluster. The point is claimed so a second empty
    // cluster picks a different one.
    std::vector<int> owner = model.assignment;
    for (std::size_t j = 0; j < updated.size(); ++j) {
      if (counts[j] > 0) continue;
      double worst = -1.0;
      std::size_t worst_i = 0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        const double d2 = (points[i] - updated[static_cast<std::size_t>(owner[i])]).squaredNorm();
        if (d2 > worst) {
          worst = d2;
          worst_i = i;
        }
      }
      updated[j] = points[worst_i];
      owner[worst_i] = static_cast<int>(j);
      counts[j] = 1;
    }

    double shift = 0.0;
    for (std::size_t j = 0; j < updated.size(); ++j) shift = std::max(shift, (updated[j] - model.centroids[j]).norm());
    model.centroids = std::move(updated);

    std::vector<int> next = assign_points(points, model.centroids, &inertia);
    model.inertia_history.push_back(inertia);
    ++model.iterations;
    const bool stable = next == model.assignment;
    model.assignment = std::move(next);
    if (stable || shift < tol) break;
  }
  model.inertia = model.inertia_history.back();
  return model;
}

std::vector<double> membership_ratio(const ClusterModel& model, std::span<const int> image_of_point, int num_images) {
  if (num_images < 1) throw Error(ErrorCode::InvalidArgument, "membership_ratio needs at least one image");
  if (image_of_point.size() != model.assignment.size()) {
    throw Error(ErrorCode::CountMismatch, "membership_ratio: image map does not cover every point");
  }
  std::vector<std::set<int>> members(model.centroids.size());
  for (std::size_t i = 0; i < image_of_point.size(); ++i) {
    const int image = image_of_point[i];
    if (image < 0 || image >= num_images) throw Error(ErrorCode::InvalidArgument, "image index out of range");
    members[static_cast<std::size_t>(model.assignment[i])].insert(image);
  }
  std::vector<double> ratios;
  ratios.reserve(members.size());
  for (const auto& m : members) ratios.push_back(static_cast<double>(m.size()) / num_images);
  return ratios;
}

PrunedClusters prune_clusters(const ClusterModel& model, std::span<const double> ratios, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw Error(ErrorCode::InvalidArgument, "gamma must lie in (0, 1]");
  if (ratios.size() != model.centroids.size() || ratios.empty()) {
    throw Error(ErrorCode::CountMismatch, "one ratio per cluster is required");
  }
  PrunedClusters out;
  for (std::size_t j = 0; j < ratios.size(); ++j) {
    if (ratios[j] >= gamma) out.indices.push_back(static_cast<int>(j));
  }
  if (out.indices.empty()) {
    out.fallback = true;
    out.indices.push_back(static_cast<int>(std::max_element(ratios.begin(), ratios.end()) - ratios.begin()));
  }
  for (int j : out.indices) {
    out.centroids.push_back(model.centroids[static_cast<std::size_t>(j)]);
    out.ratios.push_back(ratios[static_cast<std::size_t>(j)]);
  }
  return out;
}

ForegroundScores foreground_scores(std::span<const Vector> crops, const PrunedClusters& retained) {
  if (retained.centroids.empty()) throw Error(ErrorCode::InvalidArgument, "no retained clusters");
  if (crops.empty()) throw Error(ErrorCode::EmptyInput, "no crops to score");
  ForegroundScores out;
  out.min_distance.reserve(crops.size());
  for (const auto& raw : crops) {
    const Vector v = l2_normalize(raw);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& z : retained.centroids) {
      if (z.size() != v.size()) throw Error(ErrorCode::DimMismatch, "crop and centroid dimensions differ");
      best = std::min(best, (v - z).norm());
    }
    out.min_distance.push_back(best);
  }
  out.eta = *std::max_element(out.min_distance.begin(), out.min_distance.end());
  out.degenerate_eta = out.eta <= 0.0;
  out.scores.reserve(crops.size());
  for (double d : out.min_distance) {
    out.scores.push_back(out.degenerate_eta ? 1.0 : std::clamp(1.0 - d / out.eta, 0.0, 1.0));
  }
  return out;
}

ForegroundRow topk_and_fusion(std::span<const double> scores, int k) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "top-k needs k >= 1");
  if (scores.size() < static_cast<std::size_t>(k)) {
    throw Error(ErrorCode::InsufficientData,
                std::to_string(scores.size()) + " scored crops, top-" + std::to_string(k) + " requested");
  }
  for (double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) throw Error(ErrorCode::InvalidArgument, "scores must lie in [0, 1]");
  }
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  order.resize(static_cast<std::size_t>(k));

  ForegroundRow row;
  double total = 0.0;
  for (int i : order) total += scores[static_cast<std::size_t>(i)];
  const double top = scores[static_cast<std::size_t>(order.front())];
  row.all_zero = top <= 0.0;
  row.p_original = row.all_zero ? 1.0 : 1.0 - top;
  for (int i : order) {
    const double s = scores[static_cast<std::size_t>(i)];
    row.patches.push_back({i, s, row.all_zero ? 0.0 : s / total * top});
  }
  return row;
}

FusionDraw fusion_sample(const ForegroundRow& row, Rng& rng, std::span<const CropRect> crop_rects,
                         double min_area_ratio) {
  const double u = rng.uniform();
  FusionDraw draw;
  if (row.all_zero || u < row.p_original) return draw;
  double acc = row.p_original;
  const PatchChoice* chosen = nullptr;
  for (const auto& p : row.patches) {
    if (p.prob <= 0.0) continue;
    chosen = &p;  // rounding fallthrough lands on the last positive patch
    acc += p.prob;
    if (u < acc) break;
  }
  if (!chosen) return draw;
  draw.original = false;
  draw.crop = chosen->crop;
  if (!crop_rects.empty()) {
    if (static_cast<std::size_t>(draw.crop) >= crop_rects.size()) {
      throw Error(ErrorCode::CountMismatch, "no rect for crop " + std::to_string(draw.crop));
    }
    draw.rect = enforce_min_area(crop_rects[static_cast<std::size_t>(draw.crop)], min_area_ratio);
  }
  return draw;
}

FusionDraw fusion_sample(const ForegroundRow& row, std::uint64_t seed, std::span<const CropRect> crop_rects,
                         double min_area_ratio) {
  Rng rng(seed);
  return fusion_sample(row, rng, crop_rects, min_area_ratio);
}

ClassForeground seek_class(const ClassRecord& cls, const CosParams& params) {
  ClassForeground out;
  out.name = cls.name;
  std::vector<Vector> points;
  std::vector<int> image_of_point;
  std::vector<std::vector<std::size_t>> views;
  for (std::size_t n = 0; n < cls.images.size(); ++n) {
    const auto& img = cls.images[n];
    views.push_back(crop_view_indices(img));
    if (views.back().size() < static_cast<std::size_t>(params.topk)) {
      throw Error(ErrorCode::InsufficientData, "class '" + cls.name + "': image '" + img.id + "' has " +
                                                   std::to_string(views.back().size()) + " crops, top-" +
                                                   std::to_string(params.topk) + " requested");
    }
    for (std::size_t v : views.back()) {
      points.push_back(l2_normalize(img.crops[v].feature));
      image_of_point.push_back(static_cast<int>(n));
    }
  }
  if (points.size() < static_cast<std::size_t>(std::max(params.clusters, 1))) {
    throw Error(ErrorCode::InsufficientData, "class '" + cls.name + "': " + std::to_string(points.size()) +
                                                 " crops for " + std::to_string(params.clusters) + " clusters");
  }
  out.model = kmeans_fit(points, params.clusters, derive_seed(params.seed, cls.name), params.max_iter);
  out.ratios = membership_ratio(out.model, image_of_point, static_cast<int>(cls.images.size()));
  out.retained = prune_clusters(out.model, out.ratios, params.gamma);
  out.scores = foreground_scores(points, out.retained);

  std::size_t offset = 0;
  for (const auto& image_views : views) {
    std::span<const double> image_scores(out.scores.scores.data() + offset, image_views.size());
    ForegroundRow row = topk_and_fusion(image_scores, params.topk);
    for (auto& patch : row.patches) patch.crop = static_cast<int>(image_views[static_cast<std::size_t>(patch.crop)]);
    out.rows.push_back(std::move(row));
    offset += image_views.size();
  }
  return out;
}

ForegroundTable seek_store(const FeatureStore& store, const CosParams& params, int workers) {
  ForegroundTable table;
  table.params = params;
  table.classes.resize(store.classes.size());
  parallel_for(store.classes.size(), workers,
               [&](std::size_t c) { table.classes[c] = seek_class(store.classes[c], params); });
  return table;
}

FeatureStore order_by_foreground(const FeatureStore& store, const ForegroundTable& table) {
  if (table.classes.size() != store.classes.size()) throw Error(ErrorCode::CountMismatch, "table does not match store");
  FeatureStore out;
  out.dim = store.dim;
  for (std::size_t c = 0; c < store.classes.size(); ++c) {
    const auto& cls = store.classes[c];
    const auto& scores = table.classes[c].scores.scores;
    ClassRecord sorted{cls.name, {}};
    std::size_t offset = 0;
    for (const auto& img : cls.images) {
      auto views = crop_view_indices(img);
      if (offset + views.size() > scores.size()) throw Error(ErrorCode::CountMismatch, "table does not match store");
      std::vector<std::size_t> order(views.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return scores[offset + a] > scores[offset + b]; });
      ImageRecord ranked{img.id, {}};
      if (views.size() < img.crops.size()) ranked.crops.push_back(whole_view(img));
      for (std::size_t o : order) ranked.crops.push_back(img.crops[views[o]]);
      sorted.images.push_back(std::move(ranked));
      offset += views.size();
    }
    out.classes.push_back(std::move(sorted));
  }
  return out;
}

nlohmann::json foreground_json(const ForegroundTable& table, const FeatureStore& store) {
  nlohmann::json classes = nlohmann::json::object();
  for (std::size_t c = 0; c < table.classes.size(); ++c) {
    const auto& cls = store.classes[c];
    nlohmann::json images = nlohmann::json::object();
    for (std::size_t n = 0; n < cls.images.size(); ++n) {
      const auto& row = table.classes[c].rows[n];
      nlohmann::json patches = nlohmann::json::array();
      for (const auto& p : row.patches) {
        patches.push_back({{"crop_id", cls.images[n].crops[static_cast<std::size_t>(p.crop)].id},
                           {"score", p.score},
                           {"prob", p.prob}});
      }
      images[cls.images[n].id] = {{"p_original", row.p_original}, {"patches", std::move(patches)}};
    }
    classes[cls.name] = std::move(images);
  }
  return nlohmann::json{{"gamma", table.params.gamma},
                        {"H", table.params.clusters},
                        {"k", table.params.topk},
                        {"classes", std::move(classes)}};
}

}  // namespace cosoc
