#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cosoc/feature.hpp"
#include "cosoc/feature_store.hpp"
#include "cosoc/fsl_eval.hpp"

namespace cosoc {

// Synthetic crop-feature worlds. Each class owns a foreground motif on
// fg_dims; with probability rho an image also carries the class background
// motif on bg_dims, otherwise a random per-image background direction.
// Every image gets a whole view (foreground + background, full rect) and
// `crops` random crops, a fixed share of which see only the foreground.

struct WorldConfig {
  int classes = 20;
  int images = 30;
  int crops = 8;
  int d = 64;
  std::vector<int> fg_dims;  // empty: first half of [0, d)
  std::vector<int> bg_dims;  // empty: second half of [0, d)
  double rho_train = 0.9;
  double rho_eval = 0.0;
  double sigma = 0.2;
  double fg_crop_fraction = 0.375;
  /// Eval split draws its own motifs (novel classes) instead of reusing the
  /// training ones.
  bool novel_eval_classes = true;
  int embed_dim = 32;
  std::uint64_t seed = 0;

  /// Throws ConfigInvalid naming the offending field.
  void validate() const;
  std::vector<int> resolved_fg_dims() const;
  std::vector<int> resolved_bg_dims() const;
  int foreground_crops() const;
};

nlohmann::json config_to_json(const WorldConfig& config);
/// Unknown keys and wrongly typed values are ConfigInvalid.
WorldConfig config_from_json(const nlohmann::json& j);

enum class Split { Train, Eval };

/// Foreground flag per crop, keyed class -> image, crops in store order.
struct GroundTruth {
  std::map<std::string, std::map<std::string, std::vector<std::pair<std::string, bool>>>> flags;

  /// Id of the image's first foreground-only crop. MissingGroundTruth when
  /// the image is unknown or has none.
  const std::string& foreground_crop(const std::string& cls, const std::string& image) const;
};

nlohmann::json truth_to_json(const GroundTruth& truth);
GroundTruth truth_from_json(const nlohmann::json& j);

inline constexpr const char* kGroundTruthFile = "ground_truth.json";

struct World {
  FeatureStore store;
  GroundTruth truth;
  Matrix fg_motifs;  // classes x d, orthonormal rows
  Matrix bg_motifs;
};

World generate_world(const WorldConfig& config, Split split = Split::Train);

/// One image per source image whose single crop (full rect) is that image's
/// foreground-only view.
FeatureStore foreground_store(const FeatureStore& store, const GroundTruth& truth);

struct LinearEmbedding {
  Matrix matrix;  // e x d
};

/// Maps every crop feature through the embedding (unnormalized).
FeatureStore embed_store(const FeatureStore& store, const LinearEmbedding& embedding);

enum class Regime { Ori, Fg, Fuse };

std::string to_string(Regime regime);
Regime regime_from_string(const std::string& name);

/// Whole views, foreground views (empty without ground truth) and labels.
struct TrainingSet {
  Matrix whole;  // n x d
  Matrix fg;
  std::vector<int> labels;
  int classes = 0;
};

TrainingSet training_set(const FeatureStore& store, const GroundTruth* truth);

struct LinearLoss {
  double loss = 0.0;
  Matrix grad_embedding;  // e x d
  Matrix grad_weights;    // C x e
};

/// Mean cosine-classifier loss of rows of `x` embedded by `embedding`, with
/// gradients for the embedding and the class weights.
LinearLoss linear_cc_loss(const Matrix& embedding, const Matrix& weights, const Matrix& x,
                          const std::vector<int>& labels);

struct TrainParams {
  Regime regime = Regime::Ori;
  int epochs = 200;
  double lr = 1.0;
  int max_halvings = 5;
  std::uint64_t seed = 0;
};

struct TrainResult {
  LinearEmbedding embedding;
  Matrix class_weights;
  /// Monitored loss before each step; fuse monitors the mean of the whole
  /// and foreground losses.
  std::vector<double> loss_history;
  int halvings = 0;
  double final_lr = 0.0;
  double train_accuracy = 0.0;  // on the regime's monitored views
};

/// Full-batch gradient descent, one step per epoch. Fuse flips a fair coin
/// per image and epoch between its whole and foreground view. The learning
/// rate halves whenever the monitored loss rises. MissingGroundTruth for
/// fg/fuse without foreground views.
TrainResult train_linear(const TrainingSet& data, int embed_dim, const TrainParams& params);

struct ShortcutParams {
  WorldConfig world;
  int seeds = 10;
  int episodes = 500;
  EpisodeShape shape;
  int crops = 7;
  double alpha = 0.8;
  double beta = 0.8;
  int epochs = 200;
  double lr = 1.0;
  int workers = 1;
};

struct Cell {
  std::vector<double> per_seed;
  double mean = 0.0;
  double ci95 = 0.0;
};

struct ShortcutTable {
  ShortcutParams params;
  std::map<std::string, std::map<std::string, Cell>> cc;  // regime -> eval (ori|fg)
  Cell soc;           // fuse embedding, ori-eval
  Cell multicrop_cc;  // fuse embedding, ori-eval
  bool fg_beats_ori = false;
  bool fuse_close = false;
  bool soc_beats_multicrop = false;
};

/// Trains all three regimes per seed and evaluates them on the novel-class
/// eval split, then checks the directional claims: fg beats ori on fg-eval by
/// 2 points with disjoint CIs, fuse is within 2 points of the better regime on
/// both evals, and SOC beats multi-crop averaging on ori-eval by 5 points
/// with disjoint CIs.
ShortcutTable shortcut_experiment(const ShortcutParams& params);

nlohmann::json shortcut_json(const ShortcutTable& table);

}  // namespace cosoc
