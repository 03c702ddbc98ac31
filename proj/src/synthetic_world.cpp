#include "cosoc/synthetic_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "cosoc/crop_geometry.hpp"
#include "cosoc/error.hpp"
#include "cosoc/parallel.hpp"
#include "cosoc/rng.hpp"

namespace cosoc {
namespace {

[[noreturn]] void invalid(const std::string& field, const std::string& why) {
  throw Error(ErrorCode::ConfigInvalid, "field '" + field + "': " + why);
}

std::vector<int> half_range(int lo, int hi) {
  std::vector<int> out;
  for (int i = lo; i < hi; ++i) out.push_back(i);
  return out;
}

// `count` orthonormal rows supported on `dims`.
Matrix orthonormal_motifs(Rng& rng, int count, const std::vector<int>& dims, int d) {
  const auto n = static_cast<Eigen::Index>(dims.size());
  Matrix gauss(n, count);
  for (Eigen::Index c = 0; c < count; ++c) {
    for (Eigen::Index i = 0; i < n; ++i) gauss(i, c) = rng.normal();
  }
  const Matrix q = gauss.householderQr().householderQ() * Matrix::Identity(n, count);
  Matrix out = Matrix::Zero(count, d);
  for (Eigen::Index c = 0; c < count; ++c) {
    for (Eigen::Index i = 0; i < n; ++i) out(c, dims[static_cast<std::size_t>(i)]) = q(i, c);
  }
  return out;
}

Vector random_direction(Rng& rng, const std::vector<int>& dims, int d) {
  Vector v = Vector::Zero(d);
  for (int i : dims) v[i] = rng.normal();
  return l2_normalize(v);
}

Vector noise(Rng& rng, int d, double sigma) {
  Vector v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.normal() * sigma;
  return v;
}

std::string numbered(const char* prefix, int value, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*d", prefix, width, value);
  return buf;
}

std::vector<int> predict(const Matrix& embedding, const Matrix& weights, const Matrix& x) {
  Matrix w_hat = weights;
  w_hat.rowwise().normalize();
  std::vector<int> out;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vector f = embedding * x.row(i).transpose();
    const Vector scores = w_hat * f;
    Eigen::Index best = 0;
    scores.maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

Cell make_cell(std::vector<double> values) {
  Cell cell;
  cell.per_seed = std::move(values);
  if (cell.per_seed.size() >= 2) {
    const MeanCi ci = mean_ci(cell.per_seed);
    cell.mean = ci.mean;
    cell.ci95 = ci.ci95;
  } else if (!cell.per_seed.empty()) {
    cell.mean = cell.per_seed.front();
  }
  return cell;
}

bool clearly_above(const Cell& hi, const Cell& lo, double margin) {
  return hi.mean - lo.mean >= margin && hi.mean - hi.ci95 > lo.mean + lo.ci95;
}

nlohmann::json cell_json(const Cell& cell) {
  return {{"mean", cell.mean}, {"ci95", cell.ci95}, {"per_seed", cell.per_seed}};
}

}  // namespace

std::vector<int> WorldConfig::resolved_fg_dims() const { return fg_dims.empty() ? half_range(0, d / 2) : fg_dims; }

std::vector<int> WorldConfig::resolved_bg_dims() const { return bg_dims.empty() ? half_range(d / 2, d) : bg_dims; }

int WorldConfig::foreground_crops() const {
  return std::max(1, static_cast<int>(std::lround(fg_crop_fraction * crops)));
}

void WorldConfig::validate() const {
  if (classes < 2) invalid("classes", "need at least 2");
  if (images < 1) invalid("images", "must be positive");
  if (crops < 1) invalid("crops", "must be positive");
  if (d < 2) invalid("d", "need at least 2");
  if (embed_dim < 1) invalid("embed_dim", "must be positive");
  const auto fg = resolved_fg_dims();
  const auto bg = resolved_bg_dims();
  for (const auto& [name, dims] : {std::pair{"fg_dims", fg}, std::pair{"bg_dims", bg}}) {
    if (dims.empty()) invalid(name, "empty");
    for (int i : dims) {
      if (i < 0 || i >= d) invalid(name, "index " + std::to_string(i) + " outside [0, d)");
    }
    if (std::set<int>(dims.begin(), dims.end()).size() != dims.size()) invalid(name, "repeated index");
    if (static_cast<int>(dims.size()) < classes) {
      invalid(name, "needs at least one dimension per class for orthonormal motifs");
    }
  }
  for (int i : fg) {
    if (std::find(bg.begin(), bg.end(), i) != bg.end()) invalid("bg_dims", "overlaps fg_dims");
  }
  if (!(rho_train >= 0.0 && rho_train <= 1.0)) invalid("rho_train", "must lie in [0, 1]");
  if (!(rho_eval >= 0.0 && rho_eval <= 1.0)) invalid("rho_eval", "must lie in [0, 1]");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) invalid("sigma", "must be finite and non-negative");
  if (!(fg_crop_fraction > 0.0 && fg_crop_fraction <= 1.0)) invalid("fg_crop_fraction", "must lie in (0, 1]");
  if (fg_crop_fraction * crops < 1.0) invalid("fg_crop_fraction", "fg_crop_fraction * crops must be at least 1");
}

nlohmann::json config_to_json(const WorldConfig& c) {
  return {{"classes", c.classes},
          {"images", c.images},
          {"crops", c.crops},
          {"d", c.d},
          {"fg_dims", c.resolved_fg_dims()},
          {"bg_dims", c.resolved_bg_dims()},
          {"rho_train", c.rho_train},
          {"rho_eval", c.rho_eval},
          {"sigma", c.sigma},
          {"fg_crop_fraction", c.fg_crop_fraction},
          {"novel_eval_classes", c.novel_eval_classes},
          {"embed_dim", c.embed_dim},
          {"seed", c.seed}};
}

WorldConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigInvalid, "world config must be a JSON object");
  WorldConfig c;
  auto read = [&](const char* key, auto& target) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(target);
    } catch (const nlohmann::json::exception&) {
      invalid(key, "wrong type");
    }
  };
  read("classes", c.classes);
  read("images", c.images);
  read("crops", c.crops);
  read("d", c.d);
  read("fg_dims", c.fg_dims);
  read("bg_dims", c.bg_dims);
  read("rho_train", c.rho_train);
  read("rho_eval", c.rho_eval);
  read("sigma", c.sigma);
  read("fg_crop_fraction", c.fg_crop_fraction);
  read("novel_eval_classes", c.novel_eval_classes);
  read("embed_dim", c.embed_dim);
  read("seed", c.seed);
  static const std::set<std::string> known{"classes", "images", "crops", "d", "fg_dims", "bg_dims", "rho_train",
                                           "rho_eval", "sigma", "fg_crop_fraction", "novel_eval_classes",
                                           "embed_dim", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) invalid(key, "unknown key");
  }
  c.validate();
  return c;
}

const std::string& GroundTruth::foreground_crop(const std::string& cls, const std::string& image) const {
  const auto c = flags.find(cls);
  if (c != flags.end()) {
    const auto i = c->second.find(image);
    if (i != c->second.end()) {
      for (const auto& [id, fg] : i->second) {
        if (fg) return id;
      }
    }
  }
  throw Error(ErrorCode::MissingGroundTruth, "no foreground crop recorded for '" + cls + "/" + image + "'");
}

nlohmann::json truth_to_json(const GroundTruth& truth) {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [cls, images] : truth.flags) {
    nlohmann::json per_image = nlohmann::json::object();
    for (const auto& [image, crops] : images) {
      nlohmann::json list = nlohmann::json::array();
      for (const auto& [id, fg] : crops) list.push_back({{"crop", id}, {"foreground", fg}});
      per_image[image] = std::move(list);
    }
    classes[cls] = std::move(per_image);
  }
  return {{"format_version", 1}, {"classes", std::move(classes)}};
}

GroundTruth truth_from_json(const nlohmann::json& j) {
  GroundTruth truth;
  try {
    if (j.at("format_version").get<int>() != 1) throw Error(ErrorCode::SchemaError, "unsupported ground truth version");
    for (const auto& [cls, images] : j.at("classes").items()) {
      for (const auto& [image, crops] : images.items()) {
        auto& list = truth.flags[cls][image];
        for (const auto& crop : crops) list.emplace_back(crop.at("crop").get<std::string>(), crop.at("foreground").get<bool>());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("ground truth: ") + e.what());
  }
  return truth;
}

World generate_world(const WorldConfig& config, Split split) {
  config.validate();
  const auto fg_dims = config.resolved_fg_dims();
  const auto bg_dims = config.resolved_bg_dims();
  const bool eval = split == Split::Eval;
  const bool own_motifs = eval && config.novel_eval_classes;
  const double rho = eval ? config.rho_eval : config.rho_train;

  World world;
  Rng motif_rng(derive_seed(config.seed, own_motifs ? "eval-motifs" : "train-motifs"));
  world.fg_motifs = orthonormal_motifs(motif_rng, config.classes, fg_dims, config.d);
  world.bg_motifs = orthonormal_motifs(motif_rng, config.classes, bg_dims, config.d);

  Rng rng(derive_seed(config.seed, eval ? "eval-images" : "train-images"));
  const std::uint64_t rect_seed = derive_seed(config.seed, "rects");
  const int fg_count = config.foreground_crops();
  const char* class_prefix = own_motifs ? "n" : "c";

  world.store.dim = config.d;
  for (int c = 0; c < config.classes; ++c) {
    ClassRecord cls;
    cls.name = numbered(class_prefix, c, 2);
    auto& class_truth = world.truth.flags[cls.name];
    const Vector motif = world.fg_motifs.row(c).transpose();
    for (int n = 0; n < config.images; ++n) {
      ImageRecord img;
      img.id = numbered("i", n, 3);
      const Vector background =
          rng.uniform() < rho ? Vector(world.bg_motifs.row(c).transpose()) : random_direction(rng, bg_dims, config.d);
      img.crops.push_back({"whole", CropRect{}, l2_normalize(motif + background + noise(rng, config.d, config.sigma))});

      std::vector<char> flags(static_cast<std::size_t>(config.crops), 0);
      std::fill_n(flags.begin(), fg_count, 1);
      rng.shuffle(flags);
      const auto rects = sample_crops(cls.name + "/" + img.id, config.crops, rect_seed);
      auto& image_truth = class_truth[img.id];
      image_truth.emplace_back("whole", false);
      for (int v = 0; v < config.crops; ++v) {
        const bool fg = flags[static_cast<std::size_t>(v)] != 0;
        CropRecord crop{numbered("crop", v, 2), rects[static_cast<std::size_t>(v)],
                        l2_normalize((fg ? motif : background) + noise(rng, config.d, config.sigma))};
        image_truth.emplace_back(crop.id, fg);
        img.crops.push_back(std::move(crop));
      }
      cls.images.push_back(std::move(img));
    }
    world.store.classes.push_back(std::move(cls));
  }
  return world;
}

FeatureStore foreground_store(const FeatureStore& store, const GroundTruth& truth) {
  FeatureStore out;
  out.dim = store.dim;
  for (const auto& cls : store.classes) {
    ClassRecord fg_cls{cls.name, {}};
    for (const auto& img : cls.images) {
      const std::string& id = truth.foreground_crop(cls.name, img.id);
      const auto crop = std::find_if(img.crops.begin(), img.crops.end(), [&](const CropRecord& c) { return c.id == id; });
      if (crop == img.crops.end()) {
        throw Error(ErrorCode::MissingGroundTruth, "crop '" + id + "' of '" + cls.name + "/" + img.id + "' not in store");
      }
      fg_cls.images.push_back({img.id, {{"fg", CropRect{}, crop->feature}}});
    }
    out.classes.push_back(std::move(fg_cls));
  }
  return out;
}

FeatureStore embed_store(const FeatureStore& store, const LinearEmbedding& embedding) {
  if (embedding.matrix.cols() != store.dim) throw Error(ErrorCode::DimMismatch, "embedding input size != store dim");
  FeatureStore out = store;
  out.dim = static_cast<int>(embedding.matrix.rows());
  for (auto& cls : out.classes) {
    for (auto& img : cls.images) {
      for (auto& crop : img.crops) crop.feature = embedding.matrix * crop.feature;
    }
  }
  return out;
}

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::Ori: return "ori";
    case Regime::Fg: return "fg";
    case Regime::Fuse: return "fuse";
  }
  return "unknown";
}

Regime regime_from_string(const std::string& name) {
  for (auto r : {Regime::Ori, Regime::Fg, Regime::Fuse}) {
    if (to_string(r) == name) return r;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown regime '" + name + "'");
}

TrainingSet training_set(const FeatureStore& store, const GroundTruth* truth) {
  TrainingSet data;
  data.classes = static_cast<int>(store.classes.size());
  const auto n = static_cast<Eigen::Index>(store.image_count());
  data.whole.resize(n, store.dim);
  if (truth) data.fg.resize(n, store.dim);
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < store.classes.size(); ++c) {
    const auto& cls = store.classes[c];
    for (const auto& img : cls.images) {
      data.whole.row(row) = whole_view(img).feature.transpose();
      if (truth) {
        const std::string& id = truth->foreground_crop(cls.name, img.id);
        const auto crop =
            std::find_if(img.crops.begin(), img.crops.end(), [&](const CropRecord& r) { return r.id == id; });
        if (crop == img.crops.end()) throw Error(ErrorCode::MissingGroundTruth, "crop '" + id + "' not in store");
        data.fg.row(row) = crop->feature.transpose();
      }
      data.labels.push_back(static_cast<int>(c));
      ++row;
    }
  }
  return data;
}

LinearLoss linear_cc_loss(const Matrix& embedding, const Matrix& weights, const Matrix& x,
                          const std::vector<int>& labels) {
  if (x.rows() == 0 || static_cast<std::size_t>(x.rows()) != labels.size()) {
    throw Error(ErrorCode::CountMismatch, "one label per row required");
  }
  if (embedding.cols() != x.cols() || weights.cols() != embedding.rows()) {
    throw Error(ErrorCode::DimMismatch, "embedding, weights and inputs disagree in size");
  }
  LinearLoss out;
  out.grad_embedding = Matrix::Zero(embedding.rows(), embedding.cols());
  out.grad_weights = Matrix::Zero(weights.rows(), weights.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vector xi = x.row(i).transpose();
    const CcLoss l = cc_loss(embedding * xi, labels[static_cast<std::size_t>(i)], weights);
    out.loss += l.loss;
    out.grad_embedding.noalias() += l.grad_feature * xi.transpose();
    out.grad_weights += l.grad_weights;
  }
  const double scale = 1.0 / static_cast<double>(x.rows());
  out.loss *= scale;
  out.grad_embedding *= scale;
  out.grad_weights *= scale;
  return out;
}

TrainResult train_linear(const TrainingSet& data, int embed_dim, const TrainParams& params) {
  if (embed_dim < 1) throw Error(ErrorCode::InvalidArgument, "embedding size must be positive");
  if (params.epochs < 0 || !(params.lr >= 0.0)) throw Error(ErrorCode::InvalidArgument, "bad epochs or lr");
  if (params.regime != Regime::Ori && data.fg.rows() != data.whole.rows()) {
    throw Error(ErrorCode::MissingGroundTruth, "regime '" + to_string(params.regime) + "' needs foreground views");
  }
  const Eigen::Index d = data.whole.cols();
  Rng rng(derive_seed(params.seed, "train-linear"));
  TrainResult out;
  Matrix& w = out.embedding.matrix;
  w.resize(embed_dim, d);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < d; ++c) w(r, c) = rng.normal() / std::sqrt(static_cast<double>(d));
  }
  Matrix& classes = out.class_weights;
  classes.resize(data.classes, embed_dim);
  for (Eigen::Index r = 0; r < classes.rows(); ++r) {
    for (Eigen::Index c = 0; c < classes.cols(); ++c) classes(r, c) = rng.normal();
  }
  classes.rowwise().normalize();

  double lr = params.lr;
  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    LinearLoss step;
    double monitored = 0.0;
    if (params.regime == Regime::Fuse) {
      Matrix mixed = data.whole;
      for (Eigen::Index i = 0; i < mixed.rows(); ++i) {
        if (rng.uniform() < 0.5) mixed.row(i) = data.fg.row(i);
      }
      step = linear_cc_loss(w, classes, mixed, data.labels);
      monitored = 0.5 * (linear_cc_loss(w, classes, data.whole, data.labels).loss +
                         linear_cc_loss(w, classes, data.fg, data.labels).loss);
    } else {
      step = linear_cc_loss(w, classes, params.regime == Regime::Fg ? data.fg : data.whole, data.labels);
      monitored = step.loss;
    }
    if (!out.loss_history.empty() && monitored > out.loss_history.back() && out.halvings < params.max_halvings) {
      lr *= 0.5;
      ++out.halvings;
    }
    out.loss_history.push_back(monitored);
    w -= lr * step.grad_embedding;
    classes -= lr * step.grad_weights;
  }
  out.final_lr = lr;

  std::vector<const Matrix*> views;
  if (params.regime != Regime::Fg) views.push_back(&data.whole);
  if (params.regime != Regime::Ori) views.push_back(&data.fg);
  long long correct = 0;
  long long total = 0;
  for (const Matrix* x : views) {
    const auto predicted = predict(w, classes, *x);
    for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == data.labels[i] ? 1 : 0;
    total += static_cast<long long>(predicted.size());
  }
  out.train_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return out;
}

ShortcutTable shortcut_experiment(const ShortcutParams& params) {
  if (params.seeds < 1 || params.episodes < 1) throw Error(ErrorCode::InvalidArgument, "seeds and episodes must be positive");
  params.world.validate();
  const std::vector<Regime> regimes{Regime::Ori, Regime::Fg, Regime::Fuse};

  struct SeedResult {
    std::map<std::string, std::map<std::string, double>> cc;
    double soc = 0.0;
    double multicrop = 0.0;
  };
  std::vector<SeedResult> results(static_cast<std::size_t>(params.seeds));

  parallel_for(results.size(), params.workers, [&](std::size_t s) {
    WorldConfig config = params.world;
    config.seed = derive_seed(params.world.seed, static_cast<std::uint64_t>(s));
    const World train = generate_world(config, Split::Train);
    const World eval = generate_world(config, Split::Eval);
    const FeatureStore fg_eval = foreground_store(eval.store, eval.truth);
    const TrainingSet data = training_set(train.store, &train.truth);

    BenchmarkConfig bench;
    bench.shape = params.shape;
    bench.tasks = params.episodes;
    bench.repeats = 1;
    bench.alpha = params.alpha;
    bench.beta = params.beta;
    bench.crops = params.crops;
    bench.seed = derive_seed(config.seed, "episodes");

    SeedResult& r = results[s];
    for (Regime regime : regimes) {
      const TrainResult trained =
          train_linear(data, config.embed_dim, {regime, params.epochs, params.lr, 5, derive_seed(config.seed, "train")});
      const FeatureStore ori_store = embed_store(eval.store, trained.embedding);
      bench.classifier = ClassifierKind::Cc;
      r.cc[to_string(regime)]["ori"] = run_benchmark(ori_store, bench).mean;
      r.cc[to_string(regime)]["fg"] = run_benchmark(embed_store(fg_eval, trained.embedding), bench).mean;
      if (regime == Regime::Fuse) {
        bench.classifier = ClassifierKind::Soc;
        r.soc = run_benchmark(ori_store, bench).mean;
        bench.classifier = ClassifierKind::MulticropCc;
        r.multicrop = run_benchmark(ori_store, bench).mean;
      }
    }
  });

  ShortcutTable table;
  table.params = params;
  for (Regime regime : regimes) {
    for (const char* ev : {"ori", "fg"}) {
      std::vector<double> values;
      for (const auto& r : results) values.push_back(r.cc.at(to_string(regime)).at(ev));
      table.cc[to_string(regime)][ev] = make_cell(std::move(values));
    }
  }
  std::vector<double> soc;
  std::vector<double> multicrop;
  for (const auto& r : results) {
    soc.push_back(r.soc);
    multicrop.push_back(r.multicrop);
  }
  table.soc = make_cell(std::move(soc));
  table.multicrop_cc = make_cell(std::move(multicrop));

  table.fg_beats_ori = clearly_above(table.cc["fg"]["fg"], table.cc["ori"]["fg"], 0.02);
  table.fuse_close = true;
  for (const char* ev : {"ori", "fg"}) {
    const double best = std::max(table.cc["ori"][ev].mean, table.cc["fg"][ev].mean);
    table.fuse_close = table.fuse_close && table.cc["fuse"][ev].mean >= best - 0.02;
  }
  table.soc_beats_multicrop = clearly_above(table.soc, table.multicrop_cc, 0.05);
  return table;
}

nlohmann::json shortcut_json(const ShortcutTable& table) {
  nlohmann::json cc = nlohmann::json::object();
  for (const auto& [regime, evals] : table.cc) {
    for (const auto& [ev, cell] : evals) cc[regime][ev] = cell_json(cell);
  }
  const auto& p = table.params;
  return {{"cc", std::move(cc)},
          {"ori_eval", {{"soc", cell_json(table.soc)}, {"multicrop_cc", cell_json(table.multicrop_cc)}}},
          {"checks",
           {{"fg_beats_ori_on_fg_eval", table.fg_beats_ori},
            {"fuse_within_2_points", table.fuse_close},
            {"soc_beats_multicrop_cc", table.soc_beats_multicrop}}},
          {"settings",
           {{"world", config_to_json(p.world)},
            {"seeds", p.seeds},
            {"episodes", p.episodes},
            {"N", p.shape.ways},
            {"K", p.shape.shots},
            {"M", p.shape.queries},
            {"V", p.crops},
            {"alpha", p.alpha},
            {"beta", p.beta},
            {"epochs", p.epochs},
            {"lr", p.lr}}}};
}

}  // namespace cosoc
