#include "cosoc/soc_matcher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cosoc/error.hpp"
#include "cosoc/rng.hpp"

namespace cosoc {
namespace {

std::size_t check_rectangular(const SupportCrops& support) {
  if (support.empty()) throw Error(ErrorCode::InsufficientData, "no support images");
  const std::size_t crops = support.front().size();
  for (const auto& image : support) {
    if (image.size() != crops) throw Error(ErrorCode::RaggedCrops, "support images have different crop counts");
  }
  if (crops == 0) throw Error(ErrorCode::InsufficientData, "support images have no crops");
  return crops;
}

SupportCrops normalized(const SupportCrops& support) {
  SupportCrops out;
  out.reserve(support.size());
  for (const auto& image : support) out.push_back(normalize_all(image));
  return out;
}

// Index of the crop most similar to `direction`; ties -> lowest index.
std::size_t most_similar(const CropSet& crops, const Vector& direction) {
  std::size_t best = 0;
  double best_cos = -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < crops.size(); ++n) {
    const double c = crops[n].dot(direction);
    if (c > best_cos) {
      best_cos = c;
      best = n;
    }
  }
  return best;
}

// Objective on already-normalized crops with unit omega.
double objective_unit(const Vector& omega, const SupportCrops& unit_support) {
  double total = 0.0;
  for (const auto& image : unit_support) total += image[most_similar(image, omega)].dot(omega);
  return total;
}

struct AscentRun {
  Vector omega;
  double objective = 0.0;
  bool converged = false;
  int iterations = 0;
};

AscentRun ascend(const SupportCrops& unit_support, const Vector& start, const IterativeParams& params) {
  constexpr int kMaxBacktracks = 30;
  AscentRun run;
  run.omega = start.normalized();
  run.objective = objective_unit(run.omega, unit_support);
  for (int iter = 0; iter < params.max_iter; ++iter) {
    Vector grad = Vector::Zero(run.omega.size());
    for (const auto& image : unit_support) grad += image[most_similar(image, run.omega)];
    grad -= grad.dot(run.omega) * run.omega;  // tangent to the sphere
    if (grad.norm() < 1e-15) {
      run.converged = true;
      break;
    }
    double step = params.lr;
    bool accepted = false;
    Vector candidate;
    double candidate_objective = 0.0;
    for (int b = 0; b < kMaxBacktracks; ++b, step /= 2.0) {
      candidate = (run.omega + step * grad).normalized();
      candidate_objective = objective_unit(candidate, unit_support);
      if (candidate_objective >= run.objective) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      run.converged = true;
      break;
    }
    const double gain = candidate_objective - run.objective;
    run.omega = std::move(candidate);
    run.objective = candidate_objective;
    ++run.iterations;
    if (gain < params.tol) {
      run.converged = true;
      break;
    }
  }
  return run;
}

}  // namespace

double pairwise_agreement(const SupportCrops& support, std::span<const int> assignment) {
  if (assignment.size() != support.size()) throw Error(ErrorCode::CountMismatch, "one crop choice per image required");
  double total = 0.0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    for (std::size_t j = i + 1; j < support.size(); ++j) {
      total += cosine_sim(support[i].at(static_cast<std::size_t>(assignment[i])),
                          support[j].at(static_cast<std::size_t>(assignment[j])));
    }
  }
  return total;
}

ExactPrototype shared_prototype_bruteforce(const SupportCrops& support, std::uint64_t cap) {
  if (support.size() < 2) throw Error(ErrorCode::KTooSmall, "brute-force search needs at least two images");
  const std::size_t crops = check_rectangular(support);
  const std::size_t images = support.size();

  std::uint64_t combos = 1;
  for (std::size_t k = 0; k < images; ++k) {
    if (combos > cap / crops) {
      throw Error(ErrorCode::EnumerationCapExceeded, std::to_string(crops) + "^" + std::to_string(images) +
                                                         " assignments exceed the cap of " + std::to_string(cap));
    }
    combos *= crops;
  }

  const SupportCrops unit = normalized(support);
  // cos_tables[j][i] holds the cosines between image i (< j) and image j.
  std::vector<std::vector<Matrix>> cos_tables(images);
  for (std::size_t j = 1; j < images; ++j) {
    for (std::size_t i = 0; i < j; ++i) cos_tables[j].push_back(pairwise_cos(unit[i], unit[j]));
  }

  // Depth-first enumeration in lexicographic order with running partial
  // sums; a strict improvement test keeps the lexicographically first optimum.
  std::vector<int> current(images, 0);
  std::vector<double> partial(images + 1, 0.0);
  std::vector<int> best_assignment;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t depth = 0;
  current[0] = -1;
  while (true) {
    if (++current[depth] >= static_cast<int>(crops)) {
      if (depth == 0) break;
      --depth;
      continue;
    }
    double value = partial[depth];
    for (std::size_t i = 0; i < depth; ++i) {
      value += cos_tables[depth][i](current[i], current[depth]);
    }
    partial[depth + 1] = value;
    if (depth + 1 == images) {
      if (value > best) {
        best = value;
        best_assignment = current;
      }
    } else {
      ++depth;
      current[depth] = -1;
    }
  }

  ExactPrototype out;
  out.assignment = std::move(best_assignment);
  out.objective = best;
  out.omega = Vector::Zero(support.front().front().size());
  for (std::size_t k = 0; k < images; ++k) out.omega += unit[k][static_cast<std::size_t>(out.assignment[k])];
  out.omega /= static_cast<double>(images);
  return out;
}

double shared_objective(const Vector& omega, const SupportCrops& support) {
  return objective_unit(l2_normalize(omega), normalized(support));
}

IterativePrototype shared_prototype_iterative(const SupportCrops& support, std::uint64_t seed,
                                              const IterativeParams& params) {
  if (support.size() < 2) throw Error(ErrorCode::KTooSmall, "shared search needs at least two images");
  check_rectangular(support);
  const SupportCrops unit = normalized(support);
  const Eigen::Index dim = unit.front().front().size();

  Vector start = Vector::Zero(dim);
  for (const auto& image : unit)
    for (const auto& v : image) start += v;
  if (start.norm() < kZeroNormThreshold) {
    Rng rng(seed);
    do {
      for (Eigen::Index i = 0; i < dim; ++i) start[i] = rng.normal();
    } while (start.norm() < kZeroNormThreshold);
  }

  IterativePrototype out;
  out.initial_objective = objective_unit(start.normalized(), unit);
  AscentRun best = ascend(unit, start, params);
  if (params.multi_start) {
    for (const auto& image : unit) {
      for (const auto& v : image) {
        AscentRun run = ascend(unit, v, params);
        if (run.objective > best.objective) best = std::move(run);
      }
    }
  }
  out.omega = std::move(best.omega);
  out.objective = best.objective;
  out.converged = best.converged;
  out.iterations = best.iterations;
  return out;
}

SortedPrototypes extract_sorted_prototypes(const SupportCrops& support, const PrototypeParams& params) {
  const std::size_t crops = check_rectangular(support);
  SupportCrops remaining = normalized(support);
  SortedPrototypes out;

  if (remaining.size() == 1) {
    out.uniform_rank_weight = true;
    for (std::size_t n = 0; n < crops; ++n) out.items.push_back({remaining[0][n], static_cast<int>(n) + 1});
    return out;
  }

  for (std::size_t round = 0; round < crops; ++round) {
    const std::size_t left = crops - round;
    bool exact = params.method == PrototypeMethod::Exact;
    if (params.method == PrototypeMethod::Auto) {
      long double combos = std::pow(static_cast<long double>(left), static_cast<long double>(remaining.size()));
      exact = combos <= static_cast<long double>(params.enumeration_cap);
    }
    Vector omega;
    std::vector<std::size_t> removal(remaining.size());
    if (exact) {
      ExactPrototype p = shared_prototype_bruteforce(remaining, params.enumeration_cap);
      for (std::size_t k = 0; k < remaining.size(); ++k) removal[k] = static_cast<std::size_t>(p.assignment[k]);
      omega = std::move(p.omega);
    } else {
      IterativePrototype p = shared_prototype_iterative(remaining, derive_seed(params.seed, round), params.iterative);
      for (std::size_t k = 0; k < remaining.size(); ++k) removal[k] = most_similar(remaining[k], p.omega);
      omega = std::move(p.omega);
    }
    out.items.push_back({std::move(omega), static_cast<int>(round) + 1});
    for (std::size_t k = 0; k < remaining.size(); ++k) {
      remaining[k].erase(remaining[k].begin() + static_cast<std::ptrdiff_t>(removal[k]));
    }
  }
  return out;
}

MatchTrace match_query(std::span<const Vector> query, const SortedPrototypes& prototypes, double alpha, double beta) {
  if (!(alpha > 0.0 && alpha <= 1.0) || !(beta > 0.0 && beta <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "alpha and beta must lie in (0, 1]");
  }
  const std::size_t count = prototypes.items.size();
  if (query.size() != count) {
    throw Error(ErrorCode::CountMismatch, "query has " + std::to_string(query.size()) + " crops, class has " +
                                              std::to_string(count) + " prototypes");
  }
  if (count == 0) throw Error(ErrorCode::InsufficientData, "no prototypes");

  // Prototype order by rank so that scanning order realizes the tie rule.
  std::vector<std::size_t> by_rank(count);
  std::iota(by_rank.begin(), by_rank.end(), 0);
  std::stable_sort(by_rank.begin(), by_rank.end(),
                   [&](std::size_t a, std::size_t b) { return prototypes.items[a].rank < prototypes.items[b].rank; });

  std::vector<Vector> protos;
  protos.reserve(count);
  for (const auto& p : prototypes.items) protos.push_back(p.vector);
  const Matrix cos = pairwise_cos(query, protos);

  std::vector<double> weight(count);
  for (std::size_t j = 0; j < count; ++j) {
    weight[j] = prototypes.uniform_rank_weight ? 1.0 : std::pow(alpha, prototypes.items[j].rank - 1);
  }

  std::vector<bool> query_used(count, false);
  std::vector<bool> proto_used(count, false);
  MatchTrace trace;
  double round_weight = 1.0;
  for (std::size_t round = 0; round < count; ++round) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_i = 0;
    std::size_t best_j = 0;
    for (std::size_t j : by_rank) {
      if (proto_used[j]) continue;
      for (std::size_t i = 0; i < count; ++i) {
        if (query_used[i]) continue;
        const double value = weight[j] * cos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (value > best) {
          best = value;
          best_i = i;
          best_j = j;
        }
      }
    }
    query_used[best_i] = true;
    proto_used[best_j] = true;
    trace.rounds.push_back({static_cast<int>(best_i), prototypes.items[best_j].rank,
                            cos(static_cast<Eigen::Index>(best_i), static_cast<Eigen::Index>(best_j)), best});
    trace.score += round_weight * best;
    round_weight *= beta;
  }
  return trace;
}

Classification classify_query(std::span<const Vector> query, std::span<const SortedPrototypes> classes, double alpha,
                              double beta) {
  if (classes.empty()) throw Error(ErrorCode::InsufficientData, "no classes to score against");
  Classification out;
  for (const auto& c : classes) {
    out.traces.push_back(match_query(query, c, alpha, beta));
    out.scores.push_back(out.traces.back().score);
  }
  out.predicted = static_cast<int>(std::max_element(out.scores.begin(), out.scores.end()) - out.scores.begin());
  return out;
}

nlohmann::json trace_json(const MatchTrace& trace) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& r : trace.rounds) {
    rounds.push_back({{"query_crop", r.query_index}, {"rank", r.rank}, {"cosine", r.cosine}, {"weighted", r.weighted}});
  }
  return nlohmann::json{{"rounds", std::move(rounds)}, {"score", trace.score}};
}

}  // namespace cosoc
