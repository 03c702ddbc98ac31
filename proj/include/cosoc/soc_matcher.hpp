#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "cosoc/feature.hpp"

namespace cosoc {

// Shared-object prototypes for a support class and weighted greedy matching
// of query crops against them.
//
// Support crops are indexed [image][crop]; every image must have the same
// number of crops. All routines normalize their inputs first.

using CropSet = std::vector<Vector>;
using SupportCrops = std::vector<CropSet>;

inline constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

/// Sum over image pairs of the cosine between the chosen crops.
double pairwise_agreement(const SupportCrops& support, std::span<const int> assignment);

struct ExactPrototype {
  Vector omega;                 // raw mean of the chosen crops
  std::vector<int> assignment;  // chosen crop per image, 0-based
  double objective = 0.0;       // pairwise_agreement at `assignment`
};

/// Enumerates all V^K crop choices and keeps the one with the largest
/// pairwise agreement (lexicographically smallest on ties). Throws KTooSmall
/// for K < 2 and EnumerationCapExceeded when V^K > cap.
ExactPrototype shared_prototype_bruteforce(const SupportCrops& support, std::uint64_t cap = kDefaultEnumerationCap);

/// Sum over images of the best cosine between `omega` and that image's crops.
double shared_objective(const Vector& omega, const SupportCrops& support);

struct IterativeParams {
  double lr = 0.1;
  int max_iter = 100;
  double tol = 1e-6;
  /// Besides the mean of all crops, also start from every crop and keep the
  /// best local optimum.
  bool multi_start = true;
};

struct IterativePrototype {
  Vector omega;  // unit norm
  double objective = 0.0;
  /// Objective at the mean-of-crops starting point.
  double initial_objective = 0.0;
  bool converged = false;
  int iterations = 0;
};

/// Projected gradient ascent of shared_objective on the unit sphere. Only
/// each image's currently best crop contributes to the gradient; a step that
/// would lower the objective is retried with half the step size. `seed` picks
/// the start direction if the crop mean vanishes.
IterativePrototype shared_prototype_iterative(const SupportCrops& support, std::uint64_t seed,
                                              const IterativeParams& params = {});

enum class PrototypeMethod { Exact, Iterative, Auto };

struct Prototype {
  Vector vector;
  int rank = 1;  // 1-based emission order
};

struct SortedPrototypes {
  std::vector<Prototype> items;
  /// Single-shot classes have no ordering; every prototype gets alpha^0.
  bool uniform_rank_weight = false;
};

struct PrototypeParams {
  PrototypeMethod method = PrototypeMethod::Auto;
  std::uint64_t enumeration_cap = kDefaultEnumerationCap;
  IterativeParams iterative;
  std::uint64_t seed = 0;
};

/// V rounds: find the shared vector of the remaining crops, then drop one
/// crop per image (the matched crop in exact mode, the crop most similar to
/// the shared vector in iterative mode). With one support image the crops
/// themselves are the prototypes. Throws RaggedCrops on unequal crop counts.
SortedPrototypes extract_sorted_prototypes(const SupportCrops& support, const PrototypeParams& params = {});

struct MatchRound {
  int query_index = 0;  // 0-based crop index in the query
  int rank = 1;         // prototype rank (1-based)
  double cosine = 0.0;
  double weighted = 0.0;  // alpha^(rank-1) * cosine
};

struct MatchTrace {
  std::vector<MatchRound> rounds;
  double score = 0.0;  // sum_n beta^(n-1) * weighted_n
};

/// Greedy matching: each round takes the remaining (query crop, prototype)
/// pair with the largest weighted cosine and removes both. Ties go to the
/// smaller (rank, crop index). Throws CountMismatch unless the query has as
/// many crops as there are prototypes.
MatchTrace match_query(std::span<const Vector> query, const SortedPrototypes& prototypes, double alpha, double beta);

struct Classification {
  int predicted = 0;
  std::vector<double> scores;
  std::vector<MatchTrace> traces;
};

/// Highest-scoring class; ties go to the lower class index.
Classification classify_query(std::span<const Vector> query, std::span<const SortedPrototypes> classes, double alpha,
                              double beta);

nlohmann::json trace_json(const MatchTrace& trace);

}  // namespace cosoc
