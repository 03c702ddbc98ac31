#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cosoc/error.hpp"
#include "cosoc/soc_matcher.hpp"
#include "../support/oracles.hpp"

using namespace cosoc;

namespace {

Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v[i++] = x;
  return v;
}

std::vector<std::vector<oracle::Vec>> to_oracle(const SupportCrops& support) {
  std::vector<std::vector<oracle::Vec>> out;
  for (const auto& image : support) {
    out.emplace_back();
    for (const auto& v : image) out.back().push_back(oracle::to_vec(v));
  }
  return out;
}

SupportCrops random_support(oracle::Gen& gen, int k, int v, int d, bool positive = false) {
  SupportCrops s;
  for (int i = 0; i < k; ++i) {
    s.emplace_back();
    for (int j = 0; j < v; ++j) {
      Vector x = gen.unit_eigen(d) * gen.uniform(0.5, 2.0);
      if (positive) x = x.cwiseAbs();
      s.back().push_back(x);
    }
  }
  return s;
}

SortedPrototypes ranked(std::vector<Vector> vectors) {
  SortedPrototypes p;
  for (std::size_t i = 0; i < vectors.size(); ++i) p.items.push_back({vectors[i], static_cast<int>(i) + 1});
  return p;
}

std::vector<oracle::Vec> cos_table(const std::vector<Vector>& query, const SortedPrototypes& protos) {
  std::vector<oracle::Vec> table;
  for (const auto& q : query) {
    table.emplace_back();
    for (const auto& p : protos.items) table.back().push_back(oracle::cosine(oracle::to_vec(q), oracle::to_vec(p.vector)));
  }
  return table;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("bruteforce hand example") {
  const SupportCrops s{{vec({1, 0}), vec({0, 1})}, {vec({0.8, 0.6}), vec({-1, 0})}};
  const ExactPrototype p = shared_prototype_bruteforce(s);
  CHECK(p.assignment == std::vector<int>{0, 0});
  CHECK(p.omega[0] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(p.omega[1] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(p.objective == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("bruteforce trivial cases") {
  const Vector u = vec({0.6, 0.8});
  const SupportCrops same{{u, u, u}, {u, u, u}, {u, u, u}};
  const ExactPrototype p = shared_prototype_bruteforce(same);
  CHECK(p.assignment == std::vector<int>{0, 0, 0});
  CHECK((p.omega - u).norm() < 1e-12);

  const SupportCrops single{{vec({1, 0})}, {vec({0, 1})}};
  const ExactPrototype q = shared_prototype_bruteforce(single);
  CHECK((q.omega - vec({0.5, 0.5})).norm() < 1e-12);

  CHECK(code_of([&] { shared_prototype_bruteforce(SupportCrops{{u}}); }) == ErrorCode::KTooSmall);
  CHECK(code_of([&] { shared_prototype_bruteforce(same, 26); }) == ErrorCode::EnumerationCapExceeded);
  CHECK_NOTHROW(shared_prototype_bruteforce(same, 27));
}

TEST_CASE("bruteforce agrees with the exhaustive oracle") {
  oracle::Gen gen(3);
  for (int t = 0; t < 100; ++t) {
    const SupportCrops s = random_support(gen, gen.integer(2, 4), gen.integer(1, 4), gen.integer(2, 6));
    const ExactPrototype p = shared_prototype_bruteforce(s);
    const oracle::BruteForce o = oracle::brute_force_prototype(to_oracle(s));
    CHECK(p.assignment == o.assignment);
    CHECK(std::abs(p.objective - o.objective) < 1e-9);
    CHECK(oracle::distance(oracle::to_vec(p.omega), o.omega) < 1e-9);
    CHECK(std::abs(pairwise_agreement(s, p.assignment) - p.objective) < 1e-12);
  }
}

TEST_CASE("iterative examples") {
  const Vector u = vec({0, 0.6, 0.8});
  const SupportCrops same{{u, u}, {u, u}, {u, u}};
  const IterativePrototype p = shared_prototype_iterative(same, 1);
  CHECK((p.omega - u).norm() < 1e-9);
  CHECK(p.objective == doctest::Approx(3.0).epsilon(1e-12));

  const SupportCrops pair{{vec({1, 0})}, {vec({0, 1})}};
  const IterativePrototype q = shared_prototype_iterative(pair, 1);
  CHECK(q.omega[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-9));
  CHECK(q.omega[1] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-9));
  CHECK(q.objective == doctest::Approx(std::sqrt(2.0)).epsilon(1e-9));
  CHECK(q.objective == doctest::Approx(1.4142).epsilon(1e-4));
}

TEST_CASE("iterative properties") {
  oracle::Gen gen(5);
  int close = 0;
  const int trials = 60;
  for (int t = 0; t < trials; ++t) {
    const SupportCrops s = random_support(gen, gen.integer(2, 3), gen.integer(3, 5), 16);
    const std::uint64_t seed = static_cast<std::uint64_t>(t);
    for (bool multi : {false, true}) {
      IterativeParams params;
      params.multi_start = multi;
      const IterativePrototype p = shared_prototype_iterative(s, seed, params);
      CHECK(std::abs(p.omega.norm() - 1.0) < 1e-12);
      CHECK(p.objective >= p.initial_objective - 1e-12);
      CHECK(std::abs(shared_objective(p.omega, s) - p.objective) < 1e-9);
      const IterativePrototype again = shared_prototype_iterative(s, seed, params);
      CHECK(again.omega == p.omega);
    }
    const IterativePrototype p = shared_prototype_iterative(s, seed);
    const ExactPrototype e = shared_prototype_bruteforce(s);
    if (p.omega.dot(e.omega.normalized()) >= 0.99) ++close;
  }
  CHECK(close >= trials * 95 / 100);
}

TEST_CASE("extract sorted prototypes") {
  SUBCASE("one support image keeps its crops") {
    const SupportCrops s{{vec({2, 0}), vec({0, 3}), vec({1, 1})}};
    const SortedPrototypes p = extract_sorted_prototypes(s);
    REQUIRE(p.items.size() == 3);
    CHECK(p.uniform_rank_weight);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK((p.items[i].vector - s[0][i].normalized()).norm() < 1e-15);
      CHECK(p.items[i].rank == static_cast<int>(i) + 1);
    }
  }
  SUBCASE("V = 1 gives the mean of the only crops") {
    const SupportCrops s{{vec({1, 0})}, {vec({0, 2})}};
    const SortedPrototypes p = extract_sorted_prototypes(s);
    REQUIRE(p.items.size() == 1);
    CHECK((p.items[0].vector - vec({0.5, 0.5})).norm() < 1e-12);
  }
  SUBCASE("shared direction comes out first") {
    const Vector shared = vec({1, 0, 0, 0});
    const SupportCrops s{{vec({0, 1, 0, 0}), vec({0.99, 0.1, 0.0, 0.1})}, {vec({0.98, 0.0, 0.2, 0.0}), vec({0, 0, 0, 1})}};
    for (PrototypeMethod m : {PrototypeMethod::Exact, PrototypeMethod::Iterative}) {
      PrototypeParams params;
      params.method = m;
      const SortedPrototypes p = extract_sorted_prototypes(s, params);
      REQUIRE(p.items.size() == 2);
      CHECK(p.items[0].vector.normalized().dot(shared) > 0.97);
      CHECK(p.items[0].rank == 1);
      CHECK(p.items[1].rank == 2);
      // Round two sees only the leftover noise crops.
      const Vector leftover = (vec({0, 1, 0, 0}) + vec({0, 0, 0, 1})).normalized();
      CHECK(p.items[1].vector.normalized().dot(leftover) > 0.999);
    }
    const oracle::BruteForce o = oracle::brute_force_prototype(to_oracle(s));
    CHECK(o.assignment == std::vector<int>{1, 0});
  }
  SUBCASE("ranks are 1..V over random instances") {
    oracle::Gen gen(9);
    for (int t = 0; t < 30; ++t) {
      const int v = gen.integer(1, 5);
      const SortedPrototypes p = extract_sorted_prototypes(random_support(gen, gen.integer(2, 4), v, 6));
      REQUIRE(p.items.size() == static_cast<std::size_t>(v));
      for (int i = 0; i < v; ++i) CHECK(p.items[static_cast<std::size_t>(i)].rank == i + 1);
    }
  }
  SUBCASE("ragged crops") {
    const SupportCrops s{{vec({1, 0}), vec({0, 1})}, {vec({1, 0})}};
    CHECK(code_of([&] { extract_sorted_prototypes(s); }) == ErrorCode::RaggedCrops);
  }
}

TEST_CASE("match_query hand example") {
  const Vector w2 = vec({1, 0, 0});
  const Vector w1 = vec({0.5, std::sqrt(0.75), 0});
  const double y = (0.9 - 0.1) / std::sqrt(0.75);
  const Vector mu2 = vec({0.2, y, std::sqrt(1.0 - 0.04 - y * y)});
  const Vector mu1 = w2;
  const std::vector<Vector> query{mu1, mu2};
  const SortedPrototypes protos = ranked({w1, w2});
  const MatchTrace trace = match_query(query, protos, 0.8, 0.8);
  REQUIRE(trace.rounds.size() == 2);
  CHECK(trace.rounds[0].query_index == 1);
  CHECK(trace.rounds[0].rank == 1);
  CHECK(trace.rounds[0].weighted == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(trace.rounds[1].query_index == 0);
  CHECK(trace.rounds[1].rank == 2);
  CHECK(trace.rounds[1].weighted == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(trace.score == doctest::Approx(1.54).epsilon(1e-12));
  CHECK(std::abs(trace.score - oracle::greedy_match(cos_table(query, protos), 0.8, 0.8)) < 1e-12);

  const nlohmann::json j = trace_json(trace);
  CHECK(j.at("rounds").size() == 2);
  CHECK(j.at("score").get<double>() == trace.score);
}

TEST_CASE("match_query reductions and errors") {
  const std::vector<Vector> q{vec({0.6, 0.8})};
  const SortedPrototypes p = ranked({vec({1, 0})});
  CHECK(match_query(q, p, 0.3, 0.2).score == doctest::Approx(0.6).epsilon(1e-15));

  const std::vector<Vector> two{vec({1, 0}), vec({0, 1})};
  CHECK(code_of([&] { match_query(two, p, 0.8, 0.8); }) == ErrorCode::CountMismatch);
  CHECK(code_of([&] { match_query(q, p, 0.0, 0.8); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { match_query(q, p, 0.8, 1.5); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("match_query ties go to smaller rank then crop index") {
  const Vector u = vec({1, 0});
  const std::vector<Vector> query{u, u, u};
  const MatchTrace t = match_query(query, ranked({u, u, u}), 1.0, 1.0);
  for (int n = 0; n < 3; ++n) {
    CHECK(t.rounds[static_cast<std::size_t>(n)].rank == n + 1);
    CHECK(t.rounds[static_cast<std::size_t>(n)].query_index == n);
  }
  CHECK(t.score == doctest::Approx(3.0));
}

TEST_CASE("match_query agrees with the greedy oracle") {
  oracle::Gen gen(12);
  for (int t = 0; t < 300; ++t) {
    const int v = gen.integer(1, 6);
    std::vector<Vector> query, protos;
    for (int i = 0; i < v; ++i) {
      query.push_back(gen.unit_eigen(5));
      protos.push_back(gen.unit_eigen(5) * gen.uniform(0.2, 2.0));
    }
    const double alpha = gen.uniform(0.05, 1.0);
    const double beta = gen.uniform(0.05, 1.0);
    const SortedPrototypes p = ranked(protos);
    const MatchTrace trace = match_query(query, p, alpha, beta);
    CHECK(std::abs(trace.score - oracle::greedy_match(cos_table(query, p), alpha, beta)) < 1e-12);
    std::vector<int> seen_q, seen_r;
    double recomputed = 0.0;
    for (std::size_t n = 0; n < trace.rounds.size(); ++n) {
      seen_q.push_back(trace.rounds[n].query_index);
      seen_r.push_back(trace.rounds[n].rank);
      recomputed += std::pow(beta, static_cast<double>(n)) * trace.rounds[n].weighted;
    }
    std::sort(seen_q.begin(), seen_q.end());
    std::sort(seen_r.begin(), seen_r.end());
    for (int i = 0; i < v; ++i) {
      CHECK(seen_q[static_cast<std::size_t>(i)] == i);
      CHECK(seen_r[static_cast<std::size_t>(i)] == i + 1);
    }
    CHECK(std::abs(recomputed - trace.score) < 1e-12);

    SortedPrototypes uniform = p;
    uniform.uniform_rank_weight = true;
    CHECK(std::abs(match_query(query, uniform, alpha, beta).score -
                   oracle::greedy_match(cos_table(query, p), alpha, beta, true)) < 1e-12);
  }
}

TEST_CASE("monotone in alpha and beta") {
  oracle::Gen gen(14);
  for (int t = 0; t < 200; ++t) {
    const int v = gen.integer(1, 5);
    std::vector<Vector> query, protos;
    for (int i = 0; i < v; ++i) {
      query.push_back(gen.unit_eigen(4).cwiseAbs());
      protos.push_back(gen.unit_eigen(4).cwiseAbs());
    }
    const SortedPrototypes p = ranked(protos);
    const double a1 = gen.uniform(0.05, 1.0), a2 = gen.uniform(a1, 1.0);
    const double b1 = gen.uniform(0.05, 1.0), b2 = gen.uniform(b1, 1.0);
    CHECK(match_query(query, p, a1, b1).score <= match_query(query, p, a1, b2).score + 1e-12);
    CHECK(match_query(query, p, a1, b1).rounds[0].weighted <= match_query(query, p, a2, b1).rounds[0].weighted + 1e-12);
  }
}

TEST_CASE("permutation invariance") {
  oracle::Gen gen(15);
  for (int t = 0; t < 50; ++t) {
    const int k = gen.integer(2, 3), v = gen.integer(2, 4);
    SupportCrops s = random_support(gen, k, v, 8);
    std::vector<Vector> query;
    for (int i = 0; i < v; ++i) query.push_back(gen.unit_eigen(8));
    PrototypeParams params;
    params.method = PrototypeMethod::Exact;
    const double base = match_query(query, extract_sorted_prototypes(s, params), 0.8, 0.7).score;
    std::shuffle(s.begin(), s.end(), gen.engine());
    for (auto& image : s) std::shuffle(image.begin(), image.end(), gen.engine());
    CHECK(std::abs(match_query(query, extract_sorted_prototypes(s, params), 0.8, 0.7).score - base) < 1e-9);
  }
}

TEST_CASE("classify_query") {
  const SortedPrototypes a = ranked({vec({1, 0, 0, 0}), vec({0, 1, 0, 0})});
  const SortedPrototypes b = ranked({vec({0, 0, 1, 0}), vec({0, 0, 0, 1})});
  const std::vector<Vector> query{vec({1, 0, 0, 0}), vec({0, 1, 0, 0})};
  const std::vector<SortedPrototypes> ab{a, b}, ba{b, a}, aa{a, a};
  CHECK(classify_query(query, ab, 0.8, 0.8).predicted == 0);
  CHECK(classify_query(query, ba, 0.8, 0.8).predicted == 1);
  const Classification tie = classify_query(query, aa, 0.8, 0.8);
  CHECK(tie.predicted == 0);
  CHECK(tie.scores[0] == tie.scores[1]);

  // One crop per image with alpha = beta = 1 is nearest-prototype cosine.
  oracle::Gen gen(16);
  for (int t = 0; t < 200; ++t) {
    std::vector<SortedPrototypes> classes;
    int nearest = 0;
    double best = -2.0;
    const Vector q = gen.unit_eigen(6);
    for (int c = 0; c < 5; ++c) {
      const Vector p = gen.unit_eigen(6);
      classes.push_back(ranked({p}));
      const double cs = oracle::cosine(oracle::to_vec(q), oracle::to_vec(p));
      if (cs > best) {
        best = cs;
        nearest = c;
      }
    }
    const std::vector<Vector> one{q};
    const Classification r = classify_query(one, classes, 1.0, 1.0);
    CHECK(r.predicted == nearest);
    CHECK(std::abs(r.scores[static_cast<std::size_t>(nearest)] - best) < 1e-9);
  }
}

TEST_CASE("5-way episode agrees with trace replay") {
  oracle::Gen gen(17);
  for (int t = 0; t < 20; ++t) {
    std::vector<SortedPrototypes> classes;
    for (int c = 0; c < 5; ++c) classes.push_back(extract_sorted_prototypes(random_support(gen, 5, 3, 10)));
    std::vector<Vector> query;
    for (int i = 0; i < 3; ++i) query.push_back(gen.unit_eigen(10));
    const Classification r = classify_query(query, classes, 0.8, 0.8);
    int expected = 0;
    double best = -1e300;
    for (int c = 0; c < 5; ++c) {
      const double s = oracle::greedy_match(cos_table(query, classes[static_cast<std::size_t>(c)]), 0.8, 0.8);
      CHECK(std::abs(s - r.scores[static_cast<std::size_t>(c)]) < 1e-12);
      if (s > best) {
        best = s;
        expected = c;
      }
    }
    CHECK(r.predicted == expected);
  }
}
