#include "cosoc/feature.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cosoc/error.hpp"

namespace cosoc {

void require_finite(const Vector& v) {
  if (!v.allFinite()) throw Error(ErrorCode::NonFinite, "vector has NaN or infinite entries");
}

Vector l2_normalize(const Vector& v) {
  require_finite(v);
  const double norm = v.norm();
  if (norm < kZeroNormThreshold) throw Error(ErrorCode::ZeroVector, "cannot normalize a zero vector");
  return v / norm;
}

bool is_unit(const Vector& v, double tolerance) {
  return v.allFinite() && std::abs(v.norm() - 1.0) <= tolerance;
}

double cosine_sim(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimMismatch,
                "cosine of vectors of size " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (na < kZeroNormThreshold || nb < kZeroNormThreshold) {
    throw Error(ErrorCode::ZeroVector, "cosine similarity with a zero vector");
  }
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

std::vector<Vector> normalize_all(std::span<const Vector> vectors) {
  std::vector<Vector> out;
  out.reserve(vectors.size());
  for (const auto& v : vectors) out.push_back(l2_normalize(v));
  return out;
}

Matrix pairwise_cos(std::span<const Vector> a, std::span<const Vector> b) {
  const Eigen::Index dim = a.empty() ? (b.empty() ? 0 : b.front().size()) : a.front().size();
  auto norms = [dim](std::span<const Vector> vs) {
    std::vector<double> out;
    out.reserve(vs.size());
    for (const auto& v : vs) {
      if (v.size() != dim) throw Error(ErrorCode::DimMismatch, "pairwise_cos: inconsistent dimensions");
      if (!v.allFinite()) throw Error(ErrorCode::NonFinite, "pairwise_cos: non-finite component");
      const double n = v.norm();
      if (n < kZeroNormThreshold) throw Error(ErrorCode::ZeroVector, "cosine similarity with a zero vector");
      out.push_back(n);
    }
    return out;
  };
  const std::vector<double> na = norms(a);
  const std::vector<double> nb = norms(b);
  // Entry-wise, so every entry equals cosine_sim on the same pair bit for bit.
  Matrix out(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          std::clamp(a[i].dot(b[j]) / (na[i] * nb[j]), -1.0, 1.0);
    }
  }
  return out;
}

}  // namespace cosoc
