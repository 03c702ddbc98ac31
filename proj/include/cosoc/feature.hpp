#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace cosoc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kUnitNormTolerance = 1e-6;
inline constexpr double kZeroNormThreshold = 1e-12;

/// Throws NonFinite if any entry is NaN or infinite.
void require_finite(const Vector& v);

/// Unit-L2 copy of `v`. Throws ZeroVector when ||v|| < 1e-12 and NonFinite
/// on NaN/Inf entries.
Vector l2_normalize(const Vector& v);

bool is_unit(const Vector& v, double tolerance = kUnitNormTolerance);

/// Cosine similarity, clamped to [-1, 1]. Arguments need not be normalized.
double cosine_sim(const Vector& a, const Vector& b);

/// Entry (i, j) is cosine_sim(a[i], b[j]).
Matrix pairwise_cos(std::span<const Vector> a, std::span<const Vector> b);

/// Unit-L2 copy of every vector.
std::vector<Vector> normalize_all(std::span<const Vector> vectors);

}  // namespace cosoc
