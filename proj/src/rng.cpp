#include "cosoc/rng.hpp"

#include <cmath>
#include <numbers>
#include <limits>
#include <numeric>

#include "cosoc/error.hpp"

namespace cosoc {

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "Rng::below(0)");
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::vector<int> Rng::sample_without_replacement(int n, int count) {
  if (count < 0 || count > n) {
    throw Error(ErrorCode::InvalidArgument, "cannot draw " + std::to_string(count) +
                                                " distinct values from " + std::to_string(n));
  }
  std::vector<int> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  // Partial Fisher-Yates: the first `count` slots are the sample.
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(below(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(count));
  return pool;
}

}  // namespace cosoc
