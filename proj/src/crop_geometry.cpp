#include "cosoc/crop_geometry.hpp"

#include <algorithm>
#include <cmath>

#include "cosoc/error.hpp"
#include "cosoc/rng.hpp"

namespace cosoc {
namespace {

constexpr int kMaxAttempts = 100;

double max_feasible_area(const CropConstraints& c) {
  if (c.aspect_lo <= 1.0 && 1.0 <= c.aspect_hi) return 1.0;
  return c.aspect_hi < 1.0 ? c.aspect_hi : 1.0 / c.aspect_lo;
}

// Largest rect of the aspect closest to square, centered. Satisfies every
// constraint whenever check_constraints passes.
CropRect centered_fallback(const CropConstraints& c) {
  const double aspect = std::clamp(1.0, c.aspect_lo, c.aspect_hi);
  CropRect r;
  if (aspect >= 1.0) {
    r.w = 1.0;
    r.h = 1.0 / aspect;
  } else {
    r.w = aspect;
    r.h = 1.0;
  }
  r.x = (1.0 - r.w) / 2.0;
  r.y = (1.0 - r.h) / 2.0;
  return r;
}

double place(double center, double extent) {
  return std::clamp(center - extent / 2.0, 0.0, 1.0 - extent);
}

}  // namespace

bool CropRect::valid(double slack) const {
  return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) &&
         x >= 0.0 && y >= 0.0 && x < 1.0 && y < 1.0 && w > 0.0 && h > 0.0 && w <= 1.0 && h <= 1.0 &&
         x + w <= 1.0 + slack && y + h <= 1.0 + slack;
}

void check_constraints(const CropConstraints& c) {
  if (!(c.min_area_ratio > 0.0 && c.min_area_ratio <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "min_area_ratio must lie in (0, 1]");
  }
  if (!(c.aspect_lo > 0.0 && c.aspect_lo <= c.aspect_hi) || !std::isfinite(c.aspect_hi)) {
    throw Error(ErrorCode::InvalidArgument, "aspect range must satisfy 0 < lo <= hi");
  }
  if (max_feasible_area(c) < c.min_area_ratio) {
    throw Error(ErrorCode::InfeasibleConstraint,
                "no crop with aspect in [" + std::to_string(c.aspect_lo) + ", " + std::to_string(c.aspect_hi) +
                    "] reaches area " + std::to_string(c.min_area_ratio));
  }
}

std::vector<CropRect> sample_crops(std::string_view image_id, int count, std::uint64_t seed,
                                   const CropConstraints& constraints) {
  if (count < 1) throw Error(ErrorCode::InvalidArgument, "crop count must be at least 1");
  check_constraints(constraints);

  Rng rng(derive_seed(seed, image_id));
  const double log_lo = std::log(constraints.aspect_lo);
  const double log_hi = std::log(constraints.aspect_hi);

  std::vector<CropRect> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    CropRect rect = centered_fallback(constraints);
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const double area = rng.uniform(constraints.min_area_ratio, 1.0);
      const double aspect = std::exp(rng.uniform(log_lo, log_hi));
      const double w = std::sqrt(area * aspect);
      const double h = std::sqrt(area / aspect);
      const double ux = rng.uniform();
      const double uy = rng.uniform();
      if (w > 1.0 || h > 1.0 || w * h < constraints.min_area_ratio) continue;
      rect = CropRect{ux * (1.0 - w), uy * (1.0 - h), w, h};
      break;
    }
    out.push_back(rect);
  }
  return out;
}

CropRect enforce_min_area(const CropRect& rect, double min_area_ratio) {
  if (!(min_area_ratio > 0.0 && min_area_ratio <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "min_area_ratio must lie in (0, 1]");
  }
  // Relative slack so a rect produced by this function is a fixed point.
  if (rect.area() >= min_area_ratio * (1.0 - 1e-12)) return rect;

  const double scale = std::sqrt(min_area_ratio / rect.area());
  double w = rect.w * scale;
  double h = rect.h * scale;
  if (w > 1.0) {
    w = 1.0;
    h = min_area_ratio;
  } else if (h > 1.0) {
    h = 1.0;
    w = min_area_ratio;
  }
  const double cx = rect.x + rect.w / 2.0;
  const double cy = rect.y + rect.h / 2.0;
  return CropRect{place(cx, w), place(cy, h), w, h};
}

double snf_ratio(std::span<const CropRect> foreground) {
  if (foreground.empty()) throw Error(ErrorCode::EmptyInput, "snf_ratio needs at least one rect");
  double total = 0.0;
  for (const auto& r : foreground) {
    if (!r.valid()) throw Error(ErrorCode::InvalidArgument, "snf_ratio: invalid rect");
    total += r.area();
  }
  return total / static_cast<double>(foreground.size());
}

CropPlan make_crop_plan(std::span<const std::string> image_ids, int count, std::uint64_t seed,
                        const CropConstraints& constraints) {
  CropPlan plan;
  plan.seed = seed;
  plan.constraints = constraints;
  for (const auto& id : image_ids) {
    if (plan.images.contains(id)) throw Error(ErrorCode::SchemaError, "duplicate image id '" + id + "'");
    plan.images.emplace(id, sample_crops(id, count, seed, constraints));
  }
  return plan;
}

void to_json(nlohmann::json& j, const CropRect& rect) {
  j = nlohmann::json{{"x", rect.x}, {"y", rect.y}, {"w", rect.w}, {"h", rect.h}};
}

void from_json(const nlohmann::json& j, CropRect& rect) {
  rect.x = j.at("x").get<double>();
  rect.y = j.at("y").get<double>();
  rect.w = j.at("w").get<double>();
  rect.h = j.at("h").get<double>();
}

nlohmann::json plan_to_json(const CropPlan& plan) {
  nlohmann::json images = nlohmann::json::object();
  for (const auto& [id, rects] : plan.images) images[id] = rects;
  return nlohmann::json{{"seed", plan.seed},
                        {"min_area_ratio", plan.constraints.min_area_ratio},
                        {"aspect", {plan.constraints.aspect_lo, plan.constraints.aspect_hi}},
                        {"images", std::move(images)}};
}

CropPlan plan_from_json(const nlohmann::json& j) {
  try {
    CropPlan plan;
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.constraints.min_area_ratio = j.at("min_area_ratio").get<double>();
    const auto& aspect = j.at("aspect");
    if (!aspect.is_array() || aspect.size() != 2) throw Error(ErrorCode::SchemaError, "aspect must be [lo, hi]");
    plan.constraints.aspect_lo = aspect[0].get<double>();
    plan.constraints.aspect_hi = aspect[1].get<double>();
    for (const auto& [id, rects] : j.at("images").items()) {
      auto parsed = rects.get<std::vector<CropRect>>();
      for (const auto& r : parsed) {
        if (!r.valid(1e-9)) throw Error(ErrorCode::SchemaError, "invalid rect for image '" + id + "'");
      }
      plan.images.emplace(id, std::move(parsed));
    }
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("crop plan: ") + e.what());
  }
}

}  // namespace cosoc
