#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cosoc {

/// Axis-aligned crop in relative image coordinates: (x, y) is the top-left
/// corner, (w, h) the extent, all in units of the image side.
struct CropRect {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  double h = 1.0;

  double area() const { return w * h; }
  bool is_full_image() const { return x == 0.0 && y == 0.0 && w == 1.0 && h == 1.0; }
  /// x, y in [0,1), w, h in (0,1], x+w <= 1, y+h <= 1 (with `slack` for rounding).
  bool valid(double slack = 1e-12) const;

  friend bool operator==(const CropRect&, const CropRect&) = default;
};

struct CropConstraints {
  double min_area_ratio = 0.08;
  double aspect_lo = 3.0 / 4.0;
  double aspect_hi = 4.0 / 3.0;
};

/// Throws InvalidArgument on malformed constraints and InfeasibleConstraint
/// when no rect inside the unit square satisfies them.
void check_constraints(const CropConstraints& constraints);

/// `count` random crops for one image. The stream is seeded from
/// (seed, image_id) only, so adding images never perturbs existing plans.
std::vector<CropRect> sample_crops(std::string_view image_id, int count, std::uint64_t seed,
                                   const CropConstraints& constraints = {});

/// Grows `rect` about its center until its area reaches `min_area_ratio`,
/// keeping the aspect ratio unless the image border forces a change.
CropRect enforce_min_area(const CropRect& rect, double min_area_ratio);

/// Mean foreground-box area over the full image area.
double snf_ratio(std::span<const CropRect> foreground);

struct CropPlan {
  std::uint64_t seed = 0;
  CropConstraints constraints;
  std::map<std::string, std::vector<CropRect>> images;
};

CropPlan make_crop_plan(std::span<const std::string> image_ids, int count, std::uint64_t seed,
                        const CropConstraints& constraints = {});

void to_json(nlohmann::json& j, const CropRect& rect);
void from_json(const nlohmann::json& j, CropRect& rect);
nlohmann::json plan_to_json(const CropPlan& plan);
CropPlan plan_from_json(const nlohmann::json& j);

}  // namespace cosoc
