#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosoc/crop_geometry.hpp"
#include "cosoc/feature.hpp"

namespace cosoc {

struct CropRecord {
  std::string id;
  std::optional<CropRect> rect;
  Vector feature;
};

struct ImageRecord {
  std::string id;
  std::vector<CropRecord> crops;
};

struct ClassRecord {
  std::string name;
  std::vector<ImageRecord> images;
};

/// Crop embeddings grouped by class and image. Vectors are kept as stored
/// (not necessarily unit norm); algorithms normalize on entry.
struct FeatureStore {
  int dim = 0;
  std::vector<ClassRecord> classes;

  std::size_t crop_count() const;
  std::size_t image_count() const;

  /// Throws SchemaError / DimMismatch / NonFinite on the first violated
  /// invariant: positive dim, matching vector sizes, finite entries, unique
  /// class names, unique image ids per class, unique crop ids per image.
  void validate() const;
};

// Which crop plays which role: the whole-image view is the first crop whose
// rect covers the full image (crop 0 if none does); the crop views are all
// other crops in store order.
const CropRecord& whole_view(const ImageRecord& image);
std::vector<std::size_t> crop_view_indices(const ImageRecord& image);

inline constexpr int kStoreFormatVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kPayloadFile = "features.f32le";

/// Writes `manifest.json` and `features.f32le` (little-endian float32 rows in
/// manifest depth-first order) into `dir`, creating it if needed. Keys of
/// `extra` are added to the manifest unless they clash with its own.
void save_store(const FeatureStore& store, const std::filesystem::path& dir, const nlohmann::json& extra = nullptr);

/// Reads and validates a store directory. Errors: Io, SchemaError,
/// DimMismatch, CorruptPayload (payload size != dim * crops * 4).
FeatureStore load_store(const std::filesystem::path& dir);

nlohmann::json manifest_json(const FeatureStore& store);

}  // namespace cosoc
