#include "cosoc/feature_store.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include "cosoc/error.hpp"
#include "cosoc/io.hpp"

namespace cosoc {
namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
  return v;
}

void append_float(std::string& out, float value) {
  const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(value));
  char bytes[4];
  std::memcpy(bytes, &bits, 4);
  out.append(bytes, 4);
}

float read_float(const char* data) {
  std::uint32_t bits;
  std::memcpy(&bits, data, 4);
  return std::bit_cast<float>(to_little_endian(bits));
}

std::string require_string(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
    throw Error(ErrorCode::SchemaError, where + ": missing string field '" + key + "'");
  }
  return j[key].get<std::string>();
}

const nlohmann::json& require_array(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_array()) {
    throw Error(ErrorCode::SchemaError, where + ": missing array field '" + key + "'");
  }
  return j[key];
}

const CropRecord* find_whole(const ImageRecord& image) {
  for (const auto& crop : image.crops) {
    if (crop.rect && crop.rect->is_full_image()) return &crop;
  }
  return nullptr;
}

}  // namespace

std::size_t FeatureStore::crop_count() const {
  std::size_t n = 0;
  for (const auto& c : classes)
    for (const auto& img : c.images) n += img.crops.size();
  return n;
}

const CropRecord& whole_view(const ImageRecord& image) {
  if (image.crops.empty()) throw Error(ErrorCode::InsufficientData, "image '" + image.id + "' has no crops");
  const CropRecord* whole = find_whole(image);
  return whole ? *whole : image.crops.front();
}

std::vector<std::size_t> crop_view_indices(const ImageRecord& image) {
  const CropRecord* whole = find_whole(image);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < image.crops.size(); ++i) {
    if (&image.crops[i] != whole) out.push_back(i);
  }
  return out;
}

std::size_t FeatureStore::image_count() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.images.size();
  return n;
}

void FeatureStore::validate() const {
  if (dim <= 0) throw Error(ErrorCode::SchemaError, "store dim must be positive");
  std::set<std::string> class_names;
  for (const auto& c : classes) {
    if (!class_names.insert(c.name).second) throw Error(ErrorCode::SchemaError, "duplicate class '" + c.name + "'");
    std::set<std::string> image_ids;
    for (const auto& img : c.images) {
      if (!image_ids.insert(img.id).second) {
        throw Error(ErrorCode::SchemaError, "duplicate image id '" + img.id + "' in class '" + c.name + "'");
      }
      std::set<std::string> crop_ids;
      for (const auto& crop : img.crops) {
        const std::string where = c.name + "/" + img.id + "/" + crop.id;
        if (!crop_ids.insert(crop.id).second) throw Error(ErrorCode::SchemaError, "duplicate crop id " + where);
        if (crop.feature.size() != dim) {
          throw Error(ErrorCode::DimMismatch, where + " has " + std::to_string(crop.feature.size()) +
                                                  " entries, store dim is " + std::to_string(dim));
        }
        if (!crop.feature.allFinite()) throw Error(ErrorCode::NonFinite, where + " has non-finite entries");
        if (crop.rect && !crop.rect->valid(1e-9)) throw Error(ErrorCode::SchemaError, where + " has an invalid rect");
      }
    }
  }
}

nlohmann::json manifest_json(const FeatureStore& store) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : store.classes) {
    nlohmann::json images = nlohmann::json::array();
    for (const auto& img : c.images) {
      nlohmann::json crops = nlohmann::json::array();
      for (const auto& crop : img.crops) {
        nlohmann::json jc{{"id", crop.id}};
        if (crop.rect) jc["rect"] = *crop.rect;
        crops.push_back(std::move(jc));
      }
      images.push_back({{"id", img.id}, {"crops", std::move(crops)}});
    }
    classes.push_back({{"name", c.name}, {"images", std::move(images)}});
  }
  return nlohmann::json{{"format_version", kStoreFormatVersion}, {"dim", store.dim}, {"classes", std::move(classes)}};
}

void save_store(const FeatureStore& store, const std::filesystem::path& dir, const nlohmann::json& extra) {
  store.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());

  std::string payload;
  payload.reserve(store.crop_count() * static_cast<std::size_t>(store.dim) * 4);
  for (const auto& c : store.classes)
    for (const auto& img : c.images)
      for (const auto& crop : img.crops)
        for (Eigen::Index i = 0; i < crop.feature.size(); ++i) append_float(payload, static_cast<float>(crop.feature[i]));

  nlohmann::json manifest = manifest_json(store);
  if (extra.is_object()) {
    for (const auto& [key, value] : extra.items()) {
      if (!manifest.contains(key)) manifest[key] = value;
    }
  }
  write_text_file(dir / kManifestFile, manifest.dump(2) + "\n");
  write_text_file(dir / kPayloadFile, payload);
}

FeatureStore load_store(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_json_file(dir / kManifestFile);
  const std::string payload = read_text_file(dir / kPayloadFile);

  FeatureStore store;
  if (!manifest.is_object() || !manifest.contains("format_version") ||
      manifest["format_version"] != kStoreFormatVersion) {
    throw Error(ErrorCode::SchemaError, "manifest format_version must be " + std::to_string(kStoreFormatVersion));
  }
  if (!manifest.contains("dim") || !manifest["dim"].is_number_integer() || manifest["dim"].get<long long>() <= 0) {
    throw Error(ErrorCode::SchemaError, "manifest dim must be a positive integer");
  }
  store.dim = manifest["dim"].get<int>();

  // Count crops before touching the payload so a size mismatch is reported
  // as such rather than as a read past the end.
  std::size_t crops_total = 0;
  for (const auto& jc : require_array(manifest, "classes", "manifest")) {
    const std::string name = require_string(jc, "name", "class");
    for (const auto& ji : require_array(jc, "images", "class '" + name + "'"))
      crops_total += require_array(ji, "crops", "image in class '" + name + "'").size();
  }
  const std::size_t expected = crops_total * static_cast<std::size_t>(store.dim) * 4;
  if (payload.size() != expected) {
    throw Error(ErrorCode::CorruptPayload, "payload has " + std::to_string(payload.size()) + " bytes, manifest implies " +
                                               std::to_string(expected) + " (dim " + std::to_string(store.dim) + " x " +
                                               std::to_string(crops_total) + " crops x 4)");
  }

  const char* cursor = payload.data();
  for (const auto& jc : manifest["classes"]) {
    ClassRecord cls;
    cls.name = jc["name"].get<std::string>();
    for (const auto& ji : jc["images"]) {
      ImageRecord img;
      img.id = require_string(ji, "id", "image in class '" + cls.name + "'");
      for (const auto& jcrop : ji["crops"]) {
        CropRecord crop;
        crop.id = require_string(jcrop, "id", "crop of image '" + img.id + "'");
        if (jcrop.contains("rect") && !jcrop["rect"].is_null()) {
          try {
            crop.rect = jcrop["rect"].get<CropRect>();
          } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::SchemaError, "rect of crop '" + crop.id + "': " + e.what());
          }
        }
        crop.feature.resize(store.dim);
        for (int d = 0; d < store.dim; ++d, cursor += 4) crop.feature[d] = read_float(cursor);
        img.crops.push_back(std::move(crop));
      }
      cls.images.push_back(std::move(img));
    }
    store.classes.push_back(std::move(cls));
  }
  store.validate();
  return store;
}

}  // namespace cosoc
