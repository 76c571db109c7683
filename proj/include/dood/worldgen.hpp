#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dood/datamodel.hpp"
#include "json.hpp"

namespace dood {

// Inlier-world ontology.
enum class SceneClass : std::uint8_t {
  kSky = 0,
  kBuilding = 1,
  kVegetation = 2,
  kRoad = 3,
  kSidewalk = 4,
  kMarking = 5,
  kCar = 6,
  kPerson = 7,
};
inline constexpr int kSceneClassCount = 8;
inline constexpr std::array<std::string_view, kSceneClassCount> kSceneClassNames = {
    "sky", "building", "vegetation", "road", "sidewalk", "marking", "car", "person"};

enum class TextureFamily { kNoise, kPolygons, kCheckers, kBlobs, kGradients };
std::string_view texture_family_name(TextureFamily family);
TextureFamily parse_texture_family(std::string_view name);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Range&) const = default;
};

struct WorldConfig {
  int inlier_height = 128;
  int inlier_width = 256;
  int background_height = 128;
  int background_width = 128;
  int class_count = kSceneClassCount;

  // Scene grammar, as fractions of the scene height / width.
  Range sky_bottom{0.18, 0.36};
  Range road_top{0.52, 0.64};
  Range car_width{0.10, 0.26};
  Range person_height{0.14, 0.30};
  int max_cars = 4;
  int max_persons = 3;
  double no_car_probability = 0.25;
  double pixel_noise = 0.02;
  double color_jitter = 0.06;

  std::vector<TextureFamily> background_families{
      TextureFamily::kNoise, TextureFamily::kPolygons, TextureFamily::kCheckers,
      TextureFamily::kBlobs, TextureFamily::kGradients};
  Range bbox_fraction{0.20, 0.70};
  // Probability that a background object is a rendered car.
  double car_leak = 0.01;
  // Probability that an inlier scene contains a foreign animal-like shape.
  double animal_rate = 0.0;
  Range animal_width{0.08, 0.16};

  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const WorldConfig&) const = default;
};

nlohmann::json to_json(const WorldConfig& config);
// Missing keys keep their defaults; unknown keys are a configuration error.
WorldConfig world_config_from_json(const nlohmann::json& j);

struct BackgroundSample {
  Sample sample;
  Box bbox;
  // 1 where the object was drawn; same dims as the image.
  Grid2<std::uint8_t> object_mask;
  TextureFamily family = TextureFamily::kNoise;
  bool car_object = false;
};

// Road-like scene with a dense semantic mask. The OOD mask is all-inlier except
// for an optional animal shape (semantic IGNORE, OOD).
Sample gen_inlier_scene(const WorldConfig& config, std::uint64_t index);

// Texture image with one object inside a bounding box covering
// config.bbox_fraction of the pixels. The OOD mask is all-outlier.
BackgroundSample gen_background_image(const WorldConfig& config, std::uint64_t index);

// Indoor-world classes, labelled class_count + k in foreign scenes.
enum class ForeignClass : std::uint8_t { kWall = 0, kFloor = 1, kFurniture = 2 };
inline constexpr int kForeignClassCount = 3;
inline constexpr std::array<std::string_view, kForeignClassCount> kForeignClassNames = {"wall", "floor",
                                                                                        "furniture"};

// Indoor scene (wall, floor, furniture) at inlier resolution, densely labelled
// with ids class_count + ForeignClass. Stands in for a third-party dataset that
// a union-ontology model is trained on alongside the inlier world.
Sample gen_foreign_scene(const WorldConfig& config, std::uint64_t index);

enum class WorldKind { kInlier, kBackground, kForeign };
std::string_view world_kind_name(WorldKind kind);
WorldKind parse_world_kind(std::string_view name);

// Writes samples first_index .. first_index + n - 1 plus out_dir/manifest.jsonl.
// Background records carry {"bbox": [x, y, w, h], "family", "car_object",
// "object_mask"} in ext.
DatasetManifest gen_dataset(const WorldConfig& config, std::size_t n, WorldKind kind,
                            const std::filesystem::path& out_dir, std::uint64_t first_index = 0);

// Fraction of pixels labelled OOD in an inlier scene (animal coverage).
double foreign_fraction(const Sample& sample);

// Joint 8x8x8 colour histogram chi-square distance between two image sets.
double color_histogram_chi2(std::span<const Image> a, std::span<const Image> b);

}  // namespace dood
