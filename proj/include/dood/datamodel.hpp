#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dood/tensor.hpp"
#include "json.hpp"

namespace dood {

inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr std::uint8_t kInlierLabel = 0;
inline constexpr std::uint8_t kOutlierLabel = 1;

// Three channels, values in [0,1]. Stored 8-bit per channel on disk.
using Image = Tensor3<float>;
// Class ids 0..C-1 or kIgnoreLabel.
using SemanticMask = Grid2<std::uint8_t>;
// kInlierLabel / kOutlierLabel / kIgnoreLabel.
using OodMask = Grid2<std::uint8_t>;
// Per-pixel class logits, (C, H, W).
using LogitMap = Tensor3<float>;
// Higher means more likely out-of-distribution.
using ScoreMap = Grid2<float>;
using ConfidenceMap = Grid2<float>;

inline constexpr int kMinImageSide = 32;

struct Box {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  long area() const { return static_cast<long>(width) * height; }
  bool operator==(const Box&) const = default;
};

struct Sample {
  std::string id;
  Image image;
  std::optional<SemanticMask> semantic;
  std::optional<OodMask> ood;

  int height() const { return image.height; }
  int width() const { return image.width; }
  // Checks image invariants and that present masks match the image.
  void validate(int class_count = 0) const;
};

struct NormStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};

  void validate() const;
  bool operator==(const NormStats&) const = default;
};

void validate_image(const Image& image);
NormStats compute_norm_stats(std::span<const Image> images);

Tensor3<float> normalize(const Image& image, const NormStats& stats);
Image denormalize(const Tensor3<float>& normalized, const NormStats& stats);

// Half-pixel-centred bilinear resampling with edge clamping; any channel count.
Tensor3<float> resize_bilinear(const Tensor3<float>& src, int height, int width);
Grid2<std::uint8_t> resize_nearest(const Grid2<std::uint8_t>& src, int height, int width);

// Output dims when the shorter side is scaled to `shorter_side`; the long side
// is rounded half-up.
std::pair<int, int> shorter_side_dims(int height, int width, int shorter_side);

Sample resize_to(const Sample& sample, int height, int width);
Sample resize(const Sample& sample, int shorter_side);
Sample scale(const Sample& sample, double factor);

Sample crop(const Sample& sample, const Box& box);
// Offset (x, y) drawn uniformly over all positions where a size×size window fits.
std::pair<int, int> crop_offset(int height, int width, int size, std::uint64_t seed);
Sample random_crop(const Sample& sample, int size, std::uint64_t seed);

// --- on-disk images -------------------------------------------------------

Image read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const Image& image);
Grid2<std::uint8_t> read_png_mask(const std::filesystem::path& path);
void write_png_mask(const std::filesystem::path& path, const Grid2<std::uint8_t>& mask);

// --- score maps -----------------------------------------------------------
//
// "DOSM1\n", then "H W\n" in ASCII, then H*W little-endian float32, row-major.

std::string encode_scoremap(const ScoreMap& map);
ScoreMap decode_scoremap(std::string_view bytes);
void write_scoremap(const std::filesystem::path& path, const ScoreMap& map);
ScoreMap read_scoremap(const std::filesystem::path& path);

// --- manifests ------------------------------------------------------------

enum class Role { kInlier, kOutlier, kMixed };

std::string_view role_name(Role role);
Role parse_role(std::string_view name);

struct ManifestRecord {
  std::string id;
  std::string image;
  std::optional<std::string> semantic;
  std::optional<std::string> ood;
  Role role = Role::kInlier;
  // Free-form extension object (bounding boxes, source ids, ...). Null when absent.
  nlohmann::json ext;

  bool operator==(const ManifestRecord&) const = default;
};

// JSON Lines: a header line {"manifest": {name, seed, generator}} followed by
// one record per line.
struct DatasetManifest {
  std::string name;
  std::uint64_t seed = 0;
  std::string generator;
  std::vector<ManifestRecord> records;
  // Directory relative paths resolve against. Not serialized.
  std::filesystem::path base_dir;

  std::size_t size() const { return records.size(); }
  bool operator==(const DatasetManifest& o) const {
    return name == o.name && seed == o.seed && generator == o.generator && records == o.records;
  }
};

std::string serialize_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir = {});
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

std::filesystem::path resolve(const DatasetManifest& manifest, const std::string& relative);
Sample load_sample(const DatasetManifest& manifest, std::size_t index);
std::vector<Sample> load_all(const DatasetManifest& manifest);

// Writes the image and any masks under out_dir/{images,semantic,ood}/<id>.png and
// returns the record with paths relative to out_dir.
ManifestRecord save_sample(const std::filesystem::path& out_dir, const Sample& sample, Role role,
                           nlohmann::json ext = nullptr);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace dood
