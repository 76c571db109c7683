#include "dood/datamodel.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "dood/error.hpp"
#include "dood/interp.hpp"
#include "dood/random.hpp"

namespace dood {
namespace fs = std::filesystem;

namespace {

Error data_error(const std::string& code, const std::string& msg) {
  return Error("datamodel", code, msg);
}

void check_mask_dims(const Grid2<std::uint8_t>& mask, const Image& image, const char* what,
                     const std::string& id) {
  if (mask.height != image.height || mask.width != image.width) {
    throw data_error("dims_mismatch", std::string(what) + " mask of sample '" + id + "' is " +
                                          std::to_string(mask.height) + "x" +
                                          std::to_string(mask.width) + ", image is " +
                                          std::to_string(image.height) + "x" +
                                          std::to_string(image.width));
  }
}

}  // namespace

void validate_image(const Image& image) {
  if (image.channels != 3) throw data_error("bad_image", "image must have 3 channels");
  if (image.height < kMinImageSide || image.width < kMinImageSide) {
    throw data_error("bad_image", "image sides must be at least 32 pixels");
  }
  if (image.data.size() != 3 * image.plane_size()) {
    throw data_error("bad_image", "image payload does not match its dims");
  }
  for (float v : image.data) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
      throw data_error("bad_image", "image values must be finite and in [0,1]");
    }
  }
}

void Sample::validate(int class_count) const {
  validate_image(image);
  if (semantic) {
    check_mask_dims(*semantic, image, "semantic", id);
    if (class_count > 0) {
      for (auto v : semantic->data) {
        if (v != kIgnoreLabel && v >= class_count) {
          throw data_error("bad_mask", "semantic class id " + std::to_string(v) +
                                           " out of range in sample '" + id + "'");
        }
      }
    }
  }
  if (ood) {
    check_mask_dims(*ood, image, "ood", id);
    for (auto v : ood->data) {
      if (v != kInlierLabel && v != kOutlierLabel && v != kIgnoreLabel) {
        throw data_error("bad_mask", "ood mask holds value " + std::to_string(v) +
                                         " in sample '" + id + "'");
      }
    }
  }
}

void NormStats::validate() const {
  for (int c = 0; c < 3; ++c) {
    if (!std::isfinite(mean[c]) || !std::isfinite(std[c]) || !(std[c] > 0.0)) {
      throw ConfigError("datamodel", "bad_norm_stats",
                        "normalization stats must be finite with std > 0");
    }
  }
}

NormStats compute_norm_stats(std::span<const Image> images) {
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (const auto& img : images) {
    for (int c = 0; c < 3; ++c) {
      for (float v : img.plane(c)) {
        sum[c] += v;
        sq[c] += static_cast<double>(v) * v;
      }
    }
    count += static_cast<double>(img.plane_size());
  }
  if (count == 0) throw data_error("empty", "cannot compute statistics of an empty image set");
  NormStats stats;
  for (int c = 0; c < 3; ++c) {
    stats.mean[c] = sum[c] / count;
    const double var = std::max(sq[c] / count - stats.mean[c] * stats.mean[c], 0.0);
    stats.std[c] = std::max(std::sqrt(var), 1e-3);
  }
  return stats;
}

Tensor3<float> normalize(const Image& image, const NormStats& stats) {
  stats.validate();
  Tensor3<float> out(image.channels, image.height, image.width);
  for (int c = 0; c < image.channels; ++c) {
    const auto src = image.plane(c);
    auto dst = out.plane(c);
    const double m = stats.mean[c % 3];
    const double s = stats.std[c % 3];
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i] = static_cast<float>((src[i] - m) / s);
    }
  }
  return out;
}

Image denormalize(const Tensor3<float>& normalized, const NormStats& stats) {
  stats.validate();
  Image out(normalized.channels, normalized.height, normalized.width);
  for (int c = 0; c < normalized.channels; ++c) {
    const auto src = normalized.plane(c);
    auto dst = out.plane(c);
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i] = static_cast<float>(src[i] * stats.std[c % 3] + stats.mean[c % 3]);
    }
  }
  return out;
}

Tensor3<float> resize_bilinear(const Tensor3<float>& src, int height, int width) {
  if (height < 1 || width < 1) throw data_error("degenerate_resize", "resize target below 1 px");
  if (src.height == height && src.width == width) return src;
  return BilinearPlan(src.height, src.width, height, width).apply(src);
}

Grid2<std::uint8_t> resize_nearest(const Grid2<std::uint8_t>& src, int height, int width) {
  if (height < 1 || width < 1) throw data_error("degenerate_resize", "resize target below 1 px");
  Grid2<std::uint8_t> out(height, width);
  std::vector<int> xs(width);
  for (int x = 0; x < width; ++x) {
    xs[x] = std::min(static_cast<int>(std::floor((x + 0.5) * src.width / width)), src.width - 1);
  }
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(static_cast<int>(std::floor((y + 0.5) * src.height / height)),
                            src.height - 1);
    for (int x = 0; x < width; ++x) out.at(y, x) = src.at(sy, xs[x]);
  }
  return out;
}

std::pair<int, int> shorter_side_dims(int height, int width, int shorter_side) {
  if (shorter_side < kMinImageSide) {
    throw data_error("degenerate_resize", "shorter side must be at least 32");
  }
  if (height < 1 || width < 1) throw data_error("degenerate_resize", "source image is empty");
  const long s = shorter_side;
  if (height <= width) {
    // round-half-up of width * s / height in exact integer arithmetic
    const long w = (2L * width * s + height) / (2L * height);
    return {shorter_side, static_cast<int>(w)};
  }
  const long h = (2L * height * s + width) / (2L * width);
  return {static_cast<int>(h), shorter_side};
}

Sample resize_to(const Sample& sample, int height, int width) {
  Sample out;
  out.id = sample.id;
  out.image = resize_bilinear(sample.image, height, width);
  for (auto& v : out.image.data) v = std::clamp(v, 0.0f, 1.0f);
  if (sample.semantic) out.semantic = resize_nearest(*sample.semantic, height, width);
  if (sample.ood) out.ood = resize_nearest(*sample.ood, height, width);
  return out;
}

Sample resize(const Sample& sample, int shorter_side) {
  const auto [h, w] = shorter_side_dims(sample.height(), sample.width(), shorter_side);
  return resize_to(sample, h, w);
}

Sample scale(const Sample& sample, double factor) {
  if (!(factor > 0)) throw data_error("degenerate_resize", "scale factor must be positive");
  if (factor == 1.0) return sample;
  const int h = static_cast<int>(std::floor(sample.height() * factor + 0.5));
  const int w = static_cast<int>(std::floor(sample.width() * factor + 0.5));
  return resize_to(sample, h, w);
}

Sample crop(const Sample& sample, const Box& box) {
  if (box.x < 0 || box.y < 0 || box.width < 1 || box.height < 1 ||
      box.x + box.width > sample.width() || box.y + box.height > sample.height()) {
    throw data_error("crop_out_of_bounds", "crop window outside sample '" + sample.id + "'");
  }
  Sample out;
  out.id = sample.id;
  out.image = Image(sample.image.channels, box.height, box.width);
  for (int c = 0; c < sample.image.channels; ++c) {
    for (int y = 0; y < box.height; ++y) {
      const float* src = &sample.image.at(c, box.y + y, box.x);
      std::copy(src, src + box.width, &out.image.at(c, y, 0));
    }
  }
  auto crop_mask = [&](const Grid2<std::uint8_t>& m) {
    Grid2<std::uint8_t> r(box.height, box.width);
    for (int y = 0; y < box.height; ++y) {
      const auto* src = &m.at(box.y + y, box.x);
      std::copy(src, src + box.width, &r.at(y, 0));
    }
    return r;
  };
  if (sample.semantic) out.semantic = crop_mask(*sample.semantic);
  if (sample.ood) out.ood = crop_mask(*sample.ood);
  return out;
}

std::pair<int, int> crop_offset(int height, int width, int size, std::uint64_t seed) {
  if (size < 1 || height < size || width < size) {
    throw data_error("crop_too_large", "image " + std::to_string(height) + "x" +
                                           std::to_string(width) + " smaller than crop " +
                                           std::to_string(size));
  }
  Rng rng(seed);
  const int x = uniform_int(rng, 0, width - size);
  const int y = uniform_int(rng, 0, height - size);
  return {x, y};
}

Sample random_crop(const Sample& sample, int size, std::uint64_t seed) {
  const auto [x, y] = crop_offset(sample.height(), sample.width(), size, seed);
  return crop(sample, Box{x, y, size, size});
}

// --- PNG ------------------------------------------------------------------

namespace {

struct PngReadResult {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved
};

PngReadResult png_read(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw Error("datamodel", "io", "cannot read PNG '" + path.string() + "': " + img.message);
  }
  PngReadResult r;
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  r.width = static_cast<int>(img.width);
  r.height = static_cast<int>(img.height);
  r.channels = gray ? 1 : 3;
  r.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw Error("datamodel", "io", "cannot decode PNG '" + path.string() + "': " + img.message);
  }
  return r;
}

void png_write(const fs::path& path, int width, int height, int channels,
               const std::vector<std::uint8_t>& pixels) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    throw Error("datamodel", "io", "cannot write PNG '" + path.string() + "': " + img.message);
  }
}

}  // namespace

Image read_png_rgb(const fs::path& path) {
  auto r = png_read(path);
  Image image(3, r.height, r.width);
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const std::uint8_t v =
            r.channels == 1 ? r.pixels[y * r.width + x] : r.pixels[(y * r.width + x) * 3 + c];
        image.at(c, y, x) = v / 255.0f;
      }
    }
  }
  return image;
}

void write_png_rgb(const fs::path& path, const Image& image) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(image.height) * image.width * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        px[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  png_write(path, image.width, image.height, 3, px);
}

Grid2<std::uint8_t> read_png_mask(const fs::path& path) {
  auto r = png_read(path);
  if (r.channels != 1) {
    throw Error("datamodel", "bad_mask", "mask PNG '" + path.string() + "' is not single-channel");
  }
  Grid2<std::uint8_t> mask(r.height, r.width);
  mask.data = std::move(r.pixels);
  return mask;
}

void write_png_mask(const fs::path& path, const Grid2<std::uint8_t>& mask) {
  png_write(path, mask.width, mask.height, 1, mask.data);
}

// --- score maps -----------------------------------------------------------

namespace {
constexpr std::string_view kScoreMagic = "DOSM1\n";

void append_le32(std::string& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float read_le32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}
}  // namespace

std::string encode_scoremap(const ScoreMap& map) {
  for (float v : map.data) {
    if (!std::isfinite(v)) throw Error("datamodel", "non_finite", "score maps must be finite");
  }
  std::string out(kScoreMagic);
  out += std::to_string(map.height) + " " + std::to_string(map.width) + "\n";
  out.reserve(out.size() + map.data.size() * 4);
  for (float v : map.data) append_le32(out, v);
  return out;
}

ScoreMap decode_scoremap(std::string_view bytes) {
  auto fail = [](std::size_t offset, const std::string& what) {
    return Error("datamodel", "format",
                 "score map format error at byte " + std::to_string(offset) + ": " + what);
  };
  if (bytes.substr(0, kScoreMagic.size()) != kScoreMagic) throw fail(0, "bad magic");
  const std::size_t line_start = kScoreMagic.size();
  const std::size_t nl = bytes.find('\n', line_start);
  if (nl == std::string_view::npos) throw fail(line_start, "missing dimension line");
  const std::string dims(bytes.substr(line_start, nl - line_start));
  std::istringstream is(dims);
  long h = -1, w = -1;
  std::string trailing;
  if (!(is >> h >> w) || (is >> trailing) || h < 1 || w < 1) {
    throw fail(line_start, "bad dimension line '" + dims + "'");
  }
  const std::size_t payload = nl + 1;
  const std::size_t expected = static_cast<std::size_t>(h) * w * 4;
  if (bytes.size() - payload != expected) {
    throw fail(payload, "payload holds " + std::to_string(bytes.size() - payload) +
                            " bytes, header declares " + std::to_string(expected));
  }
  ScoreMap map(static_cast<int>(h), static_cast<int>(w));
  for (std::size_t i = 0; i < map.data.size(); ++i) {
    map.data[i] = read_le32(bytes.data() + payload + 4 * i);
  }
  return map;
}

void write_scoremap(const fs::path& path, const ScoreMap& map) {
  write_file(path, encode_scoremap(map));
}

ScoreMap read_scoremap(const fs::path& path) { return decode_scoremap(read_file(path)); }

// --- manifests ------------------------------------------------------------

std::string_view role_name(Role role) {
  switch (role) {
    case Role::kInlier: return "id";
    case Role::kOutlier: return "ood";
    case Role::kMixed: return "mixed";
  }
  return "id";
}

Role parse_role(std::string_view name) {
  if (name == "id") return Role::kInlier;
  if (name == "ood") return Role::kOutlier;
  if (name == "mixed") return Role::kMixed;
  throw data_error("bad_manifest", "unknown role '" + std::string(name) + "'");
}

std::string serialize_manifest(const DatasetManifest& m) {
  std::string out;
  nlohmann::ordered_json header;
  header["manifest"] = {{"name", m.name}, {"seed", m.seed}, {"generator", m.generator}};
  out += header.dump() + "\n";
  for (const auto& r : m.records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["image"] = r.image;
    j["semantic"] = r.semantic ? nlohmann::ordered_json(*r.semantic) : nlohmann::ordered_json();
    j["ood"] = r.ood ? nlohmann::ordered_json(*r.ood) : nlohmann::ordered_json();
    j["role"] = role_name(r.role);
    if (!r.ext.is_null()) j["ext"] = nlohmann::ordered_json::parse(r.ext.dump());
    out += j.dump() + "\n";
  }
  return out;
}

DatasetManifest parse_manifest(std::string_view text, const fs::path& base_dir) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw data_error("bad_manifest", "line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (j.contains("manifest")) {
        const auto& h = j.at("manifest");
        m.name = h.value("name", "");
        m.seed = h.value("seed", std::uint64_t{0});
        m.generator = h.value("generator", "");
        header_seen = true;
        continue;
      }
      ManifestRecord r;
      r.id = j.at("id").get<std::string>();
      r.image = j.at("image").get<std::string>();
      if (j.contains("semantic") && !j["semantic"].is_null()) r.semantic = j["semantic"].get<std::string>();
      if (j.contains("ood") && !j["ood"].is_null()) r.ood = j["ood"].get<std::string>();
      r.role = parse_role(j.at("role").get<std::string>());
      if (j.contains("ext")) r.ext = j["ext"];
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw data_error("bad_manifest", "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  (void)header_seen;
  return m;
}

DatasetManifest read_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw Error("datamodel", "missing", "manifest not found: " + path.string());
  return parse_manifest(read_file(path), path.parent_path());
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  write_file(path, serialize_manifest(manifest));
}

fs::path resolve(const DatasetManifest& manifest, const std::string& relative) {
  fs::path p(relative);
  return p.is_absolute() ? p : manifest.base_dir / p;
}

Sample load_sample(const DatasetManifest& manifest, std::size_t index) {
  const auto& r = manifest.records.at(index);
  Sample s;
  s.id = r.id;
  s.image = read_png_rgb(resolve(manifest, r.image));
  if (r.semantic) s.semantic = read_png_mask(resolve(manifest, *r.semantic));
  if (r.ood) s.ood = read_png_mask(resolve(manifest, *r.ood));
  s.validate();
  if (r.role == Role::kInlier && s.ood) {
    for (auto v : s.ood->data) {
      if (v == kOutlierLabel) {
        throw data_error("role_mismatch", "record '" + r.id + "' has role id but OOD pixels");
      }
    }
  }
  return s;
}

std::vector<Sample> load_all(const DatasetManifest& manifest) {
  std::vector<Sample> out;
  out.reserve(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) out.push_back(load_sample(manifest, i));
  return out;
}

ManifestRecord save_sample(const fs::path& out_dir, const Sample& sample, Role role,
                           nlohmann::json ext) {
  ManifestRecord r;
  r.id = sample.id;
  r.role = role;
  r.image = "images/" + sample.id + ".png";
  write_png_rgb(out_dir / r.image, sample.image);
  if (sample.semantic) {
    r.semantic = "semantic/" + sample.id + ".png";
    write_png_mask(out_dir / *r.semantic, *sample.semantic);
  }
  if (sample.ood) {
    r.ood = "ood/" + sample.id + ".png";
    write_png_mask(out_dir / *r.ood, *sample.ood);
  }
  r.ext = std::move(ext);
  return r;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("datamodel", "io", "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("datamodel", "io", "cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("datamodel", "io", "short write to '" + path.string() + "'");
}

}  // namespace dood
