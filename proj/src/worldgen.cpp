#include "dood/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dood/error.hpp"
#include "dood/parallel.hpp"
#include "dood/random.hpp"

namespace dood {
namespace fs = std::filesystem;

namespace {

using Color = std::array<float, 3>;

constexpr std::uint8_t kNoLabel = 254;  // painter sentinel: leave label untouched

ConfigError world_error(const std::string& msg) {
  return ConfigError("worldgen", "bad_config", msg);
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

Color jitter(Rng& rng, Color c, double amount) {
  for (auto& v : c) v = clamp01(v + uniform(rng, -amount, amount));
  return c;
}

Color random_color(Rng& rng) {
  return {static_cast<float>(uniform(rng, 0, 1)), static_cast<float>(uniform(rng, 0, 1)),
          static_cast<float>(uniform(rng, 0, 1))};
}

Color mix(const Color& a, const Color& b, double t) {
  return {clamp01(a[0] + (b[0] - a[0]) * t), clamp01(a[1] + (b[1] - a[1]) * t),
          clamp01(a[2] + (b[2] - a[2]) * t)};
}

// Image plus the label grids that are painted alongside it.
struct Canvas {
  Image& image;
  SemanticMask* semantic = nullptr;
  OodMask* ood = nullptr;
  Grid2<std::uint8_t>* coverage = nullptr;

  int height() const { return image.height; }
  int width() const { return image.width; }

  void put(int y, int x, const Color& c, std::uint8_t sem, std::uint8_t ood_label = kNoLabel) {
    if (y < 0 || x < 0 || y >= image.height || x >= image.width) return;
    for (int ch = 0; ch < 3; ++ch) image.at(ch, y, x) = c[ch];
    if (semantic && sem != kNoLabel) semantic->at(y, x) = sem;
    if (ood && ood_label != kNoLabel) ood->at(y, x) = ood_label;
    if (coverage) coverage->at(y, x) = 1;
  }
};

template <typename Inside, typename Shade>
void fill_box(Canvas& cv, int x0, int y0, int x1, int y1, Inside inside, Shade shade,
              std::uint8_t sem, std::uint8_t ood_label = kNoLabel) {
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, cv.width());
  y1 = std::min(y1, cv.height());
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      if (inside(y, x)) cv.put(y, x, shade(y, x), sem, ood_label);
    }
  }
}

auto always = [](int, int) { return true; };

auto ellipse_at(double cy, double cx, double ry, double rx) {
  return [=](int y, int x) {
    const double dy = (y + 0.5 - cy) / ry;
    const double dx = (x + 0.5 - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  };
}

// Star-shaped polygon test by ray casting.
struct Polygon {
  std::vector<double> xs, ys;
  bool contains(double px, double py) const {
    bool in = false;
    const std::size_t n = xs.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      if ((ys[i] > py) != (ys[j] > py) &&
          px < (xs[j] - xs[i]) * (py - ys[i]) / (ys[j] - ys[i]) + xs[i]) {
        in = !in;
      }
    }
    return in;
  }
};

Polygon random_star(Rng& rng, double cx, double cy, double rx, double ry, int vertices) {
  Polygon p;
  for (int i = 0; i < vertices; ++i) {
    const double a = 2 * std::numbers::pi * (i + uniform(rng, -0.3, 0.3)) / vertices;
    const double r = uniform(rng, 0.55, 1.0);
    p.xs.push_back(cx + rx * r * std::cos(a));
    p.ys.push_back(cy + ry * r * std::sin(a));
  }
  return p;
}

// Smooth value noise on a coarse lattice, bilinear between lattice points.
struct ValueNoise {
  int cells_y = 1, cells_x = 1;
  double cell = 8;
  std::vector<double> lattice;

  ValueNoise(Rng& rng, int height, int width, double cell_size) : cell(cell_size) {
    cells_y = static_cast<int>(height / cell) + 2;
    cells_x = static_cast<int>(width / cell) + 2;
    lattice.resize(static_cast<std::size_t>(cells_y) * cells_x);
    for (auto& v : lattice) v = uniform(rng, 0, 1);
  }
  double at(int y, int x) const {
    const double fy = y / cell, fx = x / cell;
    const int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
    const double ty = fy - iy, tx = fx - ix;
    auto L = [&](int a, int b) { return lattice[static_cast<std::size_t>(a) * cells_x + b]; };
    const double top = L(iy, ix) * (1 - tx) + L(iy, ix + 1) * tx;
    const double bot = L(iy + 1, ix) * (1 - tx) + L(iy + 1, ix + 1) * tx;
    return top * (1 - ty) + bot * ty;
  }
};

// Paints a texture from `family` over the box, restricted to pixels where
// inside(y, x) holds.
template <typename Inside>
void paint_texture(Canvas& cv, const Box& box, TextureFamily family, Rng& rng, Inside inside,
                   std::uint8_t sem, std::uint8_t ood_label) {
  const int x0 = box.x, y0 = box.y, x1 = box.x + box.width, y1 = box.y + box.height;
  switch (family) {
    case TextureFamily::kNoise: {
      const Color a = random_color(rng), b = random_color(rng);
      ValueNoise coarse(rng, cv.height(), cv.width(), uniform(rng, 6, 32));
      ValueNoise fine(rng, cv.height(), cv.width(), uniform(rng, 2, 5));
      fill_box(cv, x0, y0, x1, y1, inside,
               [&](int y, int x) { return mix(a, b, 0.75 * coarse.at(y, x) + 0.25 * fine.at(y, x)); },
               sem, ood_label);
      break;
    }
    case TextureFamily::kPolygons: {
      const Color base = random_color(rng);
      fill_box(cv, x0, y0, x1, y1, inside, [&](int, int) { return base; }, sem, ood_label);
      const int count = uniform_int(rng, 5, 14);
      for (int i = 0; i < count; ++i) {
        const Color c = random_color(rng);
        const double cx = uniform(rng, x0, x1), cy = uniform(rng, y0, y1);
        const double r = uniform(rng, 0.1, 0.45) * std::max(box.width, box.height);
        const Polygon p = random_star(rng, cx, cy, r, r * uniform(rng, 0.5, 1.5), uniform_int(rng, 3, 6));
        fill_box(cv, x0, y0, x1, y1,
                 [&](int y, int x) { return inside(y, x) && p.contains(x + 0.5, y + 0.5); },
                 [&](int, int) { return c; }, sem, ood_label);
      }
      break;
    }
    case TextureFamily::kCheckers: {
      const Color a = random_color(rng), b = random_color(rng);
      const double size = uniform(rng, 4, 20);
      const double ang = uniform(rng, 0, std::numbers::pi);
      const double ca = std::cos(ang), sa = std::sin(ang);
      fill_box(cv, x0, y0, x1, y1, inside,
               [&](int y, int x) {
                 const double u = (x * ca + y * sa) / size, v = (-x * sa + y * ca) / size;
                 const bool odd = (static_cast<long>(std::floor(u)) + static_cast<long>(std::floor(v))) & 1;
                 return odd ? a : b;
               },
               sem, ood_label);
      break;
    }
    case TextureFamily::kBlobs: {
      const Color base = random_color(rng);
      fill_box(cv, x0, y0, x1, y1, inside, [&](int, int) { return base; }, sem, ood_label);
      const int count = uniform_int(rng, 6, 20);
      for (int i = 0; i < count; ++i) {
        const Color c = random_color(rng);
        const double cx = uniform(rng, x0, x1), cy = uniform(rng, y0, y1);
        const double r = uniform(rng, 0.04, 0.22) * std::max(box.width, box.height);
        auto e = ellipse_at(cy, cx, r * uniform(rng, 0.6, 1.4), r);
        fill_box(cv, x0, y0, x1, y1, [&](int y, int x) { return inside(y, x) && e(y, x); },
                 [&](int, int) { return c; }, sem, ood_label);
      }
      break;
    }
    case TextureFamily::kGradients: {
      const Color a = random_color(rng), b = random_color(rng);
      const double ang = uniform(rng, 0, 2 * std::numbers::pi);
      const double ca = std::cos(ang), sa = std::sin(ang);
      const double span = std::abs(ca) * box.width + std::abs(sa) * box.height + 1;
      const double wave = uniform(rng, 0.0, 0.15);
      fill_box(cv, x0, y0, x1, y1, inside,
               [&](int y, int x) {
                 double t = ((x - x0) * ca + (y - y0) * sa) / span;
                 t = t - std::floor(t);
                 t += wave * std::sin(0.3 * (x + y));
                 return mix(a, b, std::clamp(t, 0.0, 1.0));
               },
               sem, ood_label);
      break;
    }
  }
}

// Car occupying `box`: body, cabin with windows, two wheels.
void draw_car(Canvas& cv, const Box& box, Rng& rng, std::uint8_t sem, std::uint8_t ood_label) {
  static constexpr std::array<Color, 6> kPaints = {{{0.75f, 0.08f, 0.08f},
                                                    {0.10f, 0.20f, 0.65f},
                                                    {0.90f, 0.90f, 0.88f},
                                                    {0.08f, 0.08f, 0.09f},
                                                    {0.62f, 0.64f, 0.66f},
                                                    {0.85f, 0.70f, 0.10f}}};
  const Color paint = jitter(rng, kPaints[uniform_int(rng, 0, 5)], 0.05);
  const Color glass = jitter(rng, {0.16f, 0.22f, 0.30f}, 0.04);
  const Color tyre = {0.05f, 0.05f, 0.05f};
  const double x0 = box.x, y0 = box.y, w = box.width, h = box.height;
  const double body_top = y0 + 0.42 * h;
  const double wheel_r = 0.17 * h;
  // body
  fill_box(cv, box.x, static_cast<int>(body_top), box.x + box.width,
           static_cast<int>(y0 + h - wheel_r * 0.6), always, [&](int, int) { return paint; }, sem,
           ood_label);
  // cabin: trapezoid
  const double cab_l = x0 + 0.18 * w, cab_r = x0 + 0.82 * w, slope = 0.12 * w;
  fill_box(cv, box.x, box.y, box.x + box.width, static_cast<int>(body_top) + 1,
           [&](int y, int x) {
             const double t = (body_top - (y + 0.5)) / std::max(body_top - y0, 1.0);
             return x + 0.5 >= cab_l + slope * t && x + 0.5 <= cab_r - slope * t;
           },
           [&](int y, int x) {
             const double t = (body_top - (y + 0.5)) / std::max(body_top - y0, 1.0);
             const bool frame = t > 0.85 || std::abs(x + 0.5 - (x0 + 0.5 * w)) < 0.03 * w + 0.5;
             return frame ? paint : glass;
           },
           sem, ood_label);
  // wheels
  for (double fx : {0.22, 0.78}) {
    const double cx = x0 + fx * w, cy = y0 + h - wheel_r;
    fill_box(cv, std::max(box.x, static_cast<int>(cx - wheel_r) - 1),
             std::max(box.y, static_cast<int>(cy - wheel_r) - 1),
             std::min(box.x + box.width, static_cast<int>(cx + wheel_r) + 2),
             std::min(box.y + box.height, static_cast<int>(cy + wheel_r) + 2),
             ellipse_at(cy, cx, wheel_r, wheel_r), [&](int, int) { return tyre; }, sem, ood_label);
  }
}

void draw_person(Canvas& cv, const Box& box, Rng& rng, std::uint8_t sem) {
  const Color skin = jitter(rng, {0.80f, 0.62f, 0.50f}, 0.08);
  const Color shirt = jitter(rng, random_color(rng), 0.0);
  const Color trousers = jitter(rng, {0.15f, 0.17f, 0.28f}, 0.08);
  const double x0 = box.x, y0 = box.y, w = box.width, h = box.height;
  const double head_r = 0.10 * h;
  const double cx = x0 + 0.5 * w;
  fill_box(cv, box.x, box.y, box.x + box.width, static_cast<int>(y0 + 2 * head_r) + 2,
           ellipse_at(y0 + head_r, cx, head_r, std::min(head_r, 0.5 * w)),
           [&](int, int) { return skin; }, sem);
  fill_box(cv, static_cast<int>(x0 + 0.1 * w), static_cast<int>(y0 + 2 * head_r),
           static_cast<int>(x0 + 0.9 * w) + 1, static_cast<int>(y0 + 0.58 * h), always,
           [&](int, int) { return shirt; }, sem);
  fill_box(cv, static_cast<int>(x0 + 0.15 * w), static_cast<int>(y0 + 0.58 * h),
           static_cast<int>(x0 + 0.85 * w) + 1, box.y + box.height,
           [&](int, int x) { return std::abs(x + 0.5 - cx) > 0.06 * w; },
           [&](int, int) { return trousers; }, sem);
}

// Four-legged foreign shape with a fur-like texture.
void draw_animal(Canvas& cv, const Box& box, Rng& rng, std::uint8_t sem, std::uint8_t ood_label) {
  const Color fur_a = jitter(rng, {0.55f, 0.38f, 0.20f}, 0.10);
  const Color fur_b = jitter(rng, {0.30f, 0.20f, 0.10f}, 0.08);
  ValueNoise fur(rng, cv.height(), cv.width(), 2.5);
  auto shade = [&](int y, int x) { return mix(fur_a, fur_b, fur.at(y, x)); };
  const double x0 = box.x, y0 = box.y, w = box.width, h = box.height;
  const double body_cy = y0 + 0.42 * h, body_cx = x0 + 0.45 * w;
  fill_box(cv, box.x, box.y, box.x + box.width, box.y + box.height,
           ellipse_at(body_cy, body_cx, 0.22 * h, 0.36 * w), shade, sem, ood_label);
  fill_box(cv, box.x, box.y, box.x + box.width, box.y + box.height,
           ellipse_at(y0 + 0.22 * h, x0 + 0.84 * w, 0.16 * h, 0.14 * w), shade, sem, ood_label);
  for (double fx : {0.18, 0.32, 0.58, 0.70}) {
    fill_box(cv, static_cast<int>(x0 + fx * w), static_cast<int>(body_cy),
             static_cast<int>(x0 + (fx + 0.06) * w) + 1, box.y + box.height, always, shade, sem,
             ood_label);
  }
}

void add_noise(Image& image, Rng& rng, double sigma) {
  if (sigma <= 0) return;
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& v : image.data) v = clamp01(v + n(rng));
}

std::uint8_t cls(SceneClass c) { return static_cast<std::uint8_t>(c); }

Box random_bbox(Rng& rng, int height, int width, Range fraction) {
  const double total = static_cast<double>(height) * width;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double area = uniform(rng, fraction.lo, fraction.hi) * total;
    const double aspect = std::exp(uniform(rng, std::log(0.5), std::log(2.0)));
    int w = static_cast<int>(std::lround(std::sqrt(area * aspect)));
    w = std::clamp(w, 1, width);
    int h = std::clamp(static_cast<int>(std::lround(area / w)), 1, height);
    const double realized = static_cast<double>(w) * h / total;
    if (realized < fraction.lo || realized > fraction.hi) continue;
    return Box{uniform_int(rng, 0, width - w), uniform_int(rng, 0, height - h), w, h};
  }
  // Square fallback at the middle of the range always satisfies the bounds.
  const int side_h = std::clamp(static_cast<int>(std::lround(height * std::sqrt(0.5 * (fraction.lo + fraction.hi)))), 1, height);
  const int side_w = std::clamp(static_cast<int>(std::lround(width * std::sqrt(0.5 * (fraction.lo + fraction.hi)))), 1, width);
  return Box{(width - side_w) / 2, (height - side_h) / 2, side_w, side_h};
}

// Draws a background image into `cv` from the given families and returns the
// object metadata. `label_of` maps a family to the semantic label painted.
template <typename LabelOf>
BackgroundSample render_background(const WorldConfig& config, Rng& rng, int height, int width,
                                   const std::vector<TextureFamily>& families, LabelOf label_of,
                                   bool allow_car, bool dense_labels) {
  BackgroundSample out;
  out.sample.image = Image(3, height, width);
  out.object_mask = Grid2<std::uint8_t>(height, width, 0);
  SemanticMask sem(height, width, kIgnoreLabel);
  Canvas cv{out.sample.image};
  if (dense_labels) cv.semantic = &sem;

  const TextureFamily base = families[uniform_int(rng, 0, static_cast<int>(families.size()) - 1)];
  out.family = base;
  const Box full{0, 0, width, height};
  paint_texture(cv, full, base, rng, always, label_of(base), kNoLabel);

  out.bbox = random_bbox(rng, height, width, config.bbox_fraction);
  const Box& b = out.bbox;
  cv.coverage = &out.object_mask;
  out.car_object = allow_car && bernoulli(rng, config.car_leak);
  if (out.car_object) {
    draw_car(cv, b, rng, label_of(base), kNoLabel);
  } else {
    const TextureFamily obj = families[uniform_int(rng, 0, static_cast<int>(families.size()) - 1)];
    const double cx = b.x + 0.5 * b.width, cy = b.y + 0.5 * b.height;
    const int shape = uniform_int(rng, 0, 4);
    if (shape <= 1) {
      auto e = ellipse_at(cy, cx, 0.5 * b.height, 0.5 * b.width);
      paint_texture(cv, b, obj, rng, e, label_of(obj), kNoLabel);
    } else if (shape <= 3) {
      const Polygon p = random_star(rng, cx, cy, 0.5 * b.width, 0.5 * b.height, uniform_int(rng, 5, 9));
      paint_texture(cv, b, obj, rng, [&](int y, int x) { return p.contains(x + 0.5, y + 0.5); },
                    label_of(obj), kNoLabel);
    } else {
      paint_texture(cv, b, obj, rng, always, label_of(obj), kNoLabel);
    }
    // tiny objects can vanish under rasterization; make sure one pixel is set
    if (std::none_of(out.object_mask.data.begin(), out.object_mask.data.end(),
                     [](auto v) { return v != 0; })) {
      cv.put(b.y + b.height / 2, b.x + b.width / 2, random_color(rng), label_of(obj));
    }
  }
  cv.coverage = nullptr;
  add_noise(out.sample.image, rng, config.pixel_noise);
  if (dense_labels) out.sample.semantic = std::move(sem);
  return out;
}

void check_range(const Range& r, const char* name, double lo, double hi) {
  if (!(r.lo <= r.hi) || r.lo < lo || r.hi > hi) {
    throw world_error(std::string("range ") + name + " must satisfy " + std::to_string(lo) +
                      " <= lo <= hi <= " + std::to_string(hi));
  }
}

nlohmann::json range_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }

Range range_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw world_error("ranges are [lo, hi] arrays");
  return Range{j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

std::string_view texture_family_name(TextureFamily family) {
  switch (family) {
    case TextureFamily::kNoise: return "noise";
    case TextureFamily::kPolygons: return "polygons";
    case TextureFamily::kCheckers: return "checkers";
    case TextureFamily::kBlobs: return "blobs";
    case TextureFamily::kGradients: return "gradients";
  }
  return "noise";
}

TextureFamily parse_texture_family(std::string_view name) {
  for (auto f : {TextureFamily::kNoise, TextureFamily::kPolygons, TextureFamily::kCheckers,
                 TextureFamily::kBlobs, TextureFamily::kGradients}) {
    if (texture_family_name(f) == name) return f;
  }
  throw world_error("unknown texture family '" + std::string(name) + "'");
}

void WorldConfig::validate() const {
  if (inlier_height < kMinImageSide || inlier_width < kMinImageSide ||
      background_height < kMinImageSide || background_width < kMinImageSide) {
    throw world_error("scene sides must be at least 32 pixels");
  }
  if (class_count != kSceneClassCount) {
    throw world_error("the scene grammar renders exactly 8 classes; class_count must be 8");
  }
  check_range(sky_bottom, "sky_bottom", 0.05, 0.9);
  check_range(road_top, "road_top", 0.1, 0.95);
  if (road_top.lo <= sky_bottom.hi) throw world_error("road_top must lie below sky_bottom");
  check_range(car_width, "car_width", 0.01, 0.9);
  check_range(person_height, "person_height", 0.01, 0.9);
  check_range(bbox_fraction, "bbox_fraction", 0.0, 1.0);
  check_range(animal_width, "animal_width", 0.01, 0.9);
  if (bbox_fraction.lo <= 0) throw world_error("bbox_fraction must be positive");
  if (max_cars < 0 || max_persons < 0) throw world_error("object counts must be non-negative");
  auto prob = [](double p) { return p >= 0 && p <= 1; };
  if (!prob(no_car_probability) || !prob(car_leak) || !prob(animal_rate)) {
    throw world_error("probabilities must lie in [0,1]");
  }
  if (pixel_noise < 0 || color_jitter < 0) throw world_error("noise levels must be >= 0");
  if (background_families.empty()) throw world_error("background_families must be non-empty");
}

nlohmann::json to_json(const WorldConfig& c) {
  nlohmann::json j;
  j["inlier_height"] = c.inlier_height;
  j["inlier_width"] = c.inlier_width;
  j["background_height"] = c.background_height;
  j["background_width"] = c.background_width;
  j["class_count"] = c.class_count;
  j["sky_bottom"] = range_json(c.sky_bottom);
  j["road_top"] = range_json(c.road_top);
  j["car_width"] = range_json(c.car_width);
  j["person_height"] = range_json(c.person_height);
  j["max_cars"] = c.max_cars;
  j["max_persons"] = c.max_persons;
  j["no_car_probability"] = c.no_car_probability;
  j["pixel_noise"] = c.pixel_noise;
  j["color_jitter"] = c.color_jitter;
  auto fams = [](const std::vector<TextureFamily>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (auto f : v) a.push_back(texture_family_name(f));
    return a;
  };
  j["background_families"] = fams(c.background_families);
  j["bbox_fraction"] = range_json(c.bbox_fraction);
  j["car_leak"] = c.car_leak;
  j["animal_rate"] = c.animal_rate;
  j["animal_width"] = range_json(c.animal_width);
  j["seed"] = c.seed;
  return j;
}

WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  if (!j.is_object()) throw world_error("worldgen config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "inlier_height") c.inlier_height = v.get<int>();
      else if (key == "inlier_width") c.inlier_width = v.get<int>();
      else if (key == "background_height") c.background_height = v.get<int>();
      else if (key == "background_width") c.background_width = v.get<int>();
      else if (key == "class_count") c.class_count = v.get<int>();
      else if (key == "sky_bottom") c.sky_bottom = range_from(v);
      else if (key == "road_top") c.road_top = range_from(v);
      else if (key == "car_width") c.car_width = range_from(v);
      else if (key == "person_height") c.person_height = range_from(v);
      else if (key == "max_cars") c.max_cars = v.get<int>();
      else if (key == "max_persons") c.max_persons = v.get<int>();
      else if (key == "no_car_probability") c.no_car_probability = v.get<double>();
      else if (key == "pixel_noise") c.pixel_noise = v.get<double>();
      else if (key == "color_jitter") c.color_jitter = v.get<double>();
      else if (key == "bbox_fraction") c.bbox_fraction = range_from(v);
      else if (key == "car_leak") c.car_leak = v.get<double>();
      else if (key == "animal_rate") c.animal_rate = v.get<double>();
      else if (key == "animal_width") c.animal_width = range_from(v);
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "background_families") {
        c.background_families.clear();
        for (const auto& f : v) c.background_families.push_back(parse_texture_family(f.get<std::string>()));
      } else {
        throw world_error("unknown worldgen key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw world_error(std::string("worldgen config: ") + e.what());
  }
  c.validate();
  return c;
}

Sample gen_inlier_scene(const WorldConfig& config, std::uint64_t index) {
  Rng rng(derive_seed(config.seed, "worldgen.inlier", index));
  const int H = config.inlier_height, W = config.inlier_width;
  Sample s;
  s.id = "inlier_" + std::to_string(index);
  s.image = Image(3, H, W);
  s.semantic = SemanticMask(H, W, cls(SceneClass::kSky));
  s.ood = OodMask(H, W, kInlierLabel);
  Canvas cv{s.image};
  cv.semantic = &*s.semantic;
  cv.ood = &*s.ood;
  const double jit = config.color_jitter;

  const int sky_bottom = static_cast<int>(std::lround(uniform(rng, config.sky_bottom.lo, config.sky_bottom.hi) * H));
  const int road_top = static_cast<int>(std::lround(uniform(rng, config.road_top.lo, config.road_top.hi) * H));

  // sky
  const Color zenith = jitter(rng, {0.30f, 0.50f, 0.85f}, jit);
  const Color haze = jitter(rng, {0.75f, 0.82f, 0.92f}, jit);
  fill_box(cv, 0, 0, W, road_top, always,
           [&](int y, int) { return mix(zenith, haze, static_cast<double>(y) / std::max(road_top, 1)); },
           cls(SceneClass::kSky));

  // buildings along the horizon band
  for (int x = 0; x < W;) {
    const int bw = uniform_int(rng, W / 12, W / 4);
    if (bernoulli(rng, 0.8)) {
      const int top = std::clamp(sky_bottom + uniform_int(rng, -H / 10, H / 12), 1, road_top - 2);
      const Color wall = jitter(rng, bernoulli(rng, 0.5) ? Color{0.55f, 0.52f, 0.50f} : Color{0.62f, 0.48f, 0.38f}, jit);
      const Color window = jitter(rng, {0.20f, 0.24f, 0.30f}, 0.03);
      const int period = uniform_int(rng, 5, 9);
      fill_box(cv, x, top, x + bw, road_top, always,
               [&](int y, int xx) {
                 const bool win = ((y - top) % period) >= 2 && ((y - top) % period) < period - 1 &&
                                  ((xx - x) % period) >= 2 && ((xx - x) % period) < period - 1;
                 return win ? window : wall;
               },
               cls(SceneClass::kBuilding));
    }
    x += bw;
  }
  // vegetation
  const int trees = uniform_int(rng, 2, 6);
  for (int i = 0; i < trees; ++i) {
    const Color leaf = jitter(rng, {0.18f, 0.42f, 0.15f}, jit);
    const Color leaf_dark = jitter(rng, {0.10f, 0.28f, 0.08f}, jit);
    ValueNoise n(rng, H, W, 3.0);
    const double r = uniform(rng, 0.06, 0.18) * H * 1.5;
    const double cx = uniform(rng, 0, W);
    const double cy = road_top - uniform(rng, 0.3, 1.0) * r;
    auto e = ellipse_at(cy, cx, r, r * uniform(rng, 0.8, 1.4));
    fill_box(cv, static_cast<int>(cx - 2 * r), static_cast<int>(cy - r) - 1,
             static_cast<int>(cx + 2 * r) + 1, road_top, e,
             [&](int y, int x) { return mix(leaf, leaf_dark, n.at(y, x)); },
             cls(SceneClass::kVegetation));
  }

  // road and sidewalks
  const Color asphalt = jitter(rng, {0.30f, 0.30f, 0.32f}, jit * 0.6);
  const Color pavement = jitter(rng, {0.62f, 0.58f, 0.55f}, jit * 0.6);
  ValueNoise grain(rng, H, W, 2.0);
  const double walk_near = uniform(rng, 0.16, 0.26), walk_far = uniform(rng, 0.02, 0.08);
  const int road_h = std::max(H - road_top, 1);
  auto walk_width = [&](int y) {
    const double t = static_cast<double>(y - road_top) / road_h;
    return (walk_far + (walk_near - walk_far) * t) * W;
  };
  fill_box(cv, 0, road_top, W, H, always,
           [&](int y, int x) {
             const double ww = walk_width(y);
             const bool walk = x < ww || x >= W - ww;
             const Color& c = walk ? pavement : asphalt;
             return mix(c, {0, 0, 0}, 0.15 * grain.at(y, x));
           },
           cls(SceneClass::kRoad));
  fill_box(cv, 0, road_top, W, H,
           [&](int y, int x) { const double ww = walk_width(y); return x < ww || x >= W - ww; },
           [&](int y, int x) { return mix(pavement, {0, 0, 0}, 0.15 * grain.at(y, x)); },
           cls(SceneClass::kSidewalk));
  // dashed centre marking
  const Color paint = jitter(rng, {0.92f, 0.92f, 0.88f}, 0.03);
  const double centre = W * uniform(rng, 0.42, 0.58);
  const int dash = uniform_int(rng, 6, 12);
  fill_box(cv, 0, road_top, W, H,
           [&](int y, int x) {
             const double t = static_cast<double>(y - road_top) / road_h;
             const double half = 0.5 + 2.0 * t;
             return std::abs(x + 0.5 - centre) <= half && ((y - road_top) / dash) % 2 == 0;
           },
           [&](int, int) { return paint; }, cls(SceneClass::kMarking));

  // cars, far to near
  struct Placed { Box box; int kind; };
  std::vector<Placed> objects;
  int cars = 0;
  if (!bernoulli(rng, config.no_car_probability) && config.max_cars > 0) {
    cars = uniform_int(rng, 1, config.max_cars);
  }
  for (int i = 0; i < cars; ++i) {
    const double t = uniform(rng, 0.25, 1.0);
    const int bottom = road_top + static_cast<int>(t * (road_h - 1));
    const double wfrac = config.car_width.lo + (config.car_width.hi - config.car_width.lo) * t;
    const int cw = std::max(8, static_cast<int>(wfrac * W));
    const int ch = std::max(6, static_cast<int>(cw * uniform(rng, 0.50, 0.62)));
    const int cx = uniform_int(rng, static_cast<int>(walk_width(bottom)),
                               std::max(static_cast<int>(walk_width(bottom)), W - static_cast<int>(walk_width(bottom)) - cw));
    objects.push_back({Box{cx, bottom - ch + 1, cw, ch}, 0});
  }
  const int persons = config.max_persons > 0 ? uniform_int(rng, 0, config.max_persons) : 0;
  for (int i = 0; i < persons; ++i) {
    const double t = uniform(rng, 0.2, 1.0);
    const int bottom = road_top + static_cast<int>(t * (road_h - 1));
    const double hfrac = config.person_height.lo + (config.person_height.hi - config.person_height.lo) * t;
    const int ph = std::max(8, static_cast<int>(hfrac * H));
    const int pw = std::max(3, static_cast<int>(ph * 0.35));
    const int ww = static_cast<int>(walk_width(bottom));
    const bool left = bernoulli(rng, 0.5);
    const int px = left ? uniform_int(rng, 0, std::max(0, ww - pw)) : uniform_int(rng, std::min(W - pw, W - ww), W - pw);
    objects.push_back({Box{px, bottom - ph + 1, pw, ph}, 1});
  }
  if (config.animal_rate > 0 && bernoulli(rng, config.animal_rate)) {
    const double t = uniform(rng, 0.4, 1.0);
    const int bottom = road_top + static_cast<int>(t * (road_h - 1));
    const int aw = std::max(8, static_cast<int>(uniform(rng, config.animal_width.lo, config.animal_width.hi) * W));
    const int ah = std::max(6, static_cast<int>(aw * 0.7));
    objects.push_back({Box{uniform_int(rng, 0, W - aw), bottom - ah + 1, aw, ah}, 2});
  }
  std::stable_sort(objects.begin(), objects.end(), [](const Placed& a, const Placed& b) {
    return a.box.y + a.box.height < b.box.y + b.box.height;
  });
  for (const auto& o : objects) {
    if (o.kind == 0) {
      draw_car(cv, o.box, rng, cls(SceneClass::kCar), kInlierLabel);
    } else if (o.kind == 1) {
      draw_person(cv, o.box, rng, cls(SceneClass::kPerson));
      // persons cover animals drawn earlier; keep OOD labels in sync
      for (int y = std::max(o.box.y, 0); y < std::min(o.box.y + o.box.height, H); ++y) {
        for (int x = std::max(o.box.x, 0); x < std::min(o.box.x + o.box.width, W); ++x) {
          if (s.semantic->at(y, x) == cls(SceneClass::kPerson)) s.ood->at(y, x) = kInlierLabel;
        }
      }
    } else {
      draw_animal(cv, o.box, rng, kIgnoreLabel, kOutlierLabel);
    }
  }

  add_noise(s.image, rng, config.pixel_noise);
  return s;
}

BackgroundSample gen_background_image(const WorldConfig& config, std::uint64_t index) {
  Rng rng(derive_seed(config.seed, "worldgen.background", index));
  auto out = render_background(config, rng, config.background_height, config.background_width,
                               config.background_families,
                               [](TextureFamily) { return kIgnoreLabel; }, true, false);
  out.sample.id = "background_" + std::to_string(index);
  out.sample.ood = OodMask(config.background_height, config.background_width, kOutlierLabel);
  return out;
}

Sample gen_foreign_scene(const WorldConfig& config, std::uint64_t index) {
  Rng rng(derive_seed(config.seed, "worldgen.foreign", index));
  const int H = config.inlier_height, W = config.inlier_width;
  const double jit = config.color_jitter;
  auto label = [&](ForeignClass c) { return static_cast<std::uint8_t>(config.class_count + static_cast<int>(c)); };
  Sample s;
  s.id = "foreign_" + std::to_string(index);
  s.image = Image(3, H, W);
  s.semantic = SemanticMask(H, W, label(ForeignClass::kWall));
  s.ood = OodMask(H, W, kInlierLabel);
  Canvas cv{s.image};
  cv.semantic = &*s.semantic;

  static constexpr std::array<Color, 4> kWalls = {
      {{0.86f, 0.80f, 0.68f}, {0.78f, 0.80f, 0.80f}, {0.74f, 0.82f, 0.70f}, {0.88f, 0.74f, 0.70f}}};
  static constexpr std::array<Color, 3> kFloors = {{{0.52f, 0.34f, 0.18f}, {0.66f, 0.50f, 0.30f}, {0.45f, 0.45f, 0.47f}}};
  static constexpr std::array<Color, 4> kWood = {
      {{0.36f, 0.22f, 0.12f}, {0.90f, 0.90f, 0.88f}, {0.20f, 0.28f, 0.50f}, {0.55f, 0.18f, 0.15f}}};

  const int floor_top = static_cast<int>(std::lround(uniform(rng, 0.55, 0.72) * H));
  const Color wall = jitter(rng, kWalls[uniform_int(rng, 0, 3)], jit);
  const Color shade = mix(wall, {0.3f, 0.3f, 0.3f}, 0.25);
  fill_box(cv, 0, 0, W, floor_top, always,
           [&](int y, int) { return mix(shade, wall, 0.4 + 0.6 * y / std::max(floor_top, 1)); },
           label(ForeignClass::kWall));

  const Color plank = jitter(rng, kFloors[uniform_int(rng, 0, 2)], jit);
  const Color seam = mix(plank, {0.0f, 0.0f, 0.0f}, 0.35);
  const int plank_h = uniform_int(rng, 4, 8);
  ValueNoise grain(rng, H, W, 4.0);
  fill_box(cv, 0, floor_top, W, H, always,
           [&](int y, int x) {
             if ((y - floor_top) % plank_h == 0) return seam;
             return mix(plank, seam, 0.3 * grain.at(y, x));
           },
           label(ForeignClass::kFloor));

  // frames on the wall
  const int frames = uniform_int(rng, 0, 2);
  for (int i = 0; i < frames; ++i) {
    const int fw = uniform_int(rng, W / 12, W / 6), fh = uniform_int(rng, H / 10, H / 5);
    const int fx = uniform_int(rng, 0, W - fw), fy = uniform_int(rng, H / 20, std::max(H / 20, floor_top - fh - H / 10));
    const Color border = jitter(rng, kWood[uniform_int(rng, 0, 3)], jit);
    const Color canvas = jitter(rng, {0.70f, 0.66f, 0.55f}, 0.15);
    fill_box(cv, fx, fy, fx + fw, fy + fh, always,
             [&](int y, int x) {
               const bool edge = y - fy < 2 || fy + fh - 1 - y < 2 || x - fx < 2 || fx + fw - 1 - x < 2;
               return edge ? border : canvas;
             },
             label(ForeignClass::kFurniture));
  }
  // cabinets and tables standing on the floor line
  const int pieces = uniform_int(rng, 1, 3);
  for (int i = 0; i < pieces; ++i) {
    const int pw = uniform_int(rng, W / 8, W / 3);
    const int ph = uniform_int(rng, H / 5, H / 2);
    const int px = uniform_int(rng, -pw / 4, W - 3 * pw / 4);
    const int base = std::min(H, floor_top + uniform_int(rng, H / 20, H / 6));
    const Color body = jitter(rng, kWood[uniform_int(rng, 0, 3)], jit);
    const Color line = mix(body, {0.0f, 0.0f, 0.0f}, 0.45);
    if (bernoulli(rng, 0.5)) {
      const int drawers = uniform_int(rng, 2, 4);
      fill_box(cv, px, base - ph, px + pw, base, always,
               [&](int y, int x) {
                 const int rel = y - (base - ph);
                 const bool split = rel % std::max(ph / drawers, 1) == 0;
                 const bool knob = std::abs(x - (px + pw / 2)) <= 1 && rel % std::max(ph / drawers, 1) == ph / drawers / 2;
                 return split || knob ? line : body;
               },
               label(ForeignClass::kFurniture));
    } else {
      const int top_h = std::max(2, ph / 8);
      const int leg = std::max(2, pw / 12);
      fill_box(cv, px, base - ph, px + pw, base,
               [&](int y, int x) { return y < base - ph + top_h || x < px + leg || x >= px + pw - leg; },
               [&](int y, int) { return y < base - ph + top_h ? body : line; }, label(ForeignClass::kFurniture));
    }
  }
  add_noise(s.image, rng, config.pixel_noise);
  return s;
}

std::string_view world_kind_name(WorldKind kind) {
  switch (kind) {
    case WorldKind::kInlier: return "inlier";
    case WorldKind::kBackground: return "background";
    case WorldKind::kForeign: return "foreign";
  }
  return "inlier";
}

WorldKind parse_world_kind(std::string_view name) {
  if (name == "inlier") return WorldKind::kInlier;
  if (name == "background") return WorldKind::kBackground;
  if (name == "foreign") return WorldKind::kForeign;
  throw ConfigError("worldgen", "bad_kind", "unknown dataset kind '" + std::string(name) + "'");
}

double foreign_fraction(const Sample& sample) {
  if (!sample.ood) return 0.0;
  const auto n = std::count(sample.ood->data.begin(), sample.ood->data.end(), kOutlierLabel);
  return static_cast<double>(n) / static_cast<double>(sample.ood->size());
}

DatasetManifest gen_dataset(const WorldConfig& config, std::size_t n, WorldKind kind,
                            const fs::path& out_dir, std::uint64_t first_index) {
  config.validate();
  if (n < 1) throw ConfigError("worldgen", "bad_count", "dataset size must be at least 1");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw Error("worldgen", "io", "cannot create output directory '" + out_dir.string() + "'");
  }
  DatasetManifest m;
  m.name = std::string(world_kind_name(kind));
  m.seed = config.seed;
  m.generator = "dood-worldgen/1";
  m.base_dir = out_dir;
  m.records.resize(n);
  parallel_for(n, [&](std::size_t i) {
    switch (kind) {
      case WorldKind::kInlier: {
        Sample s = gen_inlier_scene(config, first_index + i);
        const double ff = foreign_fraction(s);
        nlohmann::json ext = {{"foreign_fraction", ff}};
        m.records[i] = save_sample(out_dir, s, ff > 0 ? Role::kMixed : Role::kInlier, ext);
        break;
      }
      case WorldKind::kBackground: {
        BackgroundSample b = gen_background_image(config, first_index + i);
        const std::string mask_path = "objects/" + b.sample.id + ".png";
        write_png_mask(out_dir / mask_path, b.object_mask);
        nlohmann::json ext = {{"bbox", {b.bbox.x, b.bbox.y, b.bbox.width, b.bbox.height}},
                              {"family", texture_family_name(b.family)},
                              {"car_object", b.car_object},
                              {"object_mask", mask_path}};
        m.records[i] = save_sample(out_dir, b.sample, Role::kOutlier, ext);
        break;
      }
      case WorldKind::kForeign: {
        Sample s = gen_foreign_scene(config, first_index + i);
        m.records[i] = save_sample(out_dir, s, Role::kInlier);
        break;
      }
    }
  });
  write_manifest(out_dir / "manifest.jsonl", m);
  return m;
}

double color_histogram_chi2(std::span<const Image> a, std::span<const Image> b) {
  auto hist = [](std::span<const Image> set) {
    std::vector<double> h(512, 0.0);
    double total = 0;
    for (const auto& img : set) {
      const std::size_t n = img.plane_size();
      for (std::size_t i = 0; i < n; ++i) {
        auto bin = [&](int c) { return std::min(7, static_cast<int>(img.data[c * n + i] * 8)); };
        h[(bin(0) * 8 + bin(1)) * 8 + bin(2)] += 1;
      }
      total += static_cast<double>(n);
    }
    for (auto& v : h) v /= std::max(total, 1.0);
    return h;
  };
  const auto ha = hist(a), hb = hist(b);
  double chi = 0;
  for (std::size_t i = 0; i < ha.size(); ++i) {
    const double s = ha[i] + hb[i];
    if (s > 0) chi += (ha[i] - hb[i]) * (ha[i] - hb[i]) / s;
  }
  return 0.5 * chi;
}

}  // namespace dood
