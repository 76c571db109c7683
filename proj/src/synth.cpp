#include "dood/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "dood/error.hpp"
#include "dood/parallel.hpp"
#include "dood/random.hpp"
#include "dood/worldgen.hpp"

namespace dood {

namespace {

Error synth_error(const std::string& code, const std::string& msg) { return Error("synth", code, msg); }

constexpr double kCoverageSlack = 1.02;

}  // namespace

long Patch::opaque_count() const {
  return static_cast<long>(std::count_if(alpha.data.begin(), alpha.data.end(), [](auto v) { return v != 0; }));
}

void Patch::validate() const {
  if (alpha.height != image.height || alpha.width != image.width) {
    throw synth_error("bad_patch", "alpha dims differ from patch image dims");
  }
  if (opaque_count() < 1) throw synth_error("bad_patch", "patch has no opaque pixel");
}

std::string_view label_policy_name(LabelPolicy policy) {
  switch (policy) {
    case LabelPolicy::kOod: return "ood";
    case LabelPolicy::kId: return "id";
    case LabelPolicy::kIgnoreOutsideBbox: return "ignore_outside_bbox";
  }
  return "ood";
}

LabelPolicy parse_label_policy(std::string_view name) {
  for (auto p : {LabelPolicy::kOod, LabelPolicy::kId, LabelPolicy::kIgnoreOutsideBbox}) {
    if (label_policy_name(p) == name) return p;
  }
  throw ConfigError("synth", "bad_config", "unknown label policy '" + std::string(name) + "'");
}

void PasteRecipe::validate() const {
  auto bad = [](const std::string& m) { return ConfigError("synth", "bad_config", m); };
  if (coverage_target.has_value() == min_coverage.has_value()) {
    throw bad("exactly one of coverage_target / min_coverage must be set");
  }
  if (coverage_target && !(*coverage_target > 0 && *coverage_target < 1)) throw bad("coverage_target must be in (0, 1)");
  if (min_coverage && !(*min_coverage > 0 && *min_coverage < 1)) throw bad("min_coverage must be in (0, 1)");
  if (resize != coverage_target.has_value()) throw bad("resize goes with coverage_target");
}

Patch extract_patch(const Sample& sample, const Grid2<std::uint8_t>& instance_mask) {
  if (instance_mask.height != sample.height() || instance_mask.width != sample.width()) {
    throw synth_error("bad_region", "instance mask dims differ from the sample");
  }
  int y0 = sample.height(), y1 = -1, x0 = sample.width(), x1 = -1;
  for (int y = 0; y < instance_mask.height; ++y) {
    for (int x = 0; x < instance_mask.width; ++x) {
      if (instance_mask.at(y, x)) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
    }
  }
  if (y1 < 0) throw synth_error("empty_region", "instance mask is empty");
  Patch p;
  p.source_id = sample.id;
  p.image = Image(3, y1 - y0 + 1, x1 - x0 + 1);
  p.alpha = Grid2<std::uint8_t>(y1 - y0 + 1, x1 - x0 + 1);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      for (int c = 0; c < 3; ++c) p.image.at(c, y - y0, x - x0) = sample.image.at(c, y, x);
      p.alpha.at(y - y0, x - x0) = instance_mask.at(y, x) ? 1 : 0;
    }
  }
  return p;
}

Patch extract_patch(const Sample& sample, const Box& bbox) {
  if (bbox.width < 1 || bbox.height < 1) throw synth_error("empty_region", "bounding box is empty");
  if (bbox.x < 0 || bbox.y < 0 || bbox.x + bbox.width > sample.width() || bbox.y + bbox.height > sample.height()) {
    throw synth_error("bad_region", "bounding box leaves the sample");
  }
  Patch p;
  p.source_id = sample.id;
  p.image = Image(3, bbox.height, bbox.width);
  p.alpha = Grid2<std::uint8_t>(bbox.height, bbox.width, 1);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < bbox.height; ++y) {
      for (int x = 0; x < bbox.width; ++x) p.image.at(c, y, x) = sample.image.at(c, bbox.y + y, bbox.x + x);
    }
  }
  return p;
}

namespace {

Patch scaled_patch(const Patch& patch, int h, int w) {
  Patch out;
  out.source_id = patch.source_id;
  out.image = resize_bilinear(patch.image, h, w);
  out.alpha = resize_nearest(patch.alpha, h, w);
  return out;
}

// Smallest aspect-preserving size reaching `target` opaque pixels; anything
// above `cap` is trimmed back to `target` from the bottom rows.
Patch resize_to_coverage(const Patch& patch, long target, long cap, int max_h, int max_w) {
  const double aspect = static_cast<double>(patch.image.width) / patch.image.height;
  const double grow = std::sqrt(static_cast<double>(target) / static_cast<double>(patch.opaque_count()));
  auto width_for = [&](int h) { return std::max(1, static_cast<int>(std::lround(h * aspect))); };
  auto infeasible = [&]() {
    return synth_error("recipe_infeasible", "patch '" + patch.source_id + "' cannot cover " +
                                                std::to_string(target) + " px inside " +
                                                std::to_string(max_h) + "x" + std::to_string(max_w));
  };
  int h = std::max(1, static_cast<int>(std::floor(0.8 * patch.image.height * grow)));
  while (h > 1 && scaled_patch(patch, h, width_for(h)).opaque_count() >= target) --h;
  Patch best;
  for (;; ++h) {
    const int w = width_for(h);
    if (h > max_h || w > max_w) throw infeasible();
    best = scaled_patch(patch, h, w);
    if (best.opaque_count() >= target) break;
  }
  long excess = best.opaque_count() - target;
  if (best.opaque_count() > cap) {
    for (int y = best.alpha.height - 1; y >= 0 && excess > 0; --y) {
      for (int x = best.alpha.width - 1; x >= 0 && excess > 0; --x) {
        if (best.alpha.at(y, x)) {
          best.alpha.at(y, x) = 0;
          --excess;
        }
      }
    }
  }
  return best;
}

}  // namespace

PasteResult paste(const Sample& dest, const Patch& patch, const PasteRecipe& recipe, std::uint64_t seed) {
  recipe.validate();
  patch.validate();
  const long pixels = static_cast<long>(dest.height()) * dest.width();
  Patch p = patch;
  if (recipe.resize) {
    const double exact = *recipe.coverage_target * static_cast<double>(pixels);
    const long target = static_cast<long>(std::ceil(exact - 1e-9));
    const long cap = std::max(target, static_cast<long>(std::floor(kCoverageSlack * exact)));
    p = resize_to_coverage(patch, target, cap, dest.height(), dest.width());
  }
  if (p.image.height > dest.height() || p.image.width > dest.width()) {
    throw synth_error("recipe_infeasible", "patch '" + p.source_id + "' larger than destination");
  }
  const long opaque = p.opaque_count();
  if (recipe.min_coverage && static_cast<double>(opaque) < *recipe.min_coverage * static_cast<double>(pixels)) {
    throw synth_error("below_min_coverage", "patch '" + p.source_id + "' covers " + std::to_string(opaque) +
                                                " of " + std::to_string(pixels) + " px");
  }
  Rng rng(derive_seed(seed, "synth.place"));
  const int x0 = uniform_int(rng, 0, dest.width() - p.image.width);
  const int y0 = uniform_int(rng, 0, dest.height() - p.image.height);

  PasteResult out;
  out.sample = dest;
  Sample& s = out.sample;
  if (!s.ood) s.ood = OodMask(dest.height(), dest.width(), kInlierLabel);
  if (recipe.label_policy == LabelPolicy::kIgnoreOutsideBbox) {
    std::fill(s.ood->data.begin(), s.ood->data.end(), kIgnoreLabel);
  }
  const std::uint8_t label = recipe.label_policy == LabelPolicy::kId ? kInlierLabel : kOutlierLabel;
  out.region = Grid2<std::uint8_t>(dest.height(), dest.width(), 0);
  for (int y = 0; y < p.image.height; ++y) {
    for (int x = 0; x < p.image.width; ++x) {
      if (!p.alpha.at(y, x)) continue;
      const int dy = y0 + y, dx = x0 + x;
      for (int c = 0; c < 3; ++c) s.image.at(c, dy, dx) = p.image.at(c, y, x);
      s.ood->at(dy, dx) = label;
      if (s.semantic) s.semantic->at(dy, dx) = kIgnoreLabel;
      out.region.at(dy, dx) = 1;
    }
  }
  out.placed = Box{x0, y0, p.image.width, p.image.height};
  out.opaque = opaque;
  return out;
}

// --- recipes ---------------------------------------------------------------------

std::string_view recipe_name(RecipeName recipe) {
  switch (recipe) {
    case RecipeName::kPascalVistas10: return "PascalVistas10";
    case RecipeName::kPascalVistas1: return "PascalVistas1";
    case RecipeName::kCityCity: return "CityCity";
    case RecipeName::kVistasCity: return "VistasCity";
    case RecipeName::kSelfToSelf: return "SelfToSelf";
    case RecipeName::kAnimals: return "Animals";
  }
  return "PascalVistas10";
}

RecipeName parse_recipe(std::string_view name) {
  for (auto r : {RecipeName::kPascalVistas10, RecipeName::kPascalVistas1, RecipeName::kCityCity,
                 RecipeName::kVistasCity, RecipeName::kSelfToSelf, RecipeName::kAnimals}) {
    if (recipe_name(r) == name) return r;
  }
  throw ConfigError("synth", "unknown_recipe", "unknown recipe '" + std::string(name) + "'");
}

PasteRecipe recipe_parameters(RecipeName recipe) {
  PasteRecipe r;
  switch (recipe) {
    case RecipeName::kPascalVistas10:
      r.coverage_target = 0.10;
      r.resize = true;
      break;
    case RecipeName::kPascalVistas1:
      r.min_coverage = 0.01;
      break;
    case RecipeName::kCityCity:
    case RecipeName::kVistasCity:
    case RecipeName::kSelfToSelf:
      r.min_coverage = 0.005;
      r.label_policy = LabelPolicy::kId;
      break;
    case RecipeName::kAnimals:
      r.min_coverage = 0.007;
      break;
  }
  return r;
}

bool is_control_recipe(RecipeName recipe) {
  return recipe == RecipeName::kCityCity || recipe == RecipeName::kVistasCity || recipe == RecipeName::kSelfToSelf;
}

const std::vector<int>& instance_classes() {
  static const std::vector<int> classes{static_cast<int>(SceneClass::kCar), static_cast<int>(SceneClass::kPerson)};
  return classes;
}

std::vector<Grid2<std::uint8_t>> instance_masks(const SemanticMask& semantic, const std::vector<int>& classes,
                                                long min_pixels) {
  const int H = semantic.height, W = semantic.width;
  Grid2<int> comp(H, W, -1);
  std::vector<std::pair<long, Grid2<std::uint8_t>>> found;
  std::vector<std::pair<int, int>> stack;
  auto wanted = [&](int y, int x) {
    return std::find(classes.begin(), classes.end(), semantic.at(y, x)) != classes.end();
  };
  int next = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (comp.at(y, x) >= 0 || !wanted(y, x)) continue;
      const int cls = semantic.at(y, x);
      Grid2<std::uint8_t> mask(H, W, 0);
      long count = 0;
      stack.assign(1, {y, x});
      comp.at(y, x) = next;
      while (!stack.empty()) {
        const auto [cy, cx] = stack.back();
        stack.pop_back();
        mask.at(cy, cx) = 1;
        ++count;
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
          if (comp.at(ny, nx) >= 0 || semantic.at(ny, nx) != cls) continue;
          comp.at(ny, nx) = next;
          stack.push_back({ny, nx});
        }
      }
      ++next;
      if (count >= min_pixels) found.emplace_back(count, std::move(mask));
    }
  }
  std::stable_sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<Grid2<std::uint8_t>> out;
  for (auto& f : found) out.push_back(std::move(f.second));
  return out;
}

SourceItem load_source_item(const DatasetManifest& manifest, std::size_t index) {
  SourceItem item;
  item.sample = load_sample(manifest, index);
  const auto& ext = manifest.records[index].ext;
  if (ext.is_object()) {
    if (ext.contains("object_mask")) {
      auto m = read_png_mask(resolve(manifest, ext["object_mask"].get<std::string>()));
      for (auto& v : m.data) v = v ? 1 : 0;
      item.object_mask = std::move(m);
    }
    if (ext.contains("bbox")) {
      const auto b = ext["bbox"].get<std::vector<int>>();
      if (b.size() != 4) throw synth_error("bad_bbox", "record '" + item.sample.id + "' bbox needs 4 numbers");
      item.bbox = Box{b[0], b[1], b[2], b[3]};
    }
  }
  return item;
}

std::vector<SourceItem> load_source_items(const DatasetManifest& manifest) {
  std::vector<SourceItem> out(manifest.size());
  parallel_for(manifest.size(), [&](std::size_t i) { out[i] = load_source_item(manifest, i); });
  return out;
}

namespace {

std::string output_id(RecipeName recipe, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "-%05zu", i);
  return std::string(recipe_name(recipe)) + buf;
}

nlohmann::json box_json(const Box& b) { return nlohmann::json::array({b.x, b.y, b.width, b.height}); }

struct Attempt {
  std::optional<PastedSample> result;
  std::string reject;
};

}  // namespace

std::vector<PastedSample> build_pasted_testset(const std::vector<Sample>& dests,
                                               const std::vector<SourceItem>& sources, RecipeName recipe,
                                               std::uint64_t seed) {
  const PasteRecipe params = recipe_parameters(recipe);
  if (dests.empty()) throw synth_error("empty_input", "no destination images");
  const bool self = recipe == RecipeName::kSelfToSelf;
  const bool animals = recipe == RecipeName::kAnimals;
  const std::size_t n = self || animals ? dests.size() : sources.size();
  if (n == 0) throw synth_error("empty_input", "no patch sources");
  std::vector<Attempt> attempts(n);

  parallel_for(n, [&](std::size_t i) {
    Attempt& a = attempts[i];
    const std::uint64_t item_seed = derive_seed(seed, "synth.testset", i);
    const Sample& dest = dests[i % dests.size()];
    const long pixels = static_cast<long>(dest.height()) * dest.width();
    const auto min_pixels = static_cast<long>(std::ceil(params.min_coverage.value_or(0.0) * static_cast<double>(pixels)));
    if (animals) {
      const double frac = foreign_fraction(dest);
      if (frac == 0.0) {
        a.reject = "no_foreign_object";
      } else if (frac < *params.min_coverage) {
        a.reject = "below_min_coverage";
      } else {
        PastedSample ps{dest, std::nullopt, {{"recipe", recipe_name(recipe)}, {"dest_id", dest.id}, {"coverage", frac}}};
        ps.sample.id = output_id(recipe, i);
        a.result = std::move(ps);
      }
      return;
    }
    Patch patch;
    std::string source_id;
    try {
      Rng rng(derive_seed(item_seed, "synth.instance"));
      if (self || is_control_recipe(recipe)) {
        const Sample& src = self ? dest : sources[i].sample;
        if (!src.semantic) {
          a.reject = "no_semantic_mask";
          return;
        }
        const auto masks = instance_masks(*src.semantic, instance_classes(), std::max(1L, min_pixels));
        if (masks.empty()) {
          a.reject = "below_min_coverage";
          return;
        }
        patch = extract_patch(src, masks[uniform_int(rng, 0, static_cast<int>(masks.size()) - 1)]);
      } else {
        const SourceItem& src = sources[i];
        if (src.object_mask) {
          patch = extract_patch(src.sample, *src.object_mask);
        } else if (src.bbox) {
          patch = extract_patch(src.sample, *src.bbox);
        } else {
          a.reject = "no_object_region";
          return;
        }
      }
      source_id = patch.source_id;
      PasteResult r = paste(dest, patch, params, derive_seed(item_seed, "synth.paste"));
      PastedSample ps;
      ps.sample = std::move(r.sample);
      ps.sample.id = output_id(recipe, i);
      ps.ext = {{"recipe", recipe_name(recipe)},
                {"source_id", source_id},
                {"dest_id", dest.id},
                {"placed", box_json(r.placed)},
                {"coverage", static_cast<double>(r.opaque) / static_cast<double>(pixels)}};
      if (is_control_recipe(recipe)) ps.control_mask = std::move(r.region);
      a.result = std::move(ps);
    } catch (const Error& e) {
      if (e.module() != "synth") throw;
      a.reject = e.code();
    }
  });

  std::vector<PastedSample> out;
  std::map<std::string, int> reasons;
  for (auto& a : attempts) {
    if (a.result) {
      out.push_back(std::move(*a.result));
    } else {
      ++reasons[a.reject];
    }
  }
  if (out.empty()) {
    std::string msg = std::string(recipe_name(recipe)) + ": no accepted pairs (";
    bool first = true;
    for (const auto& [r, c] : reasons) {
      msg += (first ? "" : ", ") + r + "=" + std::to_string(c);
      first = false;
    }
    throw synth_error("recipe_infeasible", msg + ")");
  }
  return out;
}

namespace {

DatasetManifest write_outputs(std::vector<PastedSample>& items, const std::string& name, std::uint64_t seed,
                              const std::filesystem::path& out_dir) {
  DatasetManifest m;
  m.name = name;
  m.seed = seed;
  m.generator = "dood-synth/1";
  m.base_dir = out_dir;
  m.records.resize(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    auto& it = items[i];
    nlohmann::json ext = it.ext;
    if (it.control_mask) {
      const std::string rel = "control/" + it.sample.id + ".png";
      write_png_mask(out_dir / rel, *it.control_mask);
      ext["control_mask"] = rel;
    }
    m.records[i] = save_sample(out_dir, it.sample, Role::kMixed, ext);
  });
  write_manifest(out_dir / "manifest.jsonl", m);
  return m;
}

}  // namespace

DatasetManifest build_pasted_testset(const DatasetManifest& dest_manifest, const DatasetManifest* patch_source_manifest,
                                     RecipeName recipe, std::uint64_t seed, const std::filesystem::path& out_dir) {
  const auto dests = load_all(dest_manifest);
  std::vector<SourceItem> sources;
  if (recipe != RecipeName::kSelfToSelf && recipe != RecipeName::kAnimals) {
    if (!patch_source_manifest) {
      throw ConfigError("synth", "missing_source", std::string(recipe_name(recipe)) + " needs a patch source manifest");
    }
    sources = load_source_items(*patch_source_manifest);
  }
  auto items = build_pasted_testset(dests, sources, recipe, seed);
  return write_outputs(items, std::string(recipe_name(recipe)), seed, out_dir);
}

std::vector<PastedSample> build_mixed_training_set(const std::vector<Sample>& inliers,
                                                   const std::vector<SourceItem>& background,
                                                   const MixedOptions& options, std::uint64_t seed) {
  if (!(options.paste_fraction >= 0 && options.paste_fraction <= 1)) {
    throw ConfigError("synth", "bad_config", "paste_fraction must be in [0, 1]");
  }
  if (!(options.paste_coverage > 0 && options.paste_coverage < 1)) {
    throw ConfigError("synth", "bad_config", "paste_coverage must be in (0, 1)");
  }
  if (options.shorter_side < 0) throw ConfigError("synth", "bad_config", "shorter_side must be >= 0");
  for (const auto& s : inliers) {
    if (foreign_fraction(s) > 0) {
      throw synth_error("flagged_inlier", "inlier sample '" + s.id + "' contains foreign objects");
    }
  }
  for (const auto& b : background) {
    if (!b.bbox) throw synth_error("missing_bbox", "background record '" + b.sample.id + "' has no bbox");
  }
  if (options.paste_fraction > 0 && inliers.empty()) throw synth_error("empty_input", "no inlier images to paste onto");

  PasteRecipe recipe;
  recipe.coverage_target = options.paste_coverage;
  recipe.resize = true;
  std::vector<PastedSample> out(background.size());
  parallel_for(background.size(), [&](std::size_t i) {
    const SourceItem& bg = background[i];
    const std::uint64_t item_seed = derive_seed(seed, "synth.mixed", i);
    Rng rng(item_seed);
    const bool pasted = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < options.paste_fraction;
    PastedSample ps;
    if (pasted) {
      const Sample& dest = inliers[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(inliers.size()) - 1))];
      PasteResult r = paste(dest, extract_patch(bg.sample, *bg.bbox), recipe, derive_seed(item_seed, "synth.paste"));
      ps.sample = std::move(r.sample);
      ps.ext = {{"mode", "pasted"}, {"source_id", bg.sample.id}, {"dest_id", dest.id}, {"placed", box_json(r.placed)}};
    } else {
      ps.sample = bg.sample;
      ps.sample.semantic.reset();
      OodMask ood(bg.sample.height(), bg.sample.width(), kIgnoreLabel);
      const Box& b = *bg.bbox;
      for (int y = b.y; y < b.y + b.height; ++y) {
        for (int x = b.x; x < b.x + b.width; ++x) ood.at(y, x) = kOutlierLabel;
      }
      ps.sample.ood = std::move(ood);
      ps.ext = {{"mode", "whole"}, {"source_id", bg.sample.id}, {"bbox", box_json(b)}};
    }
    ps.sample.id = bg.sample.id;
    if (options.shorter_side > 0 && std::min(ps.sample.height(), ps.sample.width()) != options.shorter_side) {
      ps.sample = resize(ps.sample, options.shorter_side);
    }
    out[i] = std::move(ps);
  });
  return out;
}

DatasetManifest build_mixed_training_set(const DatasetManifest& inlier_manifest,
                                         const DatasetManifest& background_manifest, const MixedOptions& options,
                                         std::uint64_t seed, const std::filesystem::path& out_dir) {
  for (const auto& r : inlier_manifest.records) {
    const bool flagged = r.role != Role::kInlier ||
                         (r.ext.is_object() && r.ext.value("foreign_fraction", 0.0) > 0.0);
    if (flagged) throw synth_error("flagged_inlier", "inlier record '" + r.id + "' is flagged as containing foreign objects");
  }
  auto items = build_mixed_training_set(load_all(inlier_manifest), load_source_items(background_manifest), options, seed);
  return write_outputs(items, "mixed-" + background_manifest.name, seed, out_dir);
}

}  // namespace dood
