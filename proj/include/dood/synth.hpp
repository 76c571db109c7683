#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dood/datamodel.hpp"
#include "json.hpp"

namespace dood {

struct Patch {
  Image image;
  Grid2<std::uint8_t> alpha;  // 1 = opaque
  std::string source_id;

  long opaque_count() const;
  void validate() const;
};

enum class LabelPolicy { kOod, kId, kIgnoreOutsideBbox };
std::string_view label_policy_name(LabelPolicy policy);
LabelPolicy parse_label_policy(std::string_view name);

struct PasteRecipe {
  std::optional<double> coverage_target;  // resize so the patch covers this fraction
  std::optional<double> min_coverage;     // reject pastes below this fraction
  bool resize = false;
  LabelPolicy label_policy = LabelPolicy::kOod;

  void validate() const;
};

// Tight crop around a non-zero instance mask (same dims as the sample).
Patch extract_patch(const Sample& sample, const Grid2<std::uint8_t>& instance_mask);
// Full-rectangle patch.
Patch extract_patch(const Sample& sample, const Box& bbox);

struct PasteResult {
  Sample sample;
  Box placed;           // where the (resized) patch landed
  long opaque = 0;      // opaque pixels written
  Grid2<std::uint8_t> region;  // 1 under opaque patch pixels
};

// Pastes a hard-edged patch fully inside dest at a seeded uniform position.
// With resize, the patch is scaled (aspect kept, bilinear image, nearest alpha)
// to cover ceil(coverage_target * pixels) opaque pixels, up to +2%.
// Opaque pixels get the policy's OOD label and IGNORE semantics; kIgnoreOutsideBbox
// also sets every other pixel to IGNORE in the OOD mask.
PasteResult paste(const Sample& dest, const Patch& patch, const PasteRecipe& recipe, std::uint64_t seed);

// --- named recipes -----------------------------------------------------------

enum class RecipeName { kPascalVistas10, kPascalVistas1, kCityCity, kVistasCity, kSelfToSelf, kAnimals };
std::string_view recipe_name(RecipeName recipe);
RecipeName parse_recipe(std::string_view name);
PasteRecipe recipe_parameters(RecipeName recipe);
// Control recipes paste in-distribution content; their positives are only
// used for the control analysis.
bool is_control_recipe(RecipeName recipe);

// A patch source: an image plus the object region to cut out, when known.
struct SourceItem {
  Sample sample;
  std::optional<Grid2<std::uint8_t>> object_mask;
  std::optional<Box> bbox;
};

SourceItem load_source_item(const DatasetManifest& manifest, std::size_t index);
std::vector<SourceItem> load_source_items(const DatasetManifest& manifest);

// Connected (4-neighbour) components of the given semantic classes, largest first.
std::vector<Grid2<std::uint8_t>> instance_masks(const SemanticMask& semantic,
                                                const std::vector<int>& classes, long min_pixels);

// Classes treated as pasteable object instances in inlier scenes (car, person).
const std::vector<int>& instance_classes();

struct PastedSample {
  Sample sample;
  std::optional<Grid2<std::uint8_t>> control_mask;  // control recipes: pasted ID region
  nlohmann::json ext;
};

// Test-set construction in memory. Patch i goes to dest i mod |dests|; SelfToSelf
// takes its patch from the destination itself; Animals selects dests whose OOD
// pixels (foreign animals) cover at least 0.7%.
std::vector<PastedSample> build_pasted_testset(const std::vector<Sample>& dests,
                                               const std::vector<SourceItem>& sources, RecipeName recipe,
                                               std::uint64_t seed);

DatasetManifest build_pasted_testset(const DatasetManifest& dest_manifest,
                                     const DatasetManifest* patch_source_manifest, RecipeName recipe,
                                     std::uint64_t seed, const std::filesystem::path& out_dir);

// --- mixed training set ----------------------------------------------------------

struct MixedOptions {
  double paste_fraction = 0.5;
  double paste_coverage = 0.05;
  int shorter_side = 128;  // 0 keeps native sizes
};

// Each background item is used exactly once: pasted (bbox content, resized to
// paste_coverage) onto a random inlier scene, or whole with the bbox OOD and
// the rest IGNORE. Output ids equal background ids.
std::vector<PastedSample> build_mixed_training_set(const std::vector<Sample>& inliers,
                                                   const std::vector<SourceItem>& background,
                                                   const MixedOptions& options, std::uint64_t seed);

DatasetManifest build_mixed_training_set(const DatasetManifest& inlier_manifest,
                                         const DatasetManifest& background_manifest,
                                         const MixedOptions& options, std::uint64_t seed,
                                         const std::filesystem::path& out_dir);

}  // namespace dood
