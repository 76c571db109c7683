#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dood/eval.hpp"
#include "dood/scoring.hpp"
#include "dood/synth.hpp"
#include "dood/train.hpp"
#include "dood/worldgen.hpp"
#include "json.hpp"

namespace dood {

struct SynthSection {
  std::optional<RecipeName> recipe;
  MixedOptions mixed;
};

struct ScoreSection {
  ScoreMethod method = ScoreMethod::kMaxSoftmax;
  ScoreOptions options;
  std::vector<double> epsilon_grid{0.0, 1e-3, 2e-3, 4e-3, 8e-3};
  std::vector<double> temperature_grid{1.0, 10.0, 100.0, 1000.0};
};

struct EvalSection {
  Protocol protocol = Protocol::kPixel;
  bool svg = true;
};

// Sizes and budgets of the desk-scale experiment matrix.
struct ExperimentSection {
  int train_images = 200;
  int background_images = 200;
  int foreign_images = 100;
  int wild_images = 40;
  int val_images = 20;
  int test_images = 40;
  int primary_epochs = 10;
  int discriminative_epochs = 10;
  int bbox_epochs = 20;
  bool train_all_layers = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  WorldConfig worldgen;
  SynthSection synth;
  TrainConfig train;
  ScoreSection score;
  EvalSection eval;
  ExperimentSection experiment;
};

// Schema check first (every violation listed), then module-level validation.
// The global seed fills worldgen.seed and train.seed unless they are given.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);

// Applies "section.key=value" (dotted path of any depth) to a config document.
// The value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& doc, std::string_view assignment);

// --- ODIN sweep ---------------------------------------------------------------------

struct OdinPoint {
  double epsilon = 0.0;
  double temperature = 1.0;
  double ap = 0.0;
};

struct OdinSweep {
  std::vector<OdinPoint> grid;  // epsilon-major order
  OdinPoint best;
};

// AP of ODIN scores on the validation samples' OOD masks for every grid point.
// Ties go to the smaller epsilon, then the smaller temperature.
OdinSweep sweep_odin(const ModelCheckpoint& ckpt, const std::vector<Sample>& validation,
                     const std::vector<double>& epsilons, const std::vector<double>& temperatures);
std::string render_odin_sweep(const OdinSweep& sweep);

// --- desk-scale ordering experiment ---------------------------------------------------

struct OrderingOptions {
  int train_images = 400;
  int background_images = 400;
  int foreign_images = 200;
  int val_images = 20;
  int test_images = 40;
  int primary_epochs = 10;
  int discriminative_epochs = 10;
  int bbox_epochs = 20;
  bool train_all_layers = true;
  WorldConfig world;
  TrainConfig train;
};

struct OrderingResult {
  // Negative-image protocol: test inliers vs held-out background images.
  double ap_max_softmax = 0.0;
  double ap_foreign = 0.0;
  double ap_discriminative = 0.0;
  // PascalVistas10 analogue.
  double pasted_whole = 0.0;
  double pasted_bbox = 0.0;
  // SelfToSelf analogue, pasted-region AP per method.
  double control_prevalence = 0.0;
  std::map<std::string, double> control_ap;
  double negative_seconds = 0.0;  // data, the three models and their scores
  double total_seconds = 0.0;
};

OrderingResult run_ordering_experiment(const OrderingOptions& options, std::uint64_t seed);

// --- table reproduction ---------------------------------------------------------------

// Inlier-world variants standing in for the three road-driving training sets.
WorldConfig city_world(const WorldConfig& base, std::uint64_t seed);
WorldConfig wild_world(const WorldConfig& base, std::uint64_t seed);
WorldConfig vistas_world(const WorldConfig& base, std::uint64_t seed);

// Generates the worlds, trains every model of the experiment matrix and writes
// one report directory per table analogue plus the ODIN sweep under out_dir.
// Returns the written reports by directory name.
std::map<std::string, EvalReport> reproduce_tables(const RunConfig& config, const std::filesystem::path& out_dir);

}  // namespace dood
