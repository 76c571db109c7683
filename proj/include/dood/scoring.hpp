#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <set>
#include <string_view>
#include <vector>

#include "dood/datamodel.hpp"
#include "dood/net.hpp"
#include "json.hpp"

namespace dood {

// Every scorer returns a map where larger means more likely OOD.

struct OdinConfig {
  double epsilon = 0.0;
  double temperature = 1.0;

  void validate() const;
};

// 1 - max_c softmax(z / T)_c per pixel.
ScoreMap score_tempered_softmax(const LogitMap& logits, double temperature);
ScoreMap score_max_softmax(const LogitMap& logits);

// Input perturbed by epsilon * sign(gradient of the winner log-probability at
// temperature T), clamped to [0, 1], then scored with score_tempered_softmax.
ScoreMap score_odin(const ModelCheckpoint& ckpt, const Image& image, const OdinConfig& config);
ScoreMap score_odin(const Fcn<float>& net, const Image& image, const OdinConfig& config);

ScoreMap score_confidence(const ConfidenceMap& confidence);

// Softmax probability of the outlier channel.
ScoreMap score_discriminative(const LogitMap& ood_logits);

enum class ForeignVariant { kSum, kWinner };
ScoreMap score_foreign_class(const LogitMap& logits, const std::set<int>& foreign_set,
                             ForeignVariant variant = ForeignVariant::kSum);

// H(mean_k p_k) - mean_k H(p_k), clipped at 0, over softmax samples.
ScoreMap mutual_information(const std::vector<LogitMap>& samples);
ScoreMap score_mc_mutual_info(const ModelCheckpoint& ckpt, const Image& image, int n_samples,
                              std::uint64_t seed);

enum class ScoreMethod { kMaxSoftmax, kOdin, kConfidence, kDiscriminative, kForeign, kMcMutualInfo };
std::string_view score_method_name(ScoreMethod method);
ScoreMethod parse_score_method(std::string_view name);

struct ScoreOptions {
  OdinConfig odin;
  std::set<int> foreign_set;
  ForeignVariant foreign_variant = ForeignVariant::kSum;
  int mc_samples = 8;
  std::uint64_t seed = 0;
};

// Runs the network head the method needs and scores one image.
ScoreMap score_image(ScoreMethod method, const Fcn<float>& net, const Image& image,
                     const ScoreOptions& options, std::uint64_t image_index = 0);

}  // namespace dood

namespace dood {

// Written by the score subcommand next to the .dosm files it lists.
struct ScoreManifest {
  std::string method;
  std::string dataset;                  // dataset manifest name
  std::string dataset_manifest;         // path of the scored dataset manifest
  nlohmann::json params = nlohmann::json::object();
  std::vector<std::pair<std::string, std::string>> entries;  // (record id, relative .dosm path)
  std::filesystem::path base_dir;       // not serialized

  bool operator==(const ScoreManifest& o) const {
    return method == o.method && dataset == o.dataset && dataset_manifest == o.dataset_manifest &&
           params == o.params && entries == o.entries;
  }
};

nlohmann::json to_json(const ScoreManifest& manifest);
ScoreManifest score_manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
void write_score_manifest(const std::filesystem::path& path, const ScoreManifest& manifest);
ScoreManifest read_score_manifest(const std::filesystem::path& path);

}  // namespace dood
