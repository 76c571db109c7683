#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dood/datamodel.hpp"
#include "dood/net.hpp"
#include "json.hpp"

namespace dood {

// --- losses ---------------------------------------------------------------------
// Every loss is a mean over non-IGNORE pixels; an all-IGNORE target gives 0
// with zero gradient. Gradients are of the returned value.

template <typename T>
struct LossGrad {
  double value = 0.0;
  std::size_t counted = 0;  // non-IGNORE pixels
  Tensor3<T> d_logits;
  Tensor3<T> d_confidence;  // confidence_loss only, (1, H, W)
};

template <typename T>
LossGrad<T> ce_loss(const Tensor3<T>& logits, const SemanticMask& target);

// p' = c * softmax(z) + (1 - c) * onehot(t);  loss = mean(-log p'_t) + lambda * mean(-log c).
template <typename T>
LossGrad<T> confidence_loss(const Tensor3<T>& logits, const Tensor3<T>& confidence,
                            const SemanticMask& target, double lambda);
LossGrad<float> confidence_loss(const LogitMap& logits, const ConfidenceMap& confidence,
                                const SemanticMask& target, double lambda);

template <typename T>
LossGrad<T> ood_loss(const Tensor3<T>& ood_logits, const OodMask& target);

// --- configuration ------------------------------------------------------------------

enum class TrainMode { kPrimary, kConfidence, kDiscriminative };
std::string_view train_mode_name(TrainMode mode);
TrainMode parse_train_mode(std::string_view name);

struct TrainConfig {
  int epochs = 30;  // upper bound; discriminative runs may stop early
  int batch_size = 4;
  double lr = 2e-3;
  double lr_decay = 0.95;          // multiplied in after every epoch
  double backbone_lr_ratio = 4.0;  // backbone lr = lr / ratio when starting from an init checkpoint
  int crop_size = 64;
  double scale = 1.0;              // resize factor applied when samples are loaded
  std::uint64_t seed = 0;
  std::optional<std::set<std::string>> trainable;  // default: all groups, or ood_default
  double lambda = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double target_accuracy = 0.99;
  bool flip = true;  // random horizontal flips
  FcnConfig net;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
// Missing keys keep their defaults; unknown keys are a configuration error.
TrainConfig train_config_from_json(const nlohmann::json& j);

// --- epoch planning --------------------------------------------------------------------

enum class Source { kInlier = 0, kBackground = 1 };

struct PlanEntry {
  Source source = Source::kInlier;
  std::size_t index = 0;
  std::uint64_t crop_seed = 0;
  bool operator==(const PlanEntry&) const = default;
};

struct BatchPlan {
  std::vector<std::vector<PlanEntry>> batches;
  std::size_t entry_count() const;
  bool operator==(const BatchPlan&) const = default;
};

// Shuffled single-source epoch.
BatchPlan plan_epoch(std::size_t count, int batch_size, std::uint64_t seed);

// The smaller set is cycled, reshuffled per cycle, to the larger set's length;
// entries alternate inlier / background so every batch is half and half.
// batch_size must be even.
BatchPlan plan_oversampled_epoch(std::size_t inlier_count, std::size_t background_count,
                                 int batch_size, std::uint64_t seed);
BatchPlan plan_oversampled_epoch(const DatasetManifest& inlier, const DatasetManifest& background,
                                 int batch_size, std::uint64_t seed);

// Crop (and optional flip) used for a plan entry.
Sample training_crop(const Sample& sample, int crop_size, std::uint64_t crop_seed, bool flip);

// --- optimizer -------------------------------------------------------------------------

class Adam {
 public:
  Adam(std::size_t size, double beta1, double beta2, double eps);
  // Applies one step; lr[i] is the per-parameter learning rate (0 = frozen).
  void step(std::vector<float>& params, const std::vector<double>& grad, const std::vector<float>& lr);

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

// --- training ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_accuracy;
};

struct TrainResult {
  ModelCheckpoint checkpoint;
  std::vector<EpochStats> history;
  bool stopped_early = false;
};

// Semantic pixel accuracy over non-IGNORE pixels.
double segmentation_accuracy(const ModelCheckpoint& ckpt, const std::vector<Sample>& samples);
// Discriminative OOD accuracy at threshold 0.5 over non-IGNORE pixels.
double ood_accuracy(const ModelCheckpoint& ckpt, const std::vector<Sample>& samples);

// With init, training starts from its parameters (copied into the groups the
// new config shares by name) and the backbone learns at lr / backbone_lr_ratio.
TrainResult train_primary(const TrainConfig& config, const std::vector<Sample>& train,
                          const std::vector<Sample>& validation = {},
                          const std::optional<ModelCheckpoint>& init = std::nullopt);
TrainResult train_confidence(const TrainConfig& config, const std::vector<Sample>& train,
                             const std::vector<Sample>& validation = {},
                             const std::optional<ModelCheckpoint>& init = std::nullopt);
TrainResult train_discriminative(const TrainConfig& config, const std::vector<Sample>& inlier,
                                 const std::vector<Sample>& background,
                                 const std::vector<Sample>& validation = {},
                                 const std::optional<ModelCheckpoint>& init = std::nullopt);

// Copies parameter groups present in both configs with identical sizes.
void transfer_parameters(const ModelCheckpoint& from, ModelCheckpoint& to);

}  // namespace dood
