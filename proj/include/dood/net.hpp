#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dood/datamodel.hpp"
#include "dood/interp.hpp"
#include "json.hpp"

namespace dood {

enum class Head { kSegmentation, kConfidence, kOod };
std::string_view head_name(Head head);
Head parse_head(std::string_view name);

// Conv-activation pyramid. Stage s halves the resolution with a strided 3x3
// convolution ("stage1" for s = 1, "transition<s-1>" otherwise) followed by
// `stage_depth` 3x3 convolutions. The segmentation and confidence heads read
// the deepest stage upsampled and concatenated with the skip stage, pooled on
// `pool_grids`; the OOD head reads the deepest stage only.
struct FcnConfig {
  int stages = 4;
  std::vector<int> widths{8, 16, 24, 32};
  int stage_depth = 1;
  int skip_stage = 2;  // 1-based
  std::vector<int> pool_grids{1, 2, 4};
  int pool_width = 8;
  int head_width = 16;
  int class_count = 8;
  double dropout = 0.0;
  std::set<Head> heads{Head::kSegmentation};

  void validate() const;
  bool has(Head h) const { return heads.count(h) != 0; }
  int downsampling() const { return 1 << stages; }
  bool operator==(const FcnConfig&) const = default;
};

nlohmann::json to_json(const FcnConfig& config);
FcnConfig fcn_config_from_json(const nlohmann::json& j);

struct ParamGroup {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Contiguous named ranges of the flat parameter vector, in layout order.
std::vector<ParamGroup> parameter_groups(const FcnConfig& config);
std::size_t parameter_count(const FcnConfig& config);

// Parameter groups that receive optimizer updates.
struct FreezePolicy {
  std::set<std::string> trainable;

  void validate(const FcnConfig& config) const;
  bool trains(const std::string& group) const { return trainable.count(group) != 0; }
  static FreezePolicy all(const FcnConfig& config);
  // Deepest stage, the transition into it and the OOD head.
  static FreezePolicy ood_default(const FcnConfig& config);
};

struct ModelCheckpoint {
  FcnConfig config;
  std::vector<float> params;
  NormStats norm;
  nlohmann::json metadata = nlohmann::json::object();

  void validate() const;
  bool operator==(const ModelCheckpoint&) const = default;
};

// He-style fan-in initialization from a seed; biases start at zero.
ModelCheckpoint init_checkpoint(const FcnConfig& config, const NormStats& norm, std::uint64_t seed);

// Container: "DOODCKPT\n", "1\n", u64 LE JSON length, JSON header
// {config, norm, metadata, param_count}, then param_count LE float32.
std::string encode_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

struct ForwardOptions {
  bool segmentation = true;
  bool confidence = false;
  bool ood = false;
  // Draw a fresh dropout mask (MC-dropout). Without it dropout is the identity.
  bool sample_dropout = false;
  std::uint64_t dropout_seed = 0;
};

// Network evaluated in scalar type T. Parameters are copied in from the
// float32 checkpoint, so Fcn<double> evaluates exactly the same function at
// higher precision.
template <typename T>
class Fcn {
 public:
  explicit Fcn(const ModelCheckpoint& ckpt);
  Fcn(const FcnConfig& config, std::vector<T> params, const NormStats& norm);

  struct Conv {
    int in = 0, out = 0, kernel = 3, stride = 1;
    std::size_t weight = 0, bias = 0;
  };

  // Everything backward() needs.
  struct Trace {
    int height = 0, width = 0;          // original input
    int padded_h = 0, padded_w = 0;
    Tensor3<T> input;                   // normalized, padded
    std::vector<Tensor3<T>> acts;       // output of each backbone conv
    std::vector<std::vector<T>> cols;   // im2col buffer of each backbone conv
    std::vector<int> stage_end;         // index into acts of each stage's output
    Tensor3<T> fusion;                  // after dropout
    std::vector<T> dropout_mask;
    std::vector<Tensor3<T>> seg_pooled, conf_pooled;  // post-relu pooled branch activations
    std::vector<std::vector<T>> seg_pool_cols, conf_pool_cols;
    Tensor3<T> seg_spp, seg_low;
    std::vector<T> seg_out_col;
    Tensor3<T> conf_spp, conf_hidden, conf_blend, conf_low;
    std::vector<T> conf_hidden_col, conf_out_col;
    Tensor3<T> ood_hidden, ood_low;
    std::vector<T> ood_hidden_col, ood_out_col;
    // Outputs at input resolution.
    Tensor3<T> seg_logits;    // (C, H, W)
    Tensor3<T> confidence;    // (1, H, W), sigmoid applied
    Tensor3<T> conf_logit;    // (1, H, W), clamped pre-sigmoid
    Tensor3<T> ood_logits;    // (2, H, W)
    ForwardOptions options;
  };

  Trace forward(const Tensor3<T>& image, const ForwardOptions& options) const;

  // Accumulates parameter gradients into param_grad (size parameter_count) and,
  // when d_image is non-null, the gradient w.r.t. the [0,1] input image. Any
  // output gradient may be null. The confidence branch never propagates into
  // the segmentation logits. Backbone convolutions with index below
  // backbone_floor get no gradient (frozen early stages); ignored with d_image.
  void backward(const Trace& trace, const Tensor3<T>* d_seg, const Tensor3<T>* d_confidence,
                const Tensor3<T>* d_ood, std::vector<T>& param_grad, Tensor3<T>* d_image,
                std::size_t backbone_floor = 0) const;

  // Index of the first backbone conv belonging to a parameter group, or the
  // conv count if the group is not in the backbone.
  std::size_t backbone_index(const std::string& group) const;
  std::size_t backbone_size() const { return backbone_.size(); }

  const FcnConfig& config() const { return config_; }
  const std::vector<T>& params() const { return params_; }
  std::vector<T>& mutable_params() { return params_; }

 private:
  void build_layout();

  FcnConfig config_;
  std::vector<T> params_;
  NormStats norm_;
  std::vector<Conv> backbone_;            // in evaluation order
  std::vector<int> backbone_stage_;       // stage (1-based) of each backbone conv
  std::vector<Conv> seg_pool_, conf_pool_;
  Conv seg_out_{}, conf_hidden_{}, conf_out_{}, ood_hidden_{}, ood_out_{};
};

extern template class Fcn<float>;
extern template class Fcn<double>;

template <typename T>
Tensor3<T> to_scalar(const Tensor3<float>& src) {
  Tensor3<T> out(src.channels, src.height, src.width);
  for (std::size_t i = 0; i < src.data.size(); ++i) out.data[i] = static_cast<T>(src.data[i]);
  return out;
}

// --- convenience entry points on float checkpoints ------------------------

LogitMap forward_segmentation(const ModelCheckpoint& ckpt, const Image& image,
                              const ForwardOptions& options = {});
LogitMap forward_ood(const ModelCheckpoint& ckpt, const Image& image);
std::pair<LogitMap, ConfidenceMap> forward_confidence(const ModelCheckpoint& ckpt,
                                                      const Image& image);

// Gradient of  scale * sum_p log softmax(z_p / T)[w_p]  w.r.t. the input image,
// where w_p is the per-pixel argmax of the untempered logits, held fixed.
template <typename T>
Tensor3<T> input_gradient(const Fcn<T>& net, const Tensor3<T>& image, double temperature,
                          double scale = 1.0);
Tensor3<float> input_gradient(const ModelCheckpoint& ckpt, const Image& image, double temperature,
                              double scale = 1.0);

}  // namespace dood
