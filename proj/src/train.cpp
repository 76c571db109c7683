#include "dood/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dood/error.hpp"
#include "dood/parallel.hpp"
#include "dood/random.hpp"

namespace dood {

namespace {

ConfigError train_config_error(const std::string& msg) {
  return ConfigError("train", "bad_config", msg);
}

template <typename T>
void check_target_dims(const Tensor3<T>& logits, int h, int w) {
  if (logits.height != h || logits.width != w) {
    throw Error("train", "shape_mismatch",
                "logits " + std::to_string(logits.height) + "x" + std::to_string(logits.width) +
                    " vs target " + std::to_string(h) + "x" + std::to_string(w));
  }
}

// Shared cross-entropy over a label grid.
template <typename T>
LossGrad<T> cross_entropy(const Tensor3<T>& logits, const Grid2<std::uint8_t>& target) {
  check_target_dims(logits, target.height, target.width);
  const int C = logits.channels;
  const std::size_t P = logits.plane_size();
  LossGrad<T> out;
  out.d_logits = Tensor3<T>(C, logits.height, logits.width);
  for (std::size_t i = 0; i < P; ++i) {
    if (target.data[i] != kIgnoreLabel) ++out.counted;
  }
  if (out.counted == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(out.counted);
  std::vector<double> s(C);
  double total = 0.0;
  for (std::size_t i = 0; i < P; ++i) {
    const int t = target.data[i];
    if (t == kIgnoreLabel) continue;
    if (t >= C) {
      throw Error("train", "bad_label", "label " + std::to_string(t) + " outside " + std::to_string(C) + " classes");
    }
    double mx = -INFINITY;
    for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(logits.data[c * P + i]));
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      s[c] = std::exp(static_cast<double>(logits.data[c * P + i]) - mx);
      sum += s[c];
    }
    total += -(static_cast<double>(logits.data[t * P + i]) - mx - std::log(sum));
    for (int c = 0; c < C; ++c) {
      out.d_logits.data[c * P + i] = static_cast<T>((s[c] / sum - (c == t ? 1.0 : 0.0)) * inv_n);
    }
  }
  out.value = total * inv_n;
  return out;
}

}  // namespace

template <typename T>
LossGrad<T> ce_loss(const Tensor3<T>& logits, const SemanticMask& target) {
  return cross_entropy(logits, target);
}

template <typename T>
LossGrad<T> ood_loss(const Tensor3<T>& ood_logits, const OodMask& target) {
  if (ood_logits.channels != 2) throw Error("train", "shape_mismatch", "OOD logits need 2 channels");
  return cross_entropy(ood_logits, target);
}

template <typename T>
LossGrad<T> confidence_loss(const Tensor3<T>& logits, const Tensor3<T>& confidence,
                            const SemanticMask& target, double lambda) {
  check_target_dims(logits, target.height, target.width);
  if (confidence.channels != 1 || confidence.height != target.height || confidence.width != target.width) {
    throw Error("train", "shape_mismatch", "confidence map must be (1, H, W)");
  }
  if (!(lambda >= 0)) throw ConfigError("train", "bad_lambda", "lambda must be >= 0");
  const int C = logits.channels;
  const std::size_t P = logits.plane_size();
  LossGrad<T> out;
  out.d_logits = Tensor3<T>(C, logits.height, logits.width);
  out.d_confidence = Tensor3<T>(1, logits.height, logits.width);
  for (std::size_t i = 0; i < P; ++i) {
    if (target.data[i] != kIgnoreLabel) ++out.counted;
  }
  if (out.counted == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(out.counted);
  std::vector<double> s(C);
  double total = 0.0;
  for (std::size_t i = 0; i < P; ++i) {
    const int t = target.data[i];
    if (t == kIgnoreLabel) continue;
    if (t >= C) {
      throw Error("train", "bad_label", "label " + std::to_string(t) + " outside " + std::to_string(C) + " classes");
    }
    const double c = confidence.data[i];
    if (!(c > 0.0 && c <= 1.0)) {
      throw Error("train", "confidence_range", "confidence " + std::to_string(c) + " outside (0, 1]");
    }
    double mx = -INFINITY;
    for (int k = 0; k < C; ++k) mx = std::max(mx, static_cast<double>(logits.data[k * P + i]));
    double sum = 0.0;
    for (int k = 0; k < C; ++k) {
      s[k] = std::exp(static_cast<double>(logits.data[k * P + i]) - mx);
      sum += s[k];
    }
    for (int k = 0; k < C; ++k) s[k] /= sum;
    const double st = s[t];
    const double pt = c * st + (1.0 - c);
    const double nll = c == 1.0 ? -(static_cast<double>(logits.data[t * P + i]) - mx - std::log(sum))
                                : -std::log(pt);
    total += nll - lambda * std::log(c);
    out.d_confidence.data[i] = static_cast<T>((-(st - 1.0) / pt - lambda / c) * inv_n);
    const double scale = -(c / pt) * st * inv_n;
    for (int k = 0; k < C; ++k) {
      out.d_logits.data[k * P + i] = static_cast<T>(scale * ((k == t ? 1.0 : 0.0) - s[k]));
    }
  }
  out.value = total * inv_n;
  return out;
}

LossGrad<float> confidence_loss(const LogitMap& logits, const ConfidenceMap& confidence,
                                const SemanticMask& target, double lambda) {
  Tensor3<float> c(1, confidence.height, confidence.width);
  c.data = confidence.data;
  return confidence_loss(logits, c, target, lambda);
}

template LossGrad<float> ce_loss(const Tensor3<float>&, const SemanticMask&);
template LossGrad<double> ce_loss(const Tensor3<double>&, const SemanticMask&);
template LossGrad<float> ood_loss(const Tensor3<float>&, const OodMask&);
template LossGrad<double> ood_loss(const Tensor3<double>&, const OodMask&);
template LossGrad<float> confidence_loss(const Tensor3<float>&, const Tensor3<float>&, const SemanticMask&, double);
template LossGrad<double> confidence_loss(const Tensor3<double>&, const Tensor3<double>&, const SemanticMask&, double);

// --- configuration ------------------------------------------------------------------

std::string_view train_mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::kPrimary: return "primary";
    case TrainMode::kConfidence: return "confidence";
    case TrainMode::kDiscriminative: return "discriminative";
  }
  return "primary";
}

TrainMode parse_train_mode(std::string_view name) {
  for (auto m : {TrainMode::kPrimary, TrainMode::kConfidence, TrainMode::kDiscriminative}) {
    if (train_mode_name(m) == name) return m;
  }
  throw train_config_error("unknown training mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw train_config_error("epochs must be >= 1");
  if (batch_size < 1) throw train_config_error("batch_size must be >= 1");
  if (!(lr >= 0) || !std::isfinite(lr)) throw train_config_error("lr must be finite and >= 0");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw train_config_error("lr_decay must be in (0, 1]");
  if (!(backbone_lr_ratio >= 1)) throw train_config_error("backbone_lr_ratio must be >= 1");
  if (crop_size < 8) throw train_config_error("crop_size must be >= 8");
  if (!(scale > 0)) throw train_config_error("scale must be positive");
  if (!(lambda >= 0)) throw train_config_error("lambda must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) {
    throw train_config_error("invalid Adam moments");
  }
  if (!(target_accuracy > 0 && target_accuracy <= 1)) throw train_config_error("target_accuracy must be in (0, 1]");
  if (trainable && trainable->empty()) throw train_config_error("trainable set must be non-empty");
  net.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"epochs", c.epochs},
                      {"batch_size", c.batch_size},
                      {"lr", c.lr},
                      {"lr_decay", c.lr_decay},
                      {"backbone_lr_ratio", c.backbone_lr_ratio},
                      {"crop_size", c.crop_size},
                      {"scale", c.scale},
                      {"seed", c.seed},
                      {"lambda", c.lambda},
                      {"beta1", c.beta1},
                      {"beta2", c.beta2},
                      {"adam_eps", c.adam_eps},
                      {"target_accuracy", c.target_accuracy},
                      {"flip", c.flip},
                      {"net", to_json(c.net)}};
  if (c.trainable) j["trainable"] = *c.trainable;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (!j.is_object()) throw train_config_error("train config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "lr_decay") c.lr_decay = v.get<double>();
      else if (key == "backbone_lr_ratio") c.backbone_lr_ratio = v.get<double>();
      else if (key == "crop_size") c.crop_size = v.get<int>();
      else if (key == "scale") c.scale = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "target_accuracy") c.target_accuracy = v.get<double>();
      else if (key == "flip") c.flip = v.get<bool>();
      else if (key == "trainable") c.trainable = v.get<std::set<std::string>>();
      else if (key == "net") c.net = fcn_config_from_json(v);
      else throw train_config_error("unknown train key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw train_config_error(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// --- planning -------------------------------------------------------------------------

std::size_t BatchPlan::entry_count() const {
  std::size_t n = 0;
  for (const auto& b : batches) n += b.size();
  return n;
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

// n indices cycled to `length`, reshuffled for every cycle.
std::vector<std::size_t> cycled(std::size_t n, std::size_t length, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(length);
  while (out.size() < length) {
    for (std::size_t i : shuffled(n, rng)) {
      if (out.size() == length) break;
      out.push_back(i);
    }
  }
  return out;
}

}  // namespace

BatchPlan plan_epoch(std::size_t count, int batch_size, std::uint64_t seed) {
  if (count == 0) throw Error("train", "empty_dataset", "training set is empty");
  if (batch_size < 1) throw train_config_error("batch_size must be >= 1");
  Rng rng(derive_seed(seed, "train.plan"));
  BatchPlan plan;
  std::size_t k = 0;
  for (std::size_t idx : shuffled(count, rng)) {
    if (k % batch_size == 0) plan.batches.emplace_back();
    plan.batches.back().push_back({Source::kInlier, idx, derive_seed(seed, "train.crop", k)});
    ++k;
  }
  return plan;
}

BatchPlan plan_oversampled_epoch(std::size_t inlier_count, std::size_t background_count,
                                 int batch_size, std::uint64_t seed) {
  if (inlier_count == 0 || background_count == 0) {
    throw Error("train", "empty_dataset", "both inlier and background sets must be non-empty");
  }
  if (batch_size < 2 || batch_size % 2 != 0) {
    throw train_config_error("mixed batches need an even batch_size >= 2");
  }
  Rng rng(derive_seed(seed, "train.plan.mixed"));
  const std::size_t length = std::max(inlier_count, background_count);
  const auto in = cycled(inlier_count, length, rng);
  const auto bg = cycled(background_count, length, rng);
  BatchPlan plan;
  const std::size_t pairs_per_batch = static_cast<std::size_t>(batch_size / 2);
  for (std::size_t i = 0; i < length; ++i) {
    if (i % pairs_per_batch == 0) plan.batches.emplace_back();
    plan.batches.back().push_back({Source::kInlier, in[i], derive_seed(seed, "train.crop.in", i)});
    plan.batches.back().push_back({Source::kBackground, bg[i], derive_seed(seed, "train.crop.bg", i)});
  }
  return plan;
}

BatchPlan plan_oversampled_epoch(const DatasetManifest& inlier, const DatasetManifest& background,
                                 int batch_size, std::uint64_t seed) {
  return plan_oversampled_epoch(inlier.records.size(), background.records.size(), batch_size, seed);
}

Sample training_crop(const Sample& sample, int crop_size, std::uint64_t crop_seed, bool flip) {
  const int size = std::min({crop_size, sample.height(), sample.width()});
  Sample out = random_crop(sample, size, crop_seed);
  if (flip && (splitmix64(crop_seed) & 1u)) {
    auto flip_row = [](auto* row, int w) { std::reverse(row, row + w); };
    for (int c = 0; c < out.image.channels; ++c) {
      for (int y = 0; y < out.image.height; ++y) flip_row(&out.image.at(c, y, 0), out.image.width);
    }
    if (out.semantic) {
      for (int y = 0; y < out.semantic->height; ++y) flip_row(&out.semantic->at(y, 0), out.semantic->width);
    }
    if (out.ood) {
      for (int y = 0; y < out.ood->height; ++y) flip_row(&out.ood->at(y, 0), out.ood->width);
    }
  }
  return out;
}

// --- optimizer ---------------------------------------------------------------------------

Adam::Adam(std::size_t size, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::vector<float>& params, const std::vector<double>& grad, const std::vector<float>& lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (lr[i] == 0.0f) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    const double update = lr[i] * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    params[i] = static_cast<float>(params[i] - update);
  }
}

// --- training -----------------------------------------------------------------------------

double segmentation_accuracy(const ModelCheckpoint& ckpt, const std::vector<Sample>& samples) {
  Fcn<float> net(ckpt);
  std::vector<std::pair<std::size_t, std::size_t>> counts(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const Sample& s = samples[i];
    if (!s.semantic) throw Error("train", "missing_mask", "validation sample '" + s.id + "' has no semantic mask");
    const auto logits = net.forward(s.image, {}).seg_logits;
    const std::size_t P = logits.plane_size();
    for (std::size_t p = 0; p < P; ++p) {
      const int t = s.semantic->data[p];
      if (t == kIgnoreLabel) continue;
      int best = 0;
      for (int c = 1; c < logits.channels; ++c) {
        if (logits.data[c * P + p] > logits.data[best * P + p]) best = c;
      }
      ++counts[i].second;
      if (best == t) ++counts[i].first;
    }
  });
  std::size_t hit = 0, total = 0;
  for (const auto& [h, t] : counts) {
    hit += h;
    total += t;
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

double ood_accuracy(const ModelCheckpoint& ckpt, const std::vector<Sample>& samples) {
  Fcn<float> net(ckpt);
  ForwardOptions o;
  o.segmentation = false;
  o.ood = true;
  std::vector<std::pair<std::size_t, std::size_t>> counts(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const Sample& s = samples[i];
    if (!s.ood) throw Error("train", "missing_mask", "validation sample '" + s.id + "' has no OOD mask");
    const auto logits = net.forward(s.image, o).ood_logits;
    const std::size_t P = logits.plane_size();
    for (std::size_t p = 0; p < P; ++p) {
      const int t = s.ood->data[p];
      if (t == kIgnoreLabel) continue;
      // outlier probability > 0.5  <=>  outlier logit > inlier logit
      const bool predicted_ood = logits.data[P + p] > logits.data[p];
      ++counts[i].second;
      if (predicted_ood == (t == kOutlierLabel)) ++counts[i].first;
    }
  });
  std::size_t hit = 0, total = 0;
  for (const auto& [h, t] : counts) {
    hit += h;
    total += t;
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

void transfer_parameters(const ModelCheckpoint& from, ModelCheckpoint& to) {
  const auto src = parameter_groups(from.config);
  for (const auto& g : parameter_groups(to.config)) {
    for (const auto& s : src) {
      if (s.name == g.name && s.size == g.size) {
        std::copy_n(from.params.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size,
                    to.params.begin() + static_cast<std::ptrdiff_t>(g.offset));
      }
    }
  }
}

namespace {

bool is_head_group(const std::string& name) {
  return name.size() > 5 && name.compare(name.size() - 5, 5, "_head") == 0;
}

struct EntryResult {
  std::vector<float> grad;
  double loss = 0.0;
};

TrainResult run_training(TrainMode mode, const TrainConfig& config, const std::vector<Sample>& inlier,
                         const std::vector<Sample>& background, const std::vector<Sample>& validation,
                         const std::optional<ModelCheckpoint>& init) {
  config.validate();
  const FcnConfig& net_cfg = config.net;
  auto require = [&](Head h) {
    if (!net_cfg.has(h)) {
      throw train_config_error(std::string(train_mode_name(mode)) + " training needs the " +
                               std::string(head_name(h)) + " head");
    }
  };
  switch (mode) {
    case TrainMode::kPrimary: require(Head::kSegmentation); break;
    case TrainMode::kConfidence: require(Head::kConfidence); break;
    case TrainMode::kDiscriminative: require(Head::kOod); break;
  }
  if (inlier.empty()) throw Error("train", "empty_dataset", "training set is empty");
  if (mode == TrainMode::kDiscriminative && background.empty()) {
    throw Error("train", "empty_dataset", "background set is empty");
  }
  for (const auto& s : inlier) {
    if (mode != TrainMode::kDiscriminative && !s.semantic) {
      throw Error("train", "missing_mask", "sample '" + s.id + "' has no semantic mask");
    }
    if (mode == TrainMode::kDiscriminative && !s.ood) {
      throw Error("train", "missing_mask", "sample '" + s.id + "' has no OOD mask");
    }
  }
  for (const auto& s : background) {
    if (!s.ood) throw Error("train", "missing_mask", "sample '" + s.id + "' has no OOD mask");
  }

  auto prepare = [&](const std::vector<Sample>& v) {
    if (config.scale == 1.0) return v;
    std::vector<Sample> out;
    out.reserve(v.size());
    for (const auto& s : v) out.push_back(scale(s, config.scale));
    return out;
  };
  const std::vector<Sample> in_set = prepare(inlier);
  const std::vector<Sample> bg_set = prepare(background);
  const std::vector<Sample> val_set = prepare(validation);

  NormStats norm;
  if (init) {
    norm = init->norm;
  } else {
    std::vector<Image> images;
    for (const auto& s : in_set) images.push_back(s.image);
    norm = compute_norm_stats(images);
  }
  ModelCheckpoint ckpt = init_checkpoint(net_cfg, norm, derive_seed(config.seed, "train.init"));
  if (init) transfer_parameters(*init, ckpt);

  const FreezePolicy policy = config.trainable ? FreezePolicy{*config.trainable}
                              : mode == TrainMode::kDiscriminative ? FreezePolicy::ood_default(net_cfg)
                                                                   : FreezePolicy::all(net_cfg);
  policy.validate(net_cfg);

  Fcn<float> net(ckpt);
  const auto groups = parameter_groups(net_cfg);
  std::vector<float> base_lr(ckpt.params.size(), 0.0f);
  std::size_t backbone_floor = net.backbone_size();
  for (const auto& g : groups) {
    if (!policy.trains(g.name)) continue;
    const bool head = is_head_group(g.name);
    const double lr = head || !init ? config.lr : config.lr / config.backbone_lr_ratio;
    std::fill_n(base_lr.begin() + static_cast<std::ptrdiff_t>(g.offset), g.size, static_cast<float>(lr));
    if (!head) backbone_floor = std::min(backbone_floor, net.backbone_index(g.name));
  }

  ForwardOptions fwd;
  fwd.segmentation = mode != TrainMode::kDiscriminative;
  fwd.confidence = mode == TrainMode::kConfidence;
  fwd.ood = mode == TrainMode::kDiscriminative;

  Adam adam(ckpt.params.size(), config.beta1, config.beta2, config.adam_eps);
  TrainResult result;
  double lr_scale = 1.0;
  std::vector<float> lr(base_lr.size());
  std::vector<double> grad(base_lr.size());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(config.seed, "train.epoch", static_cast<std::uint64_t>(epoch));
    const BatchPlan plan = mode == TrainMode::kDiscriminative
                               ? plan_oversampled_epoch(in_set.size(), bg_set.size(), config.batch_size, epoch_seed)
                               : plan_epoch(in_set.size(), config.batch_size, epoch_seed);
    for (std::size_t i = 0; i < lr.size(); ++i) lr[i] = static_cast<float>(base_lr[i] * lr_scale);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < plan.batches.size(); ++b) {
      const auto& batch = plan.batches[b];
      std::vector<EntryResult> results(batch.size());
      parallel_for(batch.size(), [&](std::size_t k) {
        const PlanEntry& e = batch[k];
        const Sample& src = e.source == Source::kInlier ? in_set[e.index] : bg_set[e.index];
        const Sample crop = training_crop(src, config.crop_size, e.crop_seed, config.flip);
        const auto trace = net.forward(crop.image, fwd);
        EntryResult& r = results[k];
        r.grad.assign(base_lr.size(), 0.0f);
        switch (mode) {
          case TrainMode::kPrimary: {
            const auto l = ce_loss(trace.seg_logits, *crop.semantic);
            r.loss = l.value;
            net.backward(trace, &l.d_logits, nullptr, nullptr, r.grad, nullptr, backbone_floor);
            break;
          }
          case TrainMode::kConfidence: {
            const auto l = confidence_loss(trace.seg_logits, trace.confidence, *crop.semantic, config.lambda);
            r.loss = l.value;
            net.backward(trace, &l.d_logits, &l.d_confidence, nullptr, r.grad, nullptr, backbone_floor);
            break;
          }
          case TrainMode::kDiscriminative: {
            const auto l = ood_loss(trace.ood_logits, *crop.ood);
            r.loss = l.value;
            net.backward(trace, nullptr, nullptr, &l.d_logits, r.grad, nullptr, backbone_floor);
            break;
          }
        }
      });
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (const auto& r : results) {
        batch_loss += r.loss;
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += r.grad[i];
      }
      const double inv = 1.0 / static_cast<double>(batch.size());
      batch_loss *= inv;
      for (auto& g : grad) g *= inv;
      if (!std::isfinite(batch_loss)) {
        std::string ids;
        for (const auto& e : batch) {
          const Sample& src = e.source == Source::kInlier ? in_set[e.index] : bg_set[e.index];
          ids += (ids.empty() ? "" : ",") + src.id;
        }
        throw Error("train", "diverged",
                    "non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                        " (samples " + ids + ")");
      }
      loss_sum += batch_loss;
      adam.step(net.mutable_params(), grad, lr);
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = config.lr * lr_scale;
    stats.train_loss = loss_sum / static_cast<double>(plan.batches.size());
    ckpt.params = net.params();
    if (!val_set.empty()) {
      stats.val_accuracy = mode == TrainMode::kDiscriminative ? ood_accuracy(ckpt, val_set)
                                                               : segmentation_accuracy(ckpt, val_set);
    }
    result.history.push_back(stats);
    lr_scale *= config.lr_decay;
    if (mode == TrainMode::kDiscriminative && stats.val_accuracy &&
        *stats.val_accuracy >= config.target_accuracy) {
      result.stopped_early = true;
      break;
    }
  }

  ckpt.params = net.params();
  nlohmann::json history = nlohmann::json::array();
  for (const auto& h : result.history) {
    nlohmann::json e = {{"epoch", h.epoch}, {"lr", h.lr}, {"train_loss", h.train_loss}};
    if (h.val_accuracy) e["val_accuracy"] = *h.val_accuracy;
    history.push_back(e);
  }
  ckpt.metadata = {{"mode", train_mode_name(mode)},
                   {"seed", config.seed},
                   {"epochs_run", result.history.size()},
                   {"stopped_early", result.stopped_early},
                   {"trainable", policy.trainable},
                   {"history", history}};
  result.checkpoint = std::move(ckpt);
  return result;
}

}  // namespace

TrainResult train_primary(const TrainConfig& config, const std::vector<Sample>& train,
                          const std::vector<Sample>& validation, const std::optional<ModelCheckpoint>& init) {
  return run_training(TrainMode::kPrimary, config, train, {}, validation, init);
}

TrainResult train_confidence(const TrainConfig& config, const std::vector<Sample>& train,
                             const std::vector<Sample>& validation, const std::optional<ModelCheckpoint>& init) {
  return run_training(TrainMode::kConfidence, config, train, {}, validation, init);
}

TrainResult train_discriminative(const TrainConfig& config, const std::vector<Sample>& inlier,
                                 const std::vector<Sample>& background, const std::vector<Sample>& validation,
                                 const std::optional<ModelCheckpoint>& init) {
  return run_training(TrainMode::kDiscriminative, config, inlier, background, validation, init);
}

}  // namespace dood
