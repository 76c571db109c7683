#include "dood/scoring.hpp"

#include <algorithm>
#include <cmath>

#include "dood/error.hpp"
#include "dood/random.hpp"

namespace dood {

namespace {

ScoreMap blank_like(const LogitMap& logits) { return ScoreMap(logits.height, logits.width); }

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0) h -= v * std::log(v);
  }
  return h;
}

void softmax_at(const LogitMap& z, std::size_t i, std::vector<double>& p) {
  const std::size_t P = z.plane_size();
  double mx = -INFINITY;
  for (int c = 0; c < z.channels; ++c) mx = std::max(mx, static_cast<double>(z.data[c * P + i]));
  double sum = 0.0;
  for (int c = 0; c < z.channels; ++c) {
    p[c] = std::exp(static_cast<double>(z.data[c * P + i]) - mx);
    sum += p[c];
  }
  for (auto& v : p) v /= sum;
}

}  // namespace

void OdinConfig::validate() const {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) {
    throw ConfigError("scoring", "bad_odin", "epsilon must be finite and >= 0");
  }
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw ConfigError("scoring", "bad_odin", "temperature must be finite and > 0");
  }
}

ScoreMap score_tempered_softmax(const LogitMap& logits, double temperature) {
  if (logits.channels < 2) throw Error("scoring", "bad_logits", "need at least 2 classes");
  if (!(temperature > 0)) throw ConfigError("scoring", "bad_odin", "temperature must be > 0");
  ScoreMap out = blank_like(logits);
  const std::size_t P = logits.plane_size();
  for (std::size_t i = 0; i < P; ++i) {
    double mx = -INFINITY;
    for (int c = 0; c < logits.channels; ++c) mx = std::max(mx, logits.data[c * P + i] / temperature);
    double sum = 0.0;
    for (int c = 0; c < logits.channels; ++c) sum += std::exp(logits.data[c * P + i] / temperature - mx);
    out.data[i] = static_cast<float>(1.0 - 1.0 / sum);
  }
  return out;
}

ScoreMap score_max_softmax(const LogitMap& logits) { return score_tempered_softmax(logits, 1.0); }

ScoreMap score_odin(const Fcn<float>& net, const Image& image, const OdinConfig& config) {
  config.validate();
  Image x = image;
  if (config.epsilon > 0) {
    const auto g = input_gradient(net, image, config.temperature);
    const auto eps = static_cast<float>(config.epsilon);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      const float s = g.data[i] > 0 ? 1.0f : g.data[i] < 0 ? -1.0f : 0.0f;
      x.data[i] = std::clamp(x.data[i] + eps * s, 0.0f, 1.0f);
    }
  }
  return score_tempered_softmax(net.forward(x, {}).seg_logits, config.temperature);
}

ScoreMap score_odin(const ModelCheckpoint& ckpt, const Image& image, const OdinConfig& config) {
  ckpt.validate();
  return score_odin(Fcn<float>(ckpt), image, config);
}

ScoreMap score_confidence(const ConfidenceMap& confidence) {
  ScoreMap out(confidence.height, confidence.width);
  for (std::size_t i = 0; i < confidence.data.size(); ++i) out.data[i] = 1.0f - confidence.data[i];
  return out;
}

ScoreMap score_discriminative(const LogitMap& ood_logits) {
  if (ood_logits.channels != 2) throw Error("scoring", "bad_logits", "OOD logits need 2 channels");
  ScoreMap out = blank_like(ood_logits);
  const std::size_t P = ood_logits.plane_size();
  for (std::size_t i = 0; i < P; ++i) {
    const double d = static_cast<double>(ood_logits.data[i]) - ood_logits.data[P + i];  // inlier - outlier
    out.data[i] = static_cast<float>(1.0 / (1.0 + std::exp(d)));
  }
  return out;
}

ScoreMap score_foreign_class(const LogitMap& logits, const std::set<int>& foreign_set, ForeignVariant variant) {
  const int C = logits.channels;
  if (foreign_set.empty()) throw ConfigError("scoring", "bad_foreign_set", "foreign set is empty");
  if (static_cast<int>(foreign_set.size()) >= C) {
    throw ConfigError("scoring", "bad_foreign_set", "foreign set covers every class");
  }
  for (int c : foreign_set) {
    if (c < 0 || c >= C) throw ConfigError("scoring", "bad_foreign_set", "class " + std::to_string(c) + " out of range");
  }
  ScoreMap out = blank_like(logits);
  const std::size_t P = logits.plane_size();
  std::vector<double> p(C);
  for (std::size_t i = 0; i < P; ++i) {
    if (variant == ForeignVariant::kWinner) {
      int best = 0;
      for (int c = 1; c < C; ++c) {
        if (logits.data[c * P + i] > logits.data[best * P + i]) best = c;
      }
      out.data[i] = foreign_set.count(best) ? 1.0f : 0.0f;
    } else {
      softmax_at(logits, i, p);
      double s = 0.0;
      for (int c : foreign_set) s += p[c];
      out.data[i] = static_cast<float>(s);
    }
  }
  return out;
}

ScoreMap mutual_information(const std::vector<LogitMap>& samples) {
  if (samples.size() < 2) throw ConfigError("scoring", "bad_mc", "need at least 2 samples");
  const LogitMap& first = samples.front();
  for (const auto& s : samples) {
    if (!s.same_shape(first)) throw Error("scoring", "bad_logits", "MC samples differ in shape");
  }
  const int C = first.channels;
  const std::size_t P = first.plane_size();
  ScoreMap out = blank_like(first);
  std::vector<double> p(C), mean(C);
  for (std::size_t i = 0; i < P; ++i) {
    std::fill(mean.begin(), mean.end(), 0.0);
    double mean_h = 0.0;
    for (const auto& s : samples) {
      softmax_at(s, i, p);
      mean_h += entropy(p);
      for (int c = 0; c < C; ++c) mean[c] += p[c];
    }
    const double k = static_cast<double>(samples.size());
    for (auto& v : mean) v /= k;
    out.data[i] = static_cast<float>(std::max(0.0, entropy(mean) - mean_h / k));
  }
  return out;
}

namespace {

ScoreMap mc_mutual_info(const Fcn<float>& net, const Image& image, int n_samples, std::uint64_t seed) {
  if (net.config().dropout <= 0) throw Error("scoring", "dropout_disabled", "MC scoring needs dropout > 0");
  if (n_samples < 2) throw ConfigError("scoring", "bad_mc", "need at least 2 samples");
  std::vector<LogitMap> samples;
  for (int k = 0; k < n_samples; ++k) {
    ForwardOptions o;
    o.sample_dropout = true;
    o.dropout_seed = derive_seed(seed, "scoring.mc", static_cast<std::uint64_t>(k));
    samples.push_back(net.forward(image, o).seg_logits);
  }
  return mutual_information(samples);
}

}  // namespace

ScoreMap score_mc_mutual_info(const ModelCheckpoint& ckpt, const Image& image, int n_samples, std::uint64_t seed) {
  ckpt.validate();
  return mc_mutual_info(Fcn<float>(ckpt), image, n_samples, seed);
}

std::string_view score_method_name(ScoreMethod method) {
  switch (method) {
    case ScoreMethod::kMaxSoftmax: return "max_softmax";
    case ScoreMethod::kOdin: return "odin";
    case ScoreMethod::kConfidence: return "confidence";
    case ScoreMethod::kDiscriminative: return "discrim";
    case ScoreMethod::kForeign: return "foreign";
    case ScoreMethod::kMcMutualInfo: return "mc_mi";
  }
  return "max_softmax";
}

ScoreMethod parse_score_method(std::string_view name) {
  for (auto m : {ScoreMethod::kMaxSoftmax, ScoreMethod::kOdin, ScoreMethod::kConfidence, ScoreMethod::kDiscriminative,
                 ScoreMethod::kForeign, ScoreMethod::kMcMutualInfo}) {
    if (score_method_name(m) == name) return m;
  }
  throw ConfigError("scoring", "unknown_method", "unknown scoring method '" + std::string(name) + "'");
}

ScoreMap score_image(ScoreMethod method, const Fcn<float>& net, const Image& image, const ScoreOptions& options,
                     std::uint64_t image_index) {
  switch (method) {
    case ScoreMethod::kMaxSoftmax:
      return score_max_softmax(net.forward(image, {}).seg_logits);
    case ScoreMethod::kOdin:
      return score_odin(net, image, options.odin);
    case ScoreMethod::kConfidence: {
      ForwardOptions o;
      o.confidence = true;
      const auto t = net.forward(image, o);
      ConfidenceMap c(t.height, t.width);
      c.data = t.confidence.data;
      return score_confidence(c);
    }
    case ScoreMethod::kDiscriminative: {
      ForwardOptions o;
      o.segmentation = false;
      o.ood = true;
      return score_discriminative(net.forward(image, o).ood_logits);
    }
    case ScoreMethod::kForeign:
      return score_foreign_class(net.forward(image, {}).seg_logits, options.foreign_set, options.foreign_variant);
    case ScoreMethod::kMcMutualInfo:
      return mc_mutual_info(net, image, options.mc_samples, derive_seed(options.seed, "scoring.image", image_index));
  }
  throw Error("scoring", "unknown_method", "unhandled method");
}

}  // namespace dood

namespace dood {

nlohmann::json to_json(const ScoreManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [id, path] : m.entries) entries.push_back({{"id", id}, {"scores", path}});
  return {{"method", m.method},
          {"dataset", m.dataset},
          {"dataset_manifest", m.dataset_manifest},
          {"params", m.params},
          {"entries", entries}};
}

ScoreManifest score_manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  ScoreManifest m;
  try {
    m.method = j.at("method").get<std::string>();
    m.dataset = j.at("dataset").get<std::string>();
    m.dataset_manifest = j.at("dataset_manifest").get<std::string>();
    m.params = j.value("params", nlohmann::json::object());
    for (const auto& e : j.at("entries")) {
      m.entries.emplace_back(e.at("id").get<std::string>(), e.at("scores").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("scoring", "bad_score_manifest", e.what());
  }
  m.base_dir = base_dir;
  return m;
}

void write_score_manifest(const std::filesystem::path& path, const ScoreManifest& manifest) {
  write_file(path, to_json(manifest).dump(2) + "\n");
}

ScoreManifest read_score_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error("scoring", "missing_score_manifest", "score manifest not found: " + path.string());
  }
  try {
    return score_manifest_from_json(nlohmann::json::parse(read_file(path)), path.parent_path());
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("scoring", "bad_score_manifest", path.string() + ": " + e.what());
  }
}

}  // namespace dood
