#include "dood/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "dood/error.hpp"
#include "dood/random.hpp"

namespace dood {

namespace {

ConfigError net_config_error(const std::string& msg) {
  return ConfigError("net", "bad_config", msg);
}

constexpr double kConfidenceLogitLimit = 15.0;

// --- primitive ops ----------------------------------------------------------

template <typename T>
int conv_out_size(int n, int kernel, int stride) {
  const int pad = kernel / 2;
  return (n + 2 * pad - kernel) / stride + 1;
}

template <typename T>
void im2col(const Tensor3<T>& in, int kernel, int stride, int oh, int ow, std::vector<T>& col) {
  const int pad = kernel / 2;
  const std::size_t P = static_cast<std::size_t>(oh) * ow;
  col.assign(static_cast<std::size_t>(in.channels) * kernel * kernel * P, T(0));
  for (int ci = 0; ci < in.channels; ++ci) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        T* row = col.data() + ((static_cast<std::size_t>(ci) * kernel + ky) * kernel + kx) * P;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= in.height) continue;
          const T* src = &in.at(ci, iy, 0);
          T* dst = row + static_cast<std::size_t>(oy) * ow;
          if (stride == 1) {
            const int lo = std::max(0, pad - kx);
            const int hi = std::min(ow, in.width + pad - kx);
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox + kx - pad];
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < in.width) dst[ox] = src[ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const std::vector<T>& col, int kernel, int stride, int oh, int ow, Tensor3<T>& din) {
  const int pad = kernel / 2;
  const std::size_t P = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < din.channels; ++ci) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const T* row = col.data() + ((static_cast<std::size_t>(ci) * kernel + ky) * kernel + kx) * P;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= din.height) continue;
          T* dst = &din.at(ci, iy, 0);
          const T* src = row + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < din.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// out[co][p] = b[co] + sum_r W[co][r] * col[r][p]
template <typename T>
void gemm_forward(const T* weights, const T* bias, const T* col, int out_ch, int rows,
                  std::size_t P, T* out) {
  int co = 0;
  for (; co + 4 <= out_ch; co += 4) {
    T* o0 = out + co * P;
    T* o1 = o0 + P;
    T* o2 = o1 + P;
    T* o3 = o2 + P;
    std::fill(o0, o0 + P, bias[co]);
    std::fill(o1, o1 + P, bias[co + 1]);
    std::fill(o2, o2 + P, bias[co + 2]);
    std::fill(o3, o3 + P, bias[co + 3]);
    for (int r = 0; r < rows; ++r) {
      const T w0 = weights[co * rows + r], w1 = weights[(co + 1) * rows + r];
      const T w2 = weights[(co + 2) * rows + r], w3 = weights[(co + 3) * rows + r];
      const T* c = col + r * P;
      for (std::size_t p = 0; p < P; ++p) {
        const T v = c[p];
        o0[p] += w0 * v;
        o1[p] += w1 * v;
        o2[p] += w2 * v;
        o3[p] += w3 * v;
      }
    }
  }
  for (; co < out_ch; ++co) {
    T* o = out + co * P;
    std::fill(o, o + P, bias[co]);
    for (int r = 0; r < rows; ++r) {
      const T w = weights[co * rows + r];
      const T* c = col + r * P;
      for (std::size_t p = 0; p < P; ++p) o[p] += w * c[p];
    }
  }
}

template <typename T>
void relu_inplace(Tensor3<T>& t) {
  for (auto& v : t.data) v = v > T(0) ? v : T(0);
}

template <typename T>
void relu_mask(const Tensor3<T>& act, Tensor3<T>& grad) {
  for (std::size_t i = 0; i < act.data.size(); ++i) {
    if (!(act.data[i] > T(0))) grad.data[i] = T(0);
  }
}

struct PoolBins {
  std::vector<int> y0, y1, x0, x1;
};

PoolBins pool_bins(int h, int w, int g) {
  PoolBins b;
  for (int i = 0; i < g; ++i) {
    b.y0.push_back(i * h / g);
    b.y1.push_back(((i + 1) * h + g - 1) / g);
    b.x0.push_back(i * w / g);
    b.x1.push_back(((i + 1) * w + g - 1) / g);
  }
  return b;
}

template <typename T>
Tensor3<T> adaptive_avg_pool(const Tensor3<T>& in, int g) {
  const PoolBins b = pool_bins(in.height, in.width, g);
  Tensor3<T> out(in.channels, g, g);
  for (int c = 0; c < in.channels; ++c) {
    for (int i = 0; i < g; ++i) {
      for (int j = 0; j < g; ++j) {
        T s = 0;
        for (int y = b.y0[i]; y < b.y1[i]; ++y) {
          for (int x = b.x0[j]; x < b.x1[j]; ++x) s += in.at(c, y, x);
        }
        out.at(c, i, j) = s / static_cast<T>((b.y1[i] - b.y0[i]) * (b.x1[j] - b.x0[j]));
      }
    }
  }
  return out;
}

template <typename T>
void adaptive_avg_pool_backward(const Tensor3<T>& dout, Tensor3<T>& din, int c_offset) {
  const int g = dout.height;
  const PoolBins b = pool_bins(din.height, din.width, g);
  for (int c = 0; c < dout.channels; ++c) {
    for (int i = 0; i < g; ++i) {
      for (int j = 0; j < g; ++j) {
        const T v = dout.at(c, i, j) / static_cast<T>((b.y1[i] - b.y0[i]) * (b.x1[j] - b.x0[j]));
        for (int y = b.y0[i]; y < b.y1[i]; ++y) {
          for (int x = b.x0[j]; x < b.x1[j]; ++x) din.at(c + c_offset, y, x) += v;
        }
      }
    }
  }
}

// Reflect-101 index for arbitrarily large overshoot.
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

template <typename T>
void copy_channels(const Tensor3<T>& src, Tensor3<T>& dst, int dst_offset) {
  std::copy(src.data.begin(), src.data.end(),
            dst.data.begin() + static_cast<std::ptrdiff_t>(dst_offset * dst.plane_size()));
}

template <typename T>
Tensor3<T> slice_channels(const Tensor3<T>& src, int offset, int count) {
  Tensor3<T> out(count, src.height, src.width);
  const auto begin = src.data.begin() + static_cast<std::ptrdiff_t>(offset * src.plane_size());
  std::copy(begin, begin + static_cast<std::ptrdiff_t>(count * src.plane_size()), out.data.begin());
  return out;
}

// Embeds a (C, H, W) output gradient into the top-left of a zero (C, Hp, Wp) grid.
template <typename T>
Tensor3<T> embed_padded(const Tensor3<T>& g, int hp, int wp) {
  Tensor3<T> out(g.channels, hp, wp);
  for (int c = 0; c < g.channels; ++c) {
    for (int y = 0; y < g.height; ++y) {
      std::copy(&g.at(c, y, 0), &g.at(c, y, 0) + g.width, &out.at(c, y, 0));
    }
  }
  return out;
}

template <typename T>
Tensor3<T> crop_top_left(const Tensor3<T>& src, int h, int w) {
  Tensor3<T> out(src.channels, h, w);
  for (int c = 0; c < src.channels; ++c) {
    for (int y = 0; y < h; ++y) std::copy(&src.at(c, y, 0), &src.at(c, y, 0) + w, &out.at(c, y, 0));
  }
  return out;
}

std::size_t conv_size(int in, int out, int k) {
  return static_cast<std::size_t>(out) * in * k * k + out;
}

}  // namespace

// --- config -------------------------------------------------------------------

std::string_view head_name(Head head) {
  switch (head) {
    case Head::kSegmentation: return "segmentation";
    case Head::kConfidence: return "confidence";
    case Head::kOod: return "ood";
  }
  return "segmentation";
}

Head parse_head(std::string_view name) {
  for (auto h : {Head::kSegmentation, Head::kConfidence, Head::kOod}) {
    if (head_name(h) == name) return h;
  }
  throw net_config_error("unknown head '" + std::string(name) + "'");
}

void FcnConfig::validate() const {
  if (stages < 1 || stages > 6) throw net_config_error("stages must be in [1, 6]");
  if (static_cast<int>(widths.size()) != stages) throw net_config_error("one width per stage required");
  for (int w : widths) {
    if (w < 1) throw net_config_error("widths must be positive");
  }
  if (stage_depth < 1) throw net_config_error("stage_depth must be >= 1");
  if (skip_stage < 1 || skip_stage >= stages) throw net_config_error("skip_stage must be < stages");
  for (int g : pool_grids) {
    if (g < 1) throw net_config_error("pool grid sizes must be positive");
  }
  if (pool_width < 1 || head_width < 1) throw net_config_error("head widths must be positive");
  if (class_count < 2) throw net_config_error("class_count must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw net_config_error("dropout must be in [0, 1)");
  if (heads.empty()) throw net_config_error("at least one head required");
  if (has(Head::kConfidence) && !has(Head::kSegmentation)) {
    throw net_config_error("the confidence head needs the segmentation head");
  }
}

nlohmann::json to_json(const FcnConfig& c) {
  nlohmann::json heads = nlohmann::json::array();
  for (auto h : c.heads) heads.push_back(head_name(h));
  return {{"stages", c.stages},         {"widths", c.widths},
          {"stage_depth", c.stage_depth}, {"skip_stage", c.skip_stage},
          {"pool_grids", c.pool_grids}, {"pool_width", c.pool_width},
          {"head_width", c.head_width}, {"class_count", c.class_count},
          {"dropout", c.dropout},       {"heads", heads}};
}

FcnConfig fcn_config_from_json(const nlohmann::json& j) {
  FcnConfig c;
  if (!j.is_object()) throw net_config_error("net config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "stages") c.stages = v.get<int>();
      else if (key == "widths") c.widths = v.get<std::vector<int>>();
      else if (key == "stage_depth") c.stage_depth = v.get<int>();
      else if (key == "skip_stage") c.skip_stage = v.get<int>();
      else if (key == "pool_grids") c.pool_grids = v.get<std::vector<int>>();
      else if (key == "pool_width") c.pool_width = v.get<int>();
      else if (key == "head_width") c.head_width = v.get<int>();
      else if (key == "class_count") c.class_count = v.get<int>();
      else if (key == "dropout") c.dropout = v.get<double>();
      else if (key == "heads") {
        c.heads.clear();
        for (const auto& h : v) c.heads.insert(parse_head(h.get<std::string>()));
      } else {
        throw net_config_error("unknown net key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw net_config_error(std::string("net config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<ParamGroup> parameter_groups(const FcnConfig& c) {
  c.validate();
  std::vector<ParamGroup> groups;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t size) {
    groups.push_back({std::move(name), offset, size});
    offset += size;
  };
  const int S = c.stages;
  for (int s = 1; s <= S; ++s) {
    const int w = c.widths[s - 1];
    const std::size_t depth = c.stage_depth * conv_size(w, w, 3);
    if (s == 1) {
      add("stage1", conv_size(3, w, 3) + depth);
    } else {
      add("transition" + std::to_string(s - 1), conv_size(c.widths[s - 2], w, 3));
      add("stage" + std::to_string(s), depth);
    }
  }
  const int F = c.widths[S - 1] + c.widths[c.skip_stage - 1];
  const int G = static_cast<int>(c.pool_grids.size());
  const int spp = F + G * c.pool_width;
  if (c.has(Head::kSegmentation)) {
    add("seg_head", G * conv_size(F, c.pool_width, 1) + conv_size(spp, c.class_count, 3));
  }
  if (c.has(Head::kConfidence)) {
    add("conf_head", G * conv_size(F, c.pool_width, 1) + conv_size(spp, c.head_width, 3) +
                         conv_size(c.head_width + c.class_count, 1, 3));
  }
  if (c.has(Head::kOod)) {
    add("ood_head", conv_size(c.widths[S - 1], c.head_width, 3) + conv_size(c.head_width, 2, 1));
  }
  return groups;
}

std::size_t parameter_count(const FcnConfig& config) {
  const auto groups = parameter_groups(config);
  return groups.back().offset + groups.back().size;
}

void FreezePolicy::validate(const FcnConfig& config) const {
  if (trainable.empty()) throw net_config_error("freeze policy must leave a group trainable");
  const auto groups = parameter_groups(config);
  for (const auto& name : trainable) {
    if (std::none_of(groups.begin(), groups.end(), [&](const ParamGroup& g) { return g.name == name; })) {
      throw net_config_error("freeze policy names unknown group '" + name + "'");
    }
  }
}

FreezePolicy FreezePolicy::all(const FcnConfig& config) {
  FreezePolicy p;
  for (const auto& g : parameter_groups(config)) p.trainable.insert(g.name);
  return p;
}

FreezePolicy FreezePolicy::ood_default(const FcnConfig& config) {
  FreezePolicy p;
  const int S = config.stages;
  p.trainable.insert("stage" + std::to_string(S));
  if (S > 1) p.trainable.insert("transition" + std::to_string(S - 1));
  if (config.has(Head::kOod)) p.trainable.insert("ood_head");
  return p;
}

void ModelCheckpoint::validate() const {
  config.validate();
  const std::size_t expected = parameter_count(config);
  if (params.size() != expected) {
    throw Error("net", "param_count_mismatch",
                "checkpoint holds " + std::to_string(params.size()) + " parameters, config needs " +
                    std::to_string(expected));
  }
  norm.validate();
}

ModelCheckpoint init_checkpoint(const FcnConfig& config, const NormStats& norm, std::uint64_t seed) {
  ModelCheckpoint ckpt;
  ckpt.config = config;
  ckpt.norm = norm;
  ckpt.params.assign(parameter_count(config), 0.0f);
  Fcn<float> layout(config, ckpt.params, norm);  // validates and computes offsets
  (void)layout;
  Rng rng(derive_seed(seed, "net.init"));
  std::normal_distribution<double> normal(0.0, 1.0);
  // Walk conv blocks in layout order; every block is weights then bias.
  auto fill = [&](std::size_t offset, int in, int out, int k, double gain) {
    const double stddev = std::sqrt(gain / (static_cast<double>(in) * k * k));
    for (std::size_t i = 0; i < static_cast<std::size_t>(out) * in * k * k; ++i) {
      ckpt.params[offset + i] = static_cast<float>(normal(rng) * stddev);
    }
  };
  const int S = config.stages;
  std::size_t offset = 0;
  auto conv = [&](int in, int out, int k, double gain) {
    fill(offset, in, out, k, gain);
    offset += conv_size(in, out, k);
  };
  for (int s = 1; s <= S; ++s) {
    const int w = config.widths[s - 1];
    conv(s == 1 ? 3 : config.widths[s - 2], w, 3, 2.0);
    for (int d = 0; d < config.stage_depth; ++d) conv(w, w, 3, 2.0);
  }
  const int F = config.widths[S - 1] + config.widths[config.skip_stage - 1];
  const int G = static_cast<int>(config.pool_grids.size());
  const int spp = F + G * config.pool_width;
  if (config.has(Head::kSegmentation)) {
    for (int g = 0; g < G; ++g) conv(F, config.pool_width, 1, 2.0);
    conv(spp, config.class_count, 3, 1.0);
  }
  if (config.has(Head::kConfidence)) {
    for (int g = 0; g < G; ++g) conv(F, config.pool_width, 1, 2.0);
    conv(spp, config.head_width, 3, 2.0);
    conv(config.head_width + config.class_count, 1, 3, 1.0);
  }
  if (config.has(Head::kOod)) {
    conv(config.widths[S - 1], config.head_width, 3, 2.0);
    conv(config.head_width, 2, 1, 1.0);
  }
  ckpt.metadata = {{"init_seed", seed}};
  return ckpt;
}

// --- checkpoint container --------------------------------------------------------

namespace {
constexpr std::string_view kCkptMagic = "DOODCKPT\n1\n";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}
}  // namespace

std::string encode_checkpoint(const ModelCheckpoint& ckpt) {
  ckpt.validate();
  nlohmann::json header = {{"config", to_json(ckpt.config)},
                           {"norm", {{"mean", ckpt.norm.mean}, {"std", ckpt.norm.std}}},
                           {"metadata", ckpt.metadata},
                           {"param_count", ckpt.params.size()}};
  const std::string text = header.dump();
  std::string out(kCkptMagic);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + 4 * ckpt.params.size());
  for (float v : ckpt.params) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  return out;
}

ModelCheckpoint decode_checkpoint(std::string_view bytes) {
  auto fail = [](const std::string& what) { return Error("net", "bad_checkpoint", what); };
  if (bytes.substr(0, kCkptMagic.size()) != kCkptMagic) throw fail("bad magic or version");
  std::size_t pos = kCkptMagic.size();
  if (bytes.size() < pos + 8) throw fail("truncated header length");
  const std::uint64_t len = get_u64(bytes.data() + pos);
  pos += 8;
  if (bytes.size() < pos + len) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("header: ") + e.what());
  }
  pos += len;
  ModelCheckpoint ckpt;
  ckpt.config = fcn_config_from_json(header.at("config"));
  ckpt.norm.mean = header.at("norm").at("mean").get<std::array<double, 3>>();
  ckpt.norm.std = header.at("norm").at("std").get<std::array<double, 3>>();
  ckpt.metadata = header.value("metadata", nlohmann::json::object());
  const auto count = header.at("param_count").get<std::size_t>();
  if (bytes.size() - pos != 4 * count) throw fail("parameter payload length mismatch");
  ckpt.params.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + 4 * i + b])) << (8 * b);
    }
    ckpt.params[i] = std::bit_cast<float>(bits);
  }
  ckpt.validate();
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

// --- network ---------------------------------------------------------------------

template <typename T>
Fcn<T>::Fcn(const ModelCheckpoint& ckpt)
    : Fcn(ckpt.config, std::vector<T>(ckpt.params.begin(), ckpt.params.end()), ckpt.norm) {}

template <typename T>
Fcn<T>::Fcn(const FcnConfig& config, std::vector<T> params, const NormStats& norm)
    : config_(config), params_(std::move(params)), norm_(norm) {
  config_.validate();
  norm_.validate();
  if (params_.size() != parameter_count(config_)) {
    throw Error("net", "param_count_mismatch",
                "got " + std::to_string(params_.size()) + " parameters, config needs " +
                    std::to_string(parameter_count(config_)));
  }
  build_layout();
}

template <typename T>
void Fcn<T>::build_layout() {
  std::size_t offset = 0;
  auto conv = [&](int in, int out, int k, int stride) {
    Conv c{in, out, k, stride, offset, offset + static_cast<std::size_t>(out) * in * k * k};
    offset += conv_size(in, out, k);
    return c;
  };
  const auto& c = config_;
  const int S = c.stages;
  for (int s = 1; s <= S; ++s) {
    const int w = c.widths[s - 1];
    backbone_.push_back(conv(s == 1 ? 3 : c.widths[s - 2], w, 3, 2));
    backbone_stage_.push_back(s);
    for (int d = 0; d < c.stage_depth; ++d) {
      backbone_.push_back(conv(w, w, 3, 1));
      backbone_stage_.push_back(s);
    }
  }
  const int F = c.widths[S - 1] + c.widths[c.skip_stage - 1];
  const int G = static_cast<int>(c.pool_grids.size());
  const int spp = F + G * c.pool_width;
  if (c.has(Head::kSegmentation)) {
    for (int g = 0; g < G; ++g) seg_pool_.push_back(conv(F, c.pool_width, 1, 1));
    seg_out_ = conv(spp, c.class_count, 3, 1);
  }
  if (c.has(Head::kConfidence)) {
    for (int g = 0; g < G; ++g) conf_pool_.push_back(conv(F, c.pool_width, 1, 1));
    conf_hidden_ = conv(spp, c.head_width, 3, 1);
    conf_out_ = conv(c.head_width + c.class_count, 1, 3, 1);
  }
  if (c.has(Head::kOod)) {
    ood_hidden_ = conv(c.widths[S - 1], c.head_width, 3, 1);
    ood_out_ = conv(c.head_width, 2, 1, 1);
  }
}

namespace {

// Runs one convolution; `col` receives the im2col buffer (or a copy of the
// input for 1x1 kernels) for use in backward.
template <typename T>
Tensor3<T> run_conv(const typename Fcn<T>::Conv& cv, const std::vector<T>& params,
                    const Tensor3<T>& in, std::vector<T>& col) {
  const int oh = conv_out_size<T>(in.height, cv.kernel, cv.stride);
  const int ow = conv_out_size<T>(in.width, cv.kernel, cv.stride);
  if (cv.kernel == 1 && cv.stride == 1) {
    col = in.data;
  } else {
    im2col(in, cv.kernel, cv.stride, oh, ow, col);
  }
  Tensor3<T> out(cv.out, oh, ow);
  gemm_forward(params.data() + cv.weight, params.data() + cv.bias, col.data(), cv.out,
               cv.in * cv.kernel * cv.kernel, static_cast<std::size_t>(oh) * ow, out.data.data());
  return out;
}

// Accumulates weight/bias gradients; returns the input gradient when wanted.
template <typename T>
void conv_backward(const typename Fcn<T>::Conv& cv, const std::vector<T>& params,
                   const std::vector<T>& col, const Tensor3<T>& dout, int in_h, int in_w,
                   std::vector<T>& grad, Tensor3<T>* din) {
  const int rows = cv.in * cv.kernel * cv.kernel;
  const std::size_t P = dout.plane_size();
  T* dW = grad.data() + cv.weight;
  T* db = grad.data() + cv.bias;
  for (int co = 0; co < cv.out; ++co) {
    const T* g = dout.data.data() + co * P;
    T bsum = 0;
    for (std::size_t p = 0; p < P; ++p) bsum += g[p];
    db[co] += bsum;
    for (int r = 0; r < rows; ++r) {
      const T* c = col.data() + r * P;
      T s = 0;
      for (std::size_t p = 0; p < P; ++p) s += g[p] * c[p];
      dW[co * rows + r] += s;
    }
  }
  if (!din) return;
  std::vector<T> dcol(static_cast<std::size_t>(rows) * P, T(0));
  const T* W = params.data() + cv.weight;
  for (int co = 0; co < cv.out; ++co) {
    const T* g = dout.data.data() + co * P;
    for (int r = 0; r < rows; ++r) {
      const T w = W[co * rows + r];
      T* d = dcol.data() + r * P;
      for (std::size_t p = 0; p < P; ++p) d[p] += w * g[p];
    }
  }
  *din = Tensor3<T>(cv.in, in_h, in_w);
  if (cv.kernel == 1 && cv.stride == 1) {
    din->data = std::move(dcol);
  } else {
    col2im(dcol, cv.kernel, cv.stride, dout.height, dout.width, *din);
  }
}

}  // namespace

template <typename T>
typename Fcn<T>::Trace Fcn<T>::forward(const Tensor3<T>& image, const ForwardOptions& options) const {
  if (image.channels != 3) throw Error("net", "bad_input", "network input must have 3 channels");
  if (image.height < 1 || image.width < 1) throw Error("net", "bad_input", "empty input image");
  if (options.confidence && !config_.has(Head::kConfidence)) {
    throw Error("net", "missing_head", "checkpoint has no confidence head");
  }
  if (options.segmentation && !config_.has(Head::kSegmentation)) {
    throw Error("net", "missing_head", "checkpoint has no segmentation head");
  }
  if (options.ood && !config_.has(Head::kOod)) {
    throw Error("net", "missing_head", "checkpoint has no OOD head");
  }
  Trace t;
  t.options = options;
  t.height = image.height;
  t.width = image.width;
  const int D = config_.downsampling();
  t.padded_h = (image.height + D - 1) / D * D;
  t.padded_w = (image.width + D - 1) / D * D;

  // normalize + reflect-pad bottom/right
  t.input = Tensor3<T>(3, t.padded_h, t.padded_w);
  for (int c = 0; c < 3; ++c) {
    const T mean = static_cast<T>(norm_.mean[c]);
    const T inv = static_cast<T>(1.0 / norm_.std[c]);
    for (int y = 0; y < t.padded_h; ++y) {
      const int sy = reflect_index(y, image.height);
      for (int x = 0; x < t.padded_w; ++x) {
        t.input.at(c, y, x) = (image.at(c, sy, reflect_index(x, image.width)) - mean) * inv;
      }
    }
  }

  // backbone
  t.cols.resize(backbone_.size());
  const Tensor3<T>* cur = &t.input;
  t.acts.reserve(backbone_.size());
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    Tensor3<T> out = run_conv<T>(backbone_[i], params_, *cur, t.cols[i]);
    relu_inplace(out);
    t.acts.push_back(std::move(out));
    cur = &t.acts.back();
  }
  t.stage_end.assign(config_.stages + 1, -1);
  for (std::size_t i = 0; i < backbone_.size(); ++i) t.stage_end[backbone_stage_[i]] = static_cast<int>(i);
  const Tensor3<T>& deep = t.acts[t.stage_end[config_.stages]];
  const Tensor3<T>& skip = t.acts[t.stage_end[config_.skip_stage]];

  const bool need_fusion = options.segmentation || options.confidence;
  if (need_fusion) {
    const BilinearPlan up(deep.height, deep.width, skip.height, skip.width);
    const Tensor3<T> deep_up = up.apply(deep);
    t.fusion = Tensor3<T>(deep.channels + skip.channels, skip.height, skip.width);
    copy_channels(deep_up, t.fusion, 0);
    copy_channels(skip, t.fusion, deep.channels);
    if (options.sample_dropout && config_.dropout > 0) {
      Rng rng(options.dropout_seed);
      std::bernoulli_distribution keep(1.0 - config_.dropout);
      const T scale_kept = static_cast<T>(1.0 / (1.0 - config_.dropout));
      t.dropout_mask.resize(t.fusion.size());
      for (std::size_t i = 0; i < t.fusion.size(); ++i) {
        t.dropout_mask[i] = keep(rng) ? scale_kept : T(0);
        t.fusion.data[i] *= t.dropout_mask[i];
      }
    }
  }

  auto spp = [&](const std::vector<Conv>& pools, std::vector<Tensor3<T>>& pooled_acts,
                 std::vector<std::vector<T>>& cols) {
    const int F = t.fusion.channels;
    const int G = static_cast<int>(pools.size());
    Tensor3<T> out(F + G * config_.pool_width, t.fusion.height, t.fusion.width);
    copy_channels(t.fusion, out, 0);
    cols.resize(G);
    for (int g = 0; g < G; ++g) {
      const Tensor3<T> pooled = adaptive_avg_pool(t.fusion, config_.pool_grids[g]);
      Tensor3<T> b = run_conv<T>(pools[g], params_, pooled, cols[g]);
      relu_inplace(b);
      const BilinearPlan up(b.height, b.width, out.height, out.width);
      copy_channels(up.apply(b), out, F + g * config_.pool_width);
      pooled_acts.push_back(std::move(b));
    }
    return out;
  };

  const BilinearPlan to_full_from_skip(t.fusion.height ? t.fusion.height : 1,
                                       t.fusion.width ? t.fusion.width : 1, t.padded_h, t.padded_w);
  if (options.segmentation || options.confidence) {
    t.seg_spp = spp(seg_pool_, t.seg_pooled, t.seg_pool_cols);
    t.seg_low = run_conv<T>(seg_out_, params_, t.seg_spp, t.seg_out_col);
    t.seg_logits = crop_top_left(to_full_from_skip.apply(t.seg_low), t.height, t.width);
  }
  if (options.confidence) {
    t.conf_spp = spp(conf_pool_, t.conf_pooled, t.conf_pool_cols);
    t.conf_hidden = run_conv<T>(conf_hidden_, params_, t.conf_spp, t.conf_hidden_col);
    relu_inplace(t.conf_hidden);
    // segmentation logits enter as constants: no gradient flows back into them
    t.conf_blend = Tensor3<T>(config_.head_width + config_.class_count, t.seg_low.height, t.seg_low.width);
    copy_channels(t.conf_hidden, t.conf_blend, 0);
    copy_channels(t.seg_low, t.conf_blend, config_.head_width);
    relu_inplace(t.conf_blend);
    t.conf_low = run_conv<T>(conf_out_, params_, t.conf_blend, t.conf_out_col);
    t.conf_logit = crop_top_left(to_full_from_skip.apply(t.conf_low), t.height, t.width);
    t.confidence = Tensor3<T>(1, t.height, t.width);
    const T lim = static_cast<T>(kConfidenceLogitLimit);
    for (std::size_t i = 0; i < t.conf_logit.size(); ++i) {
      const T z = std::clamp(t.conf_logit.data[i], -lim, lim);
      t.conf_logit.data[i] = z;
      t.confidence.data[i] = T(1) / (T(1) + std::exp(-z));
    }
  }
  if (options.ood) {
    t.ood_hidden = run_conv<T>(ood_hidden_, params_, deep, t.ood_hidden_col);
    relu_inplace(t.ood_hidden);
    t.ood_low = run_conv<T>(ood_out_, params_, t.ood_hidden, t.ood_out_col);
    const BilinearPlan up(t.ood_low.height, t.ood_low.width, t.padded_h, t.padded_w);
    t.ood_logits = crop_top_left(up.apply(t.ood_low), t.height, t.width);
  }
  return t;
}

template <typename T>
void Fcn<T>::backward(const Trace& t, const Tensor3<T>* d_seg, const Tensor3<T>* d_confidence,
                      const Tensor3<T>* d_ood, std::vector<T>& grad, Tensor3<T>* d_image,
                      std::size_t backbone_floor) const {
  if (grad.size() != params_.size()) grad.assign(params_.size(), T(0));
  const int S = config_.stages;
  const Tensor3<T>& deep = t.acts[t.stage_end[S]];
  const Tensor3<T>& skip = t.acts[t.stage_end[config_.skip_stage]];
  Tensor3<T> d_deep(deep.channels, deep.height, deep.width);
  Tensor3<T> d_fusion;
  bool fusion_touched = false;

  auto spp_backward = [&](const std::vector<Conv>& pools, const std::vector<Tensor3<T>>& pooled_acts,
                          const std::vector<std::vector<T>>& cols, const Tensor3<T>& d_spp) {
    const int F = t.fusion.channels;
    if (!fusion_touched) {
      d_fusion = Tensor3<T>(F, t.fusion.height, t.fusion.width);
      fusion_touched = true;
    }
    for (std::size_t i = 0; i < d_fusion.size(); ++i) d_fusion.data[i] += d_spp.data[i];
    for (std::size_t g = 0; g < pools.size(); ++g) {
      const Tensor3<T> d_up = slice_channels(d_spp, F + static_cast<int>(g) * config_.pool_width,
                                             config_.pool_width);
      const Tensor3<T>& b = pooled_acts[g];
      Tensor3<T> d_b(b.channels, b.height, b.width);
      BilinearPlan(b.height, b.width, d_up.height, d_up.width).apply_adjoint(d_up, d_b);
      relu_mask(b, d_b);
      Tensor3<T> d_pooled;
      conv_backward<T>(pools[g], params_, cols[g], d_b, b.height, b.width, grad, &d_pooled);
      adaptive_avg_pool_backward(d_pooled, d_fusion, 0);
    }
  };

  const BilinearPlan from_skip(t.fusion.height ? t.fusion.height : 1,
                               t.fusion.width ? t.fusion.width : 1, t.padded_h, t.padded_w);
  if (d_seg) {
    const Tensor3<T> padded = embed_padded(*d_seg, t.padded_h, t.padded_w);
    Tensor3<T> d_low(t.seg_low.channels, t.seg_low.height, t.seg_low.width);
    from_skip.apply_adjoint(padded, d_low);
    Tensor3<T> d_spp;
    conv_backward<T>(seg_out_, params_, t.seg_out_col, d_low, t.seg_spp.height, t.seg_spp.width, grad, &d_spp);
    spp_backward(seg_pool_, t.seg_pooled, t.seg_pool_cols, d_spp);
  }
  if (d_confidence) {
    Tensor3<T> d_logit(1, t.height, t.width);
    const T lim = static_cast<T>(kConfidenceLogitLimit);
    for (std::size_t i = 0; i < d_logit.size(); ++i) {
      const T c = t.confidence.data[i];
      const bool saturated = std::abs(t.conf_logit.data[i]) >= lim;
      d_logit.data[i] = saturated ? T(0) : d_confidence->data[i] * c * (T(1) - c);
    }
    const Tensor3<T> padded = embed_padded(d_logit, t.padded_h, t.padded_w);
    Tensor3<T> d_low(1, t.conf_low.height, t.conf_low.width);
    from_skip.apply_adjoint(padded, d_low);
    Tensor3<T> d_blend;
    conv_backward<T>(conf_out_, params_, t.conf_out_col, d_low, t.conf_blend.height, t.conf_blend.width, grad, &d_blend);
    relu_mask(t.conf_blend, d_blend);
    Tensor3<T> d_hidden = slice_channels(d_blend, 0, config_.head_width);
    relu_mask(t.conf_hidden, d_hidden);
    Tensor3<T> d_spp;
    conv_backward<T>(conf_hidden_, params_, t.conf_hidden_col, d_hidden, t.conf_spp.height, t.conf_spp.width, grad, &d_spp);
    spp_backward(conf_pool_, t.conf_pooled, t.conf_pool_cols, d_spp);
  }

  Tensor3<T> d_skip;
  if (fusion_touched) {
    if (!t.dropout_mask.empty()) {
      for (std::size_t i = 0; i < d_fusion.size(); ++i) d_fusion.data[i] *= t.dropout_mask[i];
    }
    const Tensor3<T> d_deep_up = slice_channels(d_fusion, 0, deep.channels);
    BilinearPlan(deep.height, deep.width, skip.height, skip.width).apply_adjoint(d_deep_up, d_deep);
    d_skip = slice_channels(d_fusion, deep.channels, skip.channels);
  }
  if (d_ood) {
    const Tensor3<T> padded = embed_padded(*d_ood, t.padded_h, t.padded_w);
    Tensor3<T> d_low(2, t.ood_low.height, t.ood_low.width);
    BilinearPlan(t.ood_low.height, t.ood_low.width, t.padded_h, t.padded_w).apply_adjoint(padded, d_low);
    Tensor3<T> d_hidden;
    conv_backward<T>(ood_out_, params_, t.ood_out_col, d_low, t.ood_hidden.height, t.ood_hidden.width, grad, &d_hidden);
    relu_mask(t.ood_hidden, d_hidden);
    Tensor3<T> d_in;
    conv_backward<T>(ood_hidden_, params_, t.ood_hidden_col, d_hidden, deep.height, deep.width, grad, &d_in);
    for (std::size_t i = 0; i < d_deep.size(); ++i) d_deep.data[i] += d_in.data[i];
  }

  // backbone, last conv first
  const int last = static_cast<int>(backbone_.size()) - 1;
  const int floor = d_image ? 0 : static_cast<int>(std::min(backbone_floor, backbone_.size()));
  Tensor3<T> g = std::move(d_deep);
  for (int i = last; i >= floor; --i) {
    if (fusion_touched && i == t.stage_end[config_.skip_stage]) {
      for (std::size_t k = 0; k < g.size(); ++k) g.data[k] += d_skip.data[k];
    }
    relu_mask(t.acts[i], g);
    const Tensor3<T>& in = i == 0 ? t.input : t.acts[i - 1];
    const bool want_input = i > floor || d_image;
    Tensor3<T> d_in;
    conv_backward<T>(backbone_[i], params_, t.cols[i], g, in.height, in.width, grad,
                     want_input ? &d_in : nullptr);
    if (!want_input) break;
    g = std::move(d_in);
  }
  if (d_image) {
    // g is the gradient w.r.t. the normalized padded input
    *d_image = Tensor3<T>(3, t.height, t.width);
    for (int c = 0; c < 3; ++c) {
      const T inv = static_cast<T>(1.0 / norm_.std[c]);
      for (int y = 0; y < t.padded_h; ++y) {
        const int sy = reflect_index(y, t.height);
        for (int x = 0; x < t.padded_w; ++x) {
          d_image->at(c, sy, reflect_index(x, t.width)) += g.at(c, y, x) * inv;
        }
      }
    }
  }
}

template <typename T>
std::size_t Fcn<T>::backbone_index(const std::string& group) const {
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    const int s = backbone_stage_[i];
    const bool first_of_stage = i == 0 || backbone_stage_[i - 1] != s;
    if (group == "stage1" && s == 1) return i;
    if (s > 1 && first_of_stage && group == "transition" + std::to_string(s - 1)) return i;
    if (s > 1 && !first_of_stage && group == "stage" + std::to_string(s)) return i;
  }
  return backbone_.size();
}

template class Fcn<float>;
template class Fcn<double>;

// --- convenience --------------------------------------------------------------------

LogitMap forward_segmentation(const ModelCheckpoint& ckpt, const Image& image,
                              const ForwardOptions& options) {
  ckpt.validate();
  Fcn<float> net(ckpt);
  ForwardOptions o = options;
  o.segmentation = true;
  o.confidence = false;
  o.ood = false;
  return std::move(net.forward(image, o).seg_logits);
}

LogitMap forward_ood(const ModelCheckpoint& ckpt, const Image& image) {
  ckpt.validate();
  Fcn<float> net(ckpt);
  ForwardOptions o;
  o.segmentation = false;
  o.ood = true;
  return std::move(net.forward(image, o).ood_logits);
}

std::pair<LogitMap, ConfidenceMap> forward_confidence(const ModelCheckpoint& ckpt, const Image& image) {
  ckpt.validate();
  Fcn<float> net(ckpt);
  ForwardOptions o;
  o.confidence = true;
  auto t = net.forward(image, o);
  ConfidenceMap conf(t.height, t.width);
  conf.data = std::move(t.confidence.data);
  return {std::move(t.seg_logits), std::move(conf)};
}

template <typename T>
Tensor3<T> input_gradient(const Fcn<T>& net, const Tensor3<T>& image, double temperature, double scale) {
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw ConfigError("net", "bad_temperature", "temperature must be positive");
  }
  ForwardOptions o;
  auto t = net.forward(image, o);
  const Tensor3<T>& z = t.seg_logits;
  const int C = z.channels;
  const std::size_t P = z.plane_size();
  Tensor3<T> d_seg(C, z.height, z.width);
  std::vector<double> p(C);
  for (std::size_t i = 0; i < P; ++i) {
    int winner = 0;
    for (int c = 1; c < C; ++c) {
      if (z.data[c * P + i] > z.data[winner * P + i]) winner = c;
    }
    double mx = -INFINITY;
    for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(z.data[c * P + i]) / temperature);
    double sum = 0;
    for (int c = 0; c < C; ++c) {
      p[c] = std::exp(static_cast<double>(z.data[c * P + i]) / temperature - mx);
      sum += p[c];
    }
    for (int c = 0; c < C; ++c) {
      const double onehot = c == winner ? 1.0 : 0.0;
      d_seg.data[c * P + i] = static_cast<T>(scale * (onehot - p[c] / sum) / temperature);
    }
  }
  std::vector<T> grad(net.params().size(), T(0));
  Tensor3<T> d_image;
  net.backward(t, &d_seg, nullptr, nullptr, grad, &d_image);
  return d_image;
}

template Tensor3<float> input_gradient(const Fcn<float>&, const Tensor3<float>&, double, double);
template Tensor3<double> input_gradient(const Fcn<double>&, const Tensor3<double>&, double, double);

Tensor3<float> input_gradient(const ModelCheckpoint& ckpt, const Image& image, double temperature,
                              double scale) {
  ckpt.validate();
  return input_gradient(Fcn<float>(ckpt), image, temperature, scale);
}

}  // namespace dood
