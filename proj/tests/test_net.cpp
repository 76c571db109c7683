#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dood/error.hpp"
#include "dood/net.hpp"
#include "test_util.hpp"

using namespace dood;
using dood::testing::random_image;
using dood::testing::test_norm;
using dood::testing::tiny_config;

namespace {

std::vector<double> jittered_params(const FcnConfig& cfg, std::uint64_t seed) {
  const auto ckpt = init_checkpoint(cfg, test_norm(), seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.05);
  std::vector<double> p(ckpt.params.begin(), ckpt.params.end());
  for (auto& v : p) v += n(rng);
  return p;
}

Tensor3<double> random_tensor(int c, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor3<double> t(c, h, w);
  for (auto& v : t.data) v = n(rng);
  return t;
}

double dot(const Tensor3<double>& a, const Tensor3<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

}  // namespace

TEST(NetConfig, ParameterGroupsCoverVector) {
  const auto cfg = tiny_config();
  const auto groups = parameter_groups(cfg);
  std::size_t offset = 0;
  for (const auto& g : groups) {
    EXPECT_EQ(g.offset, offset);
    offset += g.size;
  }
  EXPECT_EQ(offset, parameter_count(cfg));
  // 3x3 stem 3->4, depth 4->4, transition 4->5, depth 5->5
  EXPECT_EQ(groups[0].name, "stage1");
  EXPECT_EQ(groups[0].size, (4u * 3 * 9 + 4) + (4u * 4 * 9 + 4));
  EXPECT_EQ(groups[1].name, "transition1");
  EXPECT_EQ(groups[1].size, 5u * 4 * 9 + 5);
  EXPECT_EQ(groups[2].name, "stage2");
}

TEST(NetConfig, RejectsBadConfigs) {
  auto cfg = tiny_config();
  cfg.skip_stage = 2;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.widths = {4, 0};
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(fcn_config_from_json({{"bogus", 1}}), ConfigError);
}

TEST(NetConfig, JsonRoundTrip) {
  const auto cfg = tiny_config();
  EXPECT_EQ(fcn_config_from_json(to_json(cfg)), cfg);
}

TEST(NetConfig, DefaultOodFreezePolicy) {
  FcnConfig cfg;
  cfg.heads = {Head::kSegmentation, Head::kOod};
  const auto p = FreezePolicy::ood_default(cfg);
  EXPECT_EQ(p.trainable, (std::set<std::string>{"stage4", "transition3", "ood_head"}));
  EXPECT_NO_THROW(p.validate(cfg));
  EXPECT_THROW(FreezePolicy{}.validate(cfg), ConfigError);
  EXPECT_THROW(FreezePolicy{{"stage9"}}.validate(cfg), ConfigError);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  auto ckpt = init_checkpoint(tiny_config(), test_norm(), 7);
  ckpt.params[3] = -0.0f;
  ckpt.params[5] = std::nextafter(1.0f, 2.0f);
  ckpt.metadata = {{"seed", 7}};
  const auto bytes = encode_checkpoint(ckpt);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  ASSERT_EQ(back.params.size(), ckpt.params.size());
  EXPECT_EQ(std::memcmp(back.params.data(), ckpt.params.data(), 4 * ckpt.params.size()), 0);
  EXPECT_EQ(back.config, ckpt.config);
  EXPECT_EQ(back.norm, ckpt.norm);
}

TEST(Checkpoint, RejectsCorruptAndMismatched) {
  auto ckpt = init_checkpoint(tiny_config(), test_norm(), 7);
  auto bytes = encode_checkpoint(ckpt);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), Error);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), Error);
  ckpt.params.pop_back();
  EXPECT_THROW(ckpt.validate(), Error);
  EXPECT_THROW(forward_segmentation(ckpt, random_image(16, 16, 1)), Error);
}

TEST(Forward, ShapesAtFullResolution) {
  FcnConfig cfg;
  cfg.heads = {Head::kSegmentation, Head::kConfidence, Head::kOod};
  const auto ckpt = init_checkpoint(cfg, test_norm(), 3);
  const auto img = random_image(64, 64, 1);
  const auto seg = forward_segmentation(ckpt, img);
  EXPECT_EQ(seg.channels, 8);
  EXPECT_EQ(seg.height, 64);
  EXPECT_EQ(seg.width, 64);
  const auto ood = forward_ood(ckpt, img);
  EXPECT_EQ(ood.channels, 2);
  EXPECT_EQ(ood.height, 64);
  const auto [logits, conf] = forward_confidence(ckpt, img);
  EXPECT_EQ(conf.height, 64);
  EXPECT_EQ(conf.width, 64);
  for (float c : conf.data) {
    EXPECT_GT(c, 0.0f);
    EXPECT_LT(c, 1.0f);
  }
  EXPECT_EQ(logits, seg);
}

TEST(Forward, NonDivisibleInputIsPaddedAndCropped) {
  const auto ckpt = init_checkpoint(FcnConfig{}, test_norm(), 3);
  const auto seg = forward_segmentation(ckpt, random_image(37, 51, 2));
  EXPECT_EQ(seg.height, 37);
  EXPECT_EQ(seg.width, 51);
  for (float v : seg.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, ZeroParametersGiveConstantLogits) {
  auto ckpt = init_checkpoint(FcnConfig{}, test_norm(), 3);
  std::fill(ckpt.params.begin(), ckpt.params.end(), 0.0f);
  const auto seg = forward_segmentation(ckpt, random_image(64, 64, 4));
  for (float v : seg.data) EXPECT_EQ(v, seg.data[0]);
}

TEST(Forward, DeterministicWithoutDropout) {
  auto cfg = FcnConfig{};
  cfg.dropout = 0.3;
  const auto ckpt = init_checkpoint(cfg, test_norm(), 3);
  const auto img = random_image(32, 48, 5);
  EXPECT_EQ(forward_segmentation(ckpt, img), forward_segmentation(ckpt, img));
  ForwardOptions a, b;
  a.sample_dropout = b.sample_dropout = true;
  a.dropout_seed = 1;
  b.dropout_seed = 2;
  EXPECT_NE(forward_segmentation(ckpt, img, a), forward_segmentation(ckpt, img, b));
  EXPECT_EQ(forward_segmentation(ckpt, img, a), forward_segmentation(ckpt, img, a));
}

TEST(Forward, OodHeadSharesBackbone) {
  FcnConfig cfg;
  cfg.heads = {Head::kSegmentation, Head::kOod};
  Fcn<float> net(init_checkpoint(cfg, test_norm(), 9));
  const auto img = random_image(64, 64, 6);
  ForwardOptions seg_only;
  ForwardOptions ood_only;
  ood_only.segmentation = false;
  ood_only.ood = true;
  const auto a = net.forward(img, seg_only);
  const auto b = net.forward(img, ood_only);
  ASSERT_EQ(a.acts.size(), b.acts.size());
  for (std::size_t i = 0; i < a.acts.size(); ++i) EXPECT_EQ(a.acts[i], b.acts[i]);
  const auto& z = b.ood_logits;
  for (std::size_t p = 0; p < z.plane_size(); ++p) {
    const double e0 = std::exp(z.data[p]), e1 = std::exp(z.data[z.plane_size() + p]);
    EXPECT_NEAR(e0 / (e0 + e1) + e1 / (e0 + e1), 1.0, 1e-12);
  }
}

TEST(Forward, MissingHeadIsAnError) {
  const auto ckpt = init_checkpoint(FcnConfig{}, test_norm(), 3);
  EXPECT_THROW(forward_confidence(ckpt, random_image(32, 32, 1)), Error);
  EXPECT_THROW(forward_ood(ckpt, random_image(32, 32, 1)), Error);
}

// Parameter gradients of <r, outputs> against central differences.
class ParamGradient : public ::testing::TestWithParam<int> {};

TEST_P(ParamGradient, MatchesCentralDifferences) {
  const int which = GetParam();  // 0 seg, 1 confidence, 2 ood
  const auto cfg = tiny_config();
  const auto params = jittered_params(cfg, 11 + which);
  Fcn<double> net(cfg, params, test_norm());
  const auto img = to_scalar<double>(random_image(10, 11, 21 + which));
  ForwardOptions o;
  o.confidence = which == 1;
  o.ood = which == 2;
  const auto t = net.forward(img, o);
  const Tensor3<double>& out = which == 0 ? t.seg_logits : which == 1 ? t.confidence : t.ood_logits;
  const auto r = random_tensor(out.channels, out.height, out.width, 31 + which);
  std::vector<double> grad(params.size(), 0.0);
  net.backward(t, which == 0 ? &r : nullptr, which == 1 ? &r : nullptr, which == 2 ? &r : nullptr, grad,
               nullptr);

  auto objective = [&](const std::vector<double>& p) {
    Fcn<double> n(cfg, p, test_norm());
    const auto tt = n.forward(img, o);
    return dot(r, which == 0 ? tt.seg_logits : which == 1 ? tt.confidence : tt.ood_logits);
  };
  std::vector<double> analytic, numeric;
  const double h = 1e-5;
  // The confidence output also depends on the gradient-blocked segmentation
  // logits, so only its own head's parameters have a matching derivative.
  std::size_t lo = 0, hi = params.size();
  if (which == 1) {
    for (const auto& g : parameter_groups(cfg)) {
      if (g.name == "conf_head") lo = g.offset, hi = g.offset + g.size;
    }
  }
  for (std::size_t i = lo; i < hi; i += which == 1 ? 1 : 3) {
    auto p = params;
    p[i] += h;
    const double up = objective(p);
    p[i] -= 2 * h;
    const double down = objective(p);
    numeric.push_back((up - down) / (2 * h));
    analytic.push_back(grad[i]);
  }
  EXPECT_LT(rel_error(analytic, numeric), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Heads, ParamGradient, ::testing::Values(0, 1, 2));

TEST(ConfidenceBranch, DoesNotReachSegmentationLogits) {
  const auto cfg = tiny_config();
  const auto params = jittered_params(cfg, 5);
  Fcn<double> net(cfg, params, test_norm());
  ForwardOptions o;
  o.confidence = true;
  const auto img = to_scalar<double>(random_image(8, 8, 3));
  const auto t = net.forward(img, o);
  const auto r = random_tensor(1, 8, 8, 4);
  std::vector<double> grad(params.size(), 0.0);
  net.backward(t, nullptr, &r, nullptr, grad, nullptr);
  for (const auto& g : parameter_groups(cfg)) {
    if (g.name != "seg_head") continue;
    for (std::size_t i = g.offset; i < g.offset + g.size; ++i) EXPECT_EQ(grad[i], 0.0) << i;
  }
  // The forward value does depend on those weights through the blocked input,
  // so the zero above comes from the stop-gradient, not from a missing path.
  const auto& seg_head = parameter_groups(cfg)[3];
  ASSERT_EQ(seg_head.name, "seg_head");
  auto nudged = params;
  nudged[seg_head.offset + seg_head.size - 1] += 1e-3;  // a seg output bias
  const auto t2 = Fcn<double>(cfg, nudged, test_norm()).forward(img, o);
  EXPECT_NE(t2.confidence, t.confidence);
}

TEST(InputGradient, MatchesCentralDifferences) {
  const auto cfg = tiny_config();
  for (int trial = 0; trial < 5; ++trial) {
    const auto params = jittered_params(cfg, 100 + trial);
    Fcn<double> net(cfg, params, test_norm());
    const auto img = to_scalar<double>(random_image(8, 8, 200 + trial));
    const double T = trial == 0 ? 1.0 : 1.5 * trial;
    const auto g = input_gradient(net, img, T);
    // Winners from the unperturbed logits, held fixed.
    const auto base = net.forward(img, {}).seg_logits;
    const std::size_t P = base.plane_size();
    std::vector<int> winner(P, 0);
    for (std::size_t p = 0; p < P; ++p) {
      for (int c = 1; c < base.channels; ++c) {
        if (base.data[c * P + p] > base.data[winner[p] * P + p]) winner[p] = c;
      }
    }
    auto objective = [&](const Tensor3<double>& x) {
      const auto z = net.forward(x, {}).seg_logits;
      double s = 0;
      for (std::size_t p = 0; p < P; ++p) {
        double mx = -INFINITY, sum = 0;
        for (int c = 0; c < z.channels; ++c) mx = std::max(mx, z.data[c * P + p] / T);
        for (int c = 0; c < z.channels; ++c) sum += std::exp(z.data[c * P + p] / T - mx);
        s += z.data[winner[p] * P + p] / T - mx - std::log(sum);
      }
      return s;
    };
    std::vector<double> analytic, numeric;
    const double h = 1e-5;
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      auto x = img;
      x.data[i] += h;
      const double up = objective(x);
      x.data[i] -= 2 * h;
      const double down = objective(x);
      numeric.push_back((up - down) / (2 * h));
      analytic.push_back(g.data[i]);
    }
    EXPECT_LT(rel_error(analytic, numeric), 1e-4) << "trial " << trial;
  }
}

TEST(InputGradient, ZeroNetworkAndLinearity) {
  auto cfg = tiny_config();
  std::vector<double> zeros(parameter_count(cfg), 0.0);
  Fcn<double> flat(cfg, zeros, test_norm());
  const auto img = to_scalar<double>(random_image(8, 8, 1));
  for (double v : input_gradient(flat, img, 1.0).data) EXPECT_EQ(v, 0.0);

  Fcn<double> net(cfg, jittered_params(cfg, 3), test_norm());
  const auto g1 = input_gradient(net, img, 2.0, 1.0);
  const auto g2 = input_gradient(net, img, 2.0, 2.0);
  for (std::size_t i = 0; i < g1.data.size(); ++i) EXPECT_DOUBLE_EQ(g2.data[i], 2.0 * g1.data[i]);
  EXPECT_THROW(input_gradient(net, img, 0.0), ConfigError);
  EXPECT_THROW(input_gradient(net, img, -1.0), ConfigError);
}
