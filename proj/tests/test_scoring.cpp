#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "dood/error.hpp"
#include "dood/scoring.hpp"
#include "test_util.hpp"

using namespace dood;
using dood::testing::random_image;
using dood::testing::test_norm;
using dood::testing::tiny_config;

namespace {

LogitMap pixel(std::initializer_list<float> v) {
  LogitMap m(static_cast<int>(v.size()), 1, 1);
  std::copy(v.begin(), v.end(), m.data.begin());
  return m;
}

LogitMap random_logits(int c, int h, int w, std::uint64_t seed, float spread = 3.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-spread, spread);
  LogitMap m(c, h, w);
  for (auto& v : m.data) v = u(rng);
  return m;
}

ModelCheckpoint jittered(const FcnConfig& cfg, std::uint64_t seed) {
  auto ck = init_checkpoint(cfg, test_norm(), seed);
  std::mt19937_64 rng(seed + 99);
  std::normal_distribution<float> n(0.0f, 0.05f);
  for (auto& p : ck.params) p += n(rng);
  return ck;
}

}  // namespace

TEST(MaxSoftmax, Examples) {
  EXPECT_NEAR(score_max_softmax(LogitMap(8, 2, 2, 0.3f)).at(1, 1), 0.875, 1e-6);
  EXPECT_NEAR(score_max_softmax(pixel({1e4f, 0, 0})).at(0, 0), 0.0, 1e-6);
  EXPECT_NEAR(score_max_softmax(pixel({0, std::log(2.0f)})).at(0, 0), 1.0 / 3.0, 1e-6);
  EXPECT_THROW(score_max_softmax(LogitMap(1, 2, 2)), Error);
}

TEST(TemperedSoftmax, Examples) {
  EXPECT_NEAR(score_tempered_softmax(pixel({2, 0}), 2.0).at(0, 0), 1.0 / (1.0 + std::exp(1.0)), 1e-6);
  EXPECT_NEAR(score_tempered_softmax(pixel({2, 0}), 2.0).at(0, 0), 0.2689, 1e-4);
  EXPECT_NEAR(score_tempered_softmax(pixel({2, 0}), 1e6).at(0, 0), 0.5, 1e-5);
  EXPECT_EQ(score_tempered_softmax(pixel({2, 0, 1}), 1.0), score_max_softmax(pixel({2, 0, 1})));
}

TEST(Confidence, Examples) {
  ConfidenceMap c(1, 3);
  c.data = {0.5f, 0.999999f, 0.2f};
  const auto s = score_confidence(c);
  EXPECT_FLOAT_EQ(s.data[0], 0.5f);
  EXPECT_NEAR(s.data[1], 0.0, 1e-5);
  EXPECT_GT(s.data[2], s.data[0]);
}

TEST(Discriminative, Examples) {
  EXPECT_FLOAT_EQ(score_discriminative(pixel({1.5f, 1.5f})).at(0, 0), 0.5f);
  EXPECT_NEAR(score_discriminative(pixel({0, std::log(3.0f)})).at(0, 0), 0.75, 1e-6);
  const auto a = random_logits(2, 4, 5, 1);
  auto b = a;
  for (auto& v : b.data) v += 7.0f;
  const auto sa = score_discriminative(a), sb = score_discriminative(b);
  for (std::size_t i = 0; i < sa.data.size(); ++i) EXPECT_NEAR(sa.data[i], sb.data[i], 1e-6);
  EXPECT_THROW(score_discriminative(LogitMap(3, 1, 1)), Error);
}

TEST(Foreign, Examples) {
  EXPECT_NEAR(score_foreign_class(LogitMap(8, 1, 1), {4, 5, 6, 7}).at(0, 0), 0.5, 1e-6);
  const auto p = pixel({std::log(0.1f), std::log(0.2f), std::log(0.3f), std::log(0.4f)});
  EXPECT_NEAR(score_foreign_class(p, {2, 3}).at(0, 0), 0.7, 1e-6);
  EXPECT_EQ(score_foreign_class(p, {3}, ForeignVariant::kWinner).at(0, 0), 1.0f);
  EXPECT_EQ(score_foreign_class(p, {0, 1}, ForeignVariant::kWinner).at(0, 0), 0.0f);
  EXPECT_THROW(score_foreign_class(p, {0, 1, 2, 3}), ConfigError);
  EXPECT_THROW(score_foreign_class(p, {}), ConfigError);
  EXPECT_THROW(score_foreign_class(p, {4}), ConfigError);
}

TEST(MutualInformation, Examples) {
  const auto l = random_logits(4, 3, 3, 2);
  for (float v : mutual_information({l, l, l}).data) EXPECT_NEAR(v, 0.0f, 1e-6);
  const auto mi = mutual_information({pixel({60, 0}), pixel({0, 60})});
  EXPECT_NEAR(mi.at(0, 0), std::log(2.0), 1e-5);
  EXPECT_THROW(mutual_information({l}), ConfigError);
}

TEST(MutualInformation, BoundedByEntropyOfMean) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<LogitMap> samples;
    for (int k = 0; k < 5; ++k) samples.push_back(random_logits(3, 2, 2, seed * 10 + k));
    const auto mi = mutual_information(samples);
    for (int i = 0; i < 4; ++i) {
      std::array<double, 3> mean{};
      for (const auto& s : samples) {
        double z = 0;
        for (int c = 0; c < 3; ++c) z += std::exp(s.data[c * 4 + i]);
        for (int c = 0; c < 3; ++c) mean[c] += std::exp(s.data[c * 4 + i]) / z / 5;
      }
      double h = 0;
      for (double m : mean) h -= m * std::log(m);
      EXPECT_GE(mi.data[i], 0.0f);
      EXPECT_LE(mi.data[i], h + 1e-6);
    }
  }
}

TEST(McDropout, NeedsDropoutAndIsSeeded) {
  auto cfg = tiny_config();
  cfg.heads = {Head::kSegmentation};
  const auto img = random_image(32, 32, 3);
  try {
    score_mc_mutual_info(jittered(cfg, 1), img, 4, 1);
    FAIL() << "dropout disabled must be rejected";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "dropout_disabled");
  }
  cfg.dropout = 0.3;
  const auto ck = jittered(cfg, 1);
  const auto a = score_mc_mutual_info(ck, img, 4, 1);
  EXPECT_EQ(a.height, 32);
  EXPECT_EQ(a, score_mc_mutual_info(ck, img, 4, 1));
  EXPECT_NE(a, score_mc_mutual_info(ck, img, 4, 2));
  for (float v : a.data) EXPECT_GE(v, 0.0f);
  EXPECT_THROW(score_mc_mutual_info(ck, img, 1, 1), ConfigError);
}

TEST(Odin, ReducesToMaxSoftmaxBitExact) {
  auto cfg = tiny_config();
  cfg.heads = {Head::kSegmentation};
  const auto ck = jittered(cfg, 4);
  const Fcn<float> net(ck);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto img = random_image(32, 48, s);
    const auto odin = score_odin(net, img, {0.0, 1.0});
    const auto ms = score_max_softmax(net.forward(img, {}).seg_logits);
    ASSERT_EQ(odin.data.size(), ms.data.size());
    EXPECT_EQ(std::memcmp(odin.data.data(), ms.data.data(), ms.data.size() * sizeof(float)), 0);
  }
}

TEST(Odin, PerturbationLowersMeanScore) {
  auto cfg = tiny_config();
  cfg.heads = {Head::kSegmentation};
  const auto ck = jittered(cfg, 5);
  const Fcn<float> net(ck);
  const auto img = random_image(32, 32, 9);
  auto mean = [](const ScoreMap& m) {
    double s = 0;
    for (float v : m.data) s += v;
    return s / static_cast<double>(m.data.size());
  };
  // Stepping toward each pixel's winner makes the network more confident on average.
  EXPECT_LT(mean(score_odin(net, img, {0.01, 1.0})), mean(score_odin(net, img, {0.0, 1.0})));
  EXPECT_THROW(score_odin(net, img, {-1.0, 1.0}), ConfigError);
  EXPECT_THROW(score_odin(net, img, {0.0, 0.0}), ConfigError);
}

TEST(Orientation, ExtremeInputsRankOodHigher) {
  const auto confident = pixel({9, 0, 0, 0});
  const auto flat = pixel({0, 0, 0, 0});
  EXPECT_GT(score_max_softmax(flat).at(0, 0), score_max_softmax(confident).at(0, 0));
  EXPECT_GT(score_tempered_softmax(flat, 10).at(0, 0), score_tempered_softmax(confident, 10).at(0, 0));
  EXPECT_GT(score_discriminative(pixel({0, 9})).at(0, 0), score_discriminative(pixel({9, 0})).at(0, 0));
  EXPECT_GT(score_foreign_class(pixel({0, 9}), {1}).at(0, 0), score_foreign_class(pixel({9, 0}), {1}).at(0, 0));
  ConfidenceMap lo(1, 1, 0.1f), hi(1, 1, 0.9f);
  EXPECT_GT(score_confidence(lo).at(0, 0), score_confidence(hi).at(0, 0));
  EXPECT_GT(mutual_information({pixel({9, 0}), pixel({0, 9})}).at(0, 0),
            mutual_information({pixel({9, 0}), pixel({9, 0})}).at(0, 0));
}

TEST(Finite, AllScorersOnWideLogits) {
  const auto l = random_logits(5, 6, 6, 3, 80.0f);
  for (auto m : {score_max_softmax(l), score_tempered_softmax(l, 1000.0), score_foreign_class(l, {0, 2})}) {
    for (float v : m.data) EXPECT_TRUE(std::isfinite(v));
  }
  const auto d = random_logits(2, 6, 6, 4, 80.0f);
  for (float v : score_discriminative(d).data) EXPECT_TRUE(std::isfinite(v));
  for (float v : mutual_information({l, random_logits(5, 6, 6, 5, 80.0f)}).data) EXPECT_TRUE(std::isfinite(v));
}

TEST(MaxSoftmax, ShiftInvariantRanking) {
  const auto l = random_logits(4, 5, 5, 8);
  auto shifted = l;
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 5; ++x) {
      const float d = static_cast<float>(y * 5 + x) - 12.0f;
      for (int c = 0; c < 4; ++c) shifted.at(c, y, x) += d;
    }
  }
  const auto a = score_max_softmax(l), b = score_max_softmax(shifted);
  for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-5);
}

TEST(ScoreImage, DispatchesByMethod) {
  auto cfg = tiny_config();
  cfg.class_count = 4;
  const auto ck = jittered(cfg, 6);
  const Fcn<float> net(ck);
  const auto img = random_image(32, 32, 1);
  ScoreOptions o;
  o.foreign_set = {3};
  const auto tr = net.forward(img, {true, true, true});
  EXPECT_EQ(score_image(ScoreMethod::kMaxSoftmax, net, img, o), score_max_softmax(tr.seg_logits));
  EXPECT_EQ(score_image(ScoreMethod::kDiscriminative, net, img, o), score_discriminative(tr.ood_logits));
  EXPECT_EQ(score_image(ScoreMethod::kForeign, net, img, o), score_foreign_class(tr.seg_logits, {3}));
  EXPECT_EQ(score_image(ScoreMethod::kConfidence, net, img, o), score_confidence(forward_confidence(ck, img).second));
  EXPECT_THROW(score_image(ScoreMethod::kMcMutualInfo, net, img, o), Error);
  for (auto m : {ScoreMethod::kMaxSoftmax, ScoreMethod::kOdin, ScoreMethod::kConfidence, ScoreMethod::kDiscriminative,
                 ScoreMethod::kForeign, ScoreMethod::kMcMutualInfo}) {
    EXPECT_EQ(parse_score_method(score_method_name(m)), m);
  }
  EXPECT_EQ(score_method_name(ScoreMethod::kMcMutualInfo), "mc_mi");
}

TEST(ScoreManifestJson, RoundTrip) {
  ScoreManifest m;
  m.method = "odin";
  m.dataset = "pv10";
  m.dataset_manifest = "../pv10/manifest.jsonl";
  m.params = {{"epsilon", 0.002}, {"temperature", 10}};
  m.entries = {{"a", "maps/a.dosm"}, {"b", "maps/b.dosm"}};
  EXPECT_EQ(score_manifest_from_json(to_json(m)), m);
}
