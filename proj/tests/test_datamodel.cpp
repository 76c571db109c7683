#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <set>

#include "dood/datamodel.hpp"
#include "dood/error.hpp"
#include "test_util.hpp"

using namespace dood;
using dood::testing::random_image;
using dood::testing::random_labels;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dood_dm_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

}  // namespace

TEST(Normalize, Examples) {
  NormStats s;
  s.mean = {0.5, 0.5, 0.5};
  s.std = {0.25, 0.25, 0.25};
  Image img(3, 32, 32, 0.8f);
  EXPECT_NEAR(normalize(img, s).at(1, 3, 4), 1.2, 1e-6);

  Image at_mean(3, 32, 32, 0.5f);
  for (float v : normalize(at_mean, s).data) EXPECT_EQ(v, 0.0f);

  const auto r = random_image(32, 40, 1);
  EXPECT_EQ(normalize(r, NormStats{}), r);
}

TEST(Normalize, InvertibleWithinTolerance) {
  NormStats s;
  s.mean = {0.3, 0.5, 0.7};
  s.std = {0.1, 0.4, 0.9};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto img = random_image(33, 47, seed);
    const auto back = denormalize(normalize(img, s), s);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-6);
  }
}

TEST(Normalize, BadStatsAreConfigErrors) {
  NormStats s;
  s.std = {1.0, 0.0, 1.0};
  EXPECT_THROW(normalize(Image(3, 32, 32), s), ConfigError);
  s.std = {1.0, 1.0, 1.0};
  s.mean[0] = std::nan("");
  EXPECT_THROW(normalize(Image(3, 32, 32), s), ConfigError);
}

TEST(Image, ValidationRejectsSmallAndOutOfRange) {
  EXPECT_NO_THROW(validate_image(Image(3, 32, 32, 0.5f)));
  EXPECT_THROW(validate_image(Image(3, 31, 32)), Error);
  EXPECT_THROW(validate_image(Image(1, 32, 32)), Error);
  Image bad(3, 32, 32, 0.5f);
  bad.at(2, 0, 0) = 1.5f;
  EXPECT_THROW(validate_image(bad), Error);
}

TEST(Sample, MaskDimsMustMatch) {
  Sample s;
  s.id = "a";
  s.image = Image(3, 32, 32);
  s.semantic = SemanticMask(32, 33);
  EXPECT_EQ(error_code([&] { s.validate(); }), "dims_mismatch");
  s.semantic = SemanticMask(32, 32, 9);
  EXPECT_THROW(s.validate(8), Error);
  s.semantic = SemanticMask(32, 32, kIgnoreLabel);
  EXPECT_NO_THROW(s.validate(8));
  s.ood = OodMask(32, 32, 2);
  EXPECT_THROW(s.validate(8), Error);
}

TEST(Resize, ShorterSideExamples) {
  EXPECT_EQ(shorter_side_dims(1024, 2048, 512), std::make_pair(512, 1024));
  // 500 * 512 / 300 = 853.33
  EXPECT_EQ(shorter_side_dims(300, 500, 512), std::make_pair(512, 853));
  EXPECT_EQ(shorter_side_dims(500, 300, 512), std::make_pair(853, 512));
  EXPECT_EQ(shorter_side_dims(20, 33, 32), std::make_pair(32, 53));  // 52.8
  EXPECT_EQ(shorter_side_dims(64, 80, 40), std::make_pair(40, 50));
  EXPECT_EQ(shorter_side_dims(64, 100, 40), std::make_pair(40, 63));  // 62.5 rounds up
  EXPECT_THROW(shorter_side_dims(64, 64, 31), Error);
}

TEST(Resize, SampleShapeAndMaskClosure) {
  Sample s;
  s.id = "r";
  s.image = random_image(64, 96, 2);
  SemanticMask m(64, 96, 0);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 96; ++x) m.at(y, x) = ((x / 7 + y / 5) % 2) ? kIgnoreLabel : 0;
  }
  s.semantic = m;
  s.ood = m;
  const auto r = resize(s, 40);
  EXPECT_EQ(r.height(), 40);
  EXPECT_EQ(r.width(), 60);
  for (auto v : r.semantic->data) EXPECT_TRUE(v == 0 || v == kIgnoreLabel);
  for (auto v : r.ood->data) EXPECT_TRUE(v == 0 || v == kIgnoreLabel);
}

TEST(Resize, ScaleTwoRoundTripIsIdentityOnMasks) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = random_labels(24, 36, 6, seed, 0.2);
    const auto up = resize_nearest(m, 48, 72);
    EXPECT_EQ(resize_nearest(up, 24, 36), m);
  }
}

TEST(Resize, BilinearConstantAndRange) {
  Tensor3<float> c(2, 10, 13, 0.375f);
  for (float v : resize_bilinear(c, 17, 5).data) EXPECT_FLOAT_EQ(v, 0.375f);
  const auto img = random_image(32, 32, 4);
  for (float v : resize_bilinear(img, 45, 71).data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Crop, Examples) {
  EXPECT_EQ(crop_offset(512, 512, 512, 7), std::make_pair(0, 0));
  std::set<int> xs;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto [x, y] = crop_offset(512, 700, 512, seed);
    EXPECT_EQ(y, 0);
    EXPECT_GE(x, 0);
    EXPECT_LE(x, 188);
    xs.insert(x);
  }
  EXPECT_GT(xs.size(), 100u);
  EXPECT_EQ(crop_offset(100, 120, 40, 3), crop_offset(100, 120, 40, 3));
  EXPECT_EQ(error_code([] { crop_offset(40, 60, 41, 1); }), "crop_too_large");
}

TEST(Crop, ImageAndMasksCroppedTogether) {
  Sample s;
  s.id = "c";
  s.image = random_image(50, 70, 5);
  s.semantic = random_labels(50, 70, 4, 6);
  const auto c = random_crop(s, 32, 11);
  const auto [x, y] = crop_offset(50, 70, 32, 11);
  ASSERT_EQ(c.height(), 32);
  for (int yy = 0; yy < 32; ++yy) {
    for (int xx = 0; xx < 32; ++xx) {
      EXPECT_EQ(c.image.at(1, yy, xx), s.image.at(1, y + yy, x + xx));
      EXPECT_EQ(c.semantic->at(yy, xx), s.semantic->at(y + yy, x + xx));
    }
  }
  const auto again = random_crop(s, 32, 11);
  EXPECT_EQ(c.image, again.image);
  EXPECT_EQ(c.semantic, again.semantic);
}

TEST(ScoreMapIo, RoundTripBitExact) {
  ScoreMap m(7, 5);
  std::mt19937_64 rng(1);
  for (auto& v : m.data) v = std::uniform_real_distribution<float>(-3, 3)(rng);
  m.data[3] = 1e-38f;
  m.data[4] = -0.0f;
  const auto back = decode_scoremap(encode_scoremap(m));
  ASSERT_EQ(back.height, 7);
  EXPECT_EQ(std::memcmp(back.data.data(), m.data.data(), m.data.size() * 4), 0);

  const auto dir = scratch("score");
  write_scoremap(dir / "m.dosm", m);
  EXPECT_EQ(read_scoremap(dir / "m.dosm"), m);
}

TEST(ScoreMapIo, OneByOneLayout) {
  ScoreMap m(1, 1, 0.25f);
  const auto bytes = encode_scoremap(m);
  // "DOSM1\n" + "1 1\n" + one float32.
  ASSERT_EQ(bytes.size(), 6u + 4u + 4u);
  EXPECT_EQ(bytes.substr(0, 10), "DOSM1\n1 1\n");
  EXPECT_EQ(bytes.substr(10), std::string("\x00\x00\x80\x3e", 4));
}

TEST(ScoreMapIo, FormatErrors) {
  std::string short_payload = "DOSM1\n2 3\n" + std::string(20, '\0');
  EXPECT_EQ(error_code([&] { decode_scoremap(short_payload); }), "format");
  EXPECT_EQ(error_code([] { decode_scoremap("DOSM2\n1 1\n\0\0\0\0"); }), "format");
  EXPECT_EQ(error_code([] { decode_scoremap("DOSM1\nx y\n"); }), "format");
  try {
    decode_scoremap(short_payload);
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("10"), std::string::npos) << e.what();
  }
  ScoreMap bad(1, 2, 0.0f);
  bad.data[1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(encode_scoremap(bad), Error);
}

TEST(Png, ImageQuantizedRoundTripAndMaskExact) {
  const auto dir = scratch("png");
  const auto img = random_image(33, 41, 9);
  write_png_rgb(dir / "a.png", img);
  const auto back = read_png_rgb(dir / "a.png");
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255 + 1e-6);
  write_png_rgb(dir / "b.png", back);
  EXPECT_EQ(read_png_rgb(dir / "b.png"), back);

  const auto m = random_labels(33, 41, 8, 3, 0.3);
  write_png_mask(dir / "m.png", m);
  EXPECT_EQ(read_png_mask(dir / "m.png"), m);
  EXPECT_THROW(read_png_mask(dir / "a.png"), Error);
}

TEST(Manifest, RoundTripFieldForField) {
  DatasetManifest m;
  m.name = "set";
  m.seed = 12345678901234ull;
  m.generator = "dood-worldgen/1";
  m.records.push_back({"a", "images/a.png", "semantic/a.png", std::nullopt, Role::kInlier, nullptr});
  m.records.push_back({"b", "images/b.png", std::nullopt, "ood/b.png", Role::kOutlier,
                       nlohmann::json{{"bbox", {1, 2, 3, 4}}}});
  m.records.push_back({"c \"q\"", "images/c.png", "semantic/c.png", "ood/c.png", Role::kMixed, nullptr});
  const auto text = serialize_manifest(m);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_EQ(parse_manifest(text), m);
  EXPECT_EQ(serialize_manifest(parse_manifest(text)), text);
}

TEST(Manifest, RolesAndErrors) {
  EXPECT_EQ(role_name(Role::kInlier), "id");
  EXPECT_EQ(role_name(Role::kOutlier), "ood");
  EXPECT_EQ(parse_role("mixed"), Role::kMixed);
  EXPECT_THROW(parse_role("other"), Error);
  EXPECT_EQ(error_code([] { parse_manifest("{\"manifest\": {\"name\": \"x\", \"seed\": 0, \"generator\": \"g\"}}\n{bad\n"); }),
            "bad_manifest");
  EXPECT_EQ(error_code([] { read_manifest("/nonexistent/manifest.jsonl"); }), "missing");
}

TEST(Manifest, SaveLoadResolvesRelativeToManifest) {
  const auto dir = scratch("save");
  Sample s;
  s.id = "x1";
  s.image = random_image(32, 48, 1);
  s.semantic = random_labels(32, 48, 5, 2);
  s.ood = OodMask(32, 48, kInlierLabel);
  DatasetManifest m;
  m.name = "saved";
  m.records.push_back(save_sample(dir, s, Role::kInlier));
  write_manifest(dir / "manifest.jsonl", m);

  const auto back = read_manifest(dir / "manifest.jsonl");
  EXPECT_EQ(back.records[0].image, "images/x1.png");
  const auto loaded = load_sample(back, 0);
  EXPECT_EQ(loaded.id, "x1");
  EXPECT_EQ(*loaded.semantic, *s.semantic);
  EXPECT_EQ(*loaded.ood, *s.ood);
}

TEST(Manifest, LoadChecksRoleAndDims) {
  const auto dir = scratch("role");
  Sample s;
  s.id = "y";
  s.image = random_image(32, 32, 1);
  s.ood = OodMask(32, 32, kInlierLabel);
  s.ood->at(3, 3) = kOutlierLabel;
  DatasetManifest m;
  m.records.push_back(save_sample(dir, s, Role::kInlier));
  write_manifest(dir / "manifest.jsonl", m);
  EXPECT_EQ(error_code([&] { load_sample(read_manifest(dir / "manifest.jsonl"), 0); }), "role_mismatch");

  write_png_mask(dir / "ood" / "y.png", OodMask(32, 40, kInlierLabel));
  EXPECT_EQ(error_code([&] { load_sample(read_manifest(dir / "manifest.jsonl"), 0); }), "dims_mismatch");
}

TEST(NormStatsCompute, MatchesDirectMoments) {
  std::vector<Image> imgs{random_image(32, 32, 1), random_image(40, 32, 2)};
  const auto s = compute_norm_stats(imgs);
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0, n = 0;
    for (const auto& im : imgs) {
      for (float v : im.plane(c)) {
        sum += v;
        sq += static_cast<double>(v) * v;
        ++n;
      }
    }
    const double mean = sum / n;
    EXPECT_NEAR(s.mean[c], mean, 1e-9);
    EXPECT_NEAR(s.std[c], std::sqrt(sq / n - mean * mean), 1e-6);
  }
}
