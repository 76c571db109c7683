#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

#include "dood/datamodel.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int status = -1;
  std::string output;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(DOOD_CLI) + " " + args + " 2>&1";
  Outcome o;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return o;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) o.output.append(buf.data(), n);
  const int raw = pclose(p);
  o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return o;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dood_cli_" + name);
  fs::remove_all(p);
  return p;
}

const std::string kSmall =
    "--set worldgen.inlier_height=64 --set worldgen.inlier_width=96 "
    "--set worldgen.background_height=64 --set worldgen.background_width=64 "
    "--set train.epochs=1 --set train.batch_size=2 --set train.crop_size=48 "
    "--set train.net.stages=2 --set train.net.widths=[4,6] --set train.net.skip_stage=1 "
    "--set train.net.head_width=6 --set train.net.pool_width=4";

// worldgen -> train -> score -> eval under one root; returns the report bytes.
std::string pipeline(const fs::path& root) {
  const std::string r = root.string();
  const std::string seed = " --seed 5 " + kSmall;
  EXPECT_EQ(run("worldgen --kind inlier --count 4 --out " + r + "/in" + seed).status, 0);
  EXPECT_EQ(run("worldgen --kind background --count 3 --first-index 100 --out " + r + "/bg" + seed).status, 0);
  EXPECT_EQ(run("worldgen --kind inlier --count 3 --first-index 50 --out " + r + "/test" + seed).status, 0);
  const auto t = run("train --mode primary --data " + r + "/in --out " + r + "/model" + seed);
  EXPECT_EQ(t.status, 0) << t.output;
  EXPECT_EQ(run("score --model " + r + "/model/model.ckpt --data " + r + "/test --out " + r + "/s_in" + seed).status,
            0);
  EXPECT_EQ(run("score --model " + r + "/model/model.ckpt --data " + r + "/bg --out " + r + "/s_bg" + seed).status, 0);
  const auto e = run("eval --protocol imagewide --method max_softmax --dataset neg --scores " + r +
                     "/s_in/scores.json --scores " + r + "/s_bg/scores.json --out " + r + "/report" + seed);
  EXPECT_EQ(e.status, 0) << e.output;
  return dood::read_file(root / "report" / "report.md");
}

}  // namespace

TEST(Cli, InvalidConfigExitsTwoWithoutArtifacts) {
  const auto out = scratch("invalid");
  const auto o = run("worldgen --count 2 --set train.epochs=0 --out " + out.string());
  EXPECT_EQ(o.status, 2);
  EXPECT_EQ(o.output.rfind("ERROR:config:schema:", 0), 0u) << o.output;
  EXPECT_FALSE(fs::exists(out));

  const auto cfg = scratch("bad.json");
  dood::write_file(cfg, "{not json");
  const auto p = run("worldgen --count 2 --config " + cfg.string() + " --out " + out.string());
  EXPECT_EQ(p.status, 2);
  EXPECT_NE(p.output.find("ERROR:config:parse"), std::string::npos) << p.output;
  EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").status, 2);
  EXPECT_EQ(run("frobnicate").status, 2);
  const auto o = run("score --data x");
  EXPECT_EQ(o.status, 2);
  EXPECT_EQ(o.output.rfind("ERROR:cli:usage:", 0), 0u) << o.output;
}

TEST(Cli, EvalOnMissingScoresListsThePath) {
  const auto root = scratch("missing");
  const std::string missing = (root / "nowhere" / "scores.json").string();
  const auto o = run("eval --scores " + missing + " --out " + (root / "rep").string());
  EXPECT_EQ(o.status, 1);
  EXPECT_EQ(o.output.rfind("ERROR:eval:", 0), 0u) << o.output;
  EXPECT_NE(o.output.find(missing), std::string::npos) << o.output;
  EXPECT_FALSE(fs::exists(root / "rep"));
}

TEST(Cli, PipelineIsDeterministicAndRecorded) {
  const auto a = scratch("run_a"), b = scratch("run_b");
  const std::string ra = pipeline(a), rb = pipeline(b);
  ASSERT_FALSE(ra.empty());
  EXPECT_EQ(ra, rb);
  EXPECT_EQ(dood::read_file(a / "model" / "model.ckpt"), dood::read_file(b / "model" / "model.ckpt"));
  for (const char* dir : {"in", "bg", "model", "s_in", "report"}) {
    ASSERT_TRUE(fs::exists(a / dir / "run_record.json")) << dir;
    const auto rec = nlohmann::json::parse(dood::read_file(a / dir / "run_record.json"));
    EXPECT_EQ(rec["seed"], 5);
    EXPECT_EQ(rec["inputs_hash"].get<std::string>().size(), 16u);
    EXPECT_TRUE(rec.contains("versions"));
  }
  // Inputs of a stage are never rewritten by a later one.
  const auto before = dood::read_file(a / "in" / "manifest.jsonl");
  EXPECT_EQ(run("train --mode primary --data " + (a / "in").string() + " --out " + (a / "in").string() +
                " --seed 5 " + kSmall)
                .status,
            2);
  EXPECT_EQ(dood::read_file(a / "in" / "manifest.jsonl"), before);
}
