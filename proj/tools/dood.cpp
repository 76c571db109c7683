// dood: command-line entry point for the dense OOD pipeline.
//
// Exit status: 0 success, 1 runtime error, 2 configuration or usage error.
// Errors go to stderr as "ERROR:<module>:<code>: <message>".

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dood/datamodel.hpp"
#include "dood/error.hpp"
#include "dood/eval.hpp"
#include "dood/net.hpp"
#include "dood/parallel.hpp"
#include "dood/pipeline.hpp"
#include "dood/random.hpp"
#include "dood/scoring.hpp"
#include "dood/synth.hpp"
#include "dood/train.hpp"
#include "dood/worldgen.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Resolved config document plus the parsed form.
struct LoadedConfig {
  json doc;
  dood::RunConfig run;
};

LoadedConfig load_config(const Globals& g) {
  json doc = json::object();
  if (!g.config_path.empty()) {
    std::string text;
    try {
      text = dood::read_file(g.config_path);
    } catch (const dood::Error&) {
      throw dood::ConfigError("config", "unreadable", "cannot read config '" + g.config_path + "'");
    }
    doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw dood::ConfigError("config", "parse", "config '" + g.config_path + "' is not valid JSON");
  }
  for (const auto& o : g.overrides) dood::apply_override(doc, o);
  if (g.seed) doc["seed"] = *g.seed;
  LoadedConfig c;
  c.run = dood::run_config_from_json(doc);
  c.doc = dood::to_json(c.run);
  return c;
}

fs::path manifest_path(const std::string& dir_or_file) {
  fs::path p = dir_or_file;
  if (fs::is_directory(p)) p /= "manifest.jsonl";
  return p;
}

// Records what a subcommand consumed so its artifacts can be regenerated.
class RunRecord {
 public:
  RunRecord(std::string command, std::vector<std::string> argv, const LoadedConfig& config)
      : command_(std::move(command)), argv_(std::move(argv)), config_(config.doc), seed_(config.run.seed) {}

  void input(const std::string& role, const fs::path& path) {
    const std::string bytes = dood::read_file(path);
    inputs_.push_back({{"role", role}, {"path", path.generic_string()}, {"fnv1a64", hex64(fnv1a(bytes))}});
  }

  void write(const fs::path& out_dir) const {
    std::uint64_t h = fnv1a(config_.dump());
    for (const auto& i : inputs_) h = fnv1a(i["fnv1a64"].get<std::string>(), h);
    json j = {{"command", command_},
              {"argv", argv_},
              {"seed", seed_},
              {"config", config_},
              {"inputs", inputs_},
              {"inputs_hash", hex64(h)},
              {"versions",
               {{"dood", kVersion}, {"checkpoint_format", 1}, {"scoremap_format", 1}, {"manifest_format", 1}}}};
    dood::write_file(out_dir / "run_record.json", j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  json config_;
  std::uint64_t seed_;
  json inputs_ = json::array();
};

fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw dood::ConfigError("cli", "missing_out", "--out DIR is required");
  return g.out;
}

// Outputs never go into an input directory.
void check_out(const fs::path& out, const std::vector<fs::path>& inputs) {
  std::error_code ec;
  for (const auto& in : inputs) {
    const fs::path dir = fs::is_directory(in) ? in : in.parent_path();
    if (fs::exists(out) && fs::exists(dir) && fs::equivalent(out, dir, ec)) {
      throw dood::ConfigError("cli", "out_is_input", "output directory '" + out.string() + "' is an input location");
    }
  }
}

std::vector<dood::Sample> load_sets(const std::vector<std::string>& dirs, RunRecord& rec, const std::string& role) {
  std::vector<dood::Sample> out;
  for (const auto& d : dirs) {
    const fs::path mp = manifest_path(d);
    const auto m = dood::read_manifest(mp);
    rec.input(role, mp);
    auto samples = dood::load_all(m);
    out.insert(out.end(), std::make_move_iterator(samples.begin()), std::make_move_iterator(samples.end()));
  }
  return out;
}

std::vector<fs::path> as_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

// --- subcommands --------------------------------------------------------------------------------

struct WorldgenArgs {
  std::string kind = "inlier";
  std::size_t count = 0;
  std::uint64_t first_index = 0;
  std::string variant = "base";
};

void cmd_worldgen(const Globals& g, const WorldgenArgs& a, const std::vector<std::string>& argv) {
  const auto cfg = load_config(g);
  const auto kind = dood::parse_world_kind(a.kind);
  if (a.count < 1) throw dood::ConfigError("worldgen", "bad_count", "--count must be at least 1");
  dood::WorldConfig w = cfg.run.worldgen;
  if (a.variant == "city") w = dood::city_world(w, cfg.run.seed);
  else if (a.variant == "wild") w = dood::wild_world(w, cfg.run.seed);
  else if (a.variant == "vistas") w = dood::vistas_world(w, cfg.run.seed);
  else if (a.variant != "base") throw dood::ConfigError("worldgen", "bad_variant", "unknown variant '" + a.variant + "'");
  const fs::path out = require_out(g);
  dood::gen_dataset(w, a.count, kind, out, a.first_index);
  RunRecord rec("worldgen", argv, cfg);
  rec.write(out);
}

struct SynthArgs {
  std::string recipe;
  std::string dest;
  std::string source;
  bool mixed = false;
  std::string inlier;
  std::string background;
};

void cmd_synth(const Globals& g, const SynthArgs& a, const std::vector<std::string>& argv) {
  const auto cfg = load_config(g);
  const fs::path out = require_out(g);
  RunRecord rec("synth", argv, cfg);
  const std::uint64_t seed = dood::derive_seed(cfg.run.seed, "synth");
  if (a.mixed) {
    if (a.inlier.empty() || a.background.empty()) {
      throw dood::ConfigError("synth", "missing_input", "--mixed needs --inlier and --background");
    }
    check_out(out, {a.inlier, a.background});
    const auto in_path = manifest_path(a.inlier), bg_path = manifest_path(a.background);
    const auto in = dood::read_manifest(in_path);
    const auto bg = dood::read_manifest(bg_path);
    rec.input("inlier", in_path);
    rec.input("background", bg_path);
    dood::build_mixed_training_set(in, bg, cfg.run.synth.mixed, seed, out);
  } else {
    std::optional<dood::RecipeName> recipe = cfg.run.synth.recipe;
    if (!a.recipe.empty()) recipe = dood::parse_recipe(a.recipe);
    if (!recipe) throw dood::ConfigError("synth", "missing_recipe", "give --recipe or synth.recipe");
    if (a.dest.empty()) throw dood::ConfigError("synth", "missing_input", "--dest is required");
    const bool needs_source = *recipe != dood::RecipeName::kSelfToSelf && *recipe != dood::RecipeName::kAnimals;
    if (needs_source && a.source.empty()) {
      throw dood::ConfigError("synth", "missing_input", std::string(dood::recipe_name(*recipe)) + " needs --source");
    }
    check_out(out, {a.dest, a.source.empty() ? a.dest : a.source});
    const auto dest_path = manifest_path(a.dest);
    const auto dest = dood::read_manifest(dest_path);
    rec.input("dest", dest_path);
    std::optional<dood::DatasetManifest> src;
    if (!a.source.empty()) {
      const auto src_path = manifest_path(a.source);
      src = dood::read_manifest(src_path);
      rec.input("source", src_path);
    }
    dood::build_pasted_testset(dest, src ? &*src : nullptr, *recipe, seed, out);
  }
  rec.write(out);
}

struct TrainArgs {
  std::string mode = "primary";
  std::vector<std::string> data;
  std::vector<std::string> background;
  std::vector<std::string> val;
  std::string init;
};

void cmd_train(const Globals& g, const TrainArgs& a, const std::vector<std::string>& argv) {
  const auto cfg = load_config(g);
  const auto mode = dood::parse_train_mode(a.mode);
  if (a.data.empty()) throw dood::ConfigError("train", "missing_input", "--data is required");
  if (mode == dood::TrainMode::kDiscriminative && a.background.empty()) {
    throw dood::ConfigError("train", "missing_input", "discriminative training needs --background");
  }
  const fs::path out = require_out(g);
  std::vector<fs::path> inputs = as_paths(a.data);
  for (const auto& b : a.background) inputs.push_back(b);
  for (const auto& v : a.val) inputs.push_back(v);
  check_out(out, inputs);

  RunRecord rec("train", argv, cfg);
  const auto train = load_sets(a.data, rec, "data");
  const auto background = load_sets(a.background, rec, "background");
  const auto val = load_sets(a.val, rec, "validation");
  std::optional<dood::ModelCheckpoint> init;
  if (!a.init.empty()) {
    init = dood::load_checkpoint(a.init);
    rec.input("init", a.init);
  }
  dood::TrainResult r;
  switch (mode) {
    case dood::TrainMode::kPrimary: r = dood::train_primary(cfg.run.train, train, val, init); break;
    case dood::TrainMode::kConfidence: r = dood::train_confidence(cfg.run.train, train, val, init); break;
    case dood::TrainMode::kDiscriminative:
      r = dood::train_discriminative(cfg.run.train, train, background, val, init);
      break;
  }
  fs::create_directories(out);
  dood::save_checkpoint(out / "model.ckpt", r.checkpoint);
  dood::write_file(out / "history.json", r.checkpoint.metadata.dump(2) + "\n");
  rec.write(out);
}

struct ScoreArgs {
  std::string model;
  std::string data;
  std::string method;
  std::optional<double> epsilon;
  std::optional<double> temperature;
  std::vector<int> foreign_set;
  std::optional<int> mc_samples;
};

void cmd_score(const Globals& g, const ScoreArgs& a, const std::vector<std::string>& argv) {
  const auto cfg = load_config(g);
  auto method = cfg.run.score.method;
  if (!a.method.empty()) method = dood::parse_score_method(a.method);
  dood::ScoreOptions opt = cfg.run.score.options;
  if (a.epsilon) opt.odin.epsilon = *a.epsilon;
  if (a.temperature) opt.odin.temperature = *a.temperature;
  if (!a.foreign_set.empty()) opt.foreign_set = {a.foreign_set.begin(), a.foreign_set.end()};
  if (a.mc_samples) opt.mc_samples = *a.mc_samples;
  opt.odin.validate();
  if (method == dood::ScoreMethod::kForeign && opt.foreign_set.empty()) {
    throw dood::ConfigError("scoring", "missing_foreign_set", "foreign scoring needs --foreign-set or score.foreign_set");
  }
  if (method == dood::ScoreMethod::kMcMutualInfo && opt.mc_samples < 2) {
    throw dood::ConfigError("scoring", "bad_samples", "mc_samples must be at least 2");
  }
  const fs::path out = require_out(g);
  check_out(out, {a.model, a.data});

  RunRecord rec("score", argv, cfg);
  const auto ckpt = dood::load_checkpoint(a.model);
  rec.input("model", a.model);
  const auto mp = manifest_path(a.data);
  const auto manifest = dood::read_manifest(mp);
  rec.input("data", mp);
  const dood::Fcn<float> net(ckpt);

  dood::ScoreManifest sm;
  sm.method = std::string(dood::score_method_name(method));
  sm.dataset = manifest.name;
  sm.dataset_manifest = fs::absolute(mp).lexically_normal().generic_string();
  sm.params = {{"epsilon", opt.odin.epsilon},
               {"temperature", opt.odin.temperature},
               {"foreign_set", opt.foreign_set},
               {"mc_samples", opt.mc_samples},
               {"model", a.model}};
  sm.entries.resize(manifest.size());
  fs::create_directories(out / "maps");
  dood::parallel_for(manifest.size(), [&](std::size_t i) {
    const auto sample = dood::load_sample(manifest, i);
    const auto map = dood::score_image(method, net, sample.image, opt, i);
    const std::string rel = "maps/" + sample.id + ".dosm";
    dood::write_scoremap(out / rel, map);
    sm.entries[i] = {sample.id, rel};
  });
  dood::write_score_manifest(out / "scores.json", sm);
  rec.write(out);
}

struct EvalArgs {
  std::vector<std::string> scores;
  std::string protocol;
  std::string method;
  std::string dataset;
  std::string title = "Evaluation";
  std::vector<std::string> negatives;
  std::vector<std::string> exclude;
};

void cmd_eval(const Globals& g, const EvalArgs& a, const std::vector<std::string>& argv) {
  const auto cfg = load_config(g);
  if (a.scores.empty()) throw dood::ConfigError("eval", "missing_input", "--scores is required");
  dood::EvalRun run;
  run.protocol = a.protocol.empty() ? cfg.run.eval.protocol : dood::parse_protocol(a.protocol);
  run.method = a.method;
  run.dataset = a.dataset;
  for (const auto& s : a.scores) run.scores.push_back(s);
  if (!a.negatives.empty()) run.negative_ids = std::set<std::string>(a.negatives.begin(), a.negatives.end());
  run.exclusions = {a.exclude.begin(), a.exclude.end()};
  const fs::path out = require_out(g);
  const auto report = dood::build_report(a.title, {run});
  RunRecord rec("eval", argv, cfg);
  for (const auto& s : run.scores) rec.input("scores", s);
  dood::write_report(report, out, cfg.run.eval.svg);
  rec.write(out);
}

void cmd_report(const Globals& g, const std::string& runs_path, const std::vector<std::string>& argv) {
  const auto cfg = load_config(g);
  std::string text;
  try {
    text = dood::read_file(runs_path);
  } catch (const dood::Error&) {
    throw dood::ConfigError("eval", "unreadable", "cannot read runs file '" + runs_path + "'");
  }
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("runs") || !j["runs"].is_array()) {
    throw dood::ConfigError("eval", "bad_runs", "runs file must be {\"title\": ..., \"runs\": [...]}");
  }
  const fs::path base = fs::path(runs_path).parent_path();
  std::vector<dood::EvalRun> runs;
  for (const auto& r : j["runs"]) runs.push_back(dood::eval_run_from_json(r, base));
  const fs::path out = require_out(g);
  const auto report = dood::build_report(j.value("title", std::string("Report")), runs);
  RunRecord rec("report", argv, cfg);
  rec.input("runs", runs_path);
  for (const auto& r : runs) {
    for (const auto& s : r.scores) rec.input("scores", s);
  }
  dood::write_report(report, out, cfg.run.eval.svg);
  rec.write(out);
}

struct SweepArgs {
  std::string model;
  std::vector<std::string> val;
  std::vector<double> epsilons;
  std::vector<double> temperatures;
};

void cmd_sweep(const Globals& g, const SweepArgs& a, const std::vector<std::string>& argv) {
  const auto cfg = load_config(g);
  const auto eps = a.epsilons.empty() ? cfg.run.score.epsilon_grid : a.epsilons;
  const auto temps = a.temperatures.empty() ? cfg.run.score.temperature_grid : a.temperatures;
  if (a.val.empty()) throw dood::ConfigError("cli", "missing_input", "--val is required");
  const fs::path out = require_out(g);
  std::vector<fs::path> inputs = as_paths(a.val);
  inputs.push_back(a.model);
  check_out(out, inputs);
  RunRecord rec("sweep-odin", argv, cfg);
  const auto ckpt = dood::load_checkpoint(a.model);
  rec.input("model", a.model);
  const auto val = load_sets(a.val, rec, "validation");
  const auto sweep = dood::sweep_odin(ckpt, val, eps, temps);
  json grid = json::array();
  for (const auto& p : sweep.grid) grid.push_back({{"epsilon", p.epsilon}, {"temperature", p.temperature}, {"ap", p.ap}});
  fs::create_directories(out);
  dood::write_file(out / "odin_sweep.json",
                   json{{"grid", grid},
                        {"best", {{"epsilon", sweep.best.epsilon},
                                  {"temperature", sweep.best.temperature},
                                  {"ap", sweep.best.ap}}}}
                           .dump(2) + "\n");
  dood::write_file(out / "odin_sweep.md", dood::render_odin_sweep(sweep));
  std::cout << "best epsilon=" << sweep.best.epsilon << " temperature=" << sweep.best.temperature
            << " ap=" << sweep.best.ap << "\n";
  rec.write(out);
}

void cmd_reproduce(const Globals& g, const std::vector<std::string>& argv) {
  const auto cfg = load_config(g);
  const fs::path out = require_out(g);
  fs::create_directories(out);
  RunRecord rec("reproduce", argv, cfg);
  dood::reproduce_tables(cfg.run, out);
  rec.write(out);
}

int report_error(const std::string& module, const std::string& code, const std::string& msg, int status) {
  std::cerr << "ERROR:" << module << ":" << code << ": " << msg << "\n";
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense out-of-distribution detection pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Globals g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config_path, "Run config (JSON)");
    sub->add_option("--seed", g.seed, "Master seed, overrides the config");
    sub->add_option("--out", g.out, "Output directory");
    sub->add_option("--set", g.overrides, "Override section.key=value")->allow_extra_args(false);
  };

  WorldgenArgs wa;
  auto* worldgen = app.add_subcommand("worldgen", "Generate an inlier, background or foreign dataset");
  add_globals(worldgen);
  worldgen->add_option("--kind", wa.kind, "inlier | background | foreign");
  worldgen->add_option("--count", wa.count, "Number of samples")->required();
  worldgen->add_option("--first-index", wa.first_index, "Index of the first sample");
  worldgen->add_option("--variant", wa.variant, "base | city | wild | vistas");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Build a pasted test set or the mixed training set");
  add_globals(synth);
  synth->add_option("--recipe", sa.recipe, "Named paste recipe");
  synth->add_option("--dest", sa.dest, "Destination dataset");
  synth->add_option("--source", sa.source, "Patch source dataset");
  synth->add_flag("--mixed", sa.mixed, "Build the bbox-pasting training set");
  synth->add_option("--inlier", sa.inlier, "Inlier dataset (--mixed)");
  synth->add_option("--background", sa.background, "Background dataset (--mixed)");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  add_globals(train);
  train->add_option("--mode", ta.mode, "primary | confidence | discriminative");
  train->add_option("--data", ta.data, "Training dataset(s)")->allow_extra_args(false);
  train->add_option("--background", ta.background, "Background dataset(s)")->allow_extra_args(false);
  train->add_option("--val", ta.val, "Validation dataset(s)")->allow_extra_args(false);
  train->add_option("--init", ta.init, "Initial checkpoint");

  ScoreArgs sc;
  auto* score = app.add_subcommand("score", "Write OOD score maps for a dataset");
  add_globals(score);
  score->add_option("--model", sc.model, "Checkpoint")->required();
  score->add_option("--data", sc.data, "Dataset to score")->required();
  score->add_option("--method", sc.method, "max_softmax | odin | confidence | discrim | foreign | mc_mi");
  score->add_option("--epsilon", sc.epsilon, "ODIN perturbation magnitude");
  score->add_option("--temperature", sc.temperature, "ODIN temperature");
  score->add_option("--foreign-set", sc.foreign_set, "Foreign class ids")->delimiter(',');
  score->add_option("--mc-samples", sc.mc_samples, "Dropout samples for mc_mi");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate score manifests into a report");
  add_globals(eval);
  eval->add_option("--scores", ea.scores, "Score manifest(s), pooled")->allow_extra_args(false);
  eval->add_option("--protocol", ea.protocol, "pixel | imagewide | control");
  eval->add_option("--method", ea.method, "Row label");
  eval->add_option("--dataset", ea.dataset, "Column label");
  eval->add_option("--title", ea.title, "Report title");
  eval->add_option("--negative", ea.negatives, "Negative image id (imagewide)")->allow_extra_args(false);
  eval->add_option("--exclude", ea.exclude, "Excluded image id")->allow_extra_args(false);

  std::string runs_path;
  auto* report = app.add_subcommand("report", "Build a multi-cell report from a runs file");
  add_globals(report);
  report->add_option("--runs", runs_path, "JSON {title, runs: [...]}")->required();

  SweepArgs sw;
  auto* sweep = app.add_subcommand("sweep-odin", "Grid-search ODIN epsilon and temperature on validation data");
  add_globals(sweep);
  sweep->add_option("--model", sw.model, "Checkpoint")->required();
  sweep->add_option("--val", sw.val, "Validation dataset(s)")->allow_extra_args(false);
  sweep->add_option("--epsilons", sw.epsilons, "Epsilon grid")->delimiter(',');
  sweep->add_option("--temperatures", sw.temperatures, "Temperature grid")->delimiter(',');

  auto* reproduce = app.add_subcommand("reproduce", "Run the desk-scale experiment matrix and write all tables");
  add_globals(reproduce);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("cli", "usage", e.what(), 2);
  }

  const std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (*worldgen) cmd_worldgen(g, wa, args);
    else if (*synth) cmd_synth(g, sa, args);
    else if (*train) cmd_train(g, ta, args);
    else if (*score) cmd_score(g, sc, args);
    else if (*eval) cmd_eval(g, ea, args);
    else if (*report) cmd_report(g, runs_path, args);
    else if (*sweep) cmd_sweep(g, sw, args);
    else if (*reproduce) cmd_reproduce(g, args);
  } catch (const dood::ConfigError& e) {
    return report_error(e.module(), e.code(), e.what(), 2);
  } catch (const dood::Error& e) {
    return report_error(e.module(), e.code(), e.what(), 1);
  } catch (const std::exception& e) {
    return report_error("cli", "internal", e.what(), 1);
  }
  return 0;
}
