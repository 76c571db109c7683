#include "dood/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "dood/error.hpp"
#include "dood/parallel.hpp"
#include "dood/random.hpp"
#include "dood/schema.hpp"

namespace dood {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ConfigError config_error(const std::string& code, const std::string& msg) { return ConfigError("config", code, msg); }

ForeignVariant parse_foreign_variant(const std::string& s) {
  if (s == "sum") return ForeignVariant::kSum;
  if (s == "winner") return ForeignVariant::kWinner;
  throw config_error("bad_value", "unknown foreign variant '" + s + "'");
}

}  // namespace

// --- run config ---------------------------------------------------------------------------

RunConfig run_config_from_json(const json& j) {
  const auto violations = schema_violations(j, run_config_schema());
  if (!violations.empty()) {
    std::string msg = "run config does not match the schema:";
    for (const auto& v : violations) msg += "\n  " + v;
    throw config_error("schema", msg);
  }
  RunConfig c;
  c.seed = j.value("seed", std::uint64_t{0});

  json world = j.value("worldgen", json::object());
  if (!world.contains("seed")) world["seed"] = c.seed;
  c.worldgen = world_config_from_json(world);

  json train = j.value("train", json::object());
  if (!train.contains("seed")) train["seed"] = c.seed;
  c.train = train_config_from_json(train);

  const json synth = j.value("synth", json::object());
  if (synth.contains("recipe")) c.synth.recipe = parse_recipe(synth["recipe"].get<std::string>());
  c.synth.mixed.paste_fraction = synth.value("paste_fraction", c.synth.mixed.paste_fraction);
  c.synth.mixed.paste_coverage = synth.value("paste_coverage", c.synth.mixed.paste_coverage);
  c.synth.mixed.shorter_side = synth.value("shorter_side", c.synth.mixed.shorter_side);

  const json score = j.value("score", json::object());
  if (score.contains("method")) c.score.method = parse_score_method(score["method"].get<std::string>());
  c.score.options.odin.epsilon = score.value("epsilon", c.score.options.odin.epsilon);
  c.score.options.odin.temperature = score.value("temperature", c.score.options.odin.temperature);
  c.score.options.odin.validate();
  if (score.contains("foreign_set")) c.score.options.foreign_set = score["foreign_set"].get<std::set<int>>();
  if (score.contains("foreign_variant")) {
    c.score.options.foreign_variant = parse_foreign_variant(score["foreign_variant"].get<std::string>());
  }
  c.score.options.mc_samples = score.value("mc_samples", c.score.options.mc_samples);
  c.score.options.seed = c.seed;
  if (score.contains("epsilon_grid")) c.score.epsilon_grid = score["epsilon_grid"].get<std::vector<double>>();
  if (score.contains("temperature_grid")) c.score.temperature_grid = score["temperature_grid"].get<std::vector<double>>();

  const json ev = j.value("eval", json::object());
  if (ev.contains("protocol")) c.eval.protocol = parse_protocol(ev["protocol"].get<std::string>());
  c.eval.svg = ev.value("svg", c.eval.svg);

  const json ex = j.value("experiment", json::object());
  auto& e = c.experiment;
  e.train_images = ex.value("train_images", e.train_images);
  e.background_images = ex.value("background_images", e.background_images);
  e.foreign_images = ex.value("foreign_images", e.foreign_images);
  e.wild_images = ex.value("wild_images", e.wild_images);
  e.val_images = ex.value("val_images", e.val_images);
  e.test_images = ex.value("test_images", e.test_images);
  e.primary_epochs = ex.value("primary_epochs", e.primary_epochs);
  e.discriminative_epochs = ex.value("discriminative_epochs", e.discriminative_epochs);
  e.bbox_epochs = ex.value("bbox_epochs", e.bbox_epochs);
  e.train_all_layers = ex.value("train_all_layers", e.train_all_layers);
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["worldgen"] = to_json(c.worldgen);
  j["train"] = to_json(c.train);
  json synth = {{"paste_fraction", c.synth.mixed.paste_fraction},
                {"paste_coverage", c.synth.mixed.paste_coverage},
                {"shorter_side", c.synth.mixed.shorter_side}};
  if (c.synth.recipe) synth["recipe"] = recipe_name(*c.synth.recipe);
  j["synth"] = synth;
  const auto& o = c.score.options;
  json score = {{"method", score_method_name(c.score.method)},
                {"epsilon", o.odin.epsilon},
                {"temperature", o.odin.temperature},
                {"foreign_variant", o.foreign_variant == ForeignVariant::kSum ? "sum" : "winner"},
                {"mc_samples", o.mc_samples},
                {"epsilon_grid", c.score.epsilon_grid},
                {"temperature_grid", c.score.temperature_grid}};
  if (!o.foreign_set.empty()) score["foreign_set"] = o.foreign_set;
  j["score"] = score;
  j["eval"] = {{"protocol", protocol_name(c.eval.protocol)}, {"svg", c.eval.svg}};
  const auto& e = c.experiment;
  j["experiment"] = {{"train_images", e.train_images},
                     {"background_images", e.background_images},
                     {"foreign_images", e.foreign_images},
                     {"wild_images", e.wild_images},
                     {"val_images", e.val_images},
                     {"test_images", e.test_images},
                     {"primary_epochs", e.primary_epochs},
                     {"discriminative_epochs", e.discriminative_epochs},
                     {"bbox_epochs", e.bbox_epochs},
                     {"train_all_layers", e.train_all_layers}};
  return j;
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw config_error("bad_override", "override must look like section.key=value: '" + std::string(assignment) + "'");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw config_error("bad_override", "empty key in override '" + path + "'");
    if (!node->is_object()) throw config_error("bad_override", "'" + path + "' does not name an object member");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

// --- ODIN sweep -------------------------------------------------------------------------------

OdinSweep sweep_odin(const ModelCheckpoint& ckpt, const std::vector<Sample>& validation,
                     const std::vector<double>& epsilons, const std::vector<double>& temperatures) {
  if (epsilons.empty() || temperatures.empty()) throw config_error("empty_grid", "ODIN grids must be non-empty");
  for (double e : epsilons) OdinConfig{e, 1.0}.validate();
  for (double t : temperatures) OdinConfig{0.0, t}.validate();
  if (validation.empty()) throw Error("cli", "bad_validation", "empty validation set");
  std::vector<OodMask> truths;
  bool has_id = false, has_ood = false;
  for (const auto& s : validation) {
    if (!s.ood) throw Error("cli", "bad_validation", "validation sample '" + s.id + "' has no OOD mask");
    for (auto v : s.ood->data) {
      has_id = has_id || v == kInlierLabel;
      has_ood = has_ood || v == kOutlierLabel;
    }
    truths.push_back(*s.ood);
  }
  if (!has_id || !has_ood) {
    throw Error("cli", "bad_validation", "validation set needs both ID and OOD pixels");
  }

  const Fcn<float> net(ckpt);
  OdinSweep sweep;
  for (double eps : epsilons) {
    for (double t : temperatures) {
      std::vector<ScoreMap> scores(validation.size());
      parallel_for(validation.size(), [&](std::size_t i) {
        scores[i] = score_odin(net, validation[i].image, OdinConfig{eps, t});
      });
      sweep.grid.push_back({eps, t, average_precision(scores, truths)});
    }
  }
  sweep.best = sweep.grid.front();
  for (const auto& p : sweep.grid) {
    const auto& b = sweep.best;
    const bool better = p.ap > b.ap || (p.ap == b.ap && (p.epsilon < b.epsilon ||
                                                         (p.epsilon == b.epsilon && p.temperature < b.temperature)));
    if (better) sweep.best = p;
  }
  return sweep;
}

std::string render_odin_sweep(const OdinSweep& sweep) {
  std::vector<double> eps, temps;
  for (const auto& p : sweep.grid) {
    if (std::find(eps.begin(), eps.end(), p.epsilon) == eps.end()) eps.push_back(p.epsilon);
    if (std::find(temps.begin(), temps.end(), p.temperature) == temps.end()) temps.push_back(p.temperature);
  }
  std::ostringstream out;
  out << "# ODIN sweep\n\nValidation AP (%) per (epsilon, temperature).\n\n| epsilon |";
  for (double t : temps) out << " T=" << t << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < temps.size(); ++i) out << "---:|";
  out << '\n';
  out << std::fixed;
  for (double e : eps) {
    out << "| " << std::setprecision(4) << e << " |";
    for (double t : temps) {
      const auto it = std::find_if(sweep.grid.begin(), sweep.grid.end(),
                                   [&](const OdinPoint& p) { return p.epsilon == e && p.temperature == t; });
      if (it == sweep.grid.end()) out << " - |";
      else out << ' ' << std::setprecision(2) << 100.0 * it->ap << " |";
    }
    out << '\n';
  }
  out << "\nBest: epsilon " << std::setprecision(4) << sweep.best.epsilon << ", T "
      << std::setprecision(1) << sweep.best.temperature << ", AP " << std::setprecision(2)
      << 100.0 * sweep.best.ap << "\n";
  return out.str();
}

// --- shared experiment helpers --------------------------------------------------------------

namespace {

constexpr std::uint64_t kValOffset = 100000;
constexpr std::uint64_t kTestOffset = 200000;

std::vector<Sample> inliers(const WorldConfig& w, std::uint64_t first, int n) {
  std::vector<Sample> out(static_cast<std::size_t>(n));
  parallel_for(out.size(), [&](std::size_t i) { out[i] = gen_inlier_scene(w, first + i); });
  return out;
}

std::vector<BackgroundSample> backgrounds(const WorldConfig& w, std::uint64_t first, int n) {
  std::vector<BackgroundSample> out(static_cast<std::size_t>(n));
  parallel_for(out.size(), [&](std::size_t i) { out[i] = gen_background_image(w, first + i); });
  return out;
}

std::vector<Sample> foreign_scenes(const WorldConfig& w, std::uint64_t first, int n) {
  std::vector<Sample> out(static_cast<std::size_t>(n));
  parallel_for(out.size(), [&](std::size_t i) { out[i] = gen_foreign_scene(w, first + i); });
  return out;
}

std::vector<Sample> images_of(const std::vector<BackgroundSample>& b) {
  std::vector<Sample> out;
  out.reserve(b.size());
  for (const auto& x : b) out.push_back(x.sample);
  return out;
}

std::vector<SourceItem> sources_of(const std::vector<BackgroundSample>& b) {
  std::vector<SourceItem> out;
  out.reserve(b.size());
  for (const auto& x : b) out.push_back({x.sample, x.object_mask, x.bbox});
  return out;
}

std::vector<SourceItem> sources_of(const std::vector<Sample>& s) {
  std::vector<SourceItem> out;
  out.reserve(s.size());
  for (const auto& x : s) out.push_back({x, std::nullopt, std::nullopt});
  return out;
}

template <typename... Parts>
std::vector<Sample> concat(const Parts&... parts) {
  std::vector<Sample> out;
  (out.insert(out.end(), parts.begin(), parts.end()), ...);
  return out;
}

std::vector<Sample> pasted_samples(const std::vector<PastedSample>& p) {
  std::vector<Sample> out;
  out.reserve(p.size());
  for (const auto& x : p) out.push_back(x.sample);
  return out;
}

std::vector<ScoreMap> score_all(ScoreMethod method, const ModelCheckpoint& ckpt, const std::vector<Sample>& samples,
                                const ScoreOptions& options) {
  const Fcn<float> net(ckpt);
  std::vector<ScoreMap> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { out[i] = score_image(method, net, samples[i].image, options, i); });
  return out;
}

// Every pixel of an image in `negatives` is OOD, every other pixel ID.
std::vector<OodMask> imagewide_truth(const std::vector<Sample>& samples, std::size_t first_negative) {
  std::vector<OodMask> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.emplace_back(samples[i].height(), samples[i].width(), i >= first_negative ? kOutlierLabel : kInlierLabel);
  }
  return out;
}

std::vector<OodMask> ood_truth(const std::vector<Sample>& samples) {
  std::vector<OodMask> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (!s.ood) throw Error("cli", "missing_truth", "sample '" + s.id + "' has no OOD mask");
    out.push_back(*s.ood);
  }
  return out;
}

std::vector<OodMask> control_truth(const std::vector<PastedSample>& p) {
  std::vector<OodMask> out;
  out.reserve(p.size());
  for (const auto& x : p) {
    OodMask m(x.sample.height(), x.sample.width(), kInlierLabel);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      if ((*x.control_mask).data[i]) m.data[i] = kOutlierLabel;
    }
    out.push_back(std::move(m));
  }
  return out;
}

TrainConfig stage_config(const TrainConfig& base, int epochs, std::set<Head> heads, std::uint64_t seed,
                         const std::string& purpose) {
  TrainConfig c = base;
  c.epochs = epochs;
  c.net.heads = std::move(heads);
  c.seed = derive_seed(seed, purpose);
  c.trainable.reset();
  return c;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// --- ordering experiment ------------------------------------------------------------------

OrderingResult run_ordering_experiment(const OrderingOptions& o, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  WorldConfig world = o.world;
  world.seed = derive_seed(seed, "experiment.world");
  world.validate();

  const auto in_train = inliers(world, 0, o.train_images);
  const auto in_val = inliers(world, kValOffset, o.val_images);
  const auto in_test = inliers(world, kTestOffset, o.test_images);
  const auto bg_train = backgrounds(world, 0, o.background_images);
  const auto bg_val = backgrounds(world, kValOffset, o.val_images);
  const auto bg_test = backgrounds(world, kTestOffset, o.test_images);
  const auto fg_train = foreign_scenes(world, 0, o.foreign_images);
  const auto val_mix = concat(in_val, images_of(bg_val));

  const auto prim = train_primary(stage_config(o.train, o.primary_epochs, {Head::kSegmentation}, seed, "experiment.primary"),
                                  in_train, in_val)
                        .checkpoint;
  TrainConfig dc = stage_config(o.train, o.discriminative_epochs, {Head::kSegmentation, Head::kOod}, seed,
                                "experiment.discriminative");
  if (o.train_all_layers) dc.trainable = FreezePolicy::all(dc.net).trainable;
  const auto disc = train_discriminative(dc, in_train, images_of(bg_train), val_mix, prim).checkpoint;

  TrainConfig uc = stage_config(o.train, o.primary_epochs, {Head::kSegmentation}, seed, "experiment.union");
  uc.net.class_count = o.train.net.class_count + kForeignClassCount;
  const auto uni = train_primary(uc, concat(in_train, fg_train)).checkpoint;

  ScoreOptions so;
  for (int k = 0; k < kForeignClassCount; ++k) so.foreign_set.insert(o.train.net.class_count + k);
  const auto test = concat(in_test, images_of(bg_test));
  const auto truth = imagewide_truth(test, in_test.size());
  OrderingResult r;
  r.ap_max_softmax = average_precision(score_all(ScoreMethod::kMaxSoftmax, prim, test, so), truth);
  r.ap_discriminative = average_precision(score_all(ScoreMethod::kDiscriminative, disc, test, so), truth);
  r.ap_foreign = average_precision(score_all(ScoreMethod::kForeign, uni, test, so), truth);
  r.negative_seconds = seconds_since(t0);

  // bbox-pasting training set, then the pasted and control test sets
  const auto mixed = build_mixed_training_set(in_train, sources_of(bg_train), MixedOptions{},
                                              derive_seed(seed, "experiment.mixed"));
  TrainConfig bc = dc;
  bc.epochs = o.bbox_epochs;
  bc.seed = derive_seed(seed, "experiment.bbox");
  const auto bbox = train_discriminative(bc, in_train, pasted_samples(mixed), {}, prim).checkpoint;

  const auto pv = build_pasted_testset(in_test, sources_of(bg_test), RecipeName::kPascalVistas10,
                                       derive_seed(seed, "experiment.pv10"));
  const auto pv_samples = pasted_samples(pv);
  const auto pv_truth = ood_truth(pv_samples);
  r.pasted_whole = average_precision(score_all(ScoreMethod::kDiscriminative, disc, pv_samples, so), pv_truth);
  r.pasted_bbox = average_precision(score_all(ScoreMethod::kDiscriminative, bbox, pv_samples, so), pv_truth);

  const auto self = build_pasted_testset(in_test, {}, RecipeName::kSelfToSelf, derive_seed(seed, "experiment.self"));
  const auto self_samples = pasted_samples(self);
  const auto self_truth = control_truth(self);
  const auto cell = evaluate_cell("max-softmax", "SelfToSelf", Protocol::kControl,
                                  score_all(ScoreMethod::kMaxSoftmax, prim, self_samples, so), self_truth);
  r.control_prevalence = cell.prevalence;
  r.control_ap["max-softmax"] = cell.ap;
  r.control_ap["foreign"] = average_precision(score_all(ScoreMethod::kForeign, uni, self_samples, so), self_truth);
  r.control_ap["discrim"] =
      average_precision(score_all(ScoreMethod::kDiscriminative, disc, self_samples, so), self_truth);
  r.control_ap["discrim-bbox"] =
      average_precision(score_all(ScoreMethod::kDiscriminative, bbox, self_samples, so), self_truth);
  r.total_seconds = seconds_since(t0);
  return r;
}

// --- table reproduction -----------------------------------------------------------------------

WorldConfig city_world(const WorldConfig& base, std::uint64_t seed) {
  WorldConfig w = base;
  w.seed = derive_seed(seed, "world.city");
  w.animal_rate = 0.0;
  w.validate();
  return w;
}

WorldConfig wild_world(const WorldConfig& base, std::uint64_t seed) {
  WorldConfig w = base;
  w.seed = derive_seed(seed, "world.wild");
  w.color_jitter = 3 * base.color_jitter;
  w.pixel_noise = 2 * base.pixel_noise;
  w.sky_bottom = {0.10, 0.40};
  w.road_top = {0.46, 0.72};
  w.max_cars = base.max_cars + 2;
  w.animal_rate = 0.0;
  w.validate();
  return w;
}

WorldConfig vistas_world(const WorldConfig& base, std::uint64_t seed) {
  WorldConfig w = base;
  w.seed = derive_seed(seed, "world.vistas");
  w.color_jitter = 2 * base.color_jitter;
  w.sky_bottom = {0.12, 0.40};
  w.road_top = {0.48, 0.70};
  w.car_width = {0.06, 0.32};
  w.person_height = {0.10, 0.36};
  w.max_cars = base.max_cars + 2;
  w.max_persons = base.max_persons + 2;
  w.animal_rate = 0.0;
  w.validate();
  return w;
}

std::map<std::string, EvalReport> reproduce_tables(const RunConfig& config, const fs::path& out_dir) {
  const auto& e = config.experiment;
  const std::uint64_t seed = config.seed;
  const WorldConfig city = city_world(config.worldgen, seed);
  const WorldConfig wild = wild_world(config.worldgen, seed);
  const WorldConfig vistas = vistas_world(config.worldgen, seed);
  WorldConfig bg_world = config.worldgen;
  bg_world.seed = derive_seed(seed, "world.background");
  WorldConfig animals_world = vistas;
  animals_world.animal_rate = 1.0;

  // data
  const auto city_train = inliers(city, 0, e.train_images);
  const auto city_val = inliers(city, kValOffset, e.val_images);
  const auto city_test = inliers(city, kTestOffset, e.test_images);
  const auto wild_train = inliers(wild, 0, e.wild_images);
  const auto wild_val = inliers(wild, kValOffset, e.val_images);
  const auto wild_test = inliers(wild, kTestOffset, e.test_images);
  const auto vistas_train = inliers(vistas, 0, e.train_images);
  const auto vistas_val = inliers(vistas, kValOffset, e.val_images);
  const auto vistas_test = inliers(vistas, kTestOffset, e.test_images);
  const auto animal_test = inliers(animals_world, kTestOffset, e.test_images);
  const auto bg_train = backgrounds(bg_world, 0, e.background_images);
  const auto bg_val = backgrounds(bg_world, kValOffset, e.val_images);
  const auto bg_test = backgrounds(bg_world, kTestOffset, e.test_images);
  const auto fg_train = foreign_scenes(city, 0, e.foreign_images);
  const auto bg_train_images = images_of(bg_train);
  const auto bg_val_images = images_of(bg_val);

  // models
  const TrainConfig& base = config.train;
  std::map<std::string, ModelCheckpoint> models;
  auto primary = [&](const std::string& name, const std::vector<Sample>& train, const std::vector<Sample>& val,
                     int classes = 0) {
    TrainConfig c = stage_config(base, e.primary_epochs, {Head::kSegmentation}, seed, "train." + name);
    if (classes > 0) c.net.class_count = classes;
    models[name] = train_primary(c, train, val).checkpoint;
  };
  auto discriminative = [&](const std::string& name, const std::string& init, const std::vector<Sample>& in,
                            const std::vector<Sample>& bg, const std::vector<Sample>& val, int epochs) {
    TrainConfig c = stage_config(base, epochs, {Head::kSegmentation, Head::kOod}, seed, "train." + name);
    if (e.train_all_layers) c.trainable = FreezePolicy::all(c.net).trainable;
    models[name] = train_discriminative(c, in, bg, val, models.at(init)).checkpoint;
  };

  const auto city_wd_train = concat(city_train, wild_train);
  primary("primary-city", city_train, city_val);
  primary("primary-city-wd", city_wd_train, concat(city_val, wild_val));
  primary("primary-vistas", vistas_train, vistas_val);
  {
    TrainConfig c = stage_config(base, e.primary_epochs, {Head::kSegmentation, Head::kConfidence}, seed,
                                 "train.confidence-city");
    models["confidence-city"] = train_confidence(c, city_train, city_val).checkpoint;
  }
  const int rob_classes = base.net.class_count + kForeignClassCount;
  primary("rob", concat(city_wd_train, fg_train), {}, rob_classes);
  discriminative("discrim-city", "primary-city", city_train, bg_train_images,
                 concat(city_val, bg_val_images), e.discriminative_epochs);
  discriminative("discrim-city-wd", "primary-city-wd", city_wd_train, bg_train_images,
                 concat(city_val, wild_val, bg_val_images), e.discriminative_epochs);
  discriminative("discrim-vistas", "primary-vistas", vistas_train, bg_train_images,
                 concat(vistas_val, bg_val_images), e.discriminative_epochs);
  MixedOptions mixed_options = config.synth.mixed;
  const auto mixed = build_mixed_training_set(vistas_train, sources_of(bg_train), mixed_options,
                                              derive_seed(seed, "synth.mixed"));
  discriminative("discrim-vistas-a-bb", "primary-vistas", vistas_train, pasted_samples(mixed), {}, e.bbox_epochs);

  for (const auto& [name, ckpt] : models) save_checkpoint(out_dir / "models" / (name + ".ckpt"), ckpt);

  // ODIN on the wild validation split against background validation images
  std::vector<Sample> odin_val = concat(wild_val, bg_val_images);
  const OdinSweep sweep = sweep_odin(models.at("primary-city"), odin_val, config.score.epsilon_grid,
                                     config.score.temperature_grid);
  write_file(out_dir / "odin_sweep.md", render_odin_sweep(sweep));
  {
    json grid = json::array();
    for (const auto& p : sweep.grid) grid.push_back({{"epsilon", p.epsilon}, {"temperature", p.temperature}, {"ap", p.ap}});
    json j = {{"grid", grid},
              {"best", {{"epsilon", sweep.best.epsilon}, {"temperature", sweep.best.temperature}, {"ap", sweep.best.ap}}}};
    write_file(out_dir / "odin_sweep.json", j.dump(2) + "\n");
  }

  // test sets
  struct TestSet {
    std::vector<Sample> samples;
    std::vector<OodMask> truth;
    Protocol protocol;
  };
  std::map<std::string, TestSet> sets;
  {
    auto sel = concat(wild_test, images_of(bg_test));
    auto sel_truth = imagewide_truth(sel, wild_test.size());
    sets["WD selection"] = {sel, sel_truth, Protocol::kImagewide};
    auto all = concat(wild_test, city_test, images_of(bg_test));
    auto all_truth = imagewide_truth(all, wild_test.size() + city_test.size());
    sets["WD complete"] = {all, all_truth, Protocol::kImagewide};
  }
  auto pasted_set = [&](const std::string& name, const std::vector<Sample>& dests, const std::vector<SourceItem>& src,
                        RecipeName recipe) {
    const auto p = build_pasted_testset(dests, src, recipe, derive_seed(seed, "synth." + name));
    auto samples = pasted_samples(p);
    if (is_control_recipe(recipe)) {
      sets[name] = {samples, control_truth(p), Protocol::kControl};
    } else {
      auto truth = ood_truth(samples);
      sets[name] = {std::move(samples), std::move(truth), Protocol::kPixel};
    }
  };
  pasted_set("PascalVistas10", vistas_test, sources_of(bg_test), RecipeName::kPascalVistas10);
  pasted_set("PascalVistas1", vistas_test, sources_of(bg_test), RecipeName::kPascalVistas1);
  pasted_set("VistasAnimals", animal_test, {}, RecipeName::kAnimals);
  pasted_set("CityCity", city_test, sources_of(std::vector<Sample>(city_test.rbegin(), city_test.rend())),
             RecipeName::kCityCity);
  pasted_set("VistasCity", city_test, sources_of(vistas_test), RecipeName::kVistasCity);
  pasted_set("Self", vistas_test, {}, RecipeName::kSelfToSelf);

  // scorers: row label -> (model, method)
  struct Row {
    std::string label;
    std::string model;
    ScoreMethod method;
    ScoreOptions options;
  };
  ScoreOptions plain = config.score.options;
  ScoreOptions odin = plain;
  odin.odin = {sweep.best.epsilon, sweep.best.temperature};
  ScoreOptions foreign = plain;
  foreign.foreign_set.clear();
  for (int k = 0; k < kForeignClassCount; ++k) foreign.foreign_set.insert(base.net.class_count + k);
  const Row ms_city{"ms city", "primary-city", ScoreMethod::kMaxSoftmax, plain};
  const Row ms_city_wd{"ms city,wd", "primary-city-wd", ScoreMethod::kMaxSoftmax, plain};
  const Row odin_city{"odin city", "primary-city", ScoreMethod::kOdin, odin};
  const Row msconf{"ms-conf city", "confidence-city", ScoreMethod::kMaxSoftmax, plain};
  const Row conf{"conf city", "confidence-city", ScoreMethod::kConfidence, plain};
  const Row rob{"ROB", "rob", ScoreMethod::kForeign, foreign};
  const Row d_city{"discrim city,img", "discrim-city", ScoreMethod::kDiscriminative, plain};
  const Row d_city_wd{"discrim city,wd,img", "discrim-city-wd", ScoreMethod::kDiscriminative, plain};
  const Row d_vistas{"discrim vistas,img", "discrim-vistas", ScoreMethod::kDiscriminative, plain};
  const Row d_bb{"discrim vistas-a,img_bb", "discrim-vistas-a-bb", ScoreMethod::kDiscriminative, plain};

  std::map<std::pair<std::string, std::string>, EvalCell> cache;
  auto cell = [&](const Row& row, const std::string& set_name) {
    const auto key = std::make_pair(row.label, set_name);
    auto it = cache.find(key);
    if (it == cache.end()) {
      const auto& ts = sets.at(set_name);
      auto scores = score_all(row.method, models.at(row.model), ts.samples, row.options);
      it = cache.emplace(key, evaluate_cell(row.label, set_name, ts.protocol, scores, ts.truth)).first;
    }
    return it->second;
  };
  auto table = [&](const std::string& title, const std::vector<Row>& rows, const std::vector<std::string>& cols) {
    EvalReport r;
    r.title = title;
    for (const auto& row : rows) {
      for (const auto& c : cols) r.cells.push_back(cell(row, c));
    }
    return r;
  };

  const std::vector<std::string> wd{"WD selection", "WD complete"};
  const std::vector<Row> pasted_rows{ms_city, ms_city_wd, msconf, rob, d_city, d_city_wd, d_vistas, d_bb};
  std::map<std::string, EvalReport> reports;
  reports["table1_max_softmax"] = table("Max-softmax of the primary model", {ms_city, ms_city_wd, odin_city}, wd);
  reports["table2_confidence"] = table("Primary model with a trained confidence head", {msconf, conf}, wd);
  reports["table3_foreign"] = table("Foreign-class detection with a union-ontology model", {rob}, wd);
  reports["table4_discriminative"] =
      table("Discriminative OOD detection", {d_city, d_city_wd, d_vistas}, wd);
  reports["table6_pasted"] = table("Test sets with both ID and OOD pixels", pasted_rows,
                                   {"PascalVistas10", "PascalVistas1", "VistasAnimals", "WD selection"});
  reports["table7_control"] = table("Detection of pasted ID content", pasted_rows, {"CityCity", "VistasCity", "Self"});

  std::string summary;
  for (const auto& [dir, report] : reports) {
    write_report(report, out_dir / dir, config.eval.svg);
    summary += render_markdown(report) + "\n";
  }
  summary += render_odin_sweep(sweep);
  write_file(out_dir / "summary.md", summary);
  return reports;
}

}  // namespace dood
