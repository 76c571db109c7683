// Acceptance run: one PASS/FAIL line per criterion on stdout, details on stderr.
//
// Exit status is 0 when every failing criterion is listed in --allow-fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dood/error.hpp"
#include "dood/eval.hpp"
#include "dood/net.hpp"
#include "dood/pipeline.hpp"
#include "dood/scoring.hpp"
#include "dood/synth.hpp"
#include "dood/train.hpp"
#include "dood/worldgen.hpp"
#include "test_util.hpp"

using namespace dood;
namespace fs = std::filesystem;
using dood::testing::random_image;
using dood::testing::random_labels;
using dood::testing::test_norm;
using dood::testing::tiny_config;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Verdict {
  int id = 0;
  bool pass = false;
  std::string name;
  std::string detail;
};

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

std::vector<double> jittered_params(const FcnConfig& cfg, std::uint64_t seed) {
  const auto ckpt = init_checkpoint(cfg, test_norm(), seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.05);
  std::vector<double> p(ckpt.params.begin(), ckpt.params.end());
  for (auto& v : p) v += n(rng);
  return p;
}

// --- 1 ------------------------------------------------------------------------------------

// Every distinct score is a threshold; precision and recall by direct counting.
double brute_force_ap(const std::vector<float>& s, const std::vector<int>& y) {
  std::vector<float> th(s.begin(), s.end());
  std::sort(th.begin(), th.end(), std::greater<>());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  const double P = std::count(y.begin(), y.end(), 1);
  double ap = 0, prev_r = 0;
  for (float t : th) {
    double tp = 0, called = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) {
        ++called;
        tp += y[i];
      }
    }
    const double r = tp / P;
    ap += (r - prev_r) * (tp / called);
    prev_r = r;
  }
  return ap;
}

Verdict metric_oracle() {
  std::mt19937_64 rng(20240601);
  double worst = 0, timed = 0;
  int instances = 0;
  for (int k = 0; k < 200; ++k) {
    const int images = 1 + static_cast<int>(rng() % 4);
    const long budget = 100 + static_cast<long>(rng() % 99900);
    const int side = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(budget) / images)));
    // Large instances get few levels (many ties) to keep the oracle quadratic-free.
    const int levels = side * side * images > 3000 ? 2 + static_cast<int>(rng() % 63) : 0;
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::uniform_real_distribution<double> r(0.0, 1.0);
    const double pos_rate = 0.02 + 0.9 * r(rng);
    std::vector<ScoreMap> scores;
    std::vector<OodMask> truths;
    std::vector<float> fs_;
    std::vector<int> fy;
    for (int i = 0; i < images; ++i) {
      ScoreMap s(side, side);
      OodMask t(side, side);
      for (std::size_t p = 0; p < s.data.size(); ++p) {
        const bool pos = r(rng) < pos_rate;
        float v = u(rng) + (pos ? 0.3f : 0.0f);
        if (levels) v = std::floor(v * levels) / levels;
        s.data[p] = v;
        t.data[p] = r(rng) < 0.1 ? kIgnoreLabel : (pos ? kOutlierLabel : kInlierLabel);
        if (t.data[p] != kIgnoreLabel) {
          fs_.push_back(v);
          fy.push_back(pos);
        }
      }
      scores.push_back(std::move(s));
      truths.push_back(std::move(t));
    }
    const long npos = std::count(fy.begin(), fy.end(), 1);
    if (npos == 0 || npos == static_cast<long>(fy.size())) continue;
    const auto t0 = Clock::now();
    const double ap = average_precision(scores, truths);
    timed += seconds_since(t0);
    worst = std::max(worst, std::abs(ap - brute_force_ap(fs_, fy)));
    ++instances;
  }
  const bool pass = instances == 200 && worst <= 1e-9 && timed < 30.0;
  return {1, pass, "metric oracle",
          std::to_string(instances) + " instances, max |AP - oracle| = " + fmt("%.3g", worst) +
              " (tol 1e-9), AP time " + fmt("%.2f", timed) + " s (< 30 s)"};
}

// --- 2 ------------------------------------------------------------------------------------

Verdict odin_reduction() {
  int identical = 0;
  for (int k = 0; k < 20; ++k) {
    FcnConfig cfg = tiny_config();
    cfg.heads = {Head::kSegmentation};
    cfg.class_count = 2 + k % 5;
    auto ck = init_checkpoint(cfg, test_norm(), 500 + k);
    std::mt19937_64 rng(700 + k);
    std::normal_distribution<float> n(0.0f, 0.2f);
    for (auto& p : ck.params) p += n(rng);
    const auto img = random_image(9 + k % 7, 11 + k % 5, 900 + k);
    const auto a = score_odin(ck, img, OdinConfig{0.0, 1.0});
    const auto b = score_max_softmax(forward_segmentation(ck, img));
    identical += a.height == b.height && a.width == b.width &&
                 std::equal(a.data.begin(), a.data.end(), b.data.begin(),
                            [](float x, float y) { return std::memcmp(&x, &y, sizeof x) == 0; });
  }
  return {2, identical == 20, "ODIN reduction", std::to_string(identical) + "/20 bit-identical to max-softmax"};
}

// --- 3 ------------------------------------------------------------------------------------

Verdict gradients() {
  double worst_input = 0, worst_conf = 0;
  const int trials = 6;
  for (int trial = 0; trial < trials; ++trial) {
    const auto cfg = tiny_config();
    Fcn<double> net(cfg, jittered_params(cfg, 100 + trial), test_norm());
    const auto img = to_scalar<double>(random_image(8, 9, 200 + trial));
    const double T = 1.0 + 0.7 * trial;
    const auto g = input_gradient(net, img, T);
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
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      auto x = img;
      x.data[i] += 1e-5;
      const double up = objective(x);
      x.data[i] -= 2e-5;
      numeric.push_back((up - objective(x)) / 2e-5);
      analytic.push_back(g.data[i]);
    }
    worst_input = std::max(worst_input, rel_error(analytic, numeric));
  }
  for (int trial = 0; trial < trials; ++trial) {
    std::mt19937_64 rng(300 + trial);
    std::normal_distribution<double> n(0.0, 1.5);
    const int C = 2 + trial % 4, H = 5, W = 6;
    Tensor3<double> z(C, H, W), c(1, H, W);
    for (auto& v : z.data) v = n(rng);
    for (auto& v : c.data) v = 1.0 / (1.0 + std::exp(-n(rng)));
    const auto target = random_labels(H, W, C, 400 + trial, 0.15);
    const double lambda = 0.05 + 0.2 * trial;
    const auto lg = confidence_loss(z, c, target, lambda);
    std::vector<double> analytic, numeric;
    const double h = 1e-6;
    for (std::size_t i = 0; i < z.data.size(); ++i) {
      auto zz = z;
      zz.data[i] += h;
      const double up = confidence_loss(zz, c, target, lambda).value;
      zz.data[i] -= 2 * h;
      numeric.push_back((up - confidence_loss(zz, c, target, lambda).value) / (2 * h));
      analytic.push_back(lg.d_logits.data[i]);
    }
    for (std::size_t i = 0; i < c.data.size(); ++i) {
      auto cc = c;
      cc.data[i] += h;
      const double up = confidence_loss(z, cc, target, lambda).value;
      cc.data[i] -= 2 * h;
      numeric.push_back((up - confidence_loss(z, cc, target, lambda).value) / (2 * h));
      analytic.push_back(lg.d_confidence.data[i]);
    }
    worst_conf = std::max(worst_conf, rel_error(analytic, numeric));
  }
  const bool pass = worst_input < 1e-4 && worst_conf < 1e-4;
  return {3, pass, "gradient correctness",
          std::to_string(trials) + "+" + std::to_string(trials) + " instances, max rel err input " +
              fmt("%.2e", worst_input) + ", confidence loss " + fmt("%.2e", worst_conf) + " (tol 1e-4)"};
}

// --- 4 ------------------------------------------------------------------------------------

Verdict gradient_block() {
  int clean = 0, nonzero_elsewhere = 0;
  const int trials = 5;
  for (int trial = 0; trial < trials; ++trial) {
    auto cfg = tiny_config();
    cfg.heads = {Head::kSegmentation, Head::kConfidence};
    const auto params = jittered_params(cfg, 40 + trial);
    Fcn<double> net(cfg, params, test_norm());
    ForwardOptions o;
    o.confidence = true;
    const auto img = to_scalar<double>(random_image(10, 12, 50 + trial));
    const auto t = net.forward(img, o);
    const auto target = random_labels(10, 12, cfg.class_count, 60 + trial, 0.1);
    // Penalty-only gradient: the lambda-dependent part of the loss.
    const auto with = confidence_loss(t.seg_logits, t.confidence, target, 0.5);
    const auto without = confidence_loss(t.seg_logits, t.confidence, target, 0.0);
    Tensor3<double> d_pen = with.d_confidence;
    for (std::size_t i = 0; i < d_pen.data.size(); ++i) d_pen.data[i] -= without.d_confidence.data[i];
    bool logits_untouched = with.d_logits == without.d_logits;
    std::vector<double> grad(params.size(), 0.0);
    net.backward(t, nullptr, &d_pen, nullptr, grad, nullptr);
    bool zero = logits_untouched;
    for (const auto& g : parameter_groups(cfg)) {
      for (std::size_t i = g.offset; i < g.offset + g.size; ++i) {
        if (g.name == "seg_head") zero = zero && grad[i] == 0.0;
        else if (grad[i] != 0.0) ++nonzero_elsewhere;
      }
    }
    clean += zero;
  }
  return {4, clean == trials && nonzero_elsewhere > 0, "gradient block",
          std::to_string(clean) + "/" + std::to_string(trials) +
              " instances with exactly zero segmentation-head gradient from the penalty"};
}

// --- 5 ------------------------------------------------------------------------------------

Verdict balance() {
  WorldConfig w;
  w.seed = 55;
  std::vector<Sample> in, bg;
  for (int i = 0; i < 60; ++i) in.push_back(gen_inlier_scene(w, i));
  for (int i = 0; i < 23; ++i) bg.push_back(gen_background_image(w, i).sample);
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto plan = plan_oversampled_epoch(in.size(), bg.size(), 4, seed);
    long id = 0, ood = 0;
    for (const auto& b : plan.batches) {
      for (const auto& e : b) {
        const auto& src = e.source == Source::kInlier ? in[e.index] : bg[e.index];
        const auto crop = training_crop(src, 64, e.crop_seed, true);
        for (auto v : crop.ood->data) {
          id += v == kInlierLabel;
          ood += v == kOutlierLabel;
        }
      }
    }
    worst = std::max(worst, std::abs(static_cast<double>(id - ood)) / static_cast<double>(id + ood));
  }
  return {5, worst <= 0.01, "pixel balance",
          "60 inlier vs 23 background images, 3 epochs, max |ID - OOD| / total = " + fmt("%.4f", worst) +
              " (tol 0.01)"};
}

// --- 6 ------------------------------------------------------------------------------------

Verdict pasting() {
  WorldConfig w;
  w.seed = 66;
  std::vector<Sample> dests;
  std::vector<Patch> patches;
  for (int i = 0; i < 50; ++i) {
    dests.push_back(gen_inlier_scene(w, i));
    const auto b = gen_background_image(w, i);
    patches.push_back(extract_patch(b.sample, b.object_mask));
  }
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> cov(0.005, 0.15);
  int good = 0, errors = 0;
  const auto t0 = Clock::now();
  for (int k = 0; k < 500; ++k) {
    PasteRecipe r;
    r.resize = true;
    r.coverage_target = cov(rng);
    const Sample& dest = dests[k % dests.size()];
    try {
      const auto res = paste(dest, patches[(k * 7) % patches.size()], r, 1000 + k);
      const double n = static_cast<double>(dest.height()) * dest.width();
      long opaque = 0;
      bool outside_equal = true;
      for (int y = 0; y < dest.height(); ++y) {
        for (int x = 0; x < dest.width(); ++x) {
          if (res.region.at(y, x)) {
            ++opaque;
            continue;
          }
          for (int c = 0; c < 3; ++c) {
            const float a = res.sample.image.at(c, y, x), b = dest.image.at(c, y, x);
            outside_equal = outside_equal && std::memcmp(&a, &b, sizeof a) == 0;
          }
          outside_equal = outside_equal && res.sample.semantic->at(y, x) == dest.semantic->at(y, x) &&
                          res.sample.ood->at(y, x) == dest.ood->at(y, x);
        }
      }
      const double realized = opaque / n;
      if (!(opaque == res.opaque && realized >= *r.coverage_target && realized <= 1.02 * *r.coverage_target &&
            outside_equal)) {
        std::cerr << "  paste " << k << ": target " << *r.coverage_target << " realized " << realized << " opaque "
                  << opaque << "/" << res.opaque << (outside_equal ? "" : " outside pixels changed") << "\n";
      }
      good += opaque == res.opaque && realized >= *r.coverage_target && realized <= 1.02 * *r.coverage_target &&
              outside_equal;
    } catch (const Error& e) {
      ++errors;
      std::cerr << "  paste " << k << ": " << e.what() << "\n";
    }
  }
  const double secs = seconds_since(t0);
  return {6, good == 500 && secs < 60, "pasting arithmetic",
          std::to_string(good) + "/500 pastes in [target, 1.02 target] with untouched outside pixels (" +
              std::to_string(errors) + " errors), " + fmt("%.1f", secs) + " s (< 60 s)"};
}

// --- 7 ------------------------------------------------------------------------------------

Verdict consume_once() {
  WorldConfig w;
  w.seed = 77;
  std::vector<Sample> in;
  for (int i = 0; i < 12; ++i) in.push_back(gen_inlier_scene(w, i));
  std::vector<SourceItem> bg;
  for (int i = 0; i < 60; ++i) {
    auto b = gen_background_image(w, i);
    bg.push_back({std::move(b.sample), std::move(b.object_mask), b.bbox});
  }
  int ok = 0;
  const std::vector<double> fractions{0.0, 0.5, 1.0};
  for (double f : fractions) {
    MixedOptions o;
    o.paste_fraction = f;
    const auto mixed = build_mixed_training_set(in, bg, o, 7);
    std::multiset<std::string> ids;
    for (const auto& m : mixed) ids.insert(m.sample.id);
    bool once = mixed.size() == bg.size();
    for (const auto& b : bg) once = once && ids.count(b.sample.id) == 1;
    ok += once;
  }
  return {7, ok == 3, "consume once",
          std::to_string(ok) + "/3 paste fractions emit n = 60 records with every background id exactly once"};
}

// --- 8, 9, 10 -------------------------------------------------------------------------------

std::vector<Verdict> ordering(int n_seeds) {
  const OrderingOptions options;
  int ok8 = 0, ok9 = 0, ok10 = 0;
  double negative_seconds = 0;
  for (int seed = 1; seed <= n_seeds; ++seed) {
    const auto r = run_ordering_experiment(options, seed);
    negative_seconds += r.negative_seconds;
    const bool c8 = r.ap_discriminative - r.ap_max_softmax >= 0.15 && r.ap_discriminative >= r.ap_foreign &&
                    r.ap_foreign >= r.ap_max_softmax;
    const bool c9 = r.pasted_bbox - r.pasted_whole >= 0.10;
    double worst = 0;
    std::string worst_name;
    for (const auto& [name, ap] : r.control_ap) {
      if (ap > worst) worst = ap, worst_name = name;
    }
    const bool c10 = worst <= 3 * r.control_prevalence;
    ok8 += c8;
    ok9 += c9;
    ok10 += c10;
    std::cerr << "  seed " << seed << ": ms " << fmt("%.3f", r.ap_max_softmax) << " foreign "
              << fmt("%.3f", r.ap_foreign) << " discrim " << fmt("%.3f", r.ap_discriminative) << " | pv10 whole "
              << fmt("%.3f", r.pasted_whole) << " bbox " << fmt("%.3f", r.pasted_bbox) << " | control prevalence "
              << fmt("%.3f", r.control_prevalence);
    for (const auto& [name, ap] : r.control_ap) std::cerr << " " << name << " " << fmt("%.3f", ap);
    std::cerr << " | " << fmt("%.0f", r.total_seconds) << " s\n";
  }
  const int need = n_seeds - n_seeds / 5;
  const std::string of = "/" + std::to_string(n_seeds) + " seeds (need " + std::to_string(need) + ")";
  return {{8, ok8 >= need && negative_seconds < 1200, "ordering",
           std::to_string(ok8) + of + " with discrim - ms >= 0.15 and discrim >= foreign >= ms, " +
               fmt("%.0f", negative_seconds) + " s (< 1200 s)"},
          {9, ok9 >= need, "pasted objects", std::to_string(ok9) + of + " with bbox - whole >= 0.10 on PascalVistas10"},
          {10, ok10 >= need, "control set",
           std::to_string(ok10) + of + " with every SelfToSelf AP <= 3x prevalence"}};
}

// --- 11 -------------------------------------------------------------------------------------

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
  }
  return out;
}

Verdict determinism() {
  const nlohmann::json doc = {
      {"seed", 11},
      {"worldgen", {{"inlier_height", 64}, {"inlier_width", 96}, {"background_height", 64}, {"background_width", 64}}},
      {"train",
       {{"batch_size", 2},
        {"crop_size", 48},
        {"net", {{"stages", 2}, {"widths", {4, 6}}, {"skip_stage", 1}, {"head_width", 6}, {"pool_width", 4}}}}},
      {"score", {{"epsilon_grid", {0.0, 0.002}}, {"temperature_grid", {1, 10}}}},
      {"experiment",
       {{"train_images", 6},
        {"background_images", 6},
        {"foreign_images", 4},
        {"wild_images", 4},
        {"val_images", 4},
        {"test_images", 6},
        {"primary_epochs", 1},
        {"discriminative_epochs", 1},
        {"bbox_epochs", 1}}}};
  const auto config = run_config_from_json(doc);
  const fs::path base = fs::temp_directory_path() / "dood_acceptance_repro";
  fs::remove_all(base);
  reproduce_tables(config, base / "a");
  reproduce_tables(config, base / "b");
  const auto a = tree_bytes(base / "a"), b = tree_bytes(base / "b");
  int reports = 0;
  for (const auto& [path, bytes] : a) reports += path.size() > 9 && path.ends_with("report.md");
  const bool pass = !a.empty() && a == b && reports == 6;
  return {11, pass, "end-to-end determinism",
          std::to_string(a.size()) + " files, " + std::to_string(reports) + " reports, " +
              (a == b ? "byte-identical" : "differ") + " across two runs"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int seeds = 5;
  std::vector<int> allow_fail;
  bool skip_experiment = false;
  app.add_option("--seeds", seeds, "Seeds for the ordering experiment")->check(CLI::Range(1, 100));
  app.add_option("--allow-fail", allow_fail, "Criteria whose failure does not fail the run")->delimiter(',');
  app.add_flag("--skip-experiment", skip_experiment, "Skip criteria 8-10");
  CLI11_PARSE(app, argc, argv);

  std::vector<Verdict> all;
  auto report = [&](Verdict v) {
    std::cout << "C" << v.id << (v.id < 10 ? "  " : " ") << (v.pass ? "PASS" : "FAIL") << "  " << v.name << ": "
              << v.detail << std::endl;
    all.push_back(std::move(v));
  };
  try {
    report(metric_oracle());
    report(odin_reduction());
    report(gradients());
    report(gradient_block());
    report(balance());
    report(pasting());
    report(consume_once());
    if (!skip_experiment) {
      for (auto& v : ordering(seeds)) report(std::move(v));
    }
    report(determinism());
  } catch (const std::exception& e) {
    std::cerr << "acceptance aborted: " << e.what() << "\n";
    return 1;
  }
  int unexpected = 0;
  for (const auto& v : all) {
    if (!v.pass && std::find(allow_fail.begin(), allow_fail.end(), v.id) == allow_fail.end()) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
