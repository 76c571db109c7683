#include "dood/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <map>
#include <sstream>

#include "dood/error.hpp"
#include "dood/parallel.hpp"
#include "dood/scoring.hpp"

namespace dood {

namespace fs = std::filesystem;

namespace {

void check_pair(const ScoreMap& s, const OodMask& t) {
  if (s.height != t.height || s.width != t.width) {
    throw Error("eval", "shape_mismatch",
                "score map " + std::to_string(s.height) + "x" + std::to_string(s.width) + " vs truth " +
                    std::to_string(t.height) + "x" + std::to_string(t.width));
  }
}

void check_lists(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths) {
  if (scores.size() != truths.size()) throw Error("eval", "shape_mismatch", "score and truth counts differ");
  for (std::size_t i = 0; i < scores.size(); ++i) check_pair(scores[i], truths[i]);
}

PixelPool pool_of(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths) {
  check_lists(scores, truths);
  PixelPool pool;
  for (std::size_t i = 0; i < scores.size(); ++i) pool.add(scores[i], truths[i]);
  return pool;
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

void PixelPool::add(float score, bool positive) {
  if (!std::isfinite(score)) throw Error("eval", "non_finite_score", "score is not finite");
  items_.emplace_back(score, positive);
  if (positive) ++positives_;
}

void PixelPool::add(const ScoreMap& scores, const OodMask& truth) {
  check_pair(scores, truth);
  for (std::size_t i = 0; i < scores.data.size(); ++i) {
    const auto t = truth.data[i];
    if (t == kIgnoreLabel) continue;
    add(scores.data[i], t == kOutlierLabel);
  }
}

std::vector<PixelPool::Group> PixelPool::groups() const {
  auto sorted = items_;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<Group> out;
  for (const auto& [s, pos] : sorted) {
    if (out.empty() || out.back().score != s) out.push_back({s, 0, 0});
    (pos ? out.back().pos : out.back().neg) += 1;
  }
  return out;
}

PRCurve pr_curve(const PixelPool& pool) {
  if (pool.positives() == 0 || pool.negatives() == 0) {
    throw Error("eval", "undefined_metric",
                "AP needs OOD and ID pixels (got " + std::to_string(pool.positives()) + " OOD, " +
                    std::to_string(pool.negatives()) + " ID)");
  }
  PRCurve c;
  c.positives = pool.positives();
  c.negatives = pool.negatives();
  std::size_t tp = 0, fp = 0;
  for (const auto& g : pool.groups()) {
    tp += g.pos;
    fp += g.neg;
    c.points.push_back({g.score, static_cast<double>(tp) / static_cast<double>(tp + fp),
                        static_cast<double>(tp) / static_cast<double>(c.positives)});
  }
  return c;
}

double area_under(const PRCurve& curve) {
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& p : curve.points) {
    ap += (p.recall - prev_recall) * p.precision;
    prev_recall = p.recall;
  }
  return ap;
}

double average_precision(const PixelPool& pool) { return area_under(pr_curve(pool)); }

double average_precision(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths) {
  return average_precision(pool_of(scores, truths));
}

PRCurve pr_curve(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths) {
  return pr_curve(pool_of(scores, truths));
}

double pixel_accuracy(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths, double threshold) {
  if (!std::isfinite(threshold)) throw ConfigError("eval", "bad_threshold", "threshold must be finite");
  check_lists(scores, truths);
  std::size_t hit = 0, total = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    for (std::size_t i = 0; i < scores[k].data.size(); ++i) {
      const auto t = truths[k].data[i];
      if (t == kIgnoreLabel) continue;
      ++total;
      if ((scores[k].data[i] > threshold) == (t == kOutlierLabel)) ++hit;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

double ood_incidence(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths, double threshold) {
  if (!std::isfinite(threshold)) throw ConfigError("eval", "bad_threshold", "threshold must be finite");
  check_lists(scores, truths);
  std::size_t hit = 0, total = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    for (std::size_t i = 0; i < scores[k].data.size(); ++i) {
      if (truths[k].data[i] == kIgnoreLabel) continue;
      ++total;
      if (scores[k].data[i] > threshold) ++hit;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

ImagewideTruth apply_imagewide_protocol(const std::vector<std::string>& ids, const std::vector<std::pair<int, int>>& dims,
                                        const std::set<std::string>& negative_ids,
                                        const std::set<std::string>& exclusions) {
  if (ids.size() != dims.size()) throw Error("eval", "shape_mismatch", "ids and dims differ in length");
  const std::set<std::string> known(ids.begin(), ids.end());
  for (const auto* set : {&negative_ids, &exclusions}) {
    for (const auto& id : *set) {
      if (!known.count(id)) throw Error("eval", "unknown_id", "id '" + id + "' is not in the dataset");
    }
  }
  ImagewideTruth out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (exclusions.count(ids[i])) continue;
    out.ids.push_back(ids[i]);
    out.masks.emplace_back(dims[i].first, dims[i].second, negative_ids.count(ids[i]) ? kOutlierLabel : kInlierLabel);
  }
  return out;
}

ImagewideTruth apply_imagewide_protocol(const DatasetManifest& manifest, const std::set<std::string>& negative_ids,
                                        const std::set<std::string>& exclusions) {
  std::vector<std::string> ids;
  std::vector<std::pair<int, int>> dims(manifest.size());
  for (const auto& r : manifest.records) ids.push_back(r.id);
  parallel_for(manifest.size(), [&](std::size_t i) {
    const auto img = read_png_rgb(resolve(manifest, manifest.records[i].image));
    dims[i] = {img.height, img.width};
  });
  return apply_imagewide_protocol(ids, dims, negative_ids, exclusions);
}

// --- reports ------------------------------------------------------------------------

std::string_view protocol_name(Protocol protocol) {
  switch (protocol) {
    case Protocol::kPixel: return "pixel";
    case Protocol::kImagewide: return "imagewide";
    case Protocol::kControl: return "control";
  }
  return "pixel";
}

Protocol parse_protocol(std::string_view name) {
  for (auto p : {Protocol::kPixel, Protocol::kImagewide, Protocol::kControl}) {
    if (protocol_name(p) == name) return p;
  }
  throw ConfigError("eval", "bad_protocol", "unknown protocol '" + std::string(name) + "'");
}

EvalCell evaluate_cell(std::string method, std::string dataset, Protocol protocol, const std::vector<ScoreMap>& scores,
                       const std::vector<OodMask>& truths) {
  const PixelPool pool = pool_of(scores, truths);
  EvalCell c;
  c.method = std::move(method);
  c.dataset = std::move(dataset);
  c.protocol = protocol;
  c.curve = pr_curve(pool);
  c.ap = area_under(c.curve);
  c.positives = pool.positives();
  c.negatives = pool.negatives();
  c.prevalence = static_cast<double>(c.positives) / static_cast<double>(c.positives + c.negatives);
  c.incidence = ood_incidence(scores, truths, 0.5);
  return c;
}

namespace {

std::string column_of(const EvalCell& c) {
  return c.protocol == Protocol::kPixel ? c.dataset : c.dataset + " (" + std::string(protocol_name(c.protocol)) + ")";
}

std::string cell_stem(const EvalCell& c) {
  std::string s = c.method + "__" + c.dataset + "__" + std::string(protocol_name(c.protocol));
  for (auto& ch : s) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.')) ch = '_';
  }
  return s;
}

}  // namespace

std::string render_markdown(const EvalReport& report) {
  std::vector<std::string> methods, columns;
  std::map<std::pair<std::string, std::string>, const EvalCell*> at;
  for (const auto& c : report.cells) {
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) methods.push_back(c.method);
    const auto col = column_of(c);
    if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
    at[{c.method, col}] = &c;
  }
  std::ostringstream out;
  out << "# " << report.title << "\n\nAverage precision (%).\n\n| method |";
  for (const auto& col : columns) out << ' ' << col << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < columns.size(); ++i) out << "---:|";
  out << '\n';
  for (const auto& m : methods) {
    out << "| " << m << " |";
    for (const auto& col : columns) {
      const auto it = at.find({m, col});
      out << ' ' << (it == at.end() ? std::string("-") : fmt(100.0 * it->second->ap, 2)) << " |";
    }
    out << '\n';
  }
  out << "\nPrevalence floor and OOD incidence at threshold 0.5 (%).\n\n"
         "| method | dataset | protocol | prevalence | incidence | OOD px | ID px |\n"
         "|---|---|---|---:|---:|---:|---:|\n";
  for (const auto& c : report.cells) {
    out << "| " << c.method << " | " << c.dataset << " | " << protocol_name(c.protocol) << " | "
        << fmt(100.0 * c.prevalence, 2) << " | " << fmt(100.0 * c.incidence, 2) << " | " << c.positives << " | "
        << c.negatives << " |\n";
  }
  return out.str();
}

std::string render_json(const EvalReport& report) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : report.cells) {
    cells.push_back({{"method", c.method},
                     {"dataset", c.dataset},
                     {"protocol", protocol_name(c.protocol)},
                     {"ap", c.ap},
                     {"prevalence", c.prevalence},
                     {"incidence", c.incidence},
                     {"positives", c.positives},
                     {"negatives", c.negatives},
                     {"pr_csv", "pr/" + cell_stem(c) + ".csv"}});
  }
  return nlohmann::json({{"title", report.title}, {"cells", cells}}).dump(2) + "\n";
}

std::string render_pr_csv(const PRCurve& curve) {
  std::string out = "threshold,precision,recall\n";
  char buf[128];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%.9g,%.17g,%.17g\n", p.threshold, p.precision, p.recall);
    out += buf;
  }
  return out;
}

std::string render_pr_svg(const PRCurve& curve, const std::string& title) {
  const double W = 320, H = 320, m = 40;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << m << "\" y=\"20\" font-size=\"12\">" << title << "</text>\n"
      << "<line x1=\"" << m << "\" y1=\"" << H - m << "\" x2=\"" << W - 10 << "\" y2=\"" << H - m
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << m << "\" y1=\"" << H - m << "\" x2=\"" << m << "\" y2=\"30\" stroke=\"black\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" font-size=\"11\">recall</text>\n"
      << "<text x=\"5\" y=\"" << H / 2 << "\" font-size=\"11\">precision</text>\n<polyline fill=\"none\" "
      << "stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  // Thin to at most ~400 vertices; the step shape survives at this size.
  const std::size_t stride = std::max<std::size_t>(1, curve.points.size() / 400);
  const double pw = W - 10 - m, ph = H - m - 30;
  for (std::size_t i = 0; i < curve.points.size(); i += stride) {
    const auto& p = curve.points[i];
    out << fmt(m + p.recall * pw, 1) << ',' << fmt(H - m - p.precision * ph, 1) << ' ';
  }
  if (!curve.points.empty()) {
    const auto& p = curve.points.back();
    out << fmt(m + p.recall * pw, 1) << ',' << fmt(H - m - p.precision * ph, 1);
  }
  out << "\"/>\n</svg>\n";
  return out.str();
}

void write_report(const EvalReport& report, const fs::path& out_dir, bool svg) {
  write_file(out_dir / "report.md", render_markdown(report));
  write_file(out_dir / "report.json", render_json(report));
  for (const auto& c : report.cells) {
    write_file(out_dir / "pr" / (cell_stem(c) + ".csv"), render_pr_csv(c.curve));
    if (svg) write_file(out_dir / "pr" / (cell_stem(c) + ".svg"), render_pr_svg(c.curve, c.method + " / " + c.dataset));
  }
}

EvalRun eval_run_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  EvalRun r;
  auto bad = [](const std::string& m) { return ConfigError("eval", "bad_config", m); };
  if (!j.is_object()) throw bad("eval run must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "method") r.method = v.get<std::string>();
      else if (key == "dataset") r.dataset = v.get<std::string>();
      else if (key == "protocol") r.protocol = parse_protocol(v.get<std::string>());
      else if (key == "scores") {
        for (const auto& p : v) {
          fs::path path = p.get<std::string>();
          r.scores.push_back(path.is_relative() && !base_dir.empty() ? base_dir / path : path);
        }
      } else if (key == "negative_ids") r.negative_ids = v.get<std::set<std::string>>();
      else if (key == "exclusions") r.exclusions = v.get<std::set<std::string>>();
      else throw bad("unknown eval run key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw bad(std::string("eval run: ") + e.what());
  }
  if (r.scores.empty()) throw bad("eval run lists no score manifests");
  return r;
}

namespace {

struct LoadedRun {
  std::vector<ScoreMap> scores;
  std::vector<OodMask> truths;
  std::string method;
  std::string dataset;
};

fs::path dataset_path(const ScoreManifest& sm) {
  fs::path p = sm.dataset_manifest;
  return p.is_relative() ? sm.base_dir / p : p;
}

LoadedRun load_run(const EvalRun& run) {
  LoadedRun out;
  std::vector<std::string> ids;
  std::vector<Role> roles;
  std::vector<const ManifestRecord*> records;
  std::vector<DatasetManifest> datasets;
  std::vector<ScoreManifest> sms;
  for (const auto& path : run.scores) {
    sms.push_back(read_score_manifest(path));
    datasets.push_back(read_manifest(dataset_path(sms.back())));
  }
  out.method = run.method.empty() ? sms.front().method : run.method;
  out.dataset = run.dataset.empty() ? sms.front().dataset : run.dataset;
  struct Item {
    const ScoreManifest* sm;
    const DatasetManifest* dm;
    std::size_t entry;
    const ManifestRecord* record;
  };
  std::vector<Item> items;
  for (std::size_t k = 0; k < sms.size(); ++k) {
    std::map<std::string, const ManifestRecord*> by_id;
    for (const auto& r : datasets[k].records) by_id[r.id] = &r;
    for (std::size_t e = 0; e < sms[k].entries.size(); ++e) {
      const auto it = by_id.find(sms[k].entries[e].first);
      if (it == by_id.end()) {
        throw Error("eval", "unknown_id", "scored id '" + sms[k].entries[e].first + "' not in its dataset manifest");
      }
      if (run.exclusions.count(it->first)) continue;
      items.push_back({&sms[k], &datasets[k], e, it->second});
    }
  }
  if (run.negative_ids) {
    std::set<std::string> known;
    for (const auto& it : items) known.insert(it.record->id);
    for (const auto& id : run.exclusions) known.insert(id);
    for (const auto& id : *run.negative_ids) {
      if (!known.count(id)) throw Error("eval", "unknown_id", "negative id '" + id + "' was not scored");
    }
  }
  out.scores.resize(items.size());
  out.truths.resize(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const Item& it = items[i];
    out.scores[i] = read_scoremap(it.sm->base_dir / it.sm->entries[it.entry].second);
    const ScoreMap& s = out.scores[i];
    switch (run.protocol) {
      case Protocol::kPixel:
        if (!it.record->ood) throw Error("eval", "missing_truth", "record '" + it.record->id + "' has no OOD mask");
        out.truths[i] = read_png_mask(resolve(*it.dm, *it.record->ood));
        break;
      case Protocol::kImagewide: {
        const bool negative = run.negative_ids ? run.negative_ids->count(it.record->id) > 0
                                               : it.record->role == Role::kOutlier;
        out.truths[i] = OodMask(s.height, s.width, negative ? kOutlierLabel : kInlierLabel);
        break;
      }
      case Protocol::kControl: {
        if (!it.record->ext.is_object() || !it.record->ext.contains("control_mask")) {
          throw Error("eval", "missing_truth", "record '" + it.record->id + "' has no control mask");
        }
        auto m = read_png_mask(resolve(*it.dm, it.record->ext["control_mask"].get<std::string>()));
        for (auto& v : m.data) v = v ? kOutlierLabel : kInlierLabel;
        out.truths[i] = std::move(m);
        break;
      }
    }
  });
  return out;
}

}  // namespace

EvalReport build_report(const std::string& title, const std::vector<EvalRun>& runs) {
  if (runs.empty()) throw ConfigError("eval", "bad_config", "no eval runs given");
  std::vector<std::string> missing;
  for (const auto& run : runs) {
    for (const auto& p : run.scores) {
      if (!fs::exists(p)) {
        missing.push_back(p.string());
        continue;
      }
      const auto sm = read_score_manifest(p);
      if (!fs::exists(dataset_path(sm))) missing.push_back(dataset_path(sm).string());
      for (const auto& [id, rel] : sm.entries) {
        if (!fs::exists(sm.base_dir / rel)) missing.push_back((sm.base_dir / rel).string());
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing inputs:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw Error("eval", "missing_inputs", msg);
  }
  EvalReport report;
  report.title = title;
  for (const auto& run : runs) {
    const auto loaded = load_run(run);
    report.cells.push_back(evaluate_cell(loaded.method, loaded.dataset, run.protocol, loaded.scores, loaded.truths));
  }
  return report;
}

}  // namespace dood
