#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dood/datamodel.hpp"
#include "json.hpp"

namespace dood {

// Non-IGNORE pixels pooled across images; OOD is the positive class.
class PixelPool {
 public:
  void add(const ScoreMap& scores, const OodMask& truth);
  void add(float score, bool positive);

  std::size_t positives() const { return positives_; }
  std::size_t negatives() const { return items_.size() - positives_; }
  std::size_t size() const { return items_.size(); }

  // Distinct scores in descending order with (positive, negative) counts.
  struct Group {
    float score;
    std::size_t pos;
    std::size_t neg;
  };
  std::vector<Group> groups() const;

 private:
  std::vector<std::pair<float, bool>> items_;
  std::size_t positives_ = 0;
};

struct PrPoint {
  double threshold = 0.0;  // pixels with score >= threshold are called OOD
  double precision = 0.0;
  double recall = 0.0;
};

struct PRCurve {
  std::vector<PrPoint> points;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// Step-wise AP over tie groups: sum_k (R_k - R_{k-1}) * P_k.
double average_precision(const PixelPool& pool);
double average_precision(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths);
PRCurve pr_curve(const PixelPool& pool);
PRCurve pr_curve(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths);
double area_under(const PRCurve& curve);

// Fraction of non-IGNORE pixels where (score > threshold) == (truth == OOD).
double pixel_accuracy(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths, double threshold);
// Fraction of non-IGNORE pixels with score > threshold.
double ood_incidence(const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths, double threshold);

// Image-wide labels: every pixel of a negative image is OOD, of any other
// image ID; excluded ids are dropped.
struct ImagewideTruth {
  std::vector<std::string> ids;
  std::vector<OodMask> masks;
};
ImagewideTruth apply_imagewide_protocol(const std::vector<std::string>& ids,
                                        const std::vector<std::pair<int, int>>& dims,
                                        const std::set<std::string>& negative_ids,
                                        const std::set<std::string>& exclusions);
ImagewideTruth apply_imagewide_protocol(const DatasetManifest& manifest, const std::set<std::string>& negative_ids,
                                        const std::set<std::string>& exclusions);

// --- reports ------------------------------------------------------------------------

enum class Protocol { kPixel, kImagewide, kControl };
std::string_view protocol_name(Protocol protocol);
Protocol parse_protocol(std::string_view name);

struct EvalCell {
  std::string method;
  std::string dataset;
  Protocol protocol = Protocol::kPixel;
  double ap = 0.0;
  double prevalence = 0.0;  // P / (P + N), the constant-score AP
  double incidence = 0.0;   // at threshold 0.5
  std::size_t positives = 0;
  std::size_t negatives = 0;
  PRCurve curve;
};

EvalCell evaluate_cell(std::string method, std::string dataset, Protocol protocol,
                       const std::vector<ScoreMap>& scores, const std::vector<OodMask>& truths);

struct EvalReport {
  std::string title;
  std::vector<EvalCell> cells;
};

std::string render_markdown(const EvalReport& report);
std::string render_json(const EvalReport& report);
std::string render_pr_csv(const PRCurve& curve);
std::string render_pr_svg(const PRCurve& curve, const std::string& title);
// report.md, report.json, pr/<method>__<dataset>__<protocol>.{csv,svg}
void write_report(const EvalReport& report, const std::filesystem::path& out_dir, bool svg = true);

// One report entry: score manifests to pool plus the truth protocol.
struct EvalRun {
  std::string method;  // defaults to the first score manifest's method
  std::string dataset; // column label
  Protocol protocol = Protocol::kPixel;
  std::vector<std::filesystem::path> scores;
  // Image-wide protocol: explicit negatives, else every record with role "ood".
  std::optional<std::set<std::string>> negative_ids;
  std::set<std::string> exclusions;
};

EvalRun eval_run_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

// Every missing input is listed before anything is computed.
EvalReport build_report(const std::string& title, const std::vector<EvalRun>& runs);

}  // namespace dood
