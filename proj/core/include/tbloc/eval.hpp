#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "tbloc/box.hpp"
#include "tbloc/checkpoint.hpp"
#include "tbloc/dataio.hpp"
#include "tbloc/network.hpp"
#include "tbloc/preprocess.hpp"

namespace tbloc {

// Per-image TP/FP flags, aligned with the input detection order. Detections
// are visited by descending score (ties: input order) and each claims the
// unmatched ground truth with the highest IoU above `iou_thresh`.
std::vector<bool> match_image(const std::vector<Detection>& detections, const std::vector<Box>& gts,
                              double iou_thresh);

struct ScoredFlag {
  double score = 0.0;
  bool tp = false;
};

std::vector<ScoredFlag> match_detections(const std::vector<std::vector<Detection>>& detections,
                                         const std::vector<std::vector<Box>>& gts, double iou_thresh);

// One point per distinct score, thresholds descending; a point counts every
// detection with score >= threshold.
struct CurvePoint {
  double threshold = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  double precision = 0.0;
  double recall = 0.0;
  double avg_fp_per_image = 0.0;
};

// Throws InvalidArgument when total_gt is zero.
std::vector<CurvePoint> pr_curve(std::vector<ScoredFlag> flags, std::size_t total_gt,
                                 std::size_t image_count = 1);

// sum_k P_k (R_k - R_{k-1}) with R_0 = 0, over points in curve order.
double average_precision(std::span<const CurvePoint> curve);

struct FrocPoint {
  double threshold = 0.0;
  double avg_fp_per_image = 0.0;
  double sensitivity = 0.0;
};

std::vector<FrocPoint> froc_curve(std::vector<ScoredFlag> flags, std::size_t total_gt, std::size_t image_count);

struct ReportRow {
  double threshold = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::optional<double> precision;  // empty when tp + fp == 0
  std::optional<double> recall;     // empty when there is no ground truth
  double avg_fp_per_image = 0.0;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::optional<double> ap;  // empty when there is no ground truth
  std::size_t image_count = 0;
  std::size_t gt_count = 0;
  std::size_t detection_count = 0;
  // Fraction of images whose study verdict matches the label, when verdicts exist.
  std::optional<double> study_accuracy;
};

EvalReport build_report(const std::vector<std::vector<Detection>>& detections,
                        const std::vector<std::vector<Box>>& gts, double iou_thresh);

struct EvalConfig {
  double iou_thresh = 0.3;
  PostprocessOptions postprocess;
  bool use_fp_gate = true;
  std::size_t threads = 1;
};

struct ImagePrediction {
  std::vector<Detection> detections;  // processed coordinates
  std::optional<StudyVerdict> verdict;
};

// Runs the detector on one sample. Applies the FP gate when the model has an
// FP head and config.use_fp_gate is set.
ImagePrediction predict_sample(const DetectorModel& model, const AnchorSet& anchors, const Sample& sample,
                               const EvalConfig& config);

using Predictor = std::function<ImagePrediction(const Sample&)>;

EvalReport evaluate_samples(const Predictor& predictor, const std::vector<Sample>& samples,
                            const EvalConfig& config);
EvalReport evaluate_model(const DetectorModel& model, const std::vector<Sample>& samples,
                          const EvalConfig& config);
// Preprocesses the manifest at the checkpoint's image size first.
EvalReport evaluate_checkpoint(const Checkpoint& checkpoint, const DatasetManifest& manifest,
                               const EvalConfig& config);

// threshold,tp,fp,fn,precision,recall,avg_fp_per_image
void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
// {"ap", "image_count", "gt_count", ...}
void write_summary_json(const EvalReport& report, const std::filesystem::path& path);
// pr.svg and froc.svg inside `dir`.
void write_curve_svgs(const EvalReport& report, const std::filesystem::path& dir);

// Reads a report CSV back (used by the curves subcommand).
EvalReport read_report_csv(const std::filesystem::path& path);

}  // namespace tbloc
