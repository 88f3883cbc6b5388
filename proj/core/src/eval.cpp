#include "tbloc/eval.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "tbloc/error.hpp"
#include "tbloc/parallel.hpp"

namespace tbloc {

namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

void sort_flags(std::vector<ScoredFlag>& flags) {
  std::stable_sort(flags.begin(), flags.end(),
                   [](const ScoredFlag& a, const ScoredFlag& b) { return a.score > b.score; });
}

}  // namespace

std::vector<bool> match_image(const std::vector<Detection>& detections, const std::vector<Box>& gts,
                              double iou_thresh) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });
  std::vector<bool> taken(gts.size(), false);
  std::vector<bool> tp(detections.size(), false);
  for (std::size_t d : order) {
    double best = iou_thresh;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(detections[d].box, gts[g]);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size()) {
      taken[best_g] = true;
      tp[d] = true;
    }
  }
  return tp;
}

std::vector<ScoredFlag> match_detections(const std::vector<std::vector<Detection>>& detections,
                                         const std::vector<std::vector<Box>>& gts, double iou_thresh) {
  if (detections.size() != gts.size()) throw InvalidArgument("match_detections: image counts differ");
  std::vector<ScoredFlag> flags;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto tp = match_image(detections[i], gts[i], iou_thresh);
    for (std::size_t d = 0; d < tp.size(); ++d) flags.push_back({detections[i][d].score, tp[d]});
  }
  return flags;
}

std::vector<CurvePoint> pr_curve(std::vector<ScoredFlag> flags, std::size_t total_gt, std::size_t image_count) {
  if (total_gt == 0) throw InvalidArgument("pr_curve: no ground-truth boxes, recall is undefined");
  if (image_count == 0) throw InvalidArgument("pr_curve: image count must be positive");
  sort_flags(flags);
  std::vector<CurvePoint> curve;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    (flags[i].tp ? tp : fp) += 1;
    if (i + 1 < flags.size() && flags[i + 1].score == flags[i].score) continue;
    CurvePoint p;
    p.threshold = flags[i].score;
    p.tp = tp;
    p.fp = fp;
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    p.recall = static_cast<double>(tp) / static_cast<double>(total_gt);
    p.avg_fp_per_image = static_cast<double>(fp) / static_cast<double>(image_count);
    curve.push_back(p);
  }
  return curve;
}

double average_precision(std::span<const CurvePoint> curve) {
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& p : curve) {
    ap += p.precision * (p.recall - prev_recall);
    prev_recall = p.recall;
  }
  return ap;
}

std::vector<FrocPoint> froc_curve(std::vector<ScoredFlag> flags, std::size_t total_gt, std::size_t image_count) {
  std::vector<FrocPoint> out;
  for (const auto& p : pr_curve(std::move(flags), total_gt, image_count)) {
    out.push_back({p.threshold, p.avg_fp_per_image, p.recall});
  }
  return out;
}

EvalReport build_report(const std::vector<std::vector<Detection>>& detections,
                        const std::vector<std::vector<Box>>& gts, double iou_thresh) {
  EvalReport report;
  report.image_count = gts.size();
  for (const auto& g : gts) report.gt_count += g.size();
  for (const auto& d : detections) report.detection_count += d.size();
  auto flags = match_detections(detections, gts, iou_thresh);
  sort_flags(flags);
  const double images = static_cast<double>(std::max<std::size_t>(1, report.image_count));
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    (flags[i].tp ? tp : fp) += 1;
    if (i + 1 < flags.size() && flags[i + 1].score == flags[i].score) continue;
    ReportRow row;
    row.threshold = flags[i].score;
    row.tp = tp;
    row.fp = fp;
    row.fn = report.gt_count - tp;
    if (tp + fp > 0) row.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (report.gt_count > 0) row.recall = static_cast<double>(tp) / static_cast<double>(report.gt_count);
    row.avg_fp_per_image = static_cast<double>(fp) / images;
    report.rows.push_back(row);
  }
  if (report.gt_count > 0) {
    report.ap = average_precision(pr_curve(std::move(flags), report.gt_count, report.image_count));
  }
  return report;
}

ImagePrediction predict_sample(const DetectorModel& model, const AnchorSet& anchors, const Sample& sample,
                               const EvalConfig& config) {
  NoGradGuard no_grad;
  const RawPredictions raw = forward_detector(model, image_tensor(sample.image.pixels, sample.image.size));
  ImagePrediction out;
  out.detections = postprocess(raw, anchors, config.postprocess, sample.id);
  if (raw.study_logits) {
    out.verdict = study_verdict(raw.study_logits->data());
    if (config.use_fp_gate) out.detections = apply_fp_gate(std::move(out.detections), *out.verdict);
  }
  return out;
}

EvalReport evaluate_samples(const Predictor& predictor, const std::vector<Sample>& samples,
                            const EvalConfig& config) {
  std::vector<ImagePrediction> predictions(samples.size());
  parallel_for(samples.size(), config.threads, [&](std::size_t i) { predictions[i] = predictor(samples[i]); });
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Box>> gts;
  std::size_t verdicts = 0, correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    dets.push_back(std::move(predictions[i].detections));
    gts.push_back(samples[i].boxes);
    if (predictions[i].verdict) {
      ++verdicts;
      const bool tb = *predictions[i].verdict == StudyVerdict::kTb;
      correct += tb == (samples[i].label == CaseLabel::kTb);
    }
  }
  EvalReport report = build_report(dets, gts, config.iou_thresh);
  if (verdicts > 0) report.study_accuracy = static_cast<double>(correct) / static_cast<double>(verdicts);
  return report;
}

EvalReport evaluate_model(const DetectorModel& model, const std::vector<Sample>& samples,
                          const EvalConfig& config) {
  const AnchorSet anchors = generate_anchors(model.config().image_size, model.config().anchors);
  return evaluate_samples(
      [&](const Sample& s) { return predict_sample(model, anchors, s, config); }, samples, config);
}

EvalReport evaluate_checkpoint(const Checkpoint& checkpoint, const DatasetManifest& manifest,
                               const EvalConfig& config) {
  const DetectorModel model = model_from_checkpoint(checkpoint);
  return evaluate_model(model, load_samples(manifest, model.config().image_size, config.threads), config);
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "threshold,tp,fp,fn,precision,recall,avg_fp_per_image\n";
  for (const auto& r : report.rows) {
    out << num(r.threshold) << ',' << r.tp << ',' << r.fp << ',' << r.fn << ','
        << (r.precision ? num(*r.precision) : "") << ',' << (r.recall ? num(*r.recall) : "") << ','
        << num(r.avg_fp_per_image) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_summary_json(const EvalReport& report, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["ap"] = report.ap ? nlohmann::ordered_json(*report.ap) : nlohmann::ordered_json(nullptr);
  j["image_count"] = report.image_count;
  j["gt_count"] = report.gt_count;
  j["detection_count"] = report.detection_count;
  if (report.study_accuracy) j["study_accuracy"] = *report.study_accuracy;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

struct Series {
  std::vector<std::pair<double, double>> points;
};

std::string svg_plot(const Series& s, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, double xmax) {
  constexpr double kW = 480, kH = 360, kL = 60, kR = 20, kT = 40, kB = 50;
  const double pw = kW - kL - kR, ph = kH - kT - kB;
  auto px = [&](double x) { return kL + pw * (xmax > 0 ? x / xmax : 0.0); };
  auto py = [&](double y) { return kT + ph * (1.0 - y); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
  o << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    o << "<text x=\"" << px(f * xmax) << "\" y=\"" << kT + ph + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
      << num(f * xmax) << "</text>\n";
    o << "<text x=\"" << kL - 6 << "\" y=\"" << py(f) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << num(f)
      << "</text>\n";
  }
  o << "<text x=\"" << kL + pw / 2 << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\" font-size=\"13\">"
    << xlabel << "</text>\n";
  o << "<text x=\"16\" y=\"" << kT + ph / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 "
    << kT + ph / 2 << ")\">" << ylabel << "</text>\n";
  if (!s.points.empty()) {
    o << "<polyline fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : s.points) o << px(x) << ',' << py(y) << ' ';
    o << "\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void write_curve_svgs(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Series pr, froc;
  double max_fp = 0.0;
  for (const auto& r : report.rows) {
    if (r.recall && r.precision) pr.points.emplace_back(*r.recall, *r.precision);
    if (r.recall) froc.points.emplace_back(r.avg_fp_per_image, *r.recall);
    max_fp = std::max(max_fp, r.avg_fp_per_image);
  }
  std::string title = "Precision-recall";
  if (report.ap) title += " (AP " + num(*report.ap) + ")";
  write_text(dir / "pr.svg", svg_plot(pr, title, "recall", "precision", 1.0));
  write_text(dir / "froc.svg", svg_plot(froc, "FROC", "average false positives per image", "sensitivity",
                                        max_fp > 0 ? max_fp : 1.0));
}

EvalReport read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "threshold,tp,fp,fn,precision,recall,avg_fp_per_image") {
    throw ParseError(path.string() + ":1: unexpected report header");
  }
  EvalReport report;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 7) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 7 fields");
    try {
      ReportRow r;
      r.threshold = std::stod(cells[0]);
      r.tp = std::stoul(cells[1]);
      r.fp = std::stoul(cells[2]);
      r.fn = std::stoul(cells[3]);
      if (!cells[4].empty()) r.precision = std::stod(cells[4]);
      if (!cells[5].empty()) r.recall = std::stod(cells[5]);
      r.avg_fp_per_image = std::stod(cells[6]);
      report.rows.push_back(r);
    } catch (const std::logic_error&) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  if (!report.rows.empty()) {
    const auto& last = report.rows.back();
    report.gt_count = last.tp + last.fn;
    if (report.gt_count > 0) {
      double ap = 0.0, prev = 0.0;
      for (const auto& r : report.rows) {
        ap += r.precision.value_or(0.0) * (r.recall.value_or(0.0) - prev);
        prev = r.recall.value_or(0.0);
      }
      report.ap = ap;
    }
  }
  return report;
}

}  // namespace tbloc
