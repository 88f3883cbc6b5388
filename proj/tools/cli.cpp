#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "tbloc/checkpoint.hpp"
#include "tbloc/dataio.hpp"
#include "tbloc/error.hpp"
#include "tbloc/eval.hpp"
#include "tbloc/network.hpp"
#include "tbloc/parallel.hpp"
#include "tbloc/preprocess.hpp"
#include "tbloc/trainer.hpp"

namespace tbloc::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out;
  std::string data;
  std::string val;
  std::string checkpoint;
  std::string report;
  std::string model = "tiny";
  std::size_t image_size = 0;
  std::size_t epochs = 10;
  double lr = 1e-4;
  std::optional<double> fp_lr;
  std::size_t batch_size = 1;
  std::size_t n_tb = 8;
  std::size_t n_healthy = 8;
  std::vector<double> mix{1.0, 1.0, 1.0};
  double iou = 0.3;
  double score_thresh = 0.05;
  std::string force_verdict;
  bool no_fp_head = false;
  bool no_oriented_heads = false;
  bool baseline_focal_loss = false;
  bool phase2_train_fpn = false;
};

// Config keys are the long flag names in snake_case. Values only fill
// options that were not given on the command line.
void apply_config(CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ParseError(path + ": config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    CLI::Option* op = flag == "config" ? nullptr : sub.get_option_no_throw("--" + flag);
    if (op == nullptr) throw UsageError(path + ": unknown key '" + key + "' for " + sub.get_name());
    if (op->count() > 0) continue;
    std::vector<std::string> inputs;
    auto to_input = [&](const json& v) {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_boolean()) return std::string(v.get<bool>() ? "true" : "false");
      if (v.is_number()) return v.dump();
      throw UsageError(path + ": unsupported value for '" + key + "'");
    };
    if (value.is_array()) {
      for (const auto& v : value) inputs.push_back(to_input(v));
    } else {
      inputs.push_back(to_input(value));
    }
    try {
      for (auto& s : inputs) op->add_result(s);
      op->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError(path + ": bad value for '" + key + "': " + e.what());
    }
  }
}

void add_common(CLI::App& sub, Options& o) {
  sub.add_option("--config", o.config, "JSON file with defaults for any flag (snake_case keys)");
  sub.add_option("--seed", o.seed, "Random seed")->capture_default_str();
  sub.add_option("--threads", o.threads, "Worker thread cap")->capture_default_str()->check(CLI::PositiveNumber);
}

void add_ablations(CLI::App& sub, Options& o) {
  sub.add_flag("--no-fp-head", o.no_fp_head, "Disable the FP-restrictor head and its gate");
  sub.add_flag("--no-oriented-heads", o.no_oriented_heads, "Use 3x3 kernels for every final regression layer");
  sub.add_flag("--baseline-focal-loss", o.baseline_focal_loss,
               "Plain focal loss (alpha 0.25, gamma 2, no hard-example term)");
}

fs::path manifest_file(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.jsonl";
  return p;
}

DatasetManifest open_manifest(const std::string& data, Split split) {
  if (data.empty()) throw UsageError("--data is required");
  ManifestReadOptions opts;
  opts.split = split;
  return read_manifest(manifest_file(data), opts);
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

int cmd_gen_data(const Options& o, std::ostream& err) {
  require(o.out, "--out");
  SynthConfig c;
  c.n_tb = o.n_tb;
  c.n_healthy = o.n_healthy;
  c.image_size = o.image_size ? o.image_size : 256;
  c.seed = o.seed;
  if (o.mix.size() != 3) throw UsageError("--mix takes three weights (dot blob diffuse)");
  std::copy(o.mix.begin(), o.mix.end(), c.mix.begin());
  const auto m = generate_dataset(c, o.out);
  err << "wrote " << m.records.size() << " images to " << o.out << '\n';
  return 0;
}

int cmd_preprocess(const Options& o, std::ostream& err) {
  require(o.out, "--out");
  const std::size_t size = o.image_size ? o.image_size : 128;
  const DatasetManifest in = open_manifest(o.data, Split::kTrain);
  const auto samples = load_samples(in, size, o.threads);
  DatasetManifest out;
  out.base_dir = o.out;
  fs::create_directories(fs::path(o.out) / "images");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ImageRecord r = in.records[i];
    r.image = "images/" + r.id + ".pgm";
    // Identity window for 8-bit samples.
    r.ww = 255;
    r.wl = 127.5;
    r.boxes.clear();
    for (const auto& b : samples[i].boxes) {
      const int n = static_cast<int>(size);
      r.boxes.push_back({std::clamp(static_cast<int>(std::floor(b.x1)), 0, n),
                         std::clamp(static_cast<int>(std::floor(b.y1)), 0, n),
                         std::clamp(static_cast<int>(std::ceil(b.x2)), 0, n),
                         std::clamp(static_cast<int>(std::ceil(b.y2)), 0, n)});
    }
    write_pgm8(to_gray8(samples[i].image), out.image_path(r));
    out.records.push_back(std::move(r));
  }
  write_manifest(out, fs::path(o.out) / "manifest.jsonl");
  err << "preprocessed " << samples.size() << " images to " << size << "x" << size << '\n';
  return 0;
}

TrainConfig train_config(const Options& o) {
  const std::size_t size = o.image_size ? o.image_size : 128;
  TrainConfig c;
  if (o.model == "tiny") {
    c.model = tiny_model_config(size);
  } else if (o.model == "full") {
    c.model = full_model_config();
    c.model.image_size = size;
  } else {
    throw UsageError("--model must be tiny or full");
  }
  c.model.fp_head = !o.no_fp_head;
  c.model.oriented_heads = !o.no_oriented_heads;
  if (o.baseline_focal_loss) c.loss = baseline_focal_config();
  c.adam.learning_rate = o.lr;
  c.fp_learning_rate = o.fp_lr;
  c.phase2_train_fpn = o.phase2_train_fpn;
  c.epochs = o.epochs;
  c.batch_size = o.batch_size;
  c.seed = o.seed;
  c.eval.iou_thresh = o.iou;
  c.eval.postprocess.score_thresh = o.score_thresh;
  c.eval.threads = o.threads;
  validate(c.model);
  return c;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << std::fixed << v;
  return s.str();
}

int cmd_train(const Options& o, std::ostream& err) {
  require(o.out, "--out");
  const TrainConfig config = train_config(o);
  const auto train = load_samples(open_manifest(o.data, Split::kTrain), config.model.image_size, o.threads);
  const auto val = load_samples(open_manifest(o.val.empty() ? o.data : o.val, Split::kVal),
                                config.model.image_size, o.threads);
  const auto result = run_training(train, val, config, o.out, {}, [&](const EpochSummary& s, std::optional<double> ap) {
    err << "epoch " << s.epoch << "/" << config.epochs << " phase1_loss " << fmt(s.phase1_loss);
    if (s.phase2_loss) err << " phase2_loss " << fmt(*s.phase2_loss);
    err << " val_ap " << (ap ? fmt(*ap) : std::string("n/a")) << '\n';
  });
  err << "best epoch " << result.best_epoch << " -> " << result.best_checkpoint.string() << '\n';
  return 0;
}

EvalConfig eval_config(const Options& o, const ModelConfig& model) {
  EvalConfig c;
  c.iou_thresh = o.iou;
  c.postprocess.score_thresh = o.score_thresh;
  c.use_fp_gate = model.fp_head && !o.no_fp_head;
  c.threads = o.threads;
  return c;
}

int cmd_eval(const Options& o, std::ostream& err) {
  require(o.out, "--out");
  require(o.checkpoint, "--checkpoint");
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const DatasetManifest manifest = open_manifest(o.data, Split::kTest);
  const EvalReport report = evaluate_checkpoint(ckpt, manifest, eval_config(o, ckpt.model_config));
  fs::create_directories(o.out);
  write_report_csv(report, fs::path(o.out) / "report.csv");
  write_summary_json(report, fs::path(o.out) / "summary.json");
  write_curve_svgs(report, o.out);
  err << "images " << report.image_count << " gt " << report.gt_count << " detections "
      << report.detection_count << " ap " << (report.ap ? fmt(*report.ap) : std::string("n/a")) << '\n';
  return 0;
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.checkpoint, "--checkpoint");
  std::optional<StudyVerdict> forced;
  if (o.force_verdict == "healthy") {
    forced = StudyVerdict::kHealthy;
  } else if (o.force_verdict == "tb") {
    forced = StudyVerdict::kTb;
  } else if (!o.force_verdict.empty()) {
    throw UsageError("--force-verdict must be healthy or tb");
  }
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const DetectorModel model = model_from_checkpoint(ckpt);
  const DatasetManifest manifest = open_manifest(o.data, Split::kTest);
  const auto samples = load_samples(manifest, model.config().image_size, o.threads);
  EvalConfig config = eval_config(o, model.config());
  config.use_fp_gate = false;
  const AnchorSet anchors = generate_anchors(model.config().image_size, model.config().anchors);

  std::vector<ImagePrediction> preds(samples.size());
  parallel_for(samples.size(), o.threads,
               [&](std::size_t i) { preds[i] = predict_sample(model, anchors, samples[i], config); });

  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out);
    if (!file) throw IoError("cannot write " + o.out);
  }
  std::ostream& sink = o.out.empty() ? out : file;
  const bool gate = model.config().fp_head && !o.no_fp_head;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& p = preds[i];
    StudyVerdict verdict = p.detections.empty() ? StudyVerdict::kHealthy : StudyVerdict::kTb;
    if (p.verdict) verdict = *p.verdict;
    if (forced) verdict = *forced;
    if (gate || forced) p.detections = apply_fp_gate(std::move(p.detections), verdict);
    const double sx = samples[i].image.sx, sy = samples[i].image.sy;
    json boxes = json::array();
    for (const auto& d : p.detections) {
      boxes.push_back({d.box.x1 / sx, d.box.y1 / sy, d.box.x2 / sx, d.box.y2 / sy, d.score});
    }
    json line;
    line["id"] = samples[i].id;
    line["boxes"] = std::move(boxes);
    line["study_verdict"] = verdict == StudyVerdict::kTb ? "tb" : "healthy";
    sink << line.dump() << '\n';
  }
  if (!sink) throw IoError("write failed");
  err << "predicted " << samples.size() << " images\n";
  return 0;
}

int cmd_curves(const Options& o, std::ostream& err) {
  require(o.report, "--report");
  require(o.out, "--out");
  const EvalReport report = read_report_csv(o.report);
  write_curve_svgs(report, o.out);
  err << "wrote pr.svg and froc.svg to " << o.out << '\n';
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Tuberculosis lesion localization on chest radiographs", "tbloc"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic 16-bit PGM dataset with a JSONL manifest");
  add_common(*gen, o);
  gen->add_option("--out", o.out, "Output directory");
  gen->add_option("--image-size", o.image_size, "Side of the generated images (default 256)");
  gen->add_option("--n-tb", o.n_tb, "Number of TB images")->capture_default_str();
  gen->add_option("--n-healthy", o.n_healthy, "Number of healthy images")->capture_default_str();
  gen->add_option("--mix", o.mix, "Relative weights of dot, blob and diffuse lesions")->expected(3);

  auto* pre = app.add_subcommand("preprocess", "Window, resize and equalize a dataset into 8-bit PGMs");
  add_common(*pre, o);
  pre->add_option("--data", o.data, "Dataset directory or manifest");
  pre->add_option("--out", o.out, "Output directory");
  pre->add_option("--image-size", o.image_size, "Processed side length (default 128)");

  auto* train = app.add_subcommand("train", "Two-phase training with per-epoch checkpoints");
  add_common(*train, o);
  add_ablations(*train, o);
  train->add_option("--data", o.data, "Training dataset directory or manifest");
  train->add_option("--val", o.val, "Validation dataset (default: the training data)");
  train->add_option("--out", o.out, "Checkpoint directory");
  train->add_option("--image-size", o.image_size, "Network input side (default 128)");
  train->add_option("--epochs", o.epochs, "Epochs")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--fp-lr", o.fp_lr, "FP-head Adam learning rate (default: --lr)")->check(CLI::PositiveNumber);
  train->add_option("--batch-size", o.batch_size, "Images per step")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--model", o.model, "tiny or full")->capture_default_str();
  train->add_flag("--phase2-train-fpn", o.phase2_train_fpn, "Let FP-head training also update the FPN");
  train->add_option("--iou", o.iou, "Validation matching IoU")->capture_default_str();
  train->add_option("--score-thresh", o.score_thresh, "Detection score threshold")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint: report CSV, summary JSON, curves");
  add_common(*ev, o);
  add_ablations(*ev, o);
  ev->add_option("--data", o.data, "Dataset directory or manifest");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON");
  ev->add_option("--out", o.out, "Report directory");
  ev->add_option("--iou", o.iou, "Matching IoU")->capture_default_str();
  ev->add_option("--score-thresh", o.score_thresh, "Detection score threshold")->capture_default_str();

  auto* pred = app.add_subcommand("predict", "Write detections as JSON lines in original coordinates");
  add_common(*pred, o);
  add_ablations(*pred, o);
  pred->add_option("--data", o.data, "Dataset directory or manifest");
  pred->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON");
  pred->add_option("--out", o.out, "Output file (default: standard output)");
  pred->add_option("--score-thresh", o.score_thresh, "Detection score threshold")->capture_default_str();
  pred->add_option("--force-verdict", o.force_verdict, "Override the study verdict: healthy or tb");

  auto* curves = app.add_subcommand("curves", "Draw P-R and FROC plots from a report CSV");
  add_common(*curves, o);
  curves->add_option("--report", o.report, "Report CSV");
  curves->add_option("--out", o.out, "Output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!o.config.empty()) apply_config(*sub, o.config);
    if (sub == gen) return cmd_gen_data(o, err);
    if (sub == pre) return cmd_preprocess(o, err);
    if (sub == train) return cmd_train(o, err);
    if (sub == ev) return cmd_eval(o, err);
    if (sub == pred) return cmd_predict(o, out, err);
    return cmd_curves(o, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n\n" << sub->help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace tbloc::cli
