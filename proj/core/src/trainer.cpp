#include "tbloc/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "tbloc/error.hpp"
#include "tbloc/rng.hpp"

namespace tbloc {

namespace {

using json = nlohmann::ordered_json;

bool not_fp_head(const std::string& name) { return !is_fp_head_parameter(name); }

bool fp_head_or_fpn(const std::string& name) { return is_fp_head_parameter(name) || name.starts_with("fpn."); }

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

void check_finite(double loss, const char* phase) {
  if (!std::isfinite(loss)) throw NumericError(std::string(phase) + " loss is not finite");
}

AdamConfig fp_adam(const TrainConfig& c) {
  AdamConfig a = c.adam;
  if (c.fp_learning_rate) a.learning_rate = *c.fp_learning_rate;
  return a;
}

}  // namespace

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["learning_rate"] = c.adam.learning_rate;
  j["fp_learning_rate"] = c.fp_learning_rate.value_or(c.adam.learning_rate);
  j["beta1"] = c.adam.beta1;
  j["beta2"] = c.adam.beta2;
  j["adam_epsilon"] = c.adam.epsilon;
  j["phase2_train_fpn"] = c.phase2_train_fpn;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["alpha"] = c.loss.alpha;
  j["gamma"] = c.loss.gamma;
  j["reg_weight"] = c.loss.reg_weight;
  j["hard_example_weight"] = c.loss.use_hard_example_weight;
  j["loss_normalization"] =
      c.loss.normalization == LossNormalization::kPositiveAnchors ? "positive" : "non_ignored";
  j["positive_iou"] = c.match.pos_thresh;
  j["negative_iou"] = c.match.neg_thresh;
  j["eval_iou"] = c.eval.iou_thresh;
  return j.dump();
}

Trainer::Trainer(DetectorModel& model, TrainConfig config)
    : model_(model),
      config_(std::move(config)),
      anchors_(generate_anchors(model.config().image_size, model.config().anchors)),
      detector_opt_(config_.adam, not_fp_head),
      fp_opt_(fp_adam(config_), config_.phase2_train_fpn ? fp_head_or_fpn : is_fp_head_parameter) {
  validate(config_.loss);
  if (config_.batch_size == 0) throw InvalidArgument("train: batch size must be positive");
}

double Trainer::phase1_step(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw InvalidArgument("phase1_step: empty batch");
  detector_opt_.zero_grad(model_);
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const Sample* s : batch) {
    const Tensor image = image_tensor(s->image.pixels, s->image.size);
    const RawPredictions raw = forward_heads(model_, forward_features(model_, image));
    DetectionLoss loss = detection_loss(raw, anchors_, s->boxes, config_.loss, config_.match);
    check_finite(loss.breakdown.total, "phase-1");
    scale(loss.total, inv).backward();
    total += loss.breakdown.total;
  }
  detector_opt_.step(model_);
  return total * inv;
}

double Trainer::phase2_step(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw InvalidArgument("phase2_step: empty batch");
  fp_opt_.zero_grad(model_);
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const Sample* s : batch) {
    Tensor coarsest;
    {
      // Backbone gradients this produces with phase2_train_fpn are never
      // stepped; phase 1 zeroes them first.
      std::optional<NoGradGuard> no_grad;
      if (!config_.phase2_train_fpn) no_grad.emplace();
      coarsest = forward_features(model_, image_tensor(s->image.pixels, s->image.size)).levels.back();
    }
    Tensor loss = fp_head_ce_loss(forward_fp_head(model_, coarsest), s->label, config_.loss.epsilon);
    check_finite(loss.item(), "phase-2");
    scale(loss, inv).backward();
    total += loss.item();
  }
  fp_opt_.step(model_);
  return total * inv;
}

EpochSummary Trainer::train_epoch(const std::vector<Sample>& samples, std::size_t epoch) {
  std::vector<const Sample*> tb, all;
  for (const auto& s : samples) {
    all.push_back(&s);
    if (s.label == CaseLabel::kTb) tb.push_back(&s);
  }
  if (tb.empty()) throw InvalidArgument("train: no TB-positive samples for phase 1");
  const bool fp = model_.config().fp_head;
  if (fp && tb.size() == all.size()) {
    throw InvalidArgument("train: the FP head needs healthy samples as well as TB-positive ones");
  }

  auto rng = make_rng(config_.seed, epoch);
  std::shuffle(tb.begin(), tb.end(), rng);
  std::shuffle(all.begin(), all.end(), rng);

  auto run_phase = [&](const std::vector<const Sample*>& items, auto step, std::size_t& steps) {
    double sum = 0.0;
    for (std::size_t i = 0; i < items.size(); i += config_.batch_size) {
      const auto end = items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), i + config_.batch_size));
      sum += (this->*step)(std::vector<const Sample*>(items.begin() + static_cast<std::ptrdiff_t>(i), end));
      ++steps;
    }
    return sum / static_cast<double>(steps);
  };

  EpochSummary summary;
  summary.epoch = epoch;
  summary.phase1_loss = run_phase(tb, &Trainer::phase1_step, summary.phase1_steps);
  if (fp) summary.phase2_loss = run_phase(all, &Trainer::phase2_step, summary.phase2_steps);
  return summary;
}

TrainingResult run_training(const std::vector<Sample>& train, const std::vector<Sample>& val,
                            const TrainConfig& config, const std::filesystem::path& out_dir,
                            Evaluator evaluator, EpochCallback on_epoch) {
  if (config.epochs == 0) throw InvalidArgument("train: epochs must be positive");
  for (const auto& s : train) {
    if (s.image.size != config.model.image_size) {
      throw InvalidArgument("train: sample " + s.id + " has size " + std::to_string(s.image.size) +
                            ", model expects " + std::to_string(config.model.image_size));
    }
  }
  if (!evaluator) {
    evaluator = [&val, &config](const DetectorModel& m) -> std::optional<double> {
      if (val.empty()) return std::nullopt;
      return evaluate_model(m, val, config.eval).ap;
    };
  }
  std::filesystem::create_directories(out_dir);
  const std::string train_json = train_config_to_json(config);

  DetectorModel model = build_model(config.model, config.seed);
  Trainer trainer(model, config);
  TrainingResult result;

  std::ofstream log(out_dir / "train_log.csv");
  if (!log) throw IoError("cannot write " + (out_dir / "train_log.csv").string());
  log << "epoch,phase1_loss,phase2_loss,val_ap\n";

  std::optional<double> best_ap;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochSummary summary = trainer.train_epoch(train, epoch);

    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03zu.json", epoch);
    const auto path = out_dir / name;
    save_checkpoint(make_checkpoint(model, epoch, std::nullopt, train_json), path);
    const DetectorModel reloaded = model_from_checkpoint(load_checkpoint(path));
    const std::optional<double> ap = evaluator(reloaded);
    save_checkpoint(make_checkpoint(reloaded, epoch, ap, train_json), path);

    log << epoch << ',' << num(summary.phase1_loss) << ','
        << (summary.phase2_loss ? num(*summary.phase2_loss) : "") << ',' << (ap ? num(*ap) : "") << '\n';
    log.flush();
    if (on_epoch) on_epoch(summary, ap);

    if (ap && (!best_ap || *ap > *best_ap)) {
      best_ap = ap;
      result.best_epoch = epoch;
    }
    result.history.push_back(summary);
    result.val_ap.push_back(ap);
  }
  if (result.best_epoch == 0) result.best_epoch = config.epochs;

  char name[32];
  std::snprintf(name, sizeof(name), "epoch_%03zu.json", result.best_epoch);
  result.best_checkpoint = out_dir / "best.json";
  save_checkpoint(load_checkpoint(out_dir / name), result.best_checkpoint);
  return result;
}

}  // namespace tbloc
