#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tbloc/anchors.hpp"
#include "tbloc/checkpoint.hpp"
#include "tbloc/eval.hpp"
#include "tbloc/losses.hpp"
#include "tbloc/network.hpp"
#include "tbloc/optim.hpp"
#include "tbloc/preprocess.hpp"

namespace tbloc {

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  MatchOptions match;
  AdamConfig adam;
  std::optional<double> fp_learning_rate;  // FP-head Adam rate; defaults to adam.learning_rate
  // Phase 2 also updates the FPN (backbone and detection heads stay frozen).
  bool phase2_train_fpn = false;
  std::size_t epochs = 10;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  EvalConfig eval;
};

std::string train_config_to_json(const TrainConfig& config);

struct EpochSummary {
  std::size_t epoch = 0;
  double phase1_loss = 0.0;  // mean over phase-1 steps
  std::optional<double> phase2_loss;  // mean over phase-2 steps; empty without an FP head
  std::size_t phase1_steps = 0;
  std::size_t phase2_steps = 0;
};

// Two-phase training. Phase 1 updates the detector (everything outside the
// FP head) on TB-positive samples. Phase 2 updates only the FP head on all
// samples, with backbone/FPN features computed without gradient, unless
// phase2_train_fpn is set.
class Trainer {
 public:
  Trainer(DetectorModel& model, TrainConfig config);

  // Mean loss of one optimizer step over `batch`.
  double phase1_step(const std::vector<const Sample*>& batch);
  double phase2_step(const std::vector<const Sample*>& batch);

  // Shuffles with a generator seeded from (seed, epoch).
  EpochSummary train_epoch(const std::vector<Sample>& samples, std::size_t epoch);

  const TrainConfig& config() const { return config_; }
  const AnchorSet& anchors() const { return anchors_; }

 private:
  DetectorModel& model_;
  TrainConfig config_;
  AnchorSet anchors_;
  Adam detector_opt_;
  Adam fp_opt_;
};

// Returns the validation AP of a model (empty when undefined).
using Evaluator = std::function<std::optional<double>(const DetectorModel&)>;

// Called after every epoch with its summary and validation AP.
using EpochCallback = std::function<void(const EpochSummary&, std::optional<double>)>;

struct TrainingResult {
  std::vector<EpochSummary> history;
  std::vector<std::optional<double>> val_ap;
  std::size_t best_epoch = 0;
  std::filesystem::path best_checkpoint;
};

// Trains for config.epochs epochs. After every epoch writes
// out_dir/epoch_NNN.json (+ .bin), evaluates the model reloaded from that
// checkpoint, and appends a row to out_dir/train_log.csv. The epoch with the
// highest AP (ties: earliest; no AP at all: last) is copied to best.json.
// Without an evaluator, AP on `val` at config.eval.iou_thresh is used.
TrainingResult run_training(const std::vector<Sample>& train, const std::vector<Sample>& val,
                            const TrainConfig& config, const std::filesystem::path& out_dir,
                            Evaluator evaluator = {}, EpochCallback on_epoch = {});

}  // namespace tbloc
