#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tbloc/anchors.hpp"
#include "tbloc/tensor.hpp"

namespace tbloc {

struct ModelConfig {
  std::size_t image_size = 256;
  // One entry per backbone stage; stage k halves the resolution (stride 2^k).
  std::vector<std::size_t> backbone_widths{16, 32, 64, 64, 64};
  std::size_t fpn_channels = 64;
  std::size_t subnet_depth = 4;
  std::size_t num_classes = 1;
  AnchorConfig anchors;
  bool oriented_heads = true;
  bool fp_head = true;
  // Initial foreground probability encoded in the classifier output bias.
  double prior = 0.01;
  // Std of the normal init for the classification/regression subnets. The
  // backbone, FPN and FP head use He-normal init instead.
  double head_init_std = 0.01;

  std::size_t anchors_per_cell() const { return anchors.anchors_per_cell(); }
  bool operator==(const ModelConfig&) const = default;
};

void validate(const ModelConfig& config);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

// Small CPU-friendly configuration used by tests and quick runs.
ModelConfig tiny_model_config(std::size_t image_size = 128);
// Full-width configuration (1024 input, 256 FPN channels).
ModelConfig full_model_config();

struct NamedParameter {
  std::string name;
  Tensor value;
};

class DetectorModel {
 public:
  DetectorModel() = default;
  explicit DetectorModel(ModelConfig config) : config_(std::move(config)) {}

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::vector<NamedParameter>& parameters() { return params_; }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  void add_parameter(std::string name, Tensor value);

  std::size_t parameter_count() const;

 private:
  ModelConfig config_;
  std::vector<NamedParameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

bool is_fp_head_parameter(const std::string& name);

// Deterministic initialisation from `seed`. Every parameter requires grad.
DetectorModel build_model(const ModelConfig& config, std::uint64_t seed);

// Number of weights (biases excluded) in the regression subnet's final layer.
std::size_t final_regression_weight_count(const DetectorModel& model);

// FPN output, finest level first.
struct Pyramid {
  std::vector<Tensor> levels;
};

struct RawPredictions {
  std::vector<Tensor> cls_logits;  // per level [1, K*A, H, W]
  std::vector<Tensor> reg_deltas;  // per level [1, 4*A, H, W]
  std::optional<Tensor> study_logits;  // [1, 2] = (healthy, tb)
};

Pyramid forward_features(const DetectorModel& model, const Tensor& image);
RawPredictions forward_heads(const DetectorModel& model, const Pyramid& pyramid);

// Backbone + FPN + both subnets. Also runs the FP head when enabled.
RawPredictions forward_detector(const DetectorModel& model, const Tensor& image);

// Study-level logits from the coarsest pyramid level. Throws StateError when
// the model was built without the FP head.
Tensor forward_fp_head(const DetectorModel& model, const Tensor& coarsest_level);

// Wraps processed pixels as a [1,1,S,S] tensor.
Tensor image_tensor(const std::vector<double>& pixels, std::size_t size);

struct Detection {
  Box box;
  double score = 0.0;
  std::string image_id;
  std::size_t anchor_index = 0;
};

struct PostprocessOptions {
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  std::size_t top_k = 100;
  // Candidates entering NMS, highest scores first.
  std::size_t pre_nms_top_n = 1000;
};

// Per-anchor sigmoid scores (max over classes), threshold, decode, greedy
// NMS, top-k. Sorted by descending score; ties go to the lower anchor index.
std::vector<Detection> postprocess(const RawPredictions& preds, const AnchorSet& anchors,
                                   const PostprocessOptions& options = {},
                                   const std::string& image_id = {});

// Greedy NMS over detections already sorted by descending score.
std::vector<Detection> nms(const std::vector<Detection>& sorted, double iou_thresh, std::size_t top_k);

enum class StudyVerdict { kHealthy, kTb };

// argmax over (healthy, tb); a tie counts as healthy.
StudyVerdict study_verdict(std::span<const double> study_logits);

std::vector<Detection> apply_fp_gate(std::vector<Detection> detections, StudyVerdict verdict);
std::vector<Detection> apply_fp_gate(std::vector<Detection> detections,
                                     std::span<const double> study_logits);

}  // namespace tbloc
