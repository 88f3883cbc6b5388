#pragma once

#include <cstddef>
#include <vector>

#include "tbloc/anchors.hpp"
#include "tbloc/dataio.hpp"
#include "tbloc/network.hpp"
#include "tbloc/tensor.hpp"

namespace tbloc {

enum class LossNormalization {
  kPositiveAnchors,    // divide by max(1, #positive anchors)
  kNonIgnoredAnchors,  // divide by max(1, #positive + #negative anchors)
};

struct LossConfig {
  double alpha = 0.40;
  double gamma = 1.0;
  double reg_weight = 0.25;
  // Adds 0.5 - (p_t - 0.5)^2 to every anchor term.
  bool use_hard_example_weight = true;
  double epsilon = 1e-7;
  LossNormalization normalization = LossNormalization::kPositiveAnchors;
};

// Plain focal loss: alpha 0.25, gamma 2, no hard-example term.
LossConfig baseline_focal_config();

void validate(const LossConfig& config);

// Probability assigned to the true class.
double p_t(double p, int label);

// 0.5 - (p_t - 0.5)^2 - alpha_t (1 - p_t)^gamma ln(p_t), with alpha_t = alpha
// for label 1 and 1 - alpha for label 0. p is clamped to [eps, 1 - eps].
double hard_example_cls_term(double p, int label, const LossConfig& config);

// Derivative of hard_example_cls_term with respect to p (zero where clamped).
double hard_example_cls_term_dp(double p, int label, const LossConfig& config);

// Sum of per-anchor terms over non-ignored anchors, normalised per config.
// `logits` is [num_anchors, K]; positives target class 0, everything else is
// background. Evaluated in logit space: identical to hard_example_cls_term
// for p in [eps, 1 - eps], and without the clamp's dead gradient outside.
Tensor classification_loss(const Tensor& logits, const MatchResult& match, const LossConfig& config);

// Encoded targets for every anchor (zeros for non-positives).
std::vector<BoxDelta> regression_targets(const AnchorSet& anchors, const std::vector<Box>& gts,
                                         const MatchResult& match);

// Mean smooth-L1 over positive anchors and their four coordinates; 0 when
// there are no positives. `deltas` is [num_anchors, 4].
Tensor regression_loss(const Tensor& deltas, const MatchResult& match,
                       const std::vector<BoxDelta>& targets);

// cls + reg_weight * reg
Tensor total_detection_loss(const Tensor& cls, const Tensor& reg, double reg_weight = 0.25);

// -ln max(softmax(logits)[label], epsilon), via log-sum-exp; logits ordered
// (healthy, tb).
Tensor fp_head_ce_loss(const Tensor& study_logits, CaseLabel label, double epsilon = 1e-7);

struct LossBreakdown {
  double loss_cls = 0.0;
  double loss_reg = 0.0;
  double total = 0.0;
  std::size_t num_positive_anchors = 0;
};

struct DetectionLoss {
  Tensor total;
  LossBreakdown breakdown;
};

DetectionLoss detection_loss(const RawPredictions& preds, const AnchorSet& anchors,
                             const std::vector<Box>& gts, const LossConfig& config,
                             const MatchOptions& match_options = {});

}  // namespace tbloc
