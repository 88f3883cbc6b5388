#include "tbloc/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "tbloc/error.hpp"

namespace tbloc {

LossConfig baseline_focal_config() {
  LossConfig c;
  c.alpha = 0.25;
  c.gamma = 2.0;
  c.use_hard_example_weight = false;
  return c;
}

void validate(const LossConfig& c) {
  if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw InvalidArgument("loss: alpha must lie in (0,1)");
  if (!(c.gamma >= 0.0)) throw InvalidArgument("loss: gamma must be >= 0");
  if (!(c.epsilon > 0.0 && c.epsilon <= 1e-3)) throw InvalidArgument("loss: epsilon must lie in (0, 1e-3]");
  if (!(c.reg_weight >= 0.0)) throw InvalidArgument("loss: reg_weight must be >= 0");
}

double p_t(double p, int label) { return label == 1 ? p : 1.0 - p; }

namespace {

double alpha_t(int label, const LossConfig& c) { return label == 1 ? c.alpha : 1.0 - c.alpha; }

double clamp_prob(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

// d(term)/d(p_t) for an unclamped p_t in (0, 1).
double term_dpt(double pt, int label, const LossConfig& c) {
  const double a = alpha_t(label, c);
  const double one_minus = 1.0 - pt;
  double d = -a * std::pow(one_minus, c.gamma) / pt;
  if (c.gamma != 0.0) d += a * c.gamma * std::pow(one_minus, c.gamma - 1.0) * std::log(pt);
  if (c.use_hard_example_weight) d += -2.0 * (pt - 0.5);
  return d;
}

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// ln(1 + e^x) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct LogitTerm {
  double value;
  double dz;
};

// The per-anchor term evaluated from the logit. ln(p_t) comes from a stable
// log-sigmoid, so saturated anchors keep a usable gradient instead of
// hitting the probability clamp.
LogitTerm logit_term(double z, int label, const LossConfig& c) {
  const double zt = label == 1 ? z : -z;  // p_t = sigmoid(zt)
  const double pt = stable_sigmoid(zt);
  const double one_minus = stable_sigmoid(-zt);
  const double log_pt = -softplus(-zt);
  const double a = alpha_t(label, c);
  const double mod = std::pow(one_minus, c.gamma);
  double value = -a * mod * log_pt;
  // d/dzt of -a (1-pt)^g ln(pt), using dpt/dzt = pt (1-pt)
  double dzt = -a * mod * one_minus;
  if (c.gamma != 0.0) dzt += a * c.gamma * mod * pt * log_pt;
  if (c.use_hard_example_weight) {
    value += 0.5 - (pt - 0.5) * (pt - 0.5);
    dzt += -2.0 * (pt - 0.5) * pt * one_minus;
  }
  return {value, label == 1 ? dzt : -dzt};
}

}  // namespace

double hard_example_cls_term(double p, int label, const LossConfig& c) {
  const double pt = p_t(clamp_prob(p, c.epsilon), label);
  const double focal = -alpha_t(label, c) * std::pow(1.0 - pt, c.gamma) * std::log(pt);
  if (!c.use_hard_example_weight) return focal;
  return 0.5 - (pt - 0.5) * (pt - 0.5) + focal;
}

double hard_example_cls_term_dp(double p, int label, const LossConfig& c) {
  if (p < c.epsilon || p > 1.0 - c.epsilon) return 0.0;
  const double sign = label == 1 ? 1.0 : -1.0;
  return sign * term_dpt(p_t(p, label), label, c);
}

Tensor classification_loss(const Tensor& logits, const MatchResult& match, const LossConfig& config) {
  validate(config);
  if (logits.rank() != 2 || logits.dim(0) != match.status.size()) {
    throw InvalidArgument("classification_loss: logits " + shape_to_string(logits.shape()) +
                          " do not align with " + std::to_string(match.status.size()) + " anchors");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::size_t positives = 0, negatives = 0;
  for (auto s : match.status) {
    positives += s == AnchorStatus::kPositive;
    negatives += s == AnchorStatus::kNegative;
  }
  const std::size_t count =
      config.normalization == LossNormalization::kPositiveAnchors ? positives : positives + negatives;
  const double norm = static_cast<double>(std::max<std::size_t>(1, count));

  const auto z = logits.data();
  double total = 0.0;
  std::vector<double> dz(n * k, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    if (match.status[a] == AnchorStatus::kIgnored) continue;
    const bool positive = match.status[a] == AnchorStatus::kPositive;
    for (std::size_t c = 0; c < k; ++c) {
      const int label = positive && c == 0 ? 1 : 0;
      const LogitTerm t = logit_term(z[a * k + c], label, config);
      total += t.value;
      dz[a * k + c] = t.dz / norm;
    }
  }
  auto backward = [dz = std::move(dz)](std::span<const double> gout, std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    for (std::size_t i = 0; i < dz.size(); ++i) grads[0][i] += gout[0] * dz[i];
  };
  return Tensor::from_op({1}, {total / norm}, {logits}, std::move(backward));
}

std::vector<BoxDelta> regression_targets(const AnchorSet& anchors, const std::vector<Box>& gts,
                                         const MatchResult& match) {
  std::vector<BoxDelta> targets(anchors.size(), BoxDelta{0, 0, 0, 0});
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (match.status[a] != AnchorStatus::kPositive) continue;
    targets[a] = encode_box(anchors.boxes[a], gts.at(static_cast<std::size_t>(match.gt_index[a])));
  }
  return targets;
}

Tensor regression_loss(const Tensor& deltas, const MatchResult& match, const std::vector<BoxDelta>& targets) {
  if (deltas.rank() != 2 || deltas.dim(1) != 4 || deltas.dim(0) != match.status.size() ||
      targets.size() != match.status.size()) {
    throw InvalidArgument("regression_loss: deltas, match and targets must align");
  }
  const std::size_t n = deltas.dim(0);
  const std::size_t positives = match.num_positive();
  const double norm = positives ? 4.0 * static_cast<double>(positives) : 1.0;
  const auto d = deltas.data();
  double total = 0.0;
  std::vector<double> grad(n * 4, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    if (match.status[a] != AnchorStatus::kPositive) continue;
    for (std::size_t j = 0; j < 4; ++j) {
      const double diff = d[a * 4 + j] - targets[a][j];
      const double ad = std::abs(diff);
      total += ad < 1.0 ? 0.5 * diff * diff : ad - 0.5;
      grad[a * 4 + j] = (ad < 1.0 ? diff : (diff > 0 ? 1.0 : -1.0)) / norm;
    }
  }
  auto backward = [grad = std::move(grad)](std::span<const double> gout, std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    for (std::size_t i = 0; i < grad.size(); ++i) grads[0][i] += gout[0] * grad[i];
  };
  return Tensor::from_op({1}, {total / norm}, {deltas}, std::move(backward));
}

Tensor total_detection_loss(const Tensor& cls, const Tensor& reg, double reg_weight) {
  return add(cls, scale(reg, reg_weight));
}

Tensor fp_head_ce_loss(const Tensor& study_logits, CaseLabel label, double epsilon) {
  if (study_logits.numel() != 2) throw InvalidArgument("fp_head_ce_loss: expected two logits");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw InvalidArgument("fp_head_ce_loss: epsilon must lie in (0, 1)");
  const auto z = study_logits.data();
  const double m = std::max(z[0], z[1]);
  const double lse = m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m));
  const std::size_t target = label == CaseLabel::kTb ? 1 : 0;
  const double ce = lse - z[target];
  const double cap = -std::log(epsilon);
  // Past the clamp the loss is constant.
  std::array<double, 2> dz{};
  if (ce < cap) {
    for (std::size_t i = 0; i < 2; ++i) dz[i] = std::exp(z[i] - lse) - (i == target ? 1.0 : 0.0);
  }
  auto backward = [dz](std::span<const double> gout, std::span<std::span<double>> grads) {
    if (grads[0].empty()) return;
    for (std::size_t i = 0; i < 2; ++i) grads[0][i] += gout[0] * dz[i];
  };
  return Tensor::from_op({1}, {std::min(ce, cap)}, {study_logits}, std::move(backward));
}

DetectionLoss detection_loss(const RawPredictions& preds, const AnchorSet& anchors,
                             const std::vector<Box>& gts, const LossConfig& config,
                             const MatchOptions& match_options) {
  const MatchResult match = match_anchors(anchors, gts, match_options);
  const std::size_t k = preds.cls_logits.front().dim(1) / anchors.config.anchors_per_cell();
  Tensor logits = flatten_anchor_maps(preds.cls_logits, k);
  Tensor deltas = flatten_anchor_maps(preds.reg_deltas, 4);
  if (logits.dim(0) != anchors.size()) {
    throw InvalidArgument("detection_loss: predictions cover " + std::to_string(logits.dim(0)) +
                          " anchors, anchor set has " + std::to_string(anchors.size()));
  }
  Tensor cls = classification_loss(logits, match, config);
  Tensor reg = regression_loss(deltas, match, regression_targets(anchors, gts, match));
  DetectionLoss out{total_detection_loss(cls, reg, config.reg_weight), {}};
  out.breakdown.loss_cls = cls.item();
  out.breakdown.loss_reg = reg.item();
  out.breakdown.total = out.total.item();
  out.breakdown.num_positive_anchors = match.num_positive();
  return out;
}

}  // namespace tbloc
