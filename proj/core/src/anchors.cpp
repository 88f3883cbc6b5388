#include "tbloc/anchors.hpp"

#include <cmath>
#include <string>

#include "tbloc/error.hpp"

namespace tbloc {

AnchorConfig unhalved(AnchorConfig config) {
  for (auto& b : config.base_sizes) b *= 2.0;
  return config;
}

std::size_t AnchorLevel::count() const { return grid_h * grid_w * per_cell; }

std::size_t MatchResult::num_positive() const {
  std::size_t n = 0;
  for (auto s : status) n += s == AnchorStatus::kPositive;
  return n;
}

AnchorSet generate_anchors(std::size_t image_size, const AnchorConfig& config) {
  if (config.strides.empty() || config.strides.size() != config.base_sizes.size()) {
    throw InvalidArgument("anchors: strides and base sizes must be non-empty and equal in length");
  }
  if (config.ratios.empty() || config.scales.empty()) {
    throw InvalidArgument("anchors: ratios and scales must be non-empty");
  }
  std::size_t largest = 0;
  for (auto s : config.strides) {
    if (s == 0) throw InvalidArgument("anchors: stride must be positive");
    largest = std::max(largest, s);
  }
  if (image_size == 0 || image_size % largest != 0) {
    throw InvalidArgument("anchors: image size " + std::to_string(image_size) +
                          " is not divisible by the largest stride " + std::to_string(largest));
  }

  AnchorSet set;
  set.config = config;
  for (std::size_t l = 0; l < config.strides.size(); ++l) {
    AnchorLevel level;
    level.stride = config.strides[l];
    level.base_size = config.base_sizes[l];
    level.grid_h = level.grid_w = image_size / level.stride;
    level.per_cell = config.anchors_per_cell();
    level.offset = set.boxes.size();
    const double stride = static_cast<double>(level.stride);
    for (std::size_t i = 0; i < level.grid_h; ++i) {
      for (std::size_t j = 0; j < level.grid_w; ++j) {
        const double cx = (static_cast<double>(j) + 0.5) * stride;
        const double cy = (static_cast<double>(i) + 0.5) * stride;
        for (std::size_t r = 0; r < config.ratios.size(); ++r) {
          const double root = std::sqrt(config.ratios[r]);
          for (std::size_t s = 0; s < config.scales.size(); ++s) {
            const double side = level.base_size * config.scales[s];
            set.boxes.push_back(box_from_center(cx, cy, side * root, side / root));
            set.info.push_back({l, i * level.grid_w + j, r, s});
          }
        }
      }
    }
    set.levels.push_back(level);
  }
  return set;
}

MatchResult match_anchors(const AnchorSet& anchors, const std::vector<Box>& gts,
                          const MatchOptions& options) {
  if (!(0.0 <= options.neg_thresh && options.neg_thresh <= options.pos_thresh &&
        options.pos_thresh <= 1.0)) {
    throw InvalidArgument("match_anchors: need 0 <= neg_thresh <= pos_thresh <= 1");
  }
  const std::size_t n = anchors.size();
  MatchResult m;
  m.status.assign(n, AnchorStatus::kNegative);
  m.gt_index.assign(n, -1);
  m.max_iou.assign(n, 0.0);
  m.best_anchor.assign(gts.size(), 0);
  if (gts.empty()) return m;

  std::vector<double> best_gt_iou(gts.size(), -1.0);
  std::vector<int> argmax_gt(n, -1);
  for (std::size_t a = 0; a < n; ++a) {
    double best = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors.boxes[a], gts[g]);
      if (v > best) {
        best = v;
        argmax_gt[a] = static_cast<int>(g);
      }
      // Strict comparison keeps the lowest anchor index on ties.
      if (v > best_gt_iou[g]) {
        best_gt_iou[g] = v;
        m.best_anchor[g] = a;
      }
    }
    m.max_iou[a] = best;
    if (best >= options.pos_thresh) {
      m.status[a] = AnchorStatus::kPositive;
      m.gt_index[a] = argmax_gt[a];
    } else if (best >= options.neg_thresh) {
      m.status[a] = AnchorStatus::kIgnored;
    }
  }
  if (options.force_match) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const std::size_t a = m.best_anchor[g];
      if (m.status[a] == AnchorStatus::kPositive) continue;
      m.status[a] = AnchorStatus::kPositive;
      m.gt_index[a] = static_cast<int>(g);
    }
  }
  return m;
}

double max_anchor_iou(const AnchorSet& anchors, const Box& gt) {
  double best = 0.0;
  for (const auto& a : anchors.boxes) best = std::max(best, iou(a, gt));
  return best;
}

BoxDelta encode_box(const Box& anchor, const Box& gt) {
  const double aw = anchor.width(), ah = anchor.height();
  return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah, std::log(gt.width() / aw),
          std::log(gt.height() / ah)};
}

Box decode_box(const Box& anchor, const BoxDelta& delta, double image_size) {
  static const double kMaxLogScale = std::log(1000.0);
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = anchor.cx() + delta[0] * aw;
  const double cy = anchor.cy() + delta[1] * ah;
  const double w = aw * std::exp(std::min(delta[2], kMaxLogScale));
  const double h = ah * std::exp(std::min(delta[3], kMaxLogScale));
  Box b = box_from_center(cx, cy, w, h);
  b.x1 = std::clamp(b.x1, 0.0, image_size);
  b.y1 = std::clamp(b.y1, 0.0, image_size);
  b.x2 = std::clamp(b.x2, 0.0, image_size);
  b.y2 = std::clamp(b.y2, 0.0, image_size);
  return b;
}

}  // namespace tbloc
