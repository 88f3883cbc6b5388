#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "tbloc/box.hpp"

namespace tbloc {

struct AnchorConfig {
  std::vector<std::size_t> strides{8, 16, 32, 64, 128};
  // Half the usual 4*stride sizes, so small lesions still match an anchor.
  std::vector<double> base_sizes{16, 32, 64, 128, 256};
  std::vector<double> ratios{0.5, 1.0, 2.0};  // width / height
  std::vector<double> scales{1.0, 1.2599210498948732, 1.5874010519681994};

  std::size_t anchors_per_cell() const { return ratios.size() * scales.size(); }
  bool operator==(const AnchorConfig&) const = default;
};

// Same strides with the base sizes doubled (no halving).
AnchorConfig unhalved(AnchorConfig config);

struct AnchorLevel {
  std::size_t stride = 0;
  double base_size = 0.0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t offset = 0;  // index of the level's first anchor in AnchorSet::boxes
  std::size_t count() const;
  std::size_t per_cell = 0;
};

struct AnchorInfo {
  std::size_t level;
  std::size_t cell;  // row-major cell index within the level grid
  std::size_t ratio;
  std::size_t scale;
};

// Ordered level-major, then row-major cell, then ratio, then scale.
struct AnchorSet {
  AnchorConfig config;
  std::vector<AnchorLevel> levels;
  std::vector<Box> boxes;
  std::vector<AnchorInfo> info;

  std::size_t size() const { return boxes.size(); }
};

// Anchors centred at ((j+0.5)*stride, (i+0.5)*stride) with
// width = base*scale*sqrt(ratio) and height = base*scale/sqrt(ratio).
// Not clipped to the image.
AnchorSet generate_anchors(std::size_t image_size, const AnchorConfig& config = {});

enum class AnchorStatus { kNegative, kIgnored, kPositive };

struct MatchResult {
  std::vector<AnchorStatus> status;
  std::vector<int> gt_index;         // -1 unless positive
  std::vector<double> max_iou;       // per anchor, over all ground truths
  std::vector<std::size_t> best_anchor;  // per ground truth

  std::size_t num_positive() const;
};

struct MatchOptions {
  double pos_thresh = 0.5;
  double neg_thresh = 0.4;
  bool force_match = true;
};

MatchResult match_anchors(const AnchorSet& anchors, const std::vector<Box>& gts,
                          const MatchOptions& options = {});

// Highest IoU between `gt` and any anchor.
double max_anchor_iou(const AnchorSet& anchors, const Box& gt);

using BoxDelta = std::array<double, 4>;  // tx, ty, tw, th

BoxDelta encode_box(const Box& anchor, const Box& gt);

// Inverse of encode_box with tw/th clamped to ln(1000), then clipped to
// [0, image_size]. The result may be degenerate after clipping.
Box decode_box(const Box& anchor, const BoxDelta& delta, double image_size);

}  // namespace tbloc
