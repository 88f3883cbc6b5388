#include "tbloc/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "tbloc/error.hpp"
#include "tbloc/rng.hpp"

namespace tbloc {

using json = nlohmann::ordered_json;

namespace {

bool is_power_of_two(std::size_t v) { return v && (v & (v - 1)) == 0; }

std::size_t log2_exact(std::size_t v) {
  std::size_t k = 0;
  while ((std::size_t{1} << k) < v) ++k;
  return k;
}

std::string stage_name(std::size_t k) { return "backbone.stage" + std::to_string(k + 1); }

// Kernel extents for the final regression conv serving anchors of `ratio`.
std::pair<std::size_t, std::size_t> oriented_kernel(double ratio) {
  if (ratio < 1.0) return {3, 1};  // tall anchors: 3 rows x 1 column
  if (ratio > 1.0) return {1, 3};  // wide anchors
  return {3, 3};
}

// Backbone stages actually consumed by the pyramid.
std::size_t stages_used(const ModelConfig& c) {
  const std::size_t backbone_top = std::size_t{1} << c.backbone_widths.size();
  // Levels coarser than the backbone are built from its last stage.
  if (c.anchors.strides.back() > backbone_top) return c.backbone_widths.size();
  return log2_exact(c.anchors.strides.back());
}

}  // namespace

void validate(const ModelConfig& c) {
  if (c.backbone_widths.empty()) throw InvalidArgument("model: backbone needs at least one stage");
  for (auto w : c.backbone_widths) {
    if (w == 0) throw InvalidArgument("model: backbone widths must be positive");
  }
  if (c.fpn_channels == 0) throw InvalidArgument("model: fpn_channels must be positive");
  if (c.num_classes < 1) throw InvalidArgument("model: need K >= 1 classes");
  if (!(c.prior > 0.0 && c.prior < 1.0)) throw InvalidArgument("model: prior must lie in (0,1)");
  if (!(c.head_init_std > 0.0)) throw InvalidArgument("model: head_init_std must be positive");
  const auto& s = c.anchors.strides;
  if (s.empty() || s.size() != c.anchors.base_sizes.size()) {
    throw InvalidArgument("model: anchor strides and base sizes must match");
  }
  for (std::size_t l = 0; l < s.size(); ++l) {
    if (!is_power_of_two(s[l]) || s[l] < 2) throw InvalidArgument("model: strides must be powers of two >= 2");
    if (l > 0 && s[l] != 2 * s[l - 1]) throw InvalidArgument("model: strides must double level to level");
  }
  if (s.front() > (std::size_t{1} << c.backbone_widths.size())) {
    throw InvalidArgument("model: finest pyramid stride is coarser than the backbone");
  }
  if (c.image_size == 0 || c.image_size % s.back() != 0) {
    throw InvalidArgument("model: image size " + std::to_string(c.image_size) +
                          " not divisible by the largest stride " + std::to_string(s.back()));
  }
}

std::string model_config_to_json(const ModelConfig& c) {
  json j;
  j["image_size"] = c.image_size;
  j["backbone_widths"] = c.backbone_widths;
  j["fpn_channels"] = c.fpn_channels;
  j["subnet_depth"] = c.subnet_depth;
  j["num_classes"] = c.num_classes;
  j["anchor_strides"] = c.anchors.strides;
  j["anchor_base_sizes"] = c.anchors.base_sizes;
  j["anchor_ratios"] = c.anchors.ratios;
  j["anchor_scales"] = c.anchors.scales;
  j["oriented_heads"] = c.oriented_heads;
  j["fp_head"] = c.fp_head;
  j["prior"] = c.prior;
  j["head_init_std"] = c.head_init_std;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  ModelConfig c;
  try {
    c.image_size = j.at("image_size").get<std::size_t>();
    c.backbone_widths = j.at("backbone_widths").get<std::vector<std::size_t>>();
    c.fpn_channels = j.at("fpn_channels").get<std::size_t>();
    c.subnet_depth = j.at("subnet_depth").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.anchors.strides = j.at("anchor_strides").get<std::vector<std::size_t>>();
    c.anchors.base_sizes = j.at("anchor_base_sizes").get<std::vector<double>>();
    c.anchors.ratios = j.at("anchor_ratios").get<std::vector<double>>();
    c.anchors.scales = j.at("anchor_scales").get<std::vector<double>>();
    c.oriented_heads = j.at("oriented_heads").get<bool>();
    c.fp_head = j.at("fp_head").get<bool>();
    c.prior = j.at("prior").get<double>();
    c.head_init_std = j.at("head_init_std").get<double>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  validate(c);
  return c;
}

ModelConfig tiny_model_config(std::size_t image_size) {
  ModelConfig c;
  c.image_size = image_size;
  c.backbone_widths = {8, 16, 24, 32, 32};
  c.fpn_channels = 32;
  c.subnet_depth = 2;
  // Half the default strides and base sizes, so a 128 input keeps the same
  // 2x2 coarsest level that the defaults give at 256.
  c.anchors.strides = {4, 8, 16, 32, 64};
  c.anchors.base_sizes = {8, 16, 32, 64, 128};
  return c;
}

ModelConfig full_model_config() {
  ModelConfig c;
  c.image_size = 1024;
  c.backbone_widths = {64, 128, 256, 512, 512};
  c.fpn_channels = 256;
  c.subnet_depth = 4;
  return c;
}

// ---------------------------------------------------------------------------

const Tensor& DetectorModel::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("model has no parameter '" + name + "'");
  return params_[it->second].value;
}

Tensor& DetectorModel::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("model has no parameter '" + name + "'");
  return params_[it->second].value;
}

void DetectorModel::add_parameter(std::string name, Tensor value) {
  if (index_.count(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::move(value)});
}

std::size_t DetectorModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

bool is_fp_head_parameter(const std::string& name) { return name.rfind("fp_head.", 0) == 0; }

namespace {

class Initializer {
 public:
  Initializer(DetectorModel& model, std::uint64_t seed) : model_(model), rng_(make_rng(seed, 0x5eed)) {}

  void conv(const std::string& prefix, std::size_t cout, std::size_t cin, std::size_t kh,
            std::size_t kw, double std_dev, double bias = 0.0) {
    std::normal_distribution<double> normal(0.0, std_dev);
    std::vector<double> w(cout * cin * kh * kw);
    for (auto& v : w) v = normal(rng_);
    model_.add_parameter(prefix + ".weight", Tensor::from_data({cout, cin, kh, kw}, std::move(w), true));
    model_.add_parameter(prefix + ".bias", Tensor::full({cout}, bias, true));
  }

  void he_conv(const std::string& prefix, std::size_t cout, std::size_t cin, std::size_t kh,
               std::size_t kw) {
    conv(prefix, cout, cin, kh, kw, std::sqrt(2.0 / static_cast<double>(cin * kh * kw)));
  }

  void linear(const std::string& prefix, std::size_t in, std::size_t out) {
    std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / static_cast<double>(in)));
    std::vector<double> w(in * out);
    for (auto& v : w) v = normal(rng_);
    model_.add_parameter(prefix + ".weight", Tensor::from_data({in, out}, std::move(w), true));
    model_.add_parameter(prefix + ".bias", Tensor::zeros({out}, true));
  }

 private:
  DetectorModel& model_;
  std::mt19937_64 rng_;
};

}  // namespace

DetectorModel build_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  DetectorModel model(config);
  Initializer init(model, seed);
  const std::size_t c = config.fpn_channels;
  const std::size_t a = config.anchors_per_cell();

  const std::size_t stages = stages_used(config);
  std::size_t in_ch = 1;
  for (std::size_t k = 0; k < stages; ++k) {
    const std::size_t w = config.backbone_widths[k];
    init.he_conv(stage_name(k) + ".conv1", w, in_ch, 3, 3);
    init.he_conv(stage_name(k) + ".conv2", w, w, 3, 3);
    in_ch = w;
  }

  const std::size_t backbone_top = std::size_t{1} << config.backbone_widths.size();
  bool first_extra = true;
  for (std::size_t l = 0; l < config.anchors.strides.size(); ++l) {
    const std::size_t stride = config.anchors.strides[l];
    const std::string level = std::to_string(l + 1);
    if (stride <= backbone_top) {
      const std::size_t k = log2_exact(stride) - 1;
      init.he_conv("fpn.lateral" + level, c, config.backbone_widths[k], 1, 1);
      init.he_conv("fpn.output" + level, c, c, 3, 3);
    } else {
      init.he_conv("fpn.extra" + level, c, first_extra ? config.backbone_widths.back() : c, 3, 3);
      first_extra = false;
    }
  }

  const double prior_bias = -std::log((1.0 - config.prior) / config.prior);
  for (std::size_t d = 0; d < config.subnet_depth; ++d) {
    init.conv("cls_head.conv" + std::to_string(d + 1), c, c, 3, 3, config.head_init_std);
  }
  init.conv("cls_head.output", config.num_classes * a, c, 3, 3, config.head_init_std, prior_bias);

  for (std::size_t d = 0; d < config.subnet_depth; ++d) {
    init.conv("reg_head.conv" + std::to_string(d + 1), c, c, 3, 3, config.head_init_std);
  }
  if (config.oriented_heads) {
    const std::size_t per_ratio = 4 * config.anchors.scales.size();
    for (std::size_t r = 0; r < config.anchors.ratios.size(); ++r) {
      const auto [kh, kw] = oriented_kernel(config.anchors.ratios[r]);
      init.conv("reg_head.output_r" + std::to_string(r + 1), per_ratio, c, kh, kw, config.head_init_std);
    }
  } else {
    init.conv("reg_head.output", 4 * a, c, 3, 3, config.head_init_std);
  }

  if (config.fp_head) {
    for (int b = 1; b <= 2; ++b) {
      init.he_conv("fp_head.block" + std::to_string(b) + ".conv1", c, c, 3, 3);
      init.he_conv("fp_head.block" + std::to_string(b) + ".conv2", c, c, 3, 3);
    }
    init.he_conv("fp_head.conv1", c, c, 3, 3);
    init.he_conv("fp_head.conv2", c, c, 3, 3);
    init.linear("fp_head.fc", c, 2);
  }
  return model;
}

std::size_t final_regression_weight_count(const DetectorModel& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) {
    if (p.name.rfind("reg_head.output", 0) == 0 && p.name.ends_with(".weight")) n += p.value.numel();
  }
  return n;
}

// ---------------------------------------------------------------------------

namespace {

Tensor conv(const DetectorModel& m, const std::string& prefix, const Tensor& x, std::size_t stride = 1) {
  return conv2d(x, m.param(prefix + ".weight"), m.param(prefix + ".bias"), {stride, Padding::kSame});
}

}  // namespace

Tensor image_tensor(const std::vector<double>& pixels, std::size_t size) {
  return Tensor::from_data({1, 1, size, size}, pixels);
}

Pyramid forward_features(const DetectorModel& model, const Tensor& image) {
  const ModelConfig& cfg = model.config();
  if (image.rank() != 4 || image.dim(1) != 1 || image.dim(2) != cfg.image_size ||
      image.dim(3) != cfg.image_size) {
    throw InvalidArgument("forward: expected image [N,1," + std::to_string(cfg.image_size) + "," +
                          std::to_string(cfg.image_size) + "], got " + shape_to_string(image.shape()));
  }
  std::vector<Tensor> stage_out;
  Tensor x = image;
  const std::size_t stages = stages_used(cfg);
  for (std::size_t k = 0; k < stages; ++k) {
    x = relu(conv(model, stage_name(k) + ".conv1", x, 2));
    x = relu(conv(model, stage_name(k) + ".conv2", x));
    stage_out.push_back(x);
  }

  const auto& strides = cfg.anchors.strides;
  const std::size_t backbone_top = std::size_t{1} << cfg.backbone_widths.size();
  const std::size_t n_levels = strides.size();
  std::vector<Tensor> merged(n_levels);
  Pyramid pyramid;
  pyramid.levels.resize(n_levels);

  // Top-down pass over the levels fed by backbone stages.
  long top = -1;
  for (std::size_t l = 0; l < n_levels; ++l) {
    if (strides[l] <= backbone_top) top = static_cast<long>(l);
  }
  for (long l = top; l >= 0; --l) {
    const std::string level = std::to_string(l + 1);
    const Tensor& feat = stage_out[log2_exact(strides[l]) - 1];
    Tensor lateral = conv(model, "fpn.lateral" + level, feat);
    merged[l] = l == top ? lateral : add(lateral, upsample2(merged[l + 1]));
    pyramid.levels[l] = conv(model, "fpn.output" + level, merged[l]);
  }
  // Coarser levels by strided convs on the last stage.
  for (std::size_t l = static_cast<std::size_t>(top + 1); l < n_levels; ++l) {
    const std::string name = "fpn.extra" + std::to_string(l + 1);
    Tensor src = l == static_cast<std::size_t>(top + 1) ? stage_out.back() : relu(pyramid.levels[l - 1]);
    pyramid.levels[l] = conv(model, name, src, 2);
  }
  return pyramid;
}

RawPredictions forward_heads(const DetectorModel& model, const Pyramid& pyramid) {
  const ModelConfig& cfg = model.config();
  RawPredictions out;
  const std::size_t n_ratios = cfg.anchors.ratios.size();
  for (const Tensor& level : pyramid.levels) {
    Tensor c = level;
    for (std::size_t d = 0; d < cfg.subnet_depth; ++d) {
      c = relu(conv(model, "cls_head.conv" + std::to_string(d + 1), c));
    }
    out.cls_logits.push_back(conv(model, "cls_head.output", c));

    Tensor r = level;
    for (std::size_t d = 0; d < cfg.subnet_depth; ++d) {
      r = relu(conv(model, "reg_head.conv" + std::to_string(d + 1), r));
    }
    if (cfg.oriented_heads) {
      std::vector<Tensor> parts;
      parts.reserve(n_ratios);
      for (std::size_t k = 0; k < n_ratios; ++k) {
        parts.push_back(conv(model, "reg_head.output_r" + std::to_string(k + 1), r));
      }
      out.reg_deltas.push_back(concat_channels(parts));
    } else {
      out.reg_deltas.push_back(conv(model, "reg_head.output", r));
    }
  }
  return out;
}

Tensor forward_fp_head(const DetectorModel& model, const Tensor& coarsest_level) {
  if (!model.config().fp_head) throw StateError("forward_fp_head: model has no FP head");
  Tensor x = coarsest_level;
  for (int b = 1; b <= 2; ++b) {
    const std::string block = "fp_head.block" + std::to_string(b);
    x = relu(conv(model, block + ".conv1", x));
    x = relu(conv(model, block + ".conv2", x));
    x = max_pool2(x);
  }
  x = relu(conv(model, "fp_head.conv1", x));
  x = relu(conv(model, "fp_head.conv2", x));
  return linear(global_avg_pool(x), model.param("fp_head.fc.weight"), model.param("fp_head.fc.bias"));
}

RawPredictions forward_detector(const DetectorModel& model, const Tensor& image) {
  Pyramid pyramid = forward_features(model, image);
  RawPredictions preds = forward_heads(model, pyramid);
  if (model.config().fp_head) preds.study_logits = forward_fp_head(model, pyramid.levels.back());
  return preds;
}

// ---------------------------------------------------------------------------

std::vector<Detection> nms(const std::vector<Detection>& sorted, double iou_thresh, std::size_t top_k) {
  std::vector<Detection> kept;
  for (const auto& d : sorted) {
    if (kept.size() >= top_k) break;
    bool suppressed = false;
    for (const auto& k : kept) {
      if (iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> postprocess(const RawPredictions& preds, const AnchorSet& anchors,
                                   const PostprocessOptions& options, const std::string& image_id) {
  if (preds.cls_logits.size() != anchors.levels.size() || preds.reg_deltas.size() != anchors.levels.size()) {
    throw InvalidArgument("postprocess: prediction levels do not match the anchor set");
  }
  const std::size_t a_per_cell = anchors.config.anchors_per_cell();
  struct Candidate {
    double score;
    std::size_t anchor;
    std::size_t level;
    std::size_t cell;
    std::size_t slot;
  };
  std::vector<Candidate> cands;
  for (std::size_t l = 0; l < anchors.levels.size(); ++l) {
    const auto& lvl = anchors.levels[l];
    const Tensor& cls = preds.cls_logits[l];
    const std::size_t hw = lvl.grid_h * lvl.grid_w;
    if (cls.dim(1) % a_per_cell != 0 || cls.dim(2) * cls.dim(3) != hw) {
      throw InvalidArgument("postprocess: classifier map shape does not match anchors");
    }
    const std::size_t k = cls.dim(1) / a_per_cell;
    const auto data = cls.data();
    for (std::size_t cell = 0; cell < hw; ++cell) {
      for (std::size_t slot = 0; slot < a_per_cell; ++slot) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) best = std::max(best, data[(slot * k + c) * hw + cell]);
        const double score = 1.0 / (1.0 + std::exp(-best));
        if (score > options.score_thresh) {
          cands.push_back({score, lvl.offset + cell * a_per_cell + slot, l, cell, slot});
        }
      }
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
    return x.score != y.score ? x.score > y.score : x.anchor < y.anchor;
  });
  if (cands.size() > options.pre_nms_top_n) cands.resize(options.pre_nms_top_n);

  const double image_size = static_cast<double>(anchors.levels.front().grid_w * anchors.levels.front().stride);
  std::vector<Detection> decoded;
  for (const auto& c : cands) {
    const Tensor& reg = preds.reg_deltas[c.level];
    const std::size_t hw = reg.dim(2) * reg.dim(3);
    const auto data = reg.data();
    BoxDelta delta;
    for (std::size_t j = 0; j < 4; ++j) delta[j] = data[(c.slot * 4 + j) * hw + c.cell];
    const Box box = decode_box(anchors.boxes[c.anchor], delta, image_size);
    if (!box.valid()) continue;
    decoded.push_back({box, c.score, image_id, c.anchor});
  }
  return nms(decoded, options.nms_iou, options.top_k);
}

StudyVerdict study_verdict(std::span<const double> study_logits) {
  if (study_logits.size() != 2) throw InvalidArgument("study logits must have two entries");
  return study_logits[1] > study_logits[0] ? StudyVerdict::kTb : StudyVerdict::kHealthy;
}

std::vector<Detection> apply_fp_gate(std::vector<Detection> detections, StudyVerdict verdict) {
  if (verdict == StudyVerdict::kHealthy) detections.clear();
  return detections;
}

std::vector<Detection> apply_fp_gate(std::vector<Detection> detections,
                                     std::span<const double> study_logits) {
  return apply_fp_gate(std::move(detections), study_verdict(study_logits));
}

}  // namespace tbloc
