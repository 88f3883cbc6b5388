#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "json.hpp"
#include "test_util.hpp"
#include "tbloc/anchors.hpp"
#include "tbloc/box.hpp"
#include "tbloc/checkpoint.hpp"
#include "tbloc/dataio.hpp"
#include "tbloc/eval.hpp"
#include "tbloc/losses.hpp"
#include "tbloc/network.hpp"
#include "tbloc/preprocess.hpp"
#include "tbloc/rng.hpp"
#include "tbloc/tensor.hpp"
#include "tbloc/trainer.hpp"

using namespace tbloc;
namespace fs = std::filesystem;
using test::random_tensor;

namespace {

constexpr double kGradTol = 1e-5;
constexpr double kGradSeconds = 120.0;
constexpr double kOpStep = 1e-6;
constexpr double kComposedStep = 1e-4;
constexpr double kLossTol = 1e-6;
constexpr double kApHandTol = 1e-9;
constexpr double kIouTol = 1e-9;
constexpr double kCoverageIou = 0.4;
constexpr std::size_t kCoverageBoxes = 1000;
constexpr std::size_t kHalvingBoxes = 500;
constexpr double kOverfitAp = 0.9;
constexpr double kOverfitAccuracy = 1.0;
constexpr std::size_t kOverfitEpochs = 150;
constexpr std::size_t kOverfitMinSteps = 200;
constexpr double kOverfitSeconds = 600.0;
constexpr double kLossDecreaseRatio = 0.5;

int unexpected_failures = 0;

void report(const std::string& name, bool pass, const std::string& detail, bool known_fail = false) {
  const char* tag = pass ? "PASS" : known_fail ? "FAIL (known)" : "FAIL";
  std::printf("%-12s %-22s %s\n", tag, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass && !known_fail) ++unexpected_failures;
}

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor positive(Shape shape, std::mt19937_64& rng) { return random_tensor(std::move(shape), rng, 0.1, 1.0); }

Tensor signed_away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor::from_data(std::move(shape), v);
}

MatchResult random_statuses(std::size_t n, std::mt19937_64& rng) {
  MatchResult m;
  std::uniform_int_distribution<int> pick(0, 2);
  m.status.resize(n);
  m.gt_index.assign(n, -1);
  m.max_iou.assign(n, 0.0);
  for (auto& s : m.status) s = static_cast<AnchorStatus>(pick(rng));
  m.status[0] = AnchorStatus::kPositive;
  for (std::size_t a = 0; a < n; ++a) {
    if (m.status[a] == AnchorStatus::kPositive) m.gt_index[a] = 0;
  }
  return m;
}

// Worst relative error over every engine op and loss node on random inputs.
double op_gradient_suite() {
  auto rng = make_rng(11, 0);
  double worst = 0.0;
  auto check = [&](const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step = kOpStep) {
    worst = std::max(worst, grad_check(f, x, step, kGradTol).max_rel_error);
  };
  for (int trial = 0; trial < 20; ++trial) {
    for (auto [kh, kw] : {std::pair<std::size_t, std::size_t>{3, 3}, {1, 3}, {3, 1}, {1, 1}}) {
      for (std::size_t stride : {1, 2}) {
        Tensor x = positive({2, 2, 5, 4}, rng), k = positive({3, 2, kh, kw}, rng), b = random_tensor({3}, rng);
        const Conv2dOptions o{stride, Padding::kSame};
        Tensor m = positive(conv2d(x, k, b, o).shape(), rng);
        check([&](const Tensor& v) { return sum(mul(conv2d(v, k, b, o), m)); }, x);
        check([&](const Tensor& v) { return sum(mul(conv2d(x, v, b, o), m)); }, k);
        check([&](const Tensor& v) { return sum(mul(conv2d(x, k, v, o), m)); }, b);
      }
    }
    {
      Tensor x = random_tensor({1, 2, 5, 6}, rng), m = signed_away_from_zero({1, 2, 3, 3}, rng);
      check([&](const Tensor& v) { return sum(mul(max_pool2(v), m)); }, x);
    }
    {
      Tensor x = random_tensor({1, 2, 3, 2}, rng), m = signed_away_from_zero({1, 2, 6, 4}, rng);
      check([&](const Tensor& v) { return sum(mul(upsample2(v), m)); }, x);
    }
    {
      Tensor x = signed_away_from_zero({3, 4}, rng), m = signed_away_from_zero({3, 4}, rng);
      check([&](const Tensor& v) { return sum(mul(relu(v), m)); }, x);
      check([&](const Tensor& v) { return sum(mul(sigmoid(v), m)); }, random_tensor({3, 4}, rng, -4.0, 4.0));
    }
    {
      Tensor x = random_tensor({2, 3, 3, 2}, rng), m = signed_away_from_zero({2, 3}, rng);
      check([&](const Tensor& v) { return sum(mul(global_avg_pool(v), m)); }, x);
    }
    {
      Tensor x = positive({2, 3}, rng), w = positive({3, 4}, rng), b = random_tensor({4}, rng);
      Tensor m = positive({2, 4}, rng);
      check([&](const Tensor& v) { return sum(mul(linear(v, w, b), m)); }, x);
      check([&](const Tensor& v) { return sum(mul(linear(x, v, b), m)); }, w);
      check([&](const Tensor& v) { return sum(mul(linear(x, w, v), m)); }, b);
    }
    {
      Tensor a = signed_away_from_zero({2, 3}, rng), b = signed_away_from_zero({2, 3}, rng);
      Tensor m = signed_away_from_zero({2, 3}, rng);
      check([&](const Tensor& v) { return sum(mul(add(v, b), m)); }, a);
      check([&](const Tensor& v) { return sum(mul(mul(a, v), m)); }, b);
      check([&](const Tensor& v) { return sum(mul(scale(v, -1.7), m)); }, a);
    }
    {
      Tensor a = random_tensor({1, 2, 2, 3}, rng), b = random_tensor({1, 1, 2, 3}, rng);
      Tensor m = signed_away_from_zero({1, 3, 2, 3}, rng);
      check(
          [&](const Tensor& v) {
            const std::vector<Tensor> parts{v, b};
            return sum(mul(concat_channels(parts), m));
          },
          a);
    }
    {
      Tensor fine = random_tensor({1, 6, 2, 2}, rng), coarse = random_tensor({1, 6, 1, 1}, rng);
      Tensor m = signed_away_from_zero({15, 2}, rng);
      check(
          [&](const Tensor& v) {
            const std::vector<Tensor> maps{v, coarse};
            return sum(mul(flatten_anchor_maps(maps, 2), m));
          },
          fine);
    }
    {
      const MatchResult match = random_statuses(50, rng);
      for (const LossConfig& c : {LossConfig{}, baseline_focal_config()}) {
        check([&](const Tensor& v) { return classification_loss(v, match, c); },
              random_tensor({50, 1}, rng, -4.0, 4.0), kComposedStep);
      }
      std::vector<BoxDelta> targets(50);
      std::uniform_real_distribution<double> u(-1, 1);
      for (auto& t : targets) t = {u(rng), u(rng), u(rng), u(rng)};
      check([&](const Tensor& v) { return regression_loss(v, match, targets); }, random_tensor({50, 4}, rng, -3.0, 3.0));
      const Tensor z = random_tensor({1, 2}, rng, -3.0, 3.0);
      for (CaseLabel label : {CaseLabel::kHealthy, CaseLabel::kTb}) {
        check([&](const Tensor& v) { return fp_head_ce_loss(v, label); }, z);
      }
    }
  }
  return worst;
}

// Full detection loss of a small model with respect to a 1x1x32x32 input.
// Larger head init and jittered biases keep the check away from the
// near-constant outputs at init.
double composed_gradient_check() {
  ModelConfig c;
  c.image_size = 32;
  c.fp_head = false;
  c.backbone_widths = {4, 4, 4, 4, 4};
  c.fpn_channels = 4;
  c.subnet_depth = 2;
  c.anchors.strides = {2, 4, 8, 16, 32};
  c.anchors.base_sizes = {4, 8, 16, 32, 64};
  c.head_init_std = 0.3;
  DetectorModel model = build_model(c, 3);
  auto jitter = make_rng(9, 0);
  std::uniform_real_distribution<double> ub(-0.1, 0.1);
  for (auto& p : model.parameters()) {
    if (p.name.ends_with(".bias") && p.name != "cls_head.output.bias") {
      for (auto& v : p.value.mutable_data()) v += ub(jitter);
    }
  }
  const AnchorSet anchors = generate_anchors(32, c.anchors);
  const std::vector<Box> gts{{4, 4, 12, 10}, {18, 6, 28, 22}, {8, 18, 14, 30}, {20, 24, 24, 28}};
  auto rng = make_rng(5, 0);
  const Tensor image = random_tensor({1, 1, 32, 32}, rng, -1.0, 1.0);
  auto loss = [&](const Tensor& x) { return detection_loss(forward_detector(model, x), anchors, gts, LossConfig{}).total; };
  return grad_check(loss, image, kComposedStep, kGradTol).max_rel_error;
}

void gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const double ops = op_gradient_suite();
  const double composed = composed_gradient_check();
  const double secs = seconds_since(t0);
  report("gradient-suite", ops <= kGradTol && composed <= kGradTol && secs < kGradSeconds,
         format("ops max rel err %.2e, composed detection loss %.2e (tol %.0e), %.1f s (limit %.0f s)", ops, composed,
                kGradTol, secs, kGradSeconds));
}

void loss_oracle() {
  const LossConfig c;
  const double v1 = hard_example_cls_term(0.9, 1, c), v0 = hard_example_cls_term(0.9, 0, c);
  const double mid = hard_example_cls_term(0.5, 1, c), floor = hard_example_cls_term(1.0 - c.epsilon, 1, c);
  const double err = std::max({std::abs(v1 - 0.3442144), std::abs(v0 - 1.5833957), std::abs(mid - 0.6386294),
                               std::abs(floor - 0.25)});

  ModelConfig mc = tiny_model_config(64);
  mc.backbone_widths = {4, 4, 4, 4, 4};
  mc.fpn_channels = 4;
  mc.subnet_depth = 1;
  const DetectorModel m = build_model(mc, 4);
  const AnchorSet anchors = generate_anchors(64, mc.anchors);
  auto rng = make_rng(4, 0);
  bool identity = true;
  for (int t = 0; t < 20; ++t) {
    const RawPredictions p = forward_detector(m, random_tensor({1, 1, 64, 64}, rng, 0.0, 1.0));
    const std::vector<Box> gts{{4.0 + 0.5 * t, 6, 20, 30}, {30, 35.5, 50, 44}};
    const LossBreakdown b = detection_loss(p, anchors, gts, c).breakdown;
    identity = identity && b.total == b.loss_cls + c.reg_weight * b.loss_reg;
  }
  report("loss-oracle", err <= kLossTol && identity,
         format("0.9/1 %.7f, 0.9/0 %.7f, 0.5/1 %.7f, floor %.7f, max err %.1e (tol %.0e); total identity %s", v1, v0,
                mid, floor, err, kLossTol, identity ? "exact" : "BROKEN"));
}

double brute_ap(const std::vector<ScoredFlag>& flags, std::size_t total_gt) {
  std::vector<double> thresholds;
  for (const auto& f : flags) thresholds.push_back(f.score);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double ap = 0.0, prev = 0.0;
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (const auto& f : flags) {
      if (f.score >= t) (f.tp ? tp : fp) += 1;
    }
    const double r = static_cast<double>(tp) / static_cast<double>(total_gt);
    ap += static_cast<double>(tp) / static_cast<double>(tp + fp) * (r - prev);
    prev = r;
  }
  return ap;
}

void metrics_oracle() {
  auto rng = make_rng(12, 0);
  std::uniform_int_distribution<int> nd(0, 20), ng(1, 5), grid(0, 9);
  std::bernoulli_distribution coin(0.5);
  int mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    const int n = nd(rng), total_gt = ng(rng);
    std::vector<ScoredFlag> flags;
    int tps = 0;
    for (int i = 0; i < n; ++i) {
      const bool tp = coin(rng) && tps < total_gt;
      tps += tp;
      flags.push_back({grid(rng) / 10.0, tp});
    }
    if (average_precision(pr_curve(flags, std::size_t(total_gt))) != brute_ap(flags, std::size_t(total_gt))) {
      ++mismatches;
    }
  }
  const double hand = average_precision(pr_curve({{0.9, true}, {0.8, false}, {0.7, true}}, 2));
  const Box a{0, 0, 10, 10};
  const double i1 = iou(a, a), i0 = iou(a, Box{20, 20, 30, 30}), i7 = iou(a, Box{5, 5, 15, 15});
  const double iou_err = std::max({std::abs(i1 - 1.0), std::abs(i0), std::abs(i7 - 1.0 / 7.0)});
  report("metrics-oracle", mismatches == 0 && std::abs(hand - 5.0 / 6.0) <= kApHandTol && iou_err <= kIouTol,
         format("AP vs brute force: %d/200 mismatches; hand AP %.10f (5/6, tol %.0e); IoU max err %.1e (tol %.0e)", mismatches, hand,
                kApHandTol, iou_err, kIouTol));
}

Box random_gt(std::mt19937_64& rng, double lo, double hi, double image) {
  std::uniform_real_distribution<double> side(lo, hi);
  const double w = std::min(side(rng), image), h = std::min(side(rng), image);
  std::uniform_real_distribution<double> px(0.0, image - w), py(0.0, image - h);
  const double x = px(rng), y = py(rng);
  return {x, y, x + w, y + h};
}

double max_iou(const AnchorSet& set, const Box& g) {
  double best = 0.0;
  for (const auto& a : set.boxes) best = std::max(best, iou(a, g));
  return best;
}

void anchor_coverage() {
  const AnchorSet halved = generate_anchors(256), full = generate_anchors(256, unhalved(AnchorConfig{}));
  auto rng = make_rng(13, 0);
  std::size_t below = 0, no_positive = 0;
  double lowest = 1.0;
  for (std::size_t i = 0; i < kCoverageBoxes; ++i) {
    const Box g = random_gt(rng, 12, 300, 256);
    const double v = max_iou(halved, g);
    lowest = std::min(lowest, v);
    below += v < kCoverageIou;
    no_positive += match_anchors(halved, {g}).num_positive() == 0;
  }
  std::size_t worse = 0;
  for (std::size_t i = 0; i < kHalvingBoxes; ++i) {
    const Box g = random_gt(rng, 12, 40, 256);
    worse += max_iou(halved, g) < max_iou(full, g);
  }
  report("anchor-coverage", below == 0 && worse == 0,
         format("%zu/%zu boxes below max-IoU %.1f (lowest %.3f); halving lowered max-IoU for %zu/%zu small boxes",
                below, kCoverageBoxes, kCoverageIou, lowest, worse, kHalvingBoxes),
         true);
  report("anchor-force-match", no_positive == 0,
         format("%zu/%zu boxes without a positive anchor", no_positive, kCoverageBoxes));
}

void parameter_count() {
  ModelConfig c = full_model_config();
  c.fp_head = false;
  const std::size_t oriented = final_regression_weight_count(build_model(c, 0));
  c.oriented_heads = false;
  const std::size_t square = final_regression_weight_count(build_model(c, 0));
  report("parameter-count", oriented == 46080 && square == 82944 && oriented < square,
         format("oriented %zu vs all-3x3 %zu weights (C=%zu)", oriented, square, c.fpn_channels));
}

std::uint64_t digest(const Tensor& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : t.data()) {
    unsigned char b[sizeof(double)];
    std::memcpy(b, &v, sizeof(double));
    for (unsigned char c : b) h = (h ^ c) * 0x100000001b3ULL;
  }
  return h;
}

std::map<std::string, std::uint64_t> digests(const DetectorModel& m) {
  std::map<std::string, std::uint64_t> d;
  for (const auto& p : m.parameters()) d[p.name] = digest(p.value);
  return d;
}

std::vector<Sample> synth_samples(const SynthConfig& c, std::size_t size) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < c.n_tb + c.n_healthy; ++i) {
    const SynthSample s = synthesize_sample(c, i);
    PreprocessResult r = preprocess_record(s.record, s.image, size);
    out.push_back({s.record.id, s.record.label, std::move(r.image), std::move(r.boxes)});
  }
  return out;
}

void freeze_check() {
  SynthConfig sc;
  sc.n_tb = 3;
  sc.n_healthy = 3;
  sc.image_size = 64;
  sc.seed = 14;
  const std::vector<Sample> samples = synth_samples(sc, 64);
  std::vector<const Sample*> tb, all;
  for (const auto& s : samples) {
    all.push_back(&s);
    if (s.label == CaseLabel::kTb) tb.push_back(&s);
  }
  TrainConfig tc;
  tc.model = tiny_model_config(64);
  tc.adam.learning_rate = 1e-3;
  DetectorModel model = build_model(tc.model, 14);
  Trainer trainer(model, tc);
  std::size_t leaks = 0, steps = 0;
  for (int round = 0; round < 5; ++round) {
    for (int phase : {1, 2}) {
      const auto before = digests(model);
      phase == 1 ? trainer.phase1_step(tb) : trainer.phase2_step(all);
      const auto after = digests(model);
      for (const auto& [name, h] : before) {
        const bool frozen = phase == 1 ? is_fp_head_parameter(name) : !is_fp_head_parameter(name);
        leaks += frozen && after.at(name) != h;
      }
      ++steps;
    }
  }
  report("freeze-two-phase", leaks == 0,
         format("%zu steps alternating phases; %zu frozen parameter digests changed", steps, leaks));
}

double mean_phase1_loss(const DetectorModel& model, const AnchorSet& anchors, const std::vector<Sample>& samples,
                        const TrainConfig& tc) {
  NoGradGuard guard;
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    if (s.label != CaseLabel::kTb) continue;
    const RawPredictions p = forward_detector(model, image_tensor(s.image.pixels, s.image.size));
    total += detection_loss(p, anchors, s.boxes, tc.loss, tc.match).breakdown.total;
    ++n;
  }
  return total / static_cast<double>(n);
}

int run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::printf("    cli %s failed: %s\n", args.front().c_str(), err.str().c_str());
  return code;
}

std::string run_cli_stdout(std::vector<std::string> args) {
  std::ostringstream out, err;
  if (cli::run(args, out, err) != 0) std::printf("    cli %s failed: %s\n", args.front().c_str(), err.str().c_str());
  return out.str();
}

void overfit_and_gating(const fs::path& root) {
  SynthConfig sc;
  sc.image_size = 128;
  sc.seed = 7;
  const fs::path data = root / "overfit_data";
  const std::vector<Sample> samples = load_samples(generate_dataset(sc, data), 128);

  TrainConfig tc;
  tc.model = tiny_model_config(128);
  tc.adam.learning_rate = 1e-3;
  tc.fp_learning_rate = 1e-4;
  tc.seed = 1;
  DetectorModel model = build_model(tc.model, 1);
  Trainer trainer(model, tc);

  const auto t0 = std::chrono::steady_clock::now();
  const double start_loss = mean_phase1_loss(model, trainer.anchors(), samples, tc);
  std::size_t phase1_steps = 0;
  double loss_after_3 = 0.0;
  for (std::size_t epoch = 1; epoch <= kOverfitEpochs; ++epoch) {
    phase1_steps += trainer.train_epoch(samples, epoch).phase1_steps;
    if (epoch == 3) loss_after_3 = mean_phase1_loss(model, trainer.anchors(), samples, tc);
  }
  const double train_secs = seconds_since(t0);

  EvalConfig ungated;
  ungated.use_fp_gate = false;
  const EvalReport detector = evaluate_model(model, samples, ungated);
  const EvalReport gated = evaluate_model(model, samples, EvalConfig{});
  const double ap = detector.ap.value_or(0.0), accuracy = gated.study_accuracy.value_or(0.0);
  report("overfit", ap >= kOverfitAp && accuracy >= kOverfitAccuracy && phase1_steps >= kOverfitMinSteps &&
                        train_secs <= kOverfitSeconds,
         format("16 images at 128 px, %zu phase-1 steps: AP@0.3 %.4f (min %.2f), study accuracy %.4f, gated AP %.4f, "
                "%.0f s (limit %.0f s)",
                phase1_steps, ap, kOverfitAp, accuracy, gated.ap.value_or(0.0), train_secs, kOverfitSeconds));
  report("loss-decrease", loss_after_3 < kLossDecreaseRatio * start_loss,
         format("mean phase-1 loss over TB images %.3f at start, %.3f after 3 epochs (need < %.1fx)", start_loss,
                loss_after_3, kLossDecreaseRatio),
         true);

  const fs::path ckpt = root / "overfit.json";
  save_checkpoint(make_checkpoint(model, kOverfitEpochs), ckpt);
  auto boxes_per_image = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"predict", "--data", data.string(), "--checkpoint", ckpt.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    std::vector<std::size_t> counts;
    std::istringstream in(run_cli_stdout(args));
    for (std::string line; std::getline(in, line);) counts.push_back(nlohmann::json::parse(line).at("boxes").size());
    return counts;
  };
  const auto plain = boxes_per_image({});
  const auto forced = boxes_per_image({"--force-verdict", "healthy"});
  std::size_t plain_boxes = 0, forced_boxes = 0;
  for (auto n : plain) plain_boxes += n;
  for (auto n : forced) forced_boxes += n;
  report("gating-contract", forced.size() == samples.size() && forced_boxes == 0 && plain_boxes > 0,
         format("predict on %zu images: %zu boxes with the model's verdicts, %zu with a forced healthy verdict",
                forced.size(), plain_boxes, forced_boxes));
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = test::read_file(e.path());
  }
  return out;
}

void determinism(const fs::path& root) {
  auto pipeline = [&](const std::string& tag) {
    const fs::path dir = root / tag;
    bool ok = run_cli({"gen-data", "--out", (dir / "data").string(), "--seed", "21", "--image-size", "128", "--n-tb",
                       "3", "--n-healthy", "2"}) == 0;
    ok = ok && run_cli({"train", "--data", (dir / "data").string(), "--out", (dir / "ckpt").string(), "--epochs",
                        "2", "--seed", "21", "--lr", "1e-3"}) == 0;
    ok = ok && run_cli({"eval", "--data", (dir / "data").string(), "--checkpoint",
                        (dir / "ckpt" / "best.json").string(), "--out", (dir / "eval").string()}) == 0;
    return ok;
  };
  const bool ran = pipeline("run_a") && pipeline("run_b");
  std::size_t files = 0, differing = 0;
  if (ran) {
    const auto a = tree_contents(root / "run_a"), b = tree_contents(root / "run_b");
    files = a.size();
    for (const auto& [name, bytes] : a) differing += !b.contains(name) || b.at(name) != bytes;
    differing += b.size() != a.size();
  }
  report("determinism", ran && files > 0 && differing == 0,
         format("gen-data + train + eval twice: %zu files compared, %zu differ", files, differing));
}

}  // namespace

int main() {
  const fs::path root = test::temp_dir("acceptance");
  gradient_suite();
  loss_oracle();
  metrics_oracle();
  anchor_coverage();
  parameter_count();
  freeze_check();
  overfit_and_gating(root);
  determinism(root);
  std::printf("%s\n", unexpected_failures == 0 ? "acceptance: no unexpected failures"
                                               : format("acceptance: %d unexpected failures", unexpected_failures).c_str());
  return unexpected_failures == 0 ? 0 : 1;
}
