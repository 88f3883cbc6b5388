#include "tbloc/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tbloc/box.hpp"
#include "tbloc/error.hpp"
#include "tbloc/rng.hpp"

namespace tbloc {

using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// PGM

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in, const std::string& where) {
  std::string token;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!token.empty()) return token;
      continue;
    }
    token.push_back(static_cast<char>(c));
  }
  if (token.empty()) throw ParseError(where + ": truncated PGM header");
  return token;
}

std::size_t parse_header_number(const std::string& token, const std::string& where) {
  std::size_t pos = 0;
  unsigned long value = 0;
  try {
    value = std::stoul(token, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != token.size()) throw ParseError(where + ": bad PGM header field '" + token + "'");
  return value;
}

}  // namespace

GrayImage16 read_pgm16(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string where = path.string();
  if (next_token(in, where) != "P5") throw ParseError(where + ": not a binary PGM (P5)");
  GrayImage16 image;
  image.width = parse_header_number(next_token(in, where), where);
  image.height = parse_header_number(next_token(in, where), where);
  const std::size_t maxval = parse_header_number(next_token(in, where), where);
  if (image.width == 0 || image.height == 0 || maxval == 0 || maxval > 65535) {
    throw ParseError(where + ": invalid PGM dimensions or maxval");
  }
  // next_token consumed exactly one whitespace byte after maxval.
  const std::size_t count = image.width * image.height;
  const std::size_t bytes_per_sample = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(count * bytes_per_sample);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw IntegrityError(where + ": expected " + std::to_string(raw.size()) + " pixel bytes, got " +
                         std::to_string(in.gcount()));
  }
  image.pixels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    image.pixels[i] = bytes_per_sample == 1
                          ? raw[i]
                          : static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  }
  return image;
}

void write_pgm16(const GrayImage16& image, const std::filesystem::path& path) {
  if (image.pixels.size() != image.width * image.height) {
    throw InvalidArgument("write_pgm16: pixel count does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n65535\n";
  std::vector<unsigned char> raw(image.pixels.size() * 2);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    raw[2 * i] = static_cast<unsigned char>(image.pixels[i] >> 8);
    raw[2 * i + 1] = static_cast<unsigned char>(image.pixels[i] & 0xff);
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_pgm8(const GrayImage8& image, const std::filesystem::path& path) {
  if (image.pixels.size() != image.width * image.height) {
    throw InvalidArgument("write_pgm8: pixel count does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Labels and splits

const char* to_string(CaseLabel label) { return label == CaseLabel::kTb ? "tb" : "healthy"; }

CaseLabel parse_case_label(const std::string& text) {
  if (text == "tb") return CaseLabel::kTb;
  if (text == "healthy") return CaseLabel::kHealthy;
  throw ParseError("unknown label '" + text + "'");
}

const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  throw InvalidArgument("unknown split '" + text + "'");
}

const char* to_string(LesionKind kind) {
  switch (kind) {
    case LesionKind::kDot: return "dot";
    case LesionKind::kBlob: return "blob";
    case LesionKind::kDiffuse: return "diffuse";
  }
  return "dot";
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

const std::set<std::string> kKnownKeys{"id", "image", "ww", "wl", "label", "boxes"};

ojson number_json(double v) {
  if (std::nearbyint(v) == v && std::abs(v) < 9.0e15) return static_cast<std::int64_t>(v);
  return v;
}

ImageRecord parse_record(const std::string& line, std::size_t line_no, bool strict,
                         const std::string& where) {
  const std::string at = where + ":" + std::to_string(line_no);
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const ojson::parse_error& e) {
    throw ParseError(at + ": malformed JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw ParseError(at + ": record is not a JSON object");

  ImageRecord rec;
  try {
    rec.id = j.at("id").get<std::string>();
  } catch (const ojson::exception&) {
    throw ParseError(at + ": missing or non-string 'id'");
  }
  const std::string named = at + " (record " + rec.id + ")";
  try {
    rec.image = j.at("image").get<std::string>();
    rec.ww = j.at("ww").get<double>();
    rec.wl = j.at("wl").get<double>();
    rec.label = parse_case_label(j.at("label").get<std::string>());
    for (const auto& b : j.at("boxes")) {
      if (!b.is_array() || b.size() != 4) throw ParseError("box must be [x1,y1,x2,y2]");
      PixelBox box{};
      for (std::size_t k = 0; k < 4; ++k) {
        if (!b[k].is_number_integer()) throw ParseError("box coordinates must be integers");
        box[k] = b[k].get<int>();
      }
      rec.boxes.push_back(box);
    }
  } catch (const ParseError& e) {
    throw ParseError(named + ": " + e.what());
  } catch (const ojson::exception& e) {
    throw ParseError(named + ": " + e.what());
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (kKnownKeys.count(it.key())) continue;
    if (strict) throw ParseError(named + ": unknown field '" + it.key() + "'");
    rec.extra.emplace_back(it.key(), it.value().dump());
  }
  if (rec.ww <= 0.0) throw ParseError(named + ": ww must be positive");
  if (rec.label == CaseLabel::kHealthy && !rec.boxes.empty()) {
    throw ParseError(named + ": healthy record carries boxes");
  }
  for (const auto& b : rec.boxes) {
    if (b[0] >= b[2] || b[1] >= b[3]) throw ParseError(named + ": box with x2 <= x1 or y2 <= y1");
    if (b[0] < 0 || b[1] < 0) throw ParseError(named + ": box with negative coordinates");
  }
  return rec;
}

}  // namespace

void validate_record(const ImageRecord& record, std::size_t width, std::size_t height) {
  const std::string named = "record " + record.id;
  if (record.ww <= 0.0) throw ParseError(named + ": ww must be positive");
  if (record.label == CaseLabel::kHealthy && !record.boxes.empty()) {
    throw ParseError(named + ": healthy record carries boxes");
  }
  for (const auto& b : record.boxes) {
    if (b[0] >= b[2] || b[1] >= b[3]) throw ParseError(named + ": box with x2 <= x1 or y2 <= y1");
    if (b[0] < 0 || b[1] < 0 || b[2] > static_cast<int>(width) || b[3] > static_cast<int>(height)) {
      throw ParseError(named + ": box outside the image");
    }
  }
}

DatasetManifest read_manifest(const std::filesystem::path& path, const ManifestReadOptions& options) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  DatasetManifest manifest;
  manifest.split = options.split;
  manifest.base_dir = path.parent_path();
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> missing;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ImageRecord rec = parse_record(line, line_no, options.strict, path.string());
    if (!ids.insert(rec.id).second) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": duplicate id " + rec.id);
    }
    if (options.check_images && !std::filesystem::exists(manifest.base_dir / rec.image)) {
      missing.push_back((manifest.base_dir / rec.image).string());
    }
    manifest.records.push_back(std::move(rec));
  }
  if (!missing.empty()) {
    std::string msg = "manifest " + path.string() + " references missing images:";
    for (const auto& m : missing) msg += " " + m;
    throw IntegrityError(msg);
  }
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& rec : manifest.records) {
    ojson j;
    j["id"] = rec.id;
    j["image"] = rec.image;
    j["ww"] = number_json(rec.ww);
    j["wl"] = number_json(rec.wl);
    j["label"] = to_string(rec.label);
    j["boxes"] = ojson::array();
    for (const auto& b : rec.boxes) j["boxes"].push_back({b[0], b[1], b[2], b[3]});
    for (const auto& [key, value] : rec.extra) j[key] = ojson::parse(value);
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

GrayImage16 load_image(const DatasetManifest& manifest, const ImageRecord& record) {
  const auto path = manifest.image_path(record);
  if (!std::filesystem::exists(path)) {
    throw IntegrityError("record " + record.id + ": image file missing: " + path.string());
  }
  GrayImage16 image = read_pgm16(path);
  validate_record(record, image.width, image.height);
  return image;
}

// ---------------------------------------------------------------------------
// Synthetic generator

void validate(const SynthConfig& config) {
  if (config.n_tb + config.n_healthy < 1) throw InvalidArgument("synth: need at least one image");
  if (config.image_size < 64) throw InvalidArgument("synth: image_size must be >= 64");
  double total = 0.0;
  for (double w : config.mix) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("synth: mix weights must be >= 0");
    total += w;
  }
  if (total <= 0.0) throw InvalidArgument("synth: mix weights must not all be zero");
}

namespace {

struct Ellipse {
  double cx, cy, rx, ry;
  bool contains(double x, double y) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
  }
};

struct Anatomy {
  Ellipse body;
  std::array<Ellipse, 2> lungs;
};

Anatomy make_anatomy(double s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(-0.02 * s, 0.02 * s);
  Anatomy a;
  a.body = {0.5 * s + jitter(rng), 0.54 * s, 0.46 * s, 0.52 * s};
  const double ry = 0.29 * s + jitter(rng);
  const double rx = 0.15 * s + 0.5 * jitter(rng);
  a.lungs[0] = {0.31 * s + jitter(rng), 0.47 * s + jitter(rng), rx, ry};
  a.lungs[1] = {0.69 * s + jitter(rng), 0.47 * s + jitter(rng), rx, ry};
  return a;
}

// Pixel centers inside the ellipse.
bool inside(const Ellipse& e, std::size_t x, std::size_t y) {
  return e.contains(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
}

PixelBox support_box(const std::vector<bool>& support, std::size_t size) {
  int x1 = static_cast<int>(size), y1 = static_cast<int>(size), x2 = -1, y2 = -1;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      if (!support[y * size + x]) continue;
      x1 = std::min(x1, static_cast<int>(x));
      y1 = std::min(y1, static_cast<int>(y));
      x2 = std::max(x2, static_cast<int>(x) + 1);
      y2 = std::max(y2, static_cast<int>(y) + 1);
    }
  }
  return {x1, y1, x2, y2};
}

// Uniform pixel inside `lung`, at least `margin` pixels from its rim.
std::pair<double, double> sample_in_lung(const Ellipse& lung, double margin, std::mt19937_64& rng) {
  const Ellipse shrunk{lung.cx, lung.cy, std::max(1.0, lung.rx - margin),
                       std::max(1.0, lung.ry - margin)};
  std::uniform_real_distribution<double> ux(shrunk.cx - shrunk.rx, shrunk.cx + shrunk.rx);
  std::uniform_real_distribution<double> uy(shrunk.cy - shrunk.ry, shrunk.cy + shrunk.ry);
  for (;;) {
    const double x = ux(rng), y = uy(rng);
    if (shrunk.contains(x, y)) return {x, y};
  }
}

Box as_box(const PixelBox& b) { return {double(b[0]), double(b[1]), double(b[2]), double(b[3])}; }

constexpr int kPlacementAttempts = 20;
constexpr double kMaxLesionOverlap = 0.25;

SynthLesion make_lesion(LesionKind kind, const Anatomy& anatomy, std::size_t size,
                        std::vector<double>& canvas, std::mt19937_64& rng) {
  SynthLesion lesion{kind, {}, std::vector<bool>(size * size, false)};
  const Ellipse& lung = anatomy.lungs[std::uniform_int_distribution<int>(0, 1)(rng)];
  const double s = static_cast<double>(size);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto paint_ellipse = [&](const Ellipse& e, double peak, double falloff) {
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(e.cx - e.rx)));
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(e.cy - e.ry)));
    const auto x1 = static_cast<std::size_t>(std::min(s, std::ceil(e.cx + e.rx)));
    const auto y1 = static_cast<std::size_t>(std::min(s, std::ceil(e.cy + e.ry)));
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) {
        if (!inside(e, x, y)) continue;
        const double dx = (static_cast<double>(x) + 0.5 - e.cx) / e.rx;
        const double dy = (static_cast<double>(y) + 0.5 - e.cy) / e.ry;
        canvas[y * size + x] += peak * (1.0 - falloff * (dx * dx + dy * dy));
        lesion.support[y * size + x] = true;
      }
    }
  };

  switch (kind) {
    case LesionKind::kDot: {
      const int d = std::uniform_int_distribution<int>(3, 8)(rng);
      const auto [cx, cy] = sample_in_lung(lung, d, rng);
      // Integer-aligned square of side d so the support spans exactly d pixels.
      const double x0 = std::floor(cx - d / 2.0), y0 = std::floor(cy - d / 2.0);
      const double r = d / 2.0;
      paint_ellipse({x0 + r, y0 + r, r, r}, 1500.0 + 400.0 * unit(rng), 0.3);
      break;
    }
    case LesionKind::kBlob: {
      std::uniform_int_distribution<int> diam(20, 60);
      const double w = std::min<double>(diam(rng), 2.0 * lung.rx);
      const double h = std::min<double>(diam(rng), 2.0 * lung.ry);
      const auto [cx, cy] = sample_in_lung(lung, 0.25 * std::min(w, h), rng);
      const double x0 = std::floor(cx - w / 2.0), y0 = std::floor(cy - h / 2.0);
      paint_ellipse({x0 + w / 2.0, y0 + h / 2.0, w / 2.0, h / 2.0}, 650.0 + 250.0 * unit(rng), 0.6);
      break;
    }
    case LesionKind::kDiffuse: {
      // A band of the lung field covering 30-80% of its pixels, apical or basal.
      std::vector<std::size_t> rows(size, 0);
      std::size_t lung_pixels = 0;
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          if (inside(lung, x, y)) {
            ++rows[y];
            ++lung_pixels;
          }
        }
      }
      const double fraction = 0.3 + 0.5 * unit(rng);
      const bool apical = unit(rng) < 0.5;
      const auto target = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(lung_pixels)));
      std::vector<bool> take_row(size, false);
      std::size_t covered = 0;
      for (std::size_t k = 0; k < size && covered < target; ++k) {
        const std::size_t y = apical ? k : size - 1 - k;
        take_row[y] = true;
        covered += rows[y];
      }
      std::uniform_real_distribution<double> mottle(0.0, 250.0);
      for (std::size_t y = 0; y < size; ++y) {
        if (!take_row[y]) continue;
        for (std::size_t x = 0; x < size; ++x) {
          if (!inside(lung, x, y)) continue;
          canvas[y * size + x] += 350.0 + mottle(rng);
          lesion.support[y * size + x] = true;
        }
      }
      break;
    }
  }
  lesion.box = support_box(lesion.support, size);
  return lesion;
}

}  // namespace

SynthSample synthesize_sample(const SynthConfig& config, std::size_t index) {
  validate(config);
  const std::size_t total = config.n_tb + config.n_healthy;
  if (index >= total) throw InvalidArgument("synthesize_sample: index out of range");
  const bool tb = index < config.n_tb;
  const std::size_t size = config.image_size;
  const double s = static_cast<double>(size);
  auto rng = make_rng(config.seed, index);

  const Anatomy anatomy = make_anatomy(s, rng);
  std::vector<double> canvas(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double v = 180.0;
      if (inside(anatomy.body, x, y)) v = 2500.0 - 500.0 * static_cast<double>(y) / s;
      for (const auto& lung : anatomy.lungs) {
        if (inside(lung, x, y)) {
          const double dx = (static_cast<double>(x) + 0.5 - lung.cx) / lung.rx;
          v = 1000.0 + 250.0 * dx * dx;
        }
      }
      canvas[y * size + x] = v;
    }
  }

  SynthSample sample;
  if (tb) {
    std::discrete_distribution<int> pick_kind(config.mix.begin(), config.mix.end());
    const int count = std::uniform_int_distribution<int>(1, 4)(rng);
    for (int k = 0; k < count; ++k) {
      const auto kind = static_cast<LesionKind>(pick_kind(rng));
      // Redraw lesions whose box overlaps an earlier one; give up after a few tries.
      for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
        std::vector<double> layer(size * size, 0.0);
        SynthLesion lesion = make_lesion(kind, anatomy, size, layer, rng);
        const bool distinct = std::none_of(sample.lesions.begin(), sample.lesions.end(), [&](const SynthLesion& other) {
          return iou(as_box(other.box), as_box(lesion.box)) > kMaxLesionOverlap;
        });
        if (!distinct) continue;
        for (std::size_t i = 0; i < canvas.size(); ++i) canvas[i] += layer[i];
        sample.lesions.push_back(std::move(lesion));
        break;
      }
    }
  }

  std::uniform_real_distribution<double> noise(-40.0, 40.0);
  sample.image.width = sample.image.height = size;
  sample.image.pixels.resize(size * size);
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double v = std::clamp(std::round(canvas[i] + noise(rng)), 0.0, 4095.0);
    sample.image.pixels[i] = static_cast<std::uint16_t>(v);
  }

  char id[32];
  std::snprintf(id, sizeof(id), "%c%04zu", tb ? 't' : 'h', tb ? index + 1 : index - config.n_tb + 1);
  sample.record.id = id;
  sample.record.image = std::string("images/") + id + ".pgm";
  sample.record.ww = 4096.0;
  sample.record.wl = 2048.0;
  sample.record.label = tb ? CaseLabel::kTb : CaseLabel::kHealthy;
  for (const auto& lesion : sample.lesions) sample.record.boxes.push_back(lesion.box);
  return sample;
}

DatasetManifest generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir) {
  validate(config);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  const std::size_t total = config.n_tb + config.n_healthy;
  for (std::size_t i = 0; i < total; ++i) {
    SynthSample sample = synthesize_sample(config, i);
    write_pgm16(sample.image, out_dir / sample.record.image);
    manifest.records.push_back(std::move(sample.record));
  }
  write_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

}  // namespace tbloc
