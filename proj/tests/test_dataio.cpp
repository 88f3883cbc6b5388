#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "tbloc/box.hpp"
#include "tbloc/dataio.hpp"
#include "tbloc/error.hpp"
#include "tbloc/rng.hpp"

using namespace tbloc;
namespace fs = std::filesystem;
using test::read_file;
using test::temp_dir;

namespace {

Box as_box(const PixelBox& b) { return {double(b[0]), double(b[1]), double(b[2]), double(b[3])}; }

PixelBox bbox_of(const std::vector<bool>& support, std::size_t size) {
  PixelBox b{int(size), int(size), -1, -1};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      if (!support[y * size + x]) continue;
      b[0] = std::min(b[0], int(x));
      b[1] = std::min(b[1], int(y));
      b[2] = std::max(b[2], int(x) + 1);
      b[3] = std::max(b[3], int(y) + 1);
    }
  }
  return b;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  for (const auto& l : lines) out << l << '\n';
}

template <class Fn>
std::string error_text(Fn fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

ImageRecord random_record(std::mt19937_64& rng, std::size_t i) {
  std::uniform_int_distribution<int> coord(0, 500);
  std::uniform_int_distribution<int> side(1, 200);
  std::uniform_int_distribution<int> count(0, 4);
  std::uniform_real_distribution<double> window(1.0, 70000.0);
  ImageRecord r;
  r.id = "r" + std::to_string(i) + (rng() % 2 ? "_x" : "");
  r.image = "images/" + r.id + ".pgm";
  r.ww = window(rng);
  r.wl = window(rng) - 100.0;
  r.label = rng() % 2 ? CaseLabel::kTb : CaseLabel::kHealthy;
  if (r.label == CaseLabel::kTb) {
    const int n = count(rng);
    for (int k = 0; k < n; ++k) {
      const int x = coord(rng), y = coord(rng);
      r.boxes.push_back({x, y, x + side(rng), y + side(rng)});
    }
  }
  if (rng() % 3 == 0) r.extra.push_back({"reader", "\"R" + std::to_string(rng() % 9) + "\""});
  if (rng() % 4 == 0) r.extra.push_back({"meta", "{\"age\":" + std::to_string(rng() % 90) + "}"});
  return r;
}

}  // namespace

TEST_CASE("pgm16 round trip is big-endian with maxval 65535") {
  const auto dir = temp_dir("pgm");
  GrayImage16 img{3, 2, {0, 1, 256, 4095, 65535, 0x1234}};
  write_pgm16(img, dir / "a.pgm");
  const std::string bytes = read_file(dir / "a.pgm");
  const std::string header = "P5\n3 2\n65535\n";
  REQUIRE(bytes.size() == header.size() + 12);
  CHECK(bytes.substr(0, header.size()) == header);
  CHECK(std::uint8_t(bytes[header.size() + 4]) == 0x01);
  CHECK(std::uint8_t(bytes[header.size() + 5]) == 0x00);
  CHECK(std::uint8_t(bytes[header.size() + 10]) == 0x12);
  CHECK(std::uint8_t(bytes[header.size() + 11]) == 0x34);
  const GrayImage16 back = read_pgm16(dir / "a.pgm");
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("pgm16 rejects bad input") {
  const auto dir = temp_dir("pgm_bad");
  CHECK_THROWS_AS(read_pgm16(dir / "none.pgm"), IoError);
  write_lines(dir / "p2.pgm", {"P2", "1 1", "255", "0"});
  CHECK_THROWS_AS(read_pgm16(dir / "p2.pgm"), ParseError);
  {
    std::ofstream out(dir / "short.pgm", std::ios::binary);
    out << "P5\n2 2\n65535\n" << std::string(5, '\0');
  }
  CHECK_THROWS_AS(read_pgm16(dir / "short.pgm"), IntegrityError);
  CHECK_THROWS_AS(write_pgm16(GrayImage16{2, 2, {1, 2, 3}}, dir / "x.pgm"), InvalidArgument);
}

TEST_CASE("generate_dataset: healthy-only config") {
  const auto dir = temp_dir("gen_healthy");
  SynthConfig c;
  c.n_tb = 0;
  c.n_healthy = 3;
  c.image_size = 64;
  const DatasetManifest m = generate_dataset(c, dir);
  REQUIRE(m.records.size() == 3);
  for (const auto& r : m.records) {
    CHECK(r.label == CaseLabel::kHealthy);
    CHECK(r.boxes.empty());
  }
  const DatasetManifest back = read_manifest(dir / "manifest.jsonl");
  CHECK(back.records == m.records);
}

TEST_CASE("generate_dataset is byte-identical for the same config") {
  SynthConfig c;
  c.n_tb = 4;
  c.n_healthy = 2;
  c.image_size = 96;
  c.seed = 11;
  const auto a = temp_dir("gen_a"), b = temp_dir("gen_b");
  const DatasetManifest ma = generate_dataset(c, a);
  generate_dataset(c, b);
  CHECK(read_file(a / "manifest.jsonl") == read_file(b / "manifest.jsonl"));
  for (const auto& r : ma.records) {
    INFO(r.image);
    CHECK(read_file(a / r.image) == read_file(b / r.image));
  }
  c.seed = 12;
  const auto d = temp_dir("gen_c");
  generate_dataset(c, d);
  CHECK(read_file(a / "manifest.jsonl") != read_file(d / "manifest.jsonl"));
}

TEST_CASE("generate_dataset: boxes in bounds with sides in [3, 128] at size 128") {
  const auto dir = temp_dir("gen_128");
  SynthConfig c;
  c.image_size = 128;
  const DatasetManifest m = generate_dataset(c, dir);
  REQUIRE(m.records.size() == 16);
  std::size_t tb = 0;
  for (const auto& r : m.records) {
    INFO(r.id);
    const GrayImage16 img = load_image(m, r);
    CHECK(img.width == 128);
    CHECK(img.height == 128);
    CHECK(*std::max_element(img.pixels.begin(), img.pixels.end()) <= 4095);
    CHECK(r.ww == 4096.0);
    CHECK(r.wl == 2048.0);
    if (r.label == CaseLabel::kTb) {
      ++tb;
      CHECK(r.boxes.size() >= 1);
      CHECK(r.boxes.size() <= 4);
    }
    for (const auto& b : r.boxes) {
      for (int side : {b[2] - b[0], b[3] - b[1]}) {
        CHECK(side >= 3);
        CHECK(side <= 128);
      }
      CHECK(b[0] >= 0);
      CHECK(b[1] >= 0);
      CHECK(b[2] <= 128);
      CHECK(b[3] <= 128);
    }
  }
  CHECK(tb == 8);
}

TEST_CASE("generator: each lesion box matches its pixel support") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SynthConfig c;
    c.n_tb = 10;
    c.n_healthy = 0;
    c.image_size = 128;
    c.seed = seed;
    for (std::size_t i = 0; i < c.n_tb; ++i) {
      const SynthSample s = synthesize_sample(c, i);
      REQUIRE(s.lesions.size() == s.record.boxes.size());
      for (std::size_t k = 0; k < s.lesions.size(); ++k) {
        const SynthLesion& l = s.lesions[k];
        const PixelBox support = bbox_of(l.support, c.image_size);
        CAPTURE(seed);
        CAPTURE(i);
        CHECK(iou(as_box(l.box), as_box(support)) >= 0.5);
        CHECK(s.record.boxes[k] == l.box);
        if (l.kind == LesionKind::kDot) {
          CHECK(l.box[2] - l.box[0] >= 3);
          CHECK(l.box[2] - l.box[0] <= 8);
        }
      }
    }
  }
}

TEST_CASE("generator: healthy samples carry no lesions and follow TB indices") {
  SynthConfig c;
  c.n_tb = 2;
  c.n_healthy = 2;
  c.image_size = 64;
  CHECK(synthesize_sample(c, 1).record.label == CaseLabel::kTb);
  const SynthSample h = synthesize_sample(c, 2);
  CHECK(h.record.label == CaseLabel::kHealthy);
  CHECK(h.lesions.empty());
  CHECK(h.record.boxes.empty());
}

TEST_CASE("generator: all lesion classes appear with positive mix and n_tb >= 20") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SynthConfig c;
    c.n_tb = 20;
    c.n_healthy = 0;
    c.image_size = 64;
    c.seed = seed;
    std::set<LesionKind> seen;
    for (std::size_t i = 0; i < c.n_tb; ++i) {
      for (const auto& l : synthesize_sample(c, i).lesions) seen.insert(l.kind);
    }
    CAPTURE(seed);
    CHECK(seen.size() == 3);
  }
}

TEST_CASE("generator: mix weights select lesion classes") {
  SynthConfig c;
  c.n_tb = 10;
  c.n_healthy = 0;
  c.image_size = 64;
  c.mix = {0.0, 1.0, 0.0};
  for (std::size_t i = 0; i < c.n_tb; ++i) {
    for (const auto& l : synthesize_sample(c, i).lesions) CHECK(l.kind == LesionKind::kBlob);
  }
}

TEST_CASE("synth config validation") {
  const auto dir = temp_dir("gen_invalid");
  SynthConfig c;
  c.n_tb = 0;
  c.n_healthy = 0;
  CHECK_THROWS_AS(generate_dataset(c, dir), InvalidArgument);
  c = {};
  c.image_size = 63;
  CHECK_THROWS_AS(generate_dataset(c, dir), InvalidArgument);
  c = {};
  c.mix = {1.0, -0.1, 1.0};
  CHECK_THROWS_AS(validate(c), InvalidArgument);
  c.mix = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(validate(c), InvalidArgument);
  c = {};
  c.image_size = 64;
  CHECK_NOTHROW(validate(c));
}

TEST_CASE("manifest round trip over 100 random configs") {
  const auto dir = temp_dir("manifest_rt");
  auto rng = make_rng(42, 0);
  for (int trial = 0; trial < 100; ++trial) {
    DatasetManifest m;
    const std::size_t n = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) m.records.push_back(random_record(rng, i));
    write_manifest(m, dir / "m.jsonl");
    ManifestReadOptions opt;
    opt.check_images = false;
    const DatasetManifest back = read_manifest(dir / "m.jsonl", opt);
    CAPTURE(trial);
    REQUIRE(back.records.size() == m.records.size());
    for (std::size_t i = 0; i < n; ++i) CHECK(back.records[i] == m.records[i]);
    write_manifest(back, dir / "m2.jsonl");
    CHECK(read_file(dir / "m.jsonl") == read_file(dir / "m2.jsonl"));
  }
}

TEST_CASE("manifest: unknown fields preserved, rejected in strict mode") {
  const auto dir = temp_dir("manifest_extra");
  write_lines(dir / "m.jsonl",
              {R"({"id":"a","image":"a.pgm","ww":4096,"wl":2048,"label":"healthy","boxes":[],"site":"x"})"});
  ManifestReadOptions opt;
  opt.check_images = false;
  const DatasetManifest m = read_manifest(dir / "m.jsonl", opt);
  REQUIRE(m.records.size() == 1);
  REQUIRE(m.records[0].extra.size() == 1);
  CHECK(m.records[0].extra[0].first == "site");
  CHECK(m.records[0].extra[0].second == "\"x\"");
  opt.strict = true;
  const std::string msg = error_text([&] { read_manifest(dir / "m.jsonl", opt); });
  CHECK(msg.find("site") != std::string::npos);
  CHECK_THROWS_AS(read_manifest(dir / "m.jsonl", opt), ParseError);
}

TEST_CASE("manifest: box with x2 <= x1 names the record") {
  const auto dir = temp_dir("manifest_box");
  write_lines(dir / "m.jsonl",
              {R"({"id":"ok1","image":"a.pgm","ww":4096,"wl":2048,"label":"tb","boxes":[[1,1,5,5]]})",
               R"({"id":"bad_box_7","image":"b.pgm","ww":4096,"wl":2048,"label":"tb","boxes":[[9,1,9,5]]})"});
  ManifestReadOptions opt;
  opt.check_images = false;
  CHECK_THROWS_AS(read_manifest(dir / "m.jsonl", opt), ParseError);
  CHECK(error_text([&] { read_manifest(dir / "m.jsonl", opt); }).find("bad_box_7") != std::string::npos);
}

TEST_CASE("manifest: malformed line reports its line number") {
  const auto dir = temp_dir("manifest_malformed");
  write_lines(dir / "m.jsonl",
              {R"({"id":"a","image":"a.pgm","ww":4096,"wl":2048,"label":"healthy","boxes":[]})", "",
               R"({"id":"b","image":"b.pgm",)"});
  ManifestReadOptions opt;
  opt.check_images = false;
  CHECK_THROWS_AS(read_manifest(dir / "m.jsonl", opt), ParseError);
  CHECK(error_text([&] { read_manifest(dir / "m.jsonl", opt); }).find(":3") != std::string::npos);
}

TEST_CASE("manifest: record invariants") {
  const auto dir = temp_dir("manifest_inv");
  ManifestReadOptions opt;
  opt.check_images = false;
  const std::vector<std::string> bad = {
      R"({"id":"h","image":"a.pgm","ww":4096,"wl":2048,"label":"healthy","boxes":[[1,1,5,5]]})",
      R"({"id":"w","image":"a.pgm","ww":0,"wl":2048,"label":"tb","boxes":[]})",
      R"({"id":"l","image":"a.pgm","ww":4096,"wl":2048,"label":"sick","boxes":[]})",
      R"({"id":"n","image":"a.pgm","ww":4096,"wl":2048,"label":"tb","boxes":[[-1,0,5,5]]})",
      R"({"image":"a.pgm","ww":4096,"wl":2048,"label":"tb","boxes":[]})",
  };
  for (const auto& line : bad) {
    write_lines(dir / "m.jsonl", {line});
    CAPTURE(line);
    CHECK_THROWS_AS(read_manifest(dir / "m.jsonl", opt), ParseError);
  }
  const std::string ok = R"({"id":"d","image":"a.pgm","ww":4096,"wl":2048,"label":"healthy","boxes":[]})";
  write_lines(dir / "m.jsonl", {ok, ok});
  CHECK(error_text([&] { read_manifest(dir / "m.jsonl", opt); }).find("duplicate id d") != std::string::npos);

  ImageRecord r;
  r.id = "oob";
  r.label = CaseLabel::kTb;
  r.boxes = {{0, 0, 65, 10}};
  CHECK_THROWS_AS(validate_record(r, 64, 64), ParseError);
  r.boxes = {{0, 0, 64, 64}};
  CHECK_NOTHROW(validate_record(r, 64, 64));
}

TEST_CASE("manifest: absent image is an integrity error listing the path") {
  const auto dir = temp_dir("manifest_missing");
  write_lines(dir / "m.jsonl",
              {R"({"id":"a","image":"images/gone.pgm","ww":4096,"wl":2048,"label":"healthy","boxes":[]})"});
  CHECK_THROWS_AS(read_manifest(dir / "m.jsonl"), IntegrityError);
  CHECK(error_text([&] { read_manifest(dir / "m.jsonl"); }).find((dir / "images/gone.pgm").string()) !=
        std::string::npos);
  CHECK_THROWS_AS(read_manifest(dir / "nope.jsonl"), IoError);
}

TEST_CASE("label and split names") {
  CHECK(std::string(to_string(CaseLabel::kTb)) == "tb");
  CHECK(parse_case_label("healthy") == CaseLabel::kHealthy);
  CHECK_THROWS_AS(parse_case_label("TB!"), ParseError);
  CHECK(parse_split("val") == Split::kVal);
  CHECK(std::string(to_string(Split::kTest)) == "test");
}
