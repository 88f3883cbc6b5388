#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace tbloc {

// 16-bit grayscale image, row-major.
struct GrayImage16 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> pixels;

  std::uint16_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

struct GrayImage8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

// Binary PGM (P5). 16-bit samples are big-endian; maxval 65535 on write.
GrayImage16 read_pgm16(const std::filesystem::path& path);
void write_pgm16(const GrayImage16& image, const std::filesystem::path& path);
void write_pgm8(const GrayImage8& image, const std::filesystem::path& path);

enum class CaseLabel { kHealthy, kTb };

const char* to_string(CaseLabel label);
CaseLabel parse_case_label(const std::string& text);

// Integer pixel box, origin top-left, x2/y2 exclusive.
using PixelBox = std::array<int, 4>;

struct ImageRecord {
  std::string id;
  std::string image;  // path relative to the manifest directory
  double ww = 4096.0;
  double wl = 2048.0;
  CaseLabel label = CaseLabel::kHealthy;
  std::vector<PixelBox> boxes;
  // Fields not understood by this version, kept as serialized JSON values in
  // file order so that a read/write cycle preserves them.
  std::vector<std::pair<std::string, std::string>> extra;

  bool operator==(const ImageRecord&) const = default;
};

enum class Split { kTrain, kVal, kTest };

const char* to_string(Split split);
Split parse_split(const std::string& text);

struct DatasetManifest {
  std::vector<ImageRecord> records;
  Split split = Split::kTrain;
  // Directory image paths are resolved against.
  std::filesystem::path base_dir;

  std::filesystem::path image_path(const ImageRecord& record) const { return base_dir / record.image; }
};

struct ManifestReadOptions {
  // Reject lines carrying keys outside the documented schema.
  bool strict = false;
  // Confirm that every referenced image file exists.
  bool check_images = true;
  Split split = Split::kTrain;
};

// JSON-lines manifest, one record per line:
//   {"id":"t0001","image":"images/t0001.pgm","ww":4096,"wl":2048,"label":"tb","boxes":[[x1,y1,x2,y2]]}
// Image dimensions are not known here, so the in-bounds check on boxes
// happens in validate_record() once the image is loaded.
DatasetManifest read_manifest(const std::filesystem::path& path, const ManifestReadOptions& options = {});
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Throws ParseError naming the record on a violated invariant.
void validate_record(const ImageRecord& record, std::size_t width, std::size_t height);

GrayImage16 load_image(const DatasetManifest& manifest, const ImageRecord& record);

// ---------------------------------------------------------------------------
// Synthetic chest-radiograph generator.

enum class LesionKind { kDot, kBlob, kDiffuse };

const char* to_string(LesionKind kind);

struct SynthConfig {
  std::size_t n_tb = 8;
  std::size_t n_healthy = 8;
  std::size_t image_size = 256;
  std::uint64_t seed = 0;
  // Relative weights for {dot, blob, diffuse}.
  std::array<double, 3> mix{1.0, 1.0, 1.0};
};

void validate(const SynthConfig& config);

struct SynthLesion {
  LesionKind kind;
  PixelBox box;
  // Row-major mask over the full image; true where the lesion altered pixels.
  std::vector<bool> support;
};

struct SynthSample {
  ImageRecord record;
  GrayImage16 image;
  std::vector<SynthLesion> lesions;
};

// Sample `index` of the dataset described by `config`. TB cases occupy
// indices [0, n_tb), healthy cases the rest. Depends only on (config, index).
SynthSample synthesize_sample(const SynthConfig& config, std::size_t index);

// Writes images/<id>.pgm and manifest.jsonl under out_dir.
DatasetManifest generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

}  // namespace tbloc
