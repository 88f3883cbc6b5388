#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tbloc/box.hpp"
#include "tbloc/dataio.hpp"

namespace tbloc {

// Maps raw intensities through a window into 0..255:
//   clamp(round_half_up(255 * (p - (wl - ww/2)) / ww), 0, 255)
GrayImage8 window_map(const GrayImage16& image, double ww, double wl);

// Single-channel floating image.
struct FloatImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;
};

FloatImage to_float(const GrayImage8& image);

// Corner-aligned bilinear resize to target x target: output sample (i, j)
// reads source position (j * (W-1)/(target-1), i * (H-1)/(target-1)).
FloatImage resize_bilinear(const FloatImage& image, std::size_t target);

// Global histogram equalization with the cdf_min normalisation. A constant
// image is returned unchanged.
GrayImage8 hist_equalize(const GrayImage8& image);

struct ProcessedImage {
  std::size_t size = 0;
  std::vector<double> pixels;  // size*size, values in [0,1]
  double sx = 1.0;             // processed / original, horizontal
  double sy = 1.0;             // processed / original, vertical
};

struct PreprocessResult {
  ProcessedImage image;
  std::vector<Box> boxes;  // in processed coordinates
};

// window -> resize -> round to 8 bit -> equalize -> /255.
PreprocessResult preprocess_record(const ImageRecord& record, const GrayImage16& pixels,
                                   std::size_t target);

// A preprocessed record ready for the network.
struct Sample {
  std::string id;
  CaseLabel label = CaseLabel::kHealthy;
  ProcessedImage image;
  std::vector<Box> boxes;  // processed coordinates
};

// Loads and preprocesses every record of `manifest`. Order is preserved.
std::vector<Sample> load_samples(const DatasetManifest& manifest, std::size_t target,
                                 std::size_t threads = 1);

// 8-bit view of a processed image (x255, round half-up) for debug dumps.
GrayImage8 to_gray8(const ProcessedImage& image);

}  // namespace tbloc
