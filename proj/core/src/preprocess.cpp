#include "tbloc/preprocess.hpp"

#include <array>
#include <cmath>

#include "tbloc/error.hpp"
#include "tbloc/parallel.hpp"

namespace tbloc {

namespace {
double round_half_up(double v) { return std::floor(v + 0.5); }
}  // namespace

GrayImage8 window_map(const GrayImage16& image, double ww, double wl) {
  if (!(ww > 0.0)) throw InvalidArgument("window_map: window width must be positive");
  GrayImage8 out{image.width, image.height, std::vector<std::uint8_t>(image.pixels.size())};
  const double low = wl - ww / 2.0;
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const double v = round_half_up(255.0 * (static_cast<double>(image.pixels[i]) - low) / ww);
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

FloatImage to_float(const GrayImage8& image) {
  FloatImage out{image.width, image.height, std::vector<double>(image.pixels.size())};
  for (std::size_t i = 0; i < image.pixels.size(); ++i) out.pixels[i] = image.pixels[i];
  return out;
}

FloatImage resize_bilinear(const FloatImage& image, std::size_t target) {
  if (image.width < 2 || image.height < 2) throw InvalidArgument("resize_bilinear: source must be at least 2x2");
  if (target < 2) throw InvalidArgument("resize_bilinear: target must be at least 2");
  if (image.pixels.size() != image.width * image.height) {
    throw InvalidArgument("resize_bilinear: pixel count does not match dimensions");
  }
  if (image.width == target && image.height == target) return image;

  FloatImage out{target, target, std::vector<double>(target * target)};
  const double fx = static_cast<double>(image.width - 1) / static_cast<double>(target - 1);
  const double fy = static_cast<double>(image.height - 1) / static_cast<double>(target - 1);
  for (std::size_t i = 0; i < target; ++i) {
    const double sy = static_cast<double>(i) * fy;
    const auto y0 = std::min(static_cast<std::size_t>(sy), image.height - 2);
    const double ty = sy - static_cast<double>(y0);
    for (std::size_t j = 0; j < target; ++j) {
      const double sx = static_cast<double>(j) * fx;
      const auto x0 = std::min(static_cast<std::size_t>(sx), image.width - 2);
      const double tx = sx - static_cast<double>(x0);
      const double* r0 = image.pixels.data() + y0 * image.width;
      const double* r1 = r0 + image.width;
      const double top = r0[x0] + tx * (r0[x0 + 1] - r0[x0]);
      const double bottom = r1[x0] + tx * (r1[x0 + 1] - r1[x0]);
      out.pixels[i * target + j] = top + ty * (bottom - top);
    }
  }
  return out;
}

GrayImage8 hist_equalize(const GrayImage8& image) {
  std::array<std::uint64_t, 256> counts{};
  for (auto v : image.pixels) ++counts[v];
  const std::uint64_t n = image.pixels.size();
  std::uint64_t cdf_min = 0;
  for (auto c : counts) {
    if (c) {
      cdf_min = c;
      break;
    }
  }
  if (n == 0 || cdf_min == n) return image;

  // Integer form of round_half_up(255 * (cdf - cdf_min) / (n - cdf_min)).
  std::array<std::uint8_t, 256> lut{};
  std::uint64_t cumulative = 0;
  const std::uint64_t den = n - cdf_min;
  for (std::size_t v = 0; v < 256; ++v) {
    cumulative += counts[v];
    const std::uint64_t num = cumulative >= cdf_min ? cumulative - cdf_min : 0;
    lut[v] = static_cast<std::uint8_t>((2 * 255 * num + den) / (2 * den));
  }
  GrayImage8 out{image.width, image.height, std::vector<std::uint8_t>(image.pixels.size())};
  for (std::size_t i = 0; i < image.pixels.size(); ++i) out.pixels[i] = lut[image.pixels[i]];
  return out;
}

PreprocessResult preprocess_record(const ImageRecord& record, const GrayImage16& pixels,
                                   std::size_t target) {
  validate_record(record, pixels.width, pixels.height);
  const FloatImage resized = resize_bilinear(to_float(window_map(pixels, record.ww, record.wl)), target);
  GrayImage8 quantized{target, target, std::vector<std::uint8_t>(target * target)};
  for (std::size_t i = 0; i < resized.pixels.size(); ++i) {
    quantized.pixels[i] = static_cast<std::uint8_t>(std::clamp(round_half_up(resized.pixels[i]), 0.0, 255.0));
  }
  const GrayImage8 equalized = hist_equalize(quantized);

  PreprocessResult result;
  result.image.size = target;
  result.image.sx = static_cast<double>(target) / static_cast<double>(pixels.width);
  result.image.sy = static_cast<double>(target) / static_cast<double>(pixels.height);
  result.image.pixels.resize(equalized.pixels.size());
  for (std::size_t i = 0; i < equalized.pixels.size(); ++i) {
    result.image.pixels[i] = static_cast<double>(equalized.pixels[i]) / 255.0;
  }
  for (const auto& b : record.boxes) {
    result.boxes.push_back({b[0] * result.image.sx, b[1] * result.image.sy, b[2] * result.image.sx,
                            b[3] * result.image.sy});
  }
  return result;
}

std::vector<Sample> load_samples(const DatasetManifest& manifest, std::size_t target,
                                 std::size_t threads) {
  std::vector<Sample> samples(manifest.records.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const ImageRecord& record = manifest.records[i];
    PreprocessResult r = preprocess_record(record, load_image(manifest, record), target);
    samples[i] = Sample{record.id, record.label, std::move(r.image), std::move(r.boxes)};
  });
  return samples;
}

GrayImage8 to_gray8(const ProcessedImage& image) {
  GrayImage8 out{image.size, image.size, std::vector<std::uint8_t>(image.pixels.size())};
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(round_half_up(image.pixels[i] * 255.0), 0.0, 255.0));
  }
  return out;
}

}  // namespace tbloc
