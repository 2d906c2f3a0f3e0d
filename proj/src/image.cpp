#include "smokelens/image.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>

#include "smokelens/errors.hpp"

namespace smokelens {

GrayMap::GrayMap(int width, int height, double fill)
    : width_(width), height_(height) {
  require(width >= 0 && height >= 0, "GrayMap: negative dimensions");
  data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
}

GrayMap::GrayMap(int width, int height, std::vector<double> data)
    : width_(width), height_(height), data_(std::move(data)) {
  require(width >= 0 && height >= 0, "GrayMap: negative dimensions");
  require(data_.size() == static_cast<std::size_t>(width) * static_cast<std::size_t>(height),
          "GrayMap: data length must equal width * height");
}

double GrayMap::clamped(int x, int y) const {
  x = std::clamp(x, 0, width_ - 1);
  y = std::clamp(y, 0, height_ - 1);
  return data_[index(x, y)];
}

bool GrayMap::is_unit_range() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return v >= 0.0 && v <= 1.0; });
}

double GrayMap::min() const { return *std::min_element(data_.begin(), data_.end()); }
double GrayMap::max() const { return *std::max_element(data_.begin(), data_.end()); }
double GrayMap::mean() const {
  if (data_.empty()) return 0.0;
  return std::accumulate(data_.begin(), data_.end(), 0.0) / static_cast<double>(data_.size());
}

ImageRGB::ImageRGB(int width, int height, double fill)
    : channels_{GrayMap(width, height, fill), GrayMap(width, height, fill),
                GrayMap(width, height, fill)} {}

ImageRGB::ImageRGB(GrayMap r, GrayMap g, GrayMap b)
    : channels_{std::move(r), std::move(g), std::move(b)} {
  require(channels_[0].same_size(channels_[1]) && channels_[0].same_size(channels_[2]),
          "ImageRGB: channels must share dimensions");
}

GrayMap ImageRGB::intensity() const {
  GrayMap out(width(), height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (channels_[0][i] + channels_[1][i] + channels_[2][i]) / 3.0;
  }
  return out;
}

bool ImageRGB::is_unit_range() const {
  return channels_[0].is_unit_range() && channels_[1].is_unit_range() &&
         channels_[2].is_unit_range();
}

namespace {

void check_window(int k, const char* who) {
  if (k < 1 || k % 2 == 0) {
    throw InvalidArgument(std::string(who) + ": window size must be odd and >= 1, got " +
                          std::to_string(k));
  }
}

// Separable pass along rows then columns; reduce(acc, v) folds one sample.
template <typename Reduce>
GrayMap separable(const GrayMap& map, int k, double init, Reduce reduce) {
  const int w = map.width();
  const int h = map.height();
  const int r = k / 2;
  GrayMap rows(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = init;
      for (int d = -r; d <= r; ++d) acc = reduce(acc, map.clamped(x + d, y));
      rows(x, y) = acc;
    }
  }
  GrayMap out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = init;
      for (int d = -r; d <= r; ++d) acc = reduce(acc, rows.clamped(x, y + d));
      out(x, y) = acc;
    }
  }
  return out;
}

}  // namespace

GrayMap min_filter(const GrayMap& map, int k) {
  check_window(k, "min_filter");
  if (map.empty()) return map;
  return separable(map, k, INFINITY, [](double a, double v) { return std::min(a, v); });
}

GrayMap avg_pool_same(const GrayMap& map, int k) {
  check_window(k, "avg_pool_same");
  if (map.empty()) return map;
  GrayMap sums = separable(map, k, 0.0, [](double a, double v) { return a + v; });
  const double area = static_cast<double>(k) * static_cast<double>(k);
  for (double& v : sums.data()) v /= area;
  return sums;
}

double binary_entropy(double p) {
  p = std::clamp(p, 0.0, 1.0);
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

GrayMap binary_entropy(const GrayMap& p) {
  GrayMap out(p.width(), p.height());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = binary_entropy(p[i]);
  return out;
}

GrayMap clamp_unit(GrayMap map) {
  for (double& v : map.data()) v = std::clamp(v, 0.0, 1.0);
  return map;
}

Mask binarize(const GrayMap& map, double threshold) {
  Mask out(map.width(), map.height());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = map[i] >= threshold ? 1.0 : 0.0;
  return out;
}

namespace {

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct PngPixels {
  int width = 0;
  int height = 0;
  bool color = false;
  std::vector<std::uint8_t> bytes;  // interleaved, 1 or 3 channels
};

PngPixels read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + image.message);
  }
  PngPixels px;
  px.color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = px.color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  px.width = static_cast<int>(image.width);
  px.height = static_cast<int>(image.height);
  px.bytes.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.bytes.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG '" + path.string() + "': " + image.message);
  }
  return px;
}

void write_png(const std::filesystem::path& path, int width, int height, bool color,
               const std::vector<std::uint8_t>& bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

}  // namespace

ImageRGB read_png_rgb(const std::filesystem::path& path) {
  const PngPixels px = read_png(path);
  ImageRGB out(px.width, px.height);
  const std::size_t n = out.pixel_count();
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      const std::uint8_t v = px.color ? px.bytes[3 * i + static_cast<std::size_t>(c)] : px.bytes[i];
      out.channel(c)[i] = v / 255.0;
    }
  }
  return out;
}

GrayMap read_png_gray(const std::filesystem::path& path) {
  const PngPixels px = read_png(path);
  GrayMap out(px.width, px.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (px.color) {
      const int sum = px.bytes[3 * i] + px.bytes[3 * i + 1] + px.bytes[3 * i + 2];
      out[i] = sum / (3.0 * 255.0);
    } else {
      out[i] = px.bytes[i] / 255.0;
    }
  }
  return out;
}

void write_png_rgb(const std::filesystem::path& path, const ImageRGB& image) {
  std::vector<std::uint8_t> bytes(3 * image.pixel_count());
  for (std::size_t i = 0; i < image.pixel_count(); ++i) {
    for (int c = 0; c < 3; ++c) bytes[3 * i + static_cast<std::size_t>(c)] = quantize(image.channel(c)[i]);
  }
  write_png(path, image.width(), image.height(), true, bytes);
}

void write_png_gray(const std::filesystem::path& path, const GrayMap& map) {
  std::vector<std::uint8_t> bytes(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) bytes[i] = quantize(map[i]);
  write_png(path, map.width(), map.height(), false, bytes);
}

void write_raw_f32(const std::filesystem::path& path, std::span<const GrayMap> maps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const GrayMap& map : maps) {
    for (double v : map.data()) {
      auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace smokelens
