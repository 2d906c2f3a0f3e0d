#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace smokelens {

// Dense single-channel raster, row-major, double samples.
class GrayMap {
 public:
  GrayMap() = default;
  GrayMap(int width, int height, double fill = 0.0);
  GrayMap(int width, int height, std::vector<double> data);

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int x, int y) { return data_[index(x, y)]; }
  double operator()(int x, int y) const { return data_[index(x, y)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Clamp-to-edge read; the border policy shared by every windowed filter.
  double clamped(int x, int y) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool same_size(const GrayMap& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }
  bool is_unit_range() const;
  double min() const;
  double max() const;
  double mean() const;

  bool operator==(const GrayMap&) const = default;

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<double> data_;
};

// Binary ground-truth raster: samples are exactly 0 or 1.
using Mask = GrayMap;

class ImageRGB {
 public:
  ImageRGB() = default;
  ImageRGB(int width, int height, double fill = 0.0);
  ImageRGB(GrayMap r, GrayMap g, GrayMap b);

  int width() const { return channels_[0].width(); }
  int height() const { return channels_[0].height(); }
  std::size_t pixel_count() const { return channels_[0].size(); }
  bool empty() const { return channels_[0].empty(); }

  GrayMap& channel(int c) { return channels_.at(static_cast<std::size_t>(c)); }
  const GrayMap& channel(int c) const { return channels_.at(static_cast<std::size_t>(c)); }
  GrayMap& r() { return channels_[0]; }
  GrayMap& g() { return channels_[1]; }
  GrayMap& b() { return channels_[2]; }
  const GrayMap& r() const { return channels_[0]; }
  const GrayMap& g() const { return channels_[1]; }
  const GrayMap& b() const { return channels_[2]; }

  // Per-pixel mean of R, G and B.
  GrayMap intensity() const;
  bool is_unit_range() const;

  bool operator==(const ImageRGB&) const = default;

 private:
  std::vector<GrayMap> channels_{3};
};

// Windowed filters. k is the full window side (odd, >= 1); borders replicate.
GrayMap min_filter(const GrayMap& map, int k);
GrayMap avg_pool_same(const GrayMap& map, int k);

// H(p) = -p ln p - (1-p) ln(1-p), with 0 ln 0 = 0. Inputs are clamped to [0,1].
double binary_entropy(double p);
GrayMap binary_entropy(const GrayMap& p);

GrayMap clamp_unit(GrayMap map);
// Threshold at 0.5 into a {0,1} mask.
Mask binarize(const GrayMap& map, double threshold = 0.5);

// 8-bit PNG codec. Samples map to v/255 on read and round(255 v) on write.
ImageRGB read_png_rgb(const std::filesystem::path& path);
GrayMap read_png_gray(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const ImageRGB& image);
void write_png_gray(const std::filesystem::path& path, const GrayMap& map);

// Little-endian float32 dump of one or more equally sized maps, back to back.
void write_raw_f32(const std::filesystem::path& path, std::span<const GrayMap> maps);

}  // namespace smokelens
