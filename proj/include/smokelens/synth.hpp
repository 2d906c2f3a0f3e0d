#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "smokelens/image.hpp"

namespace smokelens::synth {

enum class BackgroundStyle { Gradient, Textured };

std::string to_string(BackgroundStyle style);
BackgroundStyle parse_background(const std::string& text);

struct SceneSpec {
  std::uint64_t seed = 0;
  int width = 64;
  int height = 64;
  int plumes = 1;          // 1 or 2
  double opacity = 0.6;    // peak plume opacity; 0 renders no smoke
  BackgroundStyle background = BackgroundStyle::Gradient;
  double haze = 0.0;       // strength of the white veil laid outside the plume

  static constexpr double kMinOpacity = 0.2;
  static constexpr double kMaxOpacity = 0.9;
  static constexpr double kMaxHaze = 0.3;

  // Fields drawn from their declared ranges.
  static SceneSpec random(std::uint64_t seed, int size = 64);
  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

struct LabeledScene {
  SceneSpec spec;
  ImageRGB image;
  Mask mask;      // alpha > 0.5 * opacity
  GrayMap alpha;  // composited smoke opacity
};

// Value noise on an integer lattice, bilinear with smoothstep fade, in [0,1].
double value_noise(std::uint64_t seed, double x, double y);
// Four octaves, lacunarity 2, gain 0.5, normalized to [0,1].
double fractal_noise(std::uint64_t seed, double x, double y);

LabeledScene generate(const SceneSpec& spec);
Mask mask_from_alpha(const GrayMap& alpha, double opacity);

// Scene i uses SceneSpec::random(derive_seed(root, "scene", i), size).
std::vector<LabeledScene> generate_set(std::size_t count, int size, std::uint64_t root_seed);

struct Dataset {
  std::vector<SceneSpec> specs;
  std::vector<ImageRGB> images;
  std::vector<Mask> masks;
  std::vector<int> indices;

  std::size_t size() const { return images.size(); }
};

// image_XXXX.png, mask_XXXX.png and manifest.txt.
void write_dataset(std::span<const LabeledScene> scenes, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

std::string index_name(const std::string& prefix, int index, const std::string& ext = ".png");

}  // namespace smokelens::synth
