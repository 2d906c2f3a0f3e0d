#include "smokelens/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "smokelens/errors.hpp"
#include "smokelens/parallel.hpp"
#include "smokelens/rng.hpp"

namespace smokelens::synth {

namespace fs = std::filesystem;

std::string to_string(BackgroundStyle style) {
  return style == BackgroundStyle::Gradient ? "gradient" : "textured";
}

BackgroundStyle parse_background(const std::string& text) {
  if (text == "gradient") return BackgroundStyle::Gradient;
  if (text == "textured") return BackgroundStyle::Textured;
  throw InvalidArgument("unknown background style '" + text + "'");
}

SceneSpec SceneSpec::random(std::uint64_t seed, int size) {
  Rng rng(derive_seed(seed, "spec"));
  SceneSpec s;
  s.seed = seed;
  s.width = size;
  s.height = size;
  s.plumes = rng.uniform_int(1, 2);
  s.opacity = rng.uniform(kMinOpacity, kMaxOpacity);
  s.background = rng.bernoulli(0.5) ? BackgroundStyle::Textured : BackgroundStyle::Gradient;
  s.haze = rng.uniform(0.0, kMaxHaze);
  return s;
}

void SceneSpec::validate() const {
  require(width >= 8 && height >= 8, "SceneSpec: frame must be at least 8x8");
  require(plumes >= 1 && plumes <= 2, "SceneSpec: plume count must be 1 or 2");
  require(opacity >= 0.0 && opacity <= kMaxOpacity, "SceneSpec: opacity out of range");
  require(haze >= 0.0 && haze <= kMaxHaze, "SceneSpec: haze out of range");
}

namespace {

double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  std::uint64_t h = seed ^ (static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ULL);
  h ^= static_cast<std::uint64_t>(iy) * 0xC2B2AE3D27D4EB4FULL;
  h ^= h >> 31;
  h *= 0xBF58476D1CE4E5B9ULL;
  h ^= h >> 29;
  h *= 0x94D049BB133111EBULL;
  h ^= h >> 32;
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double fade(double t) { return t * t * (3.0 - 2.0 * t); }

double smoothstep(double lo, double hi, double x) {
  return fade(std::clamp((x - lo) / (hi - lo), 0.0, 1.0));
}

using Rgb = std::array<double, 3>;

}  // namespace

double value_noise(std::uint64_t seed, double x, double y) {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const auto ix = static_cast<std::int64_t>(fx);
  const auto iy = static_cast<std::int64_t>(fy);
  const double tx = fade(x - fx);
  const double ty = fade(y - fy);
  const double a = lattice(seed, ix, iy);
  const double b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1);
  const double d = lattice(seed, ix + 1, iy + 1);
  const double top = a + (b - a) * tx;
  const double bottom = c + (d - c) * tx;
  return top + (bottom - top) * ty;
}

double fractal_noise(std::uint64_t seed, double x, double y) {
  constexpr int kOctaves = 4;
  constexpr double kLacunarity = 2.0;
  constexpr double kGain = 0.5;
  double amp = 1.0;
  double freq = 1.0;
  double acc = 0.0;
  double norm = 0.0;
  for (int o = 0; o < kOctaves; ++o) {
    acc += amp * value_noise(seed + static_cast<std::uint64_t>(o) * 0x632BE59BD9B4E019ULL, x * freq, y * freq);
    norm += amp;
    amp *= kGain;
    freq *= kLacunarity;
  }
  return acc / norm;
}

Mask mask_from_alpha(const GrayMap& alpha, double opacity) {
  Mask mask(alpha.width(), alpha.height());
  const double threshold = 0.5 * opacity;
  for (std::size_t i = 0; i < alpha.size(); ++i) mask[i] = alpha[i] > threshold ? 1.0 : 0.0;
  return mask;
}

LabeledScene generate(const SceneSpec& spec) {
  spec.validate();
  const int w = spec.width;
  const int h = spec.height;
  Rng rng(derive_seed(spec.seed, "scene"));

  // Background palette: cool sky at the top, darker terrain at the bottom.
  const Rgb top{rng.uniform(0.25, 0.45), rng.uniform(0.40, 0.60), rng.uniform(0.65, 0.90)};
  const Rgb bottom{rng.uniform(0.12, 0.35), rng.uniform(0.20, 0.42), rng.uniform(0.08, 0.25)};
  const double texture = spec.background == BackgroundStyle::Textured ? 0.35 : 0.08;
  const double texture_scale = rng.uniform(6.0, 12.0);
  const std::uint64_t bg_seed = derive_seed(spec.seed, "background-noise");
  const std::uint64_t tint_seed = derive_seed(spec.seed, "background-tint");

  ImageRGB image(w, h);
  for (int y = 0; y < h; ++y) {
    const double t = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
    for (int x = 0; x < w; ++x) {
      const double n = fractal_noise(bg_seed, x / texture_scale, y / texture_scale);
      const double tint = fractal_noise(tint_seed, x / texture_scale, y / texture_scale);
      const double lum = 1.0 + texture * (2.0 * n - 1.0);
      for (int c = 0; c < 3; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        double v = (top[cc] + (bottom[cc] - top[cc]) * t) * lum;
        if (c == 1) v += 0.5 * texture * (tint - 0.5) * 0.3;
        image.channel(c)(x, y) = std::clamp(v, 0.0, 1.0);
      }
    }
  }

  GrayMap alpha(w, h, 0.0);
  const double gray = rng.uniform(0.78, 0.95);
  const Rgb smoke{gray - 0.02, gray, std::min(gray + 0.03, 1.0)};
  if (spec.opacity > 0.0) {
    GrayMap clear(w, h, 1.0);  // product of (1 - alpha_j)
    for (int p = 0; p < spec.plumes; ++p) {
      const double x0 = rng.uniform(0.25, 0.75) * w;
      const double y0 = rng.uniform(0.80, 1.00) * h;
      const double rise = rng.uniform(0.45, 0.80) * h;
      const double half_width = rng.uniform(0.16, 0.30) * w;
      const double lean = rng.uniform(-0.35, 0.35);
      const double scale = rng.uniform(7.0, 12.0);
      const std::uint64_t plume_seed = derive_seed(spec.seed, "plume", static_cast<std::uint64_t>(p));
      for (int y = 0; y < h; ++y) {
        const double v = (y0 - y) / rise;  // 0 at the source, 1 at the crown
        if (v <= 0.0 || v >= 1.05) continue;
        // Teardrop: narrow at the source, widest high up, rounded crown.
        const double radius = half_width * 2.0 * std::sqrt(v * (1.05 - v));
        const double centre = x0 + lean * (y0 - y);
        for (int x = 0; x < w; ++x) {
          const double d = (x - centre) / radius;
          const double envelope = std::pow(std::max(0.0, 1.0 - d * d), 0.8);
          if (envelope <= 0.0) continue;
          const double n = fractal_noise(plume_seed, x / scale, y / scale - 0.7 * v);
          const double density = envelope * (0.35 + 0.65 * n);
          const double a = spec.opacity * smoothstep(0.10, 0.55, density);
          clear(x, y) *= 1.0 - a;
        }
      }
    }
    for (std::size_t i = 0; i < alpha.size(); ++i) alpha[i] = 1.0 - clear[i];
  }

  const std::uint64_t shade_seed = derive_seed(spec.seed, "smoke-shade");
  const std::uint64_t haze_seed = derive_seed(spec.seed, "haze");
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double a = alpha(x, y);
      const double shade = 0.9 + 0.1 * fractal_noise(shade_seed, x / 8.0, y / 8.0);
      double veil = 0.0;
      if (spec.haze > 0.0) {
        const double outside =
            spec.opacity > 0.0 ? 1.0 - std::min(1.0, a / (0.5 * spec.opacity)) : 1.0;
        veil = spec.haze * (0.5 + 0.5 * fractal_noise(haze_seed, x / 16.0, y / 16.0)) * outside;
      }
      for (int c = 0; c < 3; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        double v = image.channel(c)(x, y);
        v = (1.0 - a) * v + a * smoke[cc] * shade;
        v = (1.0 - veil) * v + veil * 0.9;
        image.channel(c)(x, y) = std::clamp(v, 0.0, 1.0);
      }
    }
  }

  LabeledScene scene;
  scene.spec = spec;
  scene.image = std::move(image);
  scene.mask = mask_from_alpha(alpha, spec.opacity);
  scene.alpha = std::move(alpha);
  return scene;
}

std::vector<LabeledScene> generate_set(std::size_t count, int size, std::uint64_t root_seed) {
  std::vector<LabeledScene> scenes(count);
  parallel_for(count, [&](std::size_t i) {
    scenes[i] = generate(SceneSpec::random(derive_seed(root_seed, "scene", i), size));
  });
  return scenes;
}

std::string index_name(const std::string& prefix, int index, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d", index);
  return prefix + "_" + buf + ext;
}

namespace {

constexpr const char* kManifestHeader = "# smokelens-dataset v1";
constexpr const char* kManifestColumns =
    "# index seed width height plumes opacity background haze";

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_dataset(std::span<const LabeledScene> scenes, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  std::ostringstream manifest;
  manifest << kManifestHeader << "\n" << kManifestColumns << "\n";
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto idx = static_cast<int>(i);
    const SceneSpec& s = scenes[i].spec;
    write_png_rgb(dir / index_name("image", idx), scenes[i].image);
    write_png_gray(dir / index_name("mask", idx), scenes[i].mask);
    manifest << idx << ' ' << s.seed << ' ' << s.width << ' ' << s.height << ' ' << s.plumes << ' '
             << format_double(s.opacity) << ' ' << to_string(s.background) << ' '
             << format_double(s.haze) << "\n";
  }
  std::ofstream out(dir / "manifest.txt", std::ios::binary);
  if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
  out << manifest.str();
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.txt";
  std::ifstream in(manifest_path);
  if (!in) throw CorruptDataset("missing manifest: " + manifest_path.string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw CorruptDataset("unrecognized manifest header in " + manifest_path.string());
  }
  Dataset data;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    int idx = 0;
    SceneSpec s;
    std::string style;
    if (!(fields >> idx >> s.seed >> s.width >> s.height >> s.plumes >> s.opacity >> style >> s.haze)) {
      throw CorruptDataset("malformed manifest line " + std::to_string(line_no));
    }
    try {
      s.background = parse_background(style);
    } catch (const InvalidArgument&) {
      throw CorruptDataset("bad background style on manifest line " + std::to_string(line_no));
    }
    const fs::path image_path = dir / index_name("image", idx);
    const fs::path mask_path = dir / index_name("mask", idx);
    if (!fs::exists(image_path) || !fs::exists(mask_path)) {
      throw CorruptDataset("missing image/mask pair for index " + std::to_string(idx));
    }
    ImageRGB image = read_png_rgb(image_path);
    Mask mask = binarize(read_png_gray(mask_path));
    if (image.width() != s.width || image.height() != s.height || !mask.same_size(image.r())) {
      throw CorruptDataset("size mismatch for index " + std::to_string(idx));
    }
    data.specs.push_back(s);
    data.images.push_back(std::move(image));
    data.masks.push_back(std::move(mask));
    data.indices.push_back(idx);
  }
  return data;
}

}  // namespace smokelens::synth
