#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "doctest.h"
#include "smokelens/rng.hpp"
#include "smokelens/errors.hpp"
#include "smokelens/synth.hpp"

using namespace smokelens;
using namespace smokelens::synth;
namespace fs = std::filesystem;

namespace {

std::uint64_t image_hash(const ImageRGB& img) {
  std::uint64_t h = 1469598103934665603ULL;
  for (int c = 0; c < 3; ++c) {
    for (double v : img.channel(c).values()) {
      const auto q = static_cast<std::uint64_t>(v * 65535.0);
      h = (h ^ q) * 1099511628211ULL;
    }
  }
  return h;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("smokelens_synth_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("noise stays in the unit interval") {
  for (int i = 0; i < 2000; ++i) {
    const double x = i * 0.137 - 50.0;
    const double y = i * 0.071 - 20.0;
    const double v = value_noise(9, x, y);
    const double f = fractal_noise(9, x, y);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
  }
  // Lattice points reproduce their own hash value; between them it is continuous.
  CHECK(std::abs(value_noise(3, 2.0, 5.0) - value_noise(3, 2.0 + 1e-9, 5.0)) < 1e-6);
}

TEST_CASE("spec ranges and validation") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const SceneSpec spec = SceneSpec::random(s);
    CHECK(spec.opacity >= SceneSpec::kMinOpacity);
    CHECK(spec.opacity <= SceneSpec::kMaxOpacity);
    CHECK(spec.haze >= 0.0);
    CHECK(spec.haze <= SceneSpec::kMaxHaze);
    CHECK((spec.plumes == 1 || spec.plumes == 2));
    spec.validate();
  }
  SceneSpec bad;
  bad.opacity = 0.95;
  CHECK_THROWS_AS(generate(bad), InvalidArgument);
  bad = SceneSpec{};
  bad.haze = 0.4;
  CHECK_THROWS_AS(generate(bad), InvalidArgument);
  bad = SceneSpec{};
  bad.plumes = 3;
  CHECK_THROWS_AS(generate(bad), InvalidArgument);
  CHECK_THROWS_AS(parse_background("stripes"), InvalidArgument);
  CHECK(parse_background(to_string(BackgroundStyle::Textured)) == BackgroundStyle::Textured);
}

TEST_CASE("scenes are deterministic and distinct across seeds") {
  const SceneSpec spec = SceneSpec::random(42);
  const LabeledScene a = generate(spec);
  const LabeledScene b = generate(spec);
  CHECK(a.image == b.image);
  CHECK(a.mask == b.mask);
  CHECK(a.alpha == b.alpha);

  std::set<std::uint64_t> hashes;
  for (std::uint64_t s = 1000; s < 1100; ++s) hashes.insert(image_hash(generate(SceneSpec::random(s)).image));
  CHECK(hashes.size() == 100);
}

TEST_CASE("mask follows alpha and opacity zero draws no smoke") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const LabeledScene sc = generate(SceneSpec::random(s));
    CHECK(sc.mask == mask_from_alpha(sc.alpha, sc.spec.opacity));
    CHECK(sc.image.is_unit_range());
    for (double v : sc.mask.values()) CHECK((v == 0.0 || v == 1.0));
  }
  SceneSpec spec = SceneSpec::random(5);
  spec.haze = 0.0;
  spec.opacity = 0.0;
  const LabeledScene empty = generate(spec);
  CHECK(empty.mask == Mask(spec.width, spec.height, 0.0));
  CHECK(empty.alpha == GrayMap(spec.width, spec.height, 0.0));
  // Where a smoky version of the same scene has no smoke, both images agree.
  spec.opacity = 0.7;
  const LabeledScene smoky = generate(spec);
  std::size_t clear = 0;
  for (std::size_t i = 0; i < smoky.alpha.size(); ++i) {
    if (smoky.alpha[i] != 0.0) continue;
    ++clear;
    for (int c = 0; c < 3; ++c) CHECK(smoky.image.channel(c)[i] == empty.image.channel(c)[i]);
  }
  CHECK(clear > 0);
}

TEST_CASE("dense smoke is brighter than its surroundings") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    SceneSpec spec = SceneSpec::random(s);
    spec.opacity = 0.9;
    spec.haze = 0.0;
    const LabeledScene sc = generate(spec);
    const GrayMap lum = sc.image.intensity();
    double in = 0, out = 0;
    int nin = 0, nout = 0;
    for (std::size_t i = 0; i < lum.size(); ++i) {
      if (sc.mask[i] > 0.5) {
        in += lum[i];
        ++nin;
      } else {
        out += lum[i];
        ++nout;
      }
    }
    REQUIRE(nin > 0);
    CHECK(in / nin > out / nout + 0.05);
  }
}

TEST_CASE("dataset round trip") {
  const fs::path dir = scratch("roundtrip");
  const auto scenes = generate_set(5, 32, 3);
  write_dataset(scenes, dir);
  const Dataset ds = read_dataset(dir);
  REQUIRE(ds.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(ds.specs[i] == scenes[i].spec);
    CHECK(ds.masks[i] == scenes[i].mask);
    CHECK(ds.indices[i] == static_cast<int>(i));
    for (int c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < scenes[i].image.pixel_count(); ++p) {
        CHECK(std::abs(ds.images[i].channel(c)[p] - scenes[i].image.channel(c)[p]) <= 1.0 / 255.0);
      }
    }
  }
  fs::remove(dir / index_name("image", 3));
  CHECK_THROWS_AS(read_dataset(dir), CorruptDataset);
  fs::remove(dir / "manifest.txt");
  CHECK_THROWS_AS(read_dataset(dir), CorruptDataset);
  fs::remove_all(dir);
}

TEST_CASE("corrupt manifests are rejected") {
  const fs::path dir = scratch("corrupt");
  write_dataset(generate_set(2, 16, 1), dir);
  {
    std::ofstream out(dir / "manifest.txt", std::ios::app);
    out << "7 not-a-number\n";
  }
  CHECK_THROWS_AS(read_dataset(dir), CorruptDataset);
  {
    std::ofstream out(dir / "manifest.txt");
    out << "# something else\n";
  }
  CHECK_THROWS_AS(read_dataset(dir), CorruptDataset);
  fs::remove_all(dir);
}

TEST_CASE("generation set is seeded per index and fast") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto scenes = generate_set(200, 64, 1);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 10.0);
  CHECK(scenes[17].spec == SceneSpec::random(derive_seed(1, "scene", 17), 64));
  CHECK(scenes[17].image == generate(scenes[17].spec).image);
}
