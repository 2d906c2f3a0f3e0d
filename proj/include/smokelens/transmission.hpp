#pragma once

#include "smokelens/image.hpp"

namespace smokelens {

// Per-pixel medium transmission in [0,1]; low where haze or smoke veils the scene.
using TransmissionMap = GrayMap;

// Lower bound on every atmospheric-light channel, keeps I/A finite on dark frames.
inline constexpr double kAtmosphericFloor = 0.05;

struct AtmosphericLight {
  double r = 1.0;
  double g = 1.0;
  double b = 1.0;

  double channel(int c) const { return c == 0 ? r : (c == 1 ? g : b); }
  bool operator==(const AtmosphericLight&) const = default;
};

struct TransmissionConfig {
  int patch = 15;            // dark-channel window side, odd
  double fraction = 0.001;   // share of brightest dark-channel pixels considered for A
  int radius = 8;            // guided-filter radius
  double eps = 1e-3;         // guided-filter regularizer

  // patch 5 for frames up to 64x64, 15 above.
  static TransmissionConfig for_size(int width, int height);
};

// min over channels of min over the k x k patch.
GrayMap dark_channel(const ImageRGB& image, int k);

// Among the ceil(fraction * N) pixels with the largest dark-channel value,
// the one with the highest mean(R,G,B) wins; ties go to the lowest row-major
// index. Each channel is floored at kAtmosphericFloor.
AtmosphericLight atmospheric_light(const ImageRGB& image, const GrayMap& dark,
                                   double fraction = 0.001);

// T(m) = 1 - min_c min_{n in K(m)} clamp(I^c(n) / A^c, 0, 1).
TransmissionMap transmission_raw(const ImageRGB& image, const AtmosphericLight& light, int k);

// Box-window linear-model filter: a = cov(I,p)/(var(I)+eps), b = mean(p) - a mean(I),
// q = mean(a) I + mean(b), every mean over a (2r+1)^2 clamp-to-edge window.
GrayMap guided_filter(const GrayMap& guide, const GrayMap& input, int radius, double eps);

struct TransmissionEstimate {
  TransmissionMap refined;
  TransmissionMap raw;
  GrayMap dark;
  AtmosphericLight light;
};

// dark channel -> atmospheric light -> raw transmission -> guided filter on the
// intensity image, re-clamped to [0,1].
TransmissionEstimate estimate_transmission_detailed(const ImageRGB& image,
                                                    const TransmissionConfig& cfg);
TransmissionMap estimate_transmission(const ImageRGB& image, const TransmissionConfig& cfg);

}  // namespace smokelens
