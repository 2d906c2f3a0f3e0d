#include "smokelens/transmission.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "smokelens/errors.hpp"

namespace smokelens {

TransmissionConfig TransmissionConfig::for_size(int width, int height) {
  TransmissionConfig cfg;
  if (std::max(width, height) <= 64) cfg.patch = 5;
  return cfg;
}

namespace {

GrayMap channel_min(const ImageRGB& image) {
  GrayMap out(image.width(), image.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::min({image.r()[i], image.g()[i], image.b()[i]});
  }
  return out;
}

}  // namespace

GrayMap dark_channel(const ImageRGB& image, int k) {
  // Both mins commute, so the channel min is taken first and filtered once.
  return min_filter(channel_min(image), k);
}

AtmosphericLight atmospheric_light(const ImageRGB& image, const GrayMap& dark,
                                   double fraction) {
  require(!image.empty(), "atmospheric_light: empty image");
  require(dark.width() == image.width() && dark.height() == image.height(),
          "atmospheric_light: dark channel size mismatch");
  require(fraction > 0.0 && fraction <= 1.0, "atmospheric_light: fraction must be in (0,1]");

  const std::size_t n = image.pixel_count();
  const auto count = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))), 1, n);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dark[a] > dark[b]; });

  std::size_t best = order[0];
  double best_intensity = -1.0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t idx = order[i];
    const double v = (image.r()[idx] + image.g()[idx] + image.b()[idx]) / 3.0;
    if (v > best_intensity || (v == best_intensity && idx < best)) {
      best_intensity = v;
      best = idx;
    }
  }
  return {std::max(image.r()[best], kAtmosphericFloor),
          std::max(image.g()[best], kAtmosphericFloor),
          std::max(image.b()[best], kAtmosphericFloor)};
}

TransmissionMap transmission_raw(const ImageRGB& image, const AtmosphericLight& light, int k) {
  GrayMap ratio(image.width(), image.height(), 1.0);
  for (int c = 0; c < 3; ++c) {
    const double a = std::max(light.channel(c), kAtmosphericFloor);
    const GrayMap& ch = image.channel(c);
    for (std::size_t i = 0; i < ratio.size(); ++i) {
      ratio[i] = std::min(ratio[i], std::clamp(ch[i] / a, 0.0, 1.0));
    }
  }
  GrayMap t = min_filter(ratio, k);
  for (double& v : t.data()) v = 1.0 - v;
  return t;
}

GrayMap guided_filter(const GrayMap& guide, const GrayMap& input, int radius, double eps) {
  require(guide.same_size(input), "guided_filter: guide and input differ in size");
  require(eps > 0.0, "guided_filter: eps must be positive");
  require(radius >= 0 && radius < std::min(guide.width(), guide.height()),
          "guided_filter: radius must be below min(width, height)");

  const int k = 2 * radius + 1;
  const std::size_t n = guide.size();
  GrayMap gg(guide.width(), guide.height());
  GrayMap gp(guide.width(), guide.height());
  for (std::size_t i = 0; i < n; ++i) {
    gg[i] = guide[i] * guide[i];
    gp[i] = guide[i] * input[i];
  }
  const GrayMap mean_g = avg_pool_same(guide, k);
  const GrayMap mean_p = avg_pool_same(input, k);
  const GrayMap mean_gg = avg_pool_same(gg, k);
  const GrayMap mean_gp = avg_pool_same(gp, k);

  GrayMap a(guide.width(), guide.height());
  GrayMap b(guide.width(), guide.height());
  for (std::size_t i = 0; i < n; ++i) {
    const double var = mean_gg[i] - mean_g[i] * mean_g[i];
    const double cov = mean_gp[i] - mean_g[i] * mean_p[i];
    a[i] = cov / (var + eps);
    b[i] = mean_p[i] - a[i] * mean_g[i];
  }
  const GrayMap mean_a = avg_pool_same(a, k);
  const GrayMap mean_b = avg_pool_same(b, k);

  GrayMap out(guide.width(), guide.height());
  for (std::size_t i = 0; i < n; ++i) out[i] = mean_a[i] * guide[i] + mean_b[i];
  return out;
}

TransmissionEstimate estimate_transmission_detailed(const ImageRGB& image,
                                                    const TransmissionConfig& cfg) {
  require(!image.empty(), "estimate_transmission: empty image");
  TransmissionEstimate est;
  est.dark = dark_channel(image, cfg.patch);
  est.light = atmospheric_light(image, est.dark, cfg.fraction);
  est.raw = transmission_raw(image, est.light, cfg.patch);
  est.refined = clamp_unit(guided_filter(image.intensity(), est.raw, cfg.radius, cfg.eps));
  return est;
}

TransmissionMap estimate_transmission(const ImageRGB& image, const TransmissionConfig& cfg) {
  return estimate_transmission_detailed(image, cfg).refined;
}

}  // namespace smokelens
