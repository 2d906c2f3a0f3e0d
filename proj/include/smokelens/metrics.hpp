#pragma once

#include <optional>
#include <span>
#include <vector>

#include "smokelens/image.hpp"

namespace smokelens::metrics {

// Mean over images of the per-pixel squared error.
double mse(const GrayMap& pred, const Mask& gt);
double mmse(std::span<const GrayMap> preds, std::span<const Mask> gts);

enum class ThresholdMode { Fixed, Adaptive };  // Adaptive: 2 * mean(pred), capped at 1

struct FMeasureOptions {
  double beta2 = 0.3;
  double threshold = 0.5;
  ThresholdMode mode = ThresholdMode::Fixed;
};

// nullopt when gt has no positive pixel; 0 when nothing is found (TP = 0).
std::optional<double> f_measure(const GrayMap& pred, const Mask& gt,
                                const FMeasureOptions& opts = {});
// Mean over images with a defined score; nullopt if none qualifies.
std::optional<double> mean_f_measure(std::span<const GrayMap> preds, std::span<const Mask> gts,
                                     const FMeasureOptions& opts = {});

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double confidence = 0.0;  // mean max(p, 1-p)
  double accuracy = 0.0;    // share of pixels whose class 1[p >= 0.5] matches gt
};

struct ReliabilityReport {
  std::vector<ReliabilityBin> bins;  // uniform on [0.5, 1]
  std::size_t total = 0;
  double ece = 0.0;
};

// Binary-pixel calibration over M confidence bins.
ReliabilityReport ece(const GrayMap& pred, const Mask& gt, int bins = 10);
// Pools the pixels of many images into one table (for reliability diagrams).
ReliabilityReport pooled_reliability(std::span<const GrayMap> preds, std::span<const Mask> gts,
                                     int bins = 10);
// Dataset metric: mean of per-image ECE.
double mean_ece(std::span<const GrayMap> preds, std::span<const Mask> gts, int bins = 10);

}  // namespace smokelens::metrics
