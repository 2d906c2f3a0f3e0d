#include "smokelens/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "smokelens/errors.hpp"

namespace smokelens::metrics {

namespace {

void check_pair(const GrayMap& pred, const Mask& gt) {
  require(!pred.empty() && pred.same_size(gt), "metrics: prediction and mask differ in size");
}

void check_lists(std::span<const GrayMap> preds, std::span<const Mask> gts) {
  require(!preds.empty(), "metrics: empty image list");
  require(preds.size() == gts.size(), "metrics: prediction and mask counts differ");
}

}  // namespace

double mse(const GrayMap& pred, const Mask& gt) {
  check_pair(pred, gt);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - gt[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

double mmse(std::span<const GrayMap> preds, std::span<const Mask> gts) {
  check_lists(preds, gts);
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc += mse(preds[i], gts[i]);
  return acc / static_cast<double>(preds.size());
}

std::optional<double> f_measure(const GrayMap& pred, const Mask& gt, const FMeasureOptions& opts) {
  check_pair(pred, gt);
  require(opts.beta2 > 0.0, "f_measure: beta^2 must be positive");
  double threshold = opts.threshold;
  if (opts.mode == ThresholdMode::Adaptive) threshold = std::min(2.0 * pred.mean(), 1.0);

  std::size_t tp = 0, fp = 0, fn = 0, positives = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool truth = gt[i] >= 0.5;
    const bool hit = pred[i] >= threshold;
    positives += truth;
    tp += truth && hit;
    fp += !truth && hit;
    fn += truth && !hit;
  }
  if (positives == 0) return std::nullopt;
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return (1.0 + opts.beta2) * precision * recall / (opts.beta2 * precision + recall);
}

std::optional<double> mean_f_measure(std::span<const GrayMap> preds, std::span<const Mask> gts,
                                     const FMeasureOptions& opts) {
  check_lists(preds, gts);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (const auto f = f_measure(preds[i], gts[i], opts)) {
      acc += *f;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return acc / static_cast<double>(n);
}

namespace {

struct BinAccumulator {
  std::vector<std::size_t> count;
  std::vector<double> confidence;
  std::vector<std::size_t> correct;

  explicit BinAccumulator(int bins)
      : count(static_cast<std::size_t>(bins)), confidence(static_cast<std::size_t>(bins)),
        correct(static_cast<std::size_t>(bins)) {}

  void add(const GrayMap& pred, const Mask& gt) {
    const auto m = static_cast<int>(count.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double p = std::clamp(pred[i], 0.0, 1.0);
      const double conf = std::max(p, 1.0 - p);
      const int bin = std::clamp(static_cast<int>(std::floor((conf - 0.5) * 2.0 * m)), 0, m - 1);
      const auto b = static_cast<std::size_t>(bin);
      const bool predicted = p >= 0.5;
      const bool truth = gt[i] >= 0.5;
      ++count[b];
      confidence[b] += conf;
      correct[b] += predicted == truth;
    }
  }

  ReliabilityReport report() const {
    ReliabilityReport r;
    const auto m = count.size();
    for (std::size_t b = 0; b < m; ++b) r.total += count[b];
    for (std::size_t b = 0; b < m; ++b) {
      ReliabilityBin bin;
      bin.lower = 0.5 + 0.5 * static_cast<double>(b) / static_cast<double>(m);
      bin.upper = 0.5 + 0.5 * static_cast<double>(b + 1) / static_cast<double>(m);
      bin.count = count[b];
      if (count[b] > 0) {
        const double n = static_cast<double>(count[b]);
        bin.confidence = confidence[b] / n;
        bin.accuracy = static_cast<double>(correct[b]) / n;
        r.ece += n / static_cast<double>(r.total) * std::abs(bin.accuracy - bin.confidence);
      }
      r.bins.push_back(bin);
    }
    return r;
  }
};

}  // namespace

ReliabilityReport ece(const GrayMap& pred, const Mask& gt, int bins) {
  require(bins >= 1, "ece: bin count must be >= 1");
  check_pair(pred, gt);
  BinAccumulator acc(bins);
  acc.add(pred, gt);
  return acc.report();
}

ReliabilityReport pooled_reliability(std::span<const GrayMap> preds, std::span<const Mask> gts,
                                     int bins) {
  require(bins >= 1, "ece: bin count must be >= 1");
  check_lists(preds, gts);
  BinAccumulator acc(bins);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    check_pair(preds[i], gts[i]);
    acc.add(preds[i], gts[i]);
  }
  return acc.report();
}

double mean_ece(std::span<const GrayMap> preds, std::span<const Mask> gts, int bins) {
  check_lists(preds, gts);
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc += ece(preds[i], gts[i], bins).ece;
  return acc / static_cast<double>(preds.size());
}

}  // namespace smokelens::metrics
