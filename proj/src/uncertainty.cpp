#include "smokelens/uncertainty.hpp"

#include <algorithm>

#include "smokelens/errors.hpp"

namespace smokelens {

void SampleSet::validate() const {
  require(!probs.empty(), "SampleSet: no samples");
  for (const GrayMap& p : probs) {
    require(p.same_size(probs.front()), "SampleSet: samples differ in size");
    require(p.is_unit_range(), "SampleSet: sample outside [0,1]");
  }
}

GrayMap mean_prediction(const SampleSet& set) {
  set.validate();
  GrayMap mean(set.probs.front().width(), set.probs.front().height());
  for (const GrayMap& p : set.probs) {
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p[i];
  }
  const double inv = 1.0 / static_cast<double>(set.count());
  for (double& v : mean.data()) v *= inv;
  return mean;
}

UncertaintyMaps decompose(const SampleSet& set) {
  UncertaintyMaps out;
  out.total = binary_entropy(mean_prediction(set));
  out.aleatoric = GrayMap(out.total.width(), out.total.height());
  for (const GrayMap& p : set.probs) {
    for (std::size_t i = 0; i < p.size(); ++i) out.aleatoric[i] += binary_entropy(p[i]);
  }
  const double inv = 1.0 / static_cast<double>(set.count());
  for (double& v : out.aleatoric.data()) v *= inv;
  out.epistemic = GrayMap(out.total.width(), out.total.height());
  for (std::size_t i = 0; i < out.total.size(); ++i) {
    out.epistemic[i] = std::max(out.total[i] - out.aleatoric[i], 0.0);
  }
  return out;
}

}  // namespace smokelens
