#pragma once

#include <vector>

#include "smokelens/image.hpp"

namespace smokelens {

// B probability maps from repeated stochastic forward passes over one image.
struct SampleSet {
  std::vector<GrayMap> probs;

  std::size_t count() const { return probs.size(); }
  // Throws InvalidArgument if empty, mixed sizes or any sample leaves [0,1].
  void validate() const;
};

struct UncertaintyMaps {
  GrayMap total;      // U_p = H(mean prediction)
  GrayMap aleatoric;  // U_a = mean_b H(p_b)
  GrayMap epistemic;  // U_e = max(U_p - U_a, 0)
};

GrayMap mean_prediction(const SampleSet& set);
UncertaintyMaps decompose(const SampleSet& set);

}  // namespace smokelens
