#pragma once

#include <optional>
#include <vector>

#include "smokelens/diff.hpp"

namespace smokelens::losses {

using diff::Tensor;
using diff::Var;

struct CoherenceConfig {
  int window = 5;         // odd side of K_m
  double sigma_p = 5.0;   // spatial bandwidth, pixels
  double sigma_t = 0.1;   // transmission bandwidth
};

struct LossWeights {
  double lambda1 = 0.3;   // transmission coherence
  double lambda2 = 0.01;  // (calibrated) entropy
};

// How the two-class sum in the entropy regularizer is read.
enum class EntropyForm {
  TwoClass,     // -p ln p - (1-p) ln(1-p)
  SingleTerm,   // -p ln p
};

// Floor on the temperature in the calibrated entropy loss.
inline constexpr double kTemperatureFloor = 1e-3;

// Edge-aware pixel weight 1 + 5 |avgpool_k(y) - y| for each sample of y [N,1,H,W].
Tensor edge_weights(const Tensor& mask, int pool);

// Default pool side: 31 at native resolution, 15 for frames up to 64x64.
int default_pool_size(int width, int height);

// Weighted BCE (normalized by the weight sum) plus weighted soft IoU
// 1 - (inter + 1) / (union - inter + 1), averaged over the batch.
Var structure_loss(const Var& logits, const Tensor& mask, int pool);
Var structure_loss(const Var& logits, const Tensor& mask);

// 0.5 sum(mu^2 + e^{2 log_sigma} - 1 - 2 log_sigma) per sample, averaged over the batch.
Var kl_standard_normal(const Var& mu, const Var& log_sigma);

// Normalized bilateral weights W(m, m+offset) for every offset of the window,
// in row-major offset order. Offsets falling outside the raster get weight 0
// and are excluded from the normalization.
struct BilateralWeights {
  std::vector<int> dy;
  std::vector<int> dx;
  std::vector<Tensor> weight;  // each shaped like the transmission map
};
BilateralWeights bilateral_weights(const Tensor& transmission, const CoherenceConfig& cfg);

// (1/N) sum_m sum_{n in K_m} (1 - T(m)) W(m,n) |s(m) - s(n)|, averaged over the
// batch. T is a constant; gradient reaches s_prob only.
Var transmission_coherence_loss(const Var& s_prob, const Tensor& transmission,
                                const CoherenceConfig& cfg);

// Mean entropy of sigmoid(s / max(U_p, floor)). U_p is a constant.
Var calibrated_entropy_loss(const Var& logits, const Tensor& total_uncertainty,
                            EntropyForm form = EntropyForm::TwoClass);
// Mean entropy of sigmoid(s), the untempered regularizer.
Var entropy_loss(const Var& logits, EntropyForm form = EntropyForm::TwoClass);

// 0.5 (mse(U_p, Up_hat) + mse(U_a, Ua_hat)); targets are constants.
Var uncertainty_consistency_loss(const Tensor& total, const Tensor& aleatoric,
                                 const Var& total_hat, const Var& aleatoric_hat);

struct GeneratorLossParts {
  Var likelihood;                // structure + KL
  std::optional<Var> coherence;  // absent: term disabled
  std::optional<Var> entropy;
};
Var total_generator_loss(const GeneratorLossParts& parts, const LossWeights& weights);

}  // namespace smokelens::losses
