#pragma once

// Desk-scale segmentation model: a latent-variable generator with dropout, an
// inference net for the latent posterior, and a two-headed uncertainty
// regressor, plus the training loop and checkpoint codec.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "smokelens/diff.hpp"
#include "smokelens/image.hpp"
#include "smokelens/losses.hpp"
#include "smokelens/rng.hpp"
#include "smokelens/transmission.hpp"
#include "smokelens/uncertainty.hpp"

namespace smokelens::nn {

using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;

  Param() = default;
  Param(std::string name, Tensor value);
  void zero_grad();
};

// Puts parameters on a tape (as leaves when trainable) and copies their
// gradients back after backward().
class Binder {
 public:
  Binder(Tape& tape, bool trainable) : tape_(tape), trainable_(trainable) {}
  Var operator()(Param& p);
  void accumulate_grads();
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  bool trainable_;
  std::unordered_map<Param*, Var> bound_;
};

// Dropout source: a seeded RNG draws keep-masks; without one, activations are
// scaled by the keep probability instead.
struct DropoutMode {
  Rng* rng = nullptr;
  double rate = 0.3;
};

enum class NormMode {
  Train,       // batch statistics, running averages updated
  BatchStats,  // batch statistics, running averages untouched
  Running,     // running averages
};

struct Conv2d {
  Param weight;
  Param bias;
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int kernel, int stride, Rng& rng);
  Var operator()(Binder& bind, const Var& x);
  void collect(std::vector<Param*>& out) { out.push_back(&weight); out.push_back(&bias); }
};

struct BatchNorm {
  Param gamma;
  Param beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  BatchNorm(const std::string& name, int channels);
  Var operator()(Binder& bind, const Var& x, NormMode mode);
  void collect(std::vector<Param*>& out) { out.push_back(&gamma); out.push_back(&beta); }
};

struct ModelConfig {
  int latent_dim = 8;
  double dropout = 0.3;
  double leaky_slope = 0.01;
};

// Three stride-2 encoder blocks (8/16/32), latent tiled and fused at the
// deepest level, dropout on every skip branch, nearest-upsample decoder.
struct GeneratorNet {
  Conv2d enc1, enc2, enc3, fuse, skip1, skip2, skip3, dec2, dec1, head;
  double slope = 0.01;

  static constexpr int kDownsample = 8;

  GeneratorNet() = default;
  GeneratorNet(const ModelConfig& cfg, Rng& rng);
  Var forward(Binder& bind, const Var& x, const Var& z, const DropoutMode& dropout);
  std::vector<Param*> params();
};

// Five convolutions, global average pooling, then mean and log-sigma heads.
struct InferenceNet {
  Conv2d c1, c2, c3, c4, c5, mu_head, log_sigma_head;
  double slope = 0.01;

  InferenceNet() = default;
  InferenceNet(const ModelConfig& cfg, Rng& rng);
  struct Output {
    Var mu;
    Var log_sigma;
  };
  Output forward(Binder& bind, const Var& x);
  std::vector<Param*> params();
};

// Shared five-layer encoder over concat(image, probability) and two
// three-layer decoders; batch norm + LeakyReLU everywhere except each
// decoder's last layer, whose output goes through softplus.
struct UncertaintyNet {
  struct Decoder {
    Conv2d c1, c2, c3;
    BatchNorm n1, n2;
  };
  Conv2d e1, e2, e3, e4, e5;
  BatchNorm b1, b2, b3, b4, b5;
  Decoder total, aleatoric;
  double slope = 0.01;

  static constexpr int kDownsample = 4;

  UncertaintyNet() = default;
  UncertaintyNet(const ModelConfig& cfg, Rng& rng);
  struct Output {
    Var total;
    Var aleatoric;
  };
  Output forward(Binder& bind, const Var& image, const Var& prob, NormMode mode);
  std::vector<Param*> params();
  std::vector<BatchNorm*> norms();
};

struct Model {
  ModelConfig config;
  GeneratorNet generator;
  InferenceNet inference;
  UncertaintyNet uncertainty;

  static Model create(const ModelConfig& config, std::uint64_t seed);
  // Every parameter and buffer by name; names are unique.
  std::map<std::string, Tensor*> named_tensors();
};

struct TrainConfig {
  std::uint64_t seed = 1;
  int epochs = 10;
  int batch_size = 8;
  int mc_samples = 10;                 // B
  losses::LossWeights weights{};
  bool use_transmission = true;        // L_trans term
  bool use_entropy = true;             // entropy regularizer
  bool calibrated = true;              // temper the entropy by learned U_p
  losses::EntropyForm entropy_form = losses::EntropyForm::TwoClass;
  bool train_uncertainty = true;       // fit the uncertainty net each step
  double lr_generator = 2.5e-5;
  double lr_uncertainty = 1.5e-5;
  double lr_scale = 100.0;
  int lr_decay_epoch = 40;
  double lr_decay = 0.8;
  losses::CoherenceConfig coherence{};
  int pool = 0;                        // edge-weight pool side, 0 = by frame size
  ModelConfig model{};

  // key=value lines, stable order.
  std::vector<std::pair<std::string, std::string>> to_pairs() const;
  static TrainConfig from_pairs(const std::map<std::string, std::string>& pairs);
};

struct Batch {
  Tensor images;        // [N,3,H,W]
  Tensor masks;         // [N,1,H,W]
  Tensor transmission;  // [N,1,H,W]
};

Batch make_batch(std::span<const ImageRGB> images, std::span<const Mask> masks,
                 std::span<const TransmissionMap> transmission);

void check_input_size(int width, int height);

Tensor standard_normal(Shape shape, Rng& rng);
// z = mu + exp(log_sigma) * eps, elementwise.
Var reparameterize(const Var& mu, const Var& log_sigma, const Tensor& eps);

struct LatentSample {
  Tensor z;
  Tensor mu;
  Tensor log_sigma;
};
// Posterior parameters for a batch and one reparameterized draw.
LatentSample sample_latent(Model& model, const Tensor& images, Rng& rng);

struct GeneratorLossValues {
  double total = 0.0;
  double structure = 0.0;
  double kl = 0.0;
  double coherence = 0.0;
  double entropy = 0.0;
};

// L_gen for one batch with the noise streams of the given step. When
// accumulate_grads is set, d(L_gen)/d(param) is added to generator and
// inference parameter grads.
GeneratorLossValues generator_loss(Model& model, const Batch& batch, const TrainConfig& cfg,
                                   std::uint64_t step, bool accumulate_grads);

// MC targets (U_p, U_a) for a batch with B fresh (dropout, z) draws per sample.
struct UncertaintyTargets {
  Tensor total;
  Tensor aleatoric;
};
UncertaintyTargets mc_targets(Model& model, const Tensor& images, int samples, std::uint64_t seed);

// L_un for a batch; accumulates uncertainty-net grads when asked.
double uncertainty_loss(Model& model, const Batch& batch, const UncertaintyTargets& targets,
                        NormMode mode, bool accumulate_grads);

struct StepLog {
  int epoch = 0;
  std::uint64_t step = 0;
  GeneratorLossValues generator;
  double uncertainty = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<StepLog> trace;
  std::uint64_t steps = 0;
};

struct TrainingSet {
  std::vector<ImageRGB> images;
  std::vector<Mask> masks;
};

using StepCallback = std::function<void(const StepLog&)>;
TrainResult train(const TrainingSet& data, const TrainConfig& cfg, const StepCallback& on_step = {});

// Deterministic logits: z = mu, dropout replaced by its expectation.
Tensor deterministic_logits(Model& model, const Tensor& images);
// One stochastic forward pass with its own dropout masks and latent draw.
Tensor stochastic_logits(Model& model, const Tensor& images, std::uint64_t seed);

struct Prediction {
  GrayMap probability;
  GrayMap total_hat;
  GrayMap aleatoric_hat;
};
// Single sampling-free pass.
Prediction predict(Model& model, const ImageRGB& image);
// B stochastic passes for Monte Carlo uncertainty.
SampleSet sample_predictions(Model& model, const ImageRGB& image, int samples, std::uint64_t seed);

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  TrainConfig config;
  std::uint64_t steps = 0;  // noise streams are derived from (seed, step)
};

void save_checkpoint(const std::filesystem::path& path, Model& model, const TrainConfig& cfg,
                     std::uint64_t steps);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace smokelens::nn
