#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "smokelens/errors.hpp"
#include "smokelens/losses.hpp"

using namespace smokelens;
using namespace smokelens::diff;
using namespace smokelens::losses;

namespace {

Tensor random_mask_tensor(Rng& rng, int w, int h) {
  return Tensor::from_map(oracle::random_mask(rng, w, h));
}

double scalar_of(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x) {
  Tape tape;
  return f(tape, tape.constant(x)).item();
}

double gradient_error(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x) {
  Tape tape;
  const Var v = tape.leaf(x);
  tape.backward(f(tape, v));
  const Tensor numeric = oracle::numeric_gradient([&](const Tensor& t) { return scalar_of(f, t); }, x);
  return oracle::max_relative_error(v.grad(), numeric);
}

}  // namespace

TEST_CASE("edge weights lie in [1, 6]") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor w = edge_weights(random_mask_tensor(rng, 12, 12), 5);
    for (double v : w.values()) {
      CHECK(v >= 1.0);
      CHECK(v <= 6.0);
    }
  }
  CHECK(default_pool_size(64, 64) == 15);
  CHECK(default_pool_size(352, 352) == 31);
}

TEST_CASE("structure loss values") {
  Rng rng(2);
  // Near-perfect logits drive the loss to zero.
  const Tensor y = random_mask_tensor(rng, 8, 8);
  Tensor s(y.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) s[i] = y[i] > 0.5 ? 40.0 : -40.0;
  Tape tape;
  CHECK(structure_loss(tape.constant(s), y, 5).item() < 1e-12);

  // y = 0, s = 0: weights are all 1, CE = ln 2, IoU term 1 - 1/(0.5 N + 1).
  const Tensor zero(Shape{1, 1, 8, 8}, 0.0);
  const double expected = std::log(2.0) + 1.0 - 1.0 / (0.5 * 64.0 + 1.0);
  CHECK(structure_loss(tape.constant(zero), zero, 5).item() == doctest::Approx(expected).epsilon(1e-14));

  for (int trial = 0; trial < 10; ++trial) {
    const GrayMap logits = oracle::random_map(rng, 8, 8, -3, 3);
    const Mask m = oracle::random_mask(rng, 8, 8);
    const double got = structure_loss(tape.constant(Tensor::from_map(logits)), Tensor::from_map(m), 5).item();
    CHECK(std::abs(got - oracle::structure_loss(logits, m, 5)) < 1e-12);
    CHECK(got >= 0.0);
  }
  CHECK_THROWS_AS(structure_loss(tape.constant(zero), Tensor(Shape{1, 1, 4, 4}), 5), InvalidArgument);
}

TEST_CASE("structure loss averages over a batch") {
  Rng rng(3);
  const GrayMap l0 = oracle::random_map(rng, 8, 8, -2, 2), l1 = oracle::random_map(rng, 8, 8, -2, 2);
  const Mask m0 = oracle::random_mask(rng, 8, 8), m1 = oracle::random_mask(rng, 8, 8);
  const std::vector<GrayMap> ls{l0, l1};
  const std::vector<GrayMap> ms{m0, m1};
  Tape tape;
  const double got = structure_loss(tape.constant(Tensor::from_maps(ls)), Tensor::from_maps(ms), 5).item();
  const double want = 0.5 * (oracle::structure_loss(l0, m0, 5) + oracle::structure_loss(l1, m1, 5));
  CHECK(got == doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("KL divergence") {
  Tape tape;
  const Shape d{1, 8, 1, 1};
  CHECK(kl_standard_normal(tape.constant(Tensor(d, 0.0)), tape.constant(Tensor(d, 0.0))).item() == 0.0);
  Tensor mu(d, 0.0);
  mu[0] = 1.0;
  CHECK(kl_standard_normal(tape.constant(mu), tape.constant(Tensor(d, 0.0))).item() == doctest::Approx(0.5));
  CHECK_THROWS_AS(kl_standard_normal(tape.constant(mu), tape.constant(Tensor(Shape{1, 4, 1, 1}))), InvalidArgument);

  // Monte Carlo estimate of E_q[log q(z) - log p(z)].
  Rng rng(4);
  const Tensor m = oracle::random_tensor(rng, d, 0.5, 1.5);
  const Tensor ls = oracle::random_tensor(rng, d, -0.7, 0.3);
  const double exact = kl_standard_normal(tape.constant(m), tape.constant(ls)).item();
  double acc = 0.0;
  const int draws = 1000000;
  for (int i = 0; i < draws; ++i) {
    double term = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      const double eps = rng.normal();
      const double sigma = std::exp(ls[j]);
      const double z = m[j] + sigma * eps;
      term += -ls[j] - 0.5 * eps * eps + 0.5 * z * z;
    }
    acc += term;
  }
  CHECK(std::abs(acc / draws - exact) < 0.01 * exact);
}

TEST_CASE("coherence loss matches the quadruple loop") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    CoherenceConfig cfg;
    cfg.window = 3 + 2 * (trial % 2);
    const GrayMap s = oracle::random_map(rng, 8, 8);
    const GrayMap t = oracle::random_map(rng, 8, 8);
    Tape tape;
    const double got =
        transmission_coherence_loss(tape.constant(Tensor::from_map(s)), Tensor::from_map(t), cfg).item();
    CHECK(std::abs(got - oracle::coherence_loss(s, t, cfg)) <= 1e-10);
  }
}

TEST_CASE("coherence loss limits and symmetries") {
  Rng rng(6);
  const CoherenceConfig cfg;
  Tape tape;
  const Tensor t = Tensor::from_map(oracle::random_map(rng, 8, 8));
  CHECK(transmission_coherence_loss(tape.constant(Tensor(Shape{1, 1, 8, 8}, 0.3)), t, cfg).item() == 0.0);
  const Tensor s = Tensor::from_map(oracle::random_map(rng, 8, 8));
  CHECK(transmission_coherence_loss(tape.constant(s), Tensor(Shape{1, 1, 8, 8}, 1.0), cfg).item() == 0.0);
  Tensor flipped = s;
  for (double& v : flipped.values()) v = 1.0 - v;
  const double a = transmission_coherence_loss(tape.constant(s), t, cfg).item();
  const double b = transmission_coherence_loss(tape.constant(flipped), t, cfg).item();
  CHECK(std::abs(a - b) < 1e-14);

  const BilateralWeights bw = bilateral_weights(t, cfg);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    double z = 0.0;
    for (const Tensor& w : bw.weight) z += w[i];
    CHECK(std::abs(z - 1.0) < 1e-12);
  }
  CoherenceConfig bad;
  bad.window = 4;
  CHECK_THROWS_AS(bilateral_weights(t, bad), InvalidArgument);
}

TEST_CASE("calibrated entropy") {
  Tape tape;
  const Shape s{1, 1, 4, 4};
  const Tensor u(s, 0.3);
  for (EntropyForm form : {EntropyForm::TwoClass, EntropyForm::SingleTerm}) {
    const double v = calibrated_entropy_loss(tape.constant(Tensor(s, 0.0)), u, form).item();
    CHECK(v == doctest::Approx(form == EntropyForm::TwoClass ? std::log(2.0) : 0.5 * std::log(2.0)));
  }
  CHECK(calibrated_entropy_loss(tape.constant(Tensor(s, 8.0)), Tensor(s, 0.01), EntropyForm::TwoClass).item() <
        1e-100);

  // Matches the direct formula on a random map.
  Rng rng(7);
  const Tensor logits = oracle::random_tensor(rng, s, -3, 3);
  const Tensor up = oracle::random_tensor(rng, s, 0.0, 0.7);
  double want = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double p = oracle::sigmoid(logits[i] / std::max(up[i], 1e-3));
    if (p > 0.0) want -= p * std::log(p);
    if (p < 1.0) want -= (1 - p) * std::log(1 - p);
  }
  CHECK(calibrated_entropy_loss(tape.constant(logits), up, EntropyForm::TwoClass).item() ==
        doctest::Approx(want / 16.0).epsilon(1e-12));

  // Larger temperatures soften, so the per-pixel loss never drops.
  for (int trial = 0; trial < 50; ++trial) {
    const double logit = rng.uniform(-4, 4);
    double prev = -1.0;
    for (double temp : {0.1, 0.5, 1.0}) {
      const Tensor one(Shape{}, logit);
      const double v = calibrated_entropy_loss(tape.constant(one), Tensor(Shape{}, temp), EntropyForm::TwoClass).item();
      CHECK(v >= prev);
      prev = v;
    }
  }
  CHECK_THROWS_AS(calibrated_entropy_loss(tape.constant(logits), Tensor(s, -0.1), EntropyForm::TwoClass),
                  InvalidArgument);
}

TEST_CASE("consistency and total loss") {
  Rng rng(8);
  const Shape s{1, 1, 6, 6};
  const Tensor up = oracle::random_tensor(rng, s, 0, 0.7);
  const Tensor ua = oracle::random_tensor(rng, s, 0, 0.7);
  Tape tape;
  CHECK(uncertainty_consistency_loss(up, ua, tape.constant(up), tape.constant(ua)).item() == 0.0);
  Tensor shifted = up;
  for (double& v : shifted.values()) v += 2.0;
  CHECK(uncertainty_consistency_loss(up, ua, tape.constant(shifted), tape.constant(ua)).item() ==
        doctest::Approx(2.0));
  CHECK_THROWS_AS(uncertainty_consistency_loss(up, ua, tape.constant(Tensor(Shape{1, 1, 2, 2})), tape.constant(ua)),
                  InvalidArgument);

  const Var one = tape.constant(Tensor::scalar(1.0));
  CHECK(total_generator_loss({one, one, one}, LossWeights{}).item() == doctest::Approx(1.31).epsilon(1e-15));
  const Var zero = tape.constant(Tensor::scalar(0.0));
  CHECK(total_generator_loss({zero, zero, zero}, LossWeights{}).item() == 0.0);
  CHECK(total_generator_loss({one, std::nullopt, std::nullopt}, LossWeights{}).item() == 1.0);
  CHECK(total_generator_loss({one, one, one}, LossWeights{0.0, 0.0}).item() == 1.0);
}

TEST_CASE("loss gradients match central differences") {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor y = random_mask_tensor(rng, 8, 8);
    const Tensor t = Tensor::from_map(oracle::random_map(rng, 8, 8));
    const Tensor up = oracle::random_tensor(rng, y.shape(), 0.05, 0.7);
    const Tensor ua = oracle::random_tensor(rng, y.shape(), 0.0, 0.7);
    const Tensor logits = oracle::random_tensor(rng, y.shape(), -2, 2);
    const Tensor latent = oracle::random_tensor(rng, Shape{2, 8, 1, 1}, -1, 1);

    CHECK(gradient_error([&](Tape&, const Var& v) { return structure_loss(v, y, 5); }, logits) < 1e-5);
    CHECK(gradient_error([&](Tape& tp, const Var& v) { return kl_standard_normal(v, tp.constant(latent)); }, latent) <
          1e-5);
    CHECK(gradient_error([&](Tape& tp, const Var& v) { return kl_standard_normal(tp.constant(latent), v); }, latent) <
          1e-5);
    CHECK(gradient_error(
              [&](Tape&, const Var& v) { return transmission_coherence_loss(sigmoid(v), t, CoherenceConfig{3}); },
              logits) < 1e-5);
    CHECK(gradient_error([&](Tape&, const Var& v) { return calibrated_entropy_loss(v, up, EntropyForm::TwoClass); },
                         logits) < 1e-5);
    CHECK(gradient_error([&](Tape&, const Var& v) { return calibrated_entropy_loss(v, up, EntropyForm::SingleTerm); },
                         logits) < 1e-5);
    CHECK(gradient_error(
              [&](Tape& tp, const Var& v) { return uncertainty_consistency_loss(up, ua, v, tp.constant(ua)); }, up) <
          1e-6);
  }
}
