#include "smokelens/losses.hpp"

#include <algorithm>
#include <cmath>

#include "smokelens/errors.hpp"
#include "smokelens/image.hpp"

namespace smokelens::losses {

namespace {

void require_same(const diff::Shape& a, const diff::Shape& b, const char* who) {
  if (!(a == b)) throw InvalidArgument(std::string(who) + ": size mismatch");
}

Var konst(const Var& like, Tensor t) { return like.tape().constant(std::move(t)); }

}  // namespace

int default_pool_size(int width, int height) {
  return std::max(width, height) <= 64 ? 15 : 31;
}

Tensor edge_weights(const Tensor& mask, int pool) {
  const diff::Shape s = mask.shape();
  require(s.c == 1, "edge_weights: mask must have one channel");
  Tensor w(s);
  for (int n = 0; n < s.n; ++n) {
    const GrayMap y = mask.to_map(n, 0);
    const GrayMap pooled = avg_pool_same(y, pool);
    for (std::size_t i = 0; i < y.size(); ++i) {
      w[w.offset(n, 0, 0, 0) + i] = 1.0 + 5.0 * std::abs(pooled[i] - y[i]);
    }
  }
  return w;
}

Var structure_loss(const Var& logits, const Tensor& mask) {
  return structure_loss(logits, mask, default_pool_size(mask.shape().w, mask.shape().h));
}

Var structure_loss(const Var& logits, const Tensor& mask, int pool) {
  require_same(logits.shape(), mask.shape(), "structure_loss");
  const diff::Shape s = mask.shape();
  const Tensor w = edge_weights(mask, pool);
  Tensor wy(s);
  Tensor w_sum(diff::Shape{s.n, 1, 1, 1});
  Tensor wy_sum(diff::Shape{s.n, 1, 1, 1});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t o = static_cast<std::size_t>(n) * plane + i;
      wy[o] = w[o] * mask[o];
      w_sum[static_cast<std::size_t>(n)] += w[o];
      wy_sum[static_cast<std::size_t>(n)] += wy[o];
    }
  }
  const Var W = konst(logits, w);
  const Var Y = konst(logits, mask);
  const Var WY = konst(logits, wy);

  // BCE with logits: softplus(s) - y s.
  const Var ce = diff::sub(diff::softplus(logits), diff::mul(logits, Y));
  const Var bce = diff::div(diff::sum_per_sample(diff::mul(ce, W)), konst(logits, w_sum));

  const Var p = diff::sigmoid(logits);
  const Var inter = diff::sum_per_sample(diff::mul(p, WY));
  const Var uni = diff::add(diff::sum_per_sample(diff::mul(p, W)), konst(logits, wy_sum));
  const Var iou = diff::rsub_scalar(
      1.0, diff::div(diff::add_scalar(inter, 1.0), diff::add_scalar(diff::sub(uni, inter), 1.0)));

  return diff::mean(diff::add(bce, iou));
}

Var kl_standard_normal(const Var& mu, const Var& log_sigma) {
  if (!(mu.shape() == log_sigma.shape())) {
    throw InvalidArgument("kl_standard_normal: dimension mismatch");
  }
  const Var var = diff::exp(diff::mul_scalar(log_sigma, 2.0));
  const Var terms = diff::sub(diff::add_scalar(diff::add(diff::square(mu), var), -1.0),
                              diff::mul_scalar(log_sigma, 2.0));
  const double batch = static_cast<double>(std::max(mu.shape().n, 1));
  return diff::mul_scalar(diff::sum(terms), 0.5 / batch);
}

BilateralWeights bilateral_weights(const Tensor& transmission, const CoherenceConfig& cfg) {
  require(cfg.window >= 1 && cfg.window % 2 == 1, "coherence: window must be odd");
  require(cfg.sigma_p > 0.0 && cfg.sigma_t > 0.0, "coherence: bandwidths must be positive");
  const diff::Shape s = transmission.shape();
  const int r = cfg.window / 2;
  const double inv_p = 1.0 / (2.0 * cfg.sigma_p * cfg.sigma_p);
  const double inv_t = 1.0 / (2.0 * cfg.sigma_t * cfg.sigma_t);

  BilateralWeights out;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      out.dy.push_back(dy);
      out.dx.push_back(dx);
      Tensor w(s);
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          for (int y = 0; y < s.h; ++y) {
            const int yy = y + dy;
            if (yy < 0 || yy >= s.h) continue;
            for (int x = 0; x < s.w; ++x) {
              const int xx = x + dx;
              if (xx < 0 || xx >= s.w) continue;
              const double dt = transmission.at(n, c, y, x) - transmission.at(n, c, yy, xx);
              w.at(n, c, y, x) = std::exp(-static_cast<double>(dy * dy + dx * dx) * inv_p - dt * dt * inv_t);
            }
          }
        }
      }
      out.weight.push_back(std::move(w));
    }
  }
  // The centre offset is always in range, so every normalizer is >= 1.
  for (std::size_t i = 0; i < transmission.numel(); ++i) {
    double z = 0.0;
    for (const Tensor& w : out.weight) z += w[i];
    for (Tensor& w : out.weight) w[i] /= z;
  }
  return out;
}

Var transmission_coherence_loss(const Var& s_prob, const Tensor& transmission,
                                const CoherenceConfig& cfg) {
  require_same(s_prob.shape(), transmission.shape(), "transmission_coherence_loss");
  const BilateralWeights bw = bilateral_weights(transmission, cfg);
  std::optional<Var> total;
  for (std::size_t k = 0; k < bw.weight.size(); ++k) {
    if (bw.dy[k] == 0 && bw.dx[k] == 0) continue;  // D(m,m) = 0
    Tensor coeff = bw.weight[k];
    for (std::size_t i = 0; i < coeff.numel(); ++i) coeff[i] *= 1.0 - transmission[i];
    const Var d = diff::abs(diff::sub(diff::shift(s_prob, bw.dy[k], bw.dx[k]), s_prob));
    const Var term = diff::sum(diff::mul(d, konst(s_prob, std::move(coeff))));
    total = total ? diff::add(*total, term) : term;
  }
  if (!total) return konst(s_prob, Tensor::scalar(0.0));
  return diff::mul_scalar(*total, 1.0 / static_cast<double>(s_prob.numel()));
}

namespace {

Var entropy_of_logits(const Var& t, EntropyForm form) {
  // With p = sigmoid(t): -p ln p - (1-p) ln(1-p) = softplus(t) - p t,
  // and -p ln p = p (softplus(t) - t).
  const Var p = diff::sigmoid(t);
  const Var sp = diff::softplus(t);
  if (form == EntropyForm::TwoClass) return diff::mean(diff::sub(sp, diff::mul(p, t)));
  return diff::mean(diff::mul(p, diff::sub(sp, t)));
}

}  // namespace

Var calibrated_entropy_loss(const Var& logits, const Tensor& total_uncertainty,
                            EntropyForm form) {
  require_same(logits.shape(), total_uncertainty.shape(), "calibrated_entropy_loss");
  Tensor inv_temp(total_uncertainty.shape());
  for (std::size_t i = 0; i < inv_temp.numel(); ++i) {
    const double u = total_uncertainty[i];
    if (!(u >= 0.0)) throw InvalidArgument("calibrated_entropy_loss: negative uncertainty");
    inv_temp[i] = 1.0 / std::max(u, kTemperatureFloor);
  }
  return entropy_of_logits(diff::mul(logits, konst(logits, std::move(inv_temp))), form);
}

Var entropy_loss(const Var& logits, EntropyForm form) { return entropy_of_logits(logits, form); }

Var uncertainty_consistency_loss(const Tensor& total, const Tensor& aleatoric,
                                 const Var& total_hat, const Var& aleatoric_hat) {
  require_same(total.shape(), total_hat.shape(), "uncertainty_consistency_loss");
  require_same(aleatoric.shape(), aleatoric_hat.shape(), "uncertainty_consistency_loss");
  require_same(total.shape(), aleatoric.shape(), "uncertainty_consistency_loss");
  const Var ep = diff::mean(diff::square(diff::sub(total_hat, konst(total_hat, total))));
  const Var ea = diff::mean(diff::square(diff::sub(aleatoric_hat, konst(aleatoric_hat, aleatoric))));
  return diff::mul_scalar(diff::add(ep, ea), 0.5);
}

Var total_generator_loss(const GeneratorLossParts& parts, const LossWeights& weights) {
  require(weights.lambda1 >= 0.0 && weights.lambda2 >= 0.0, "loss weights must be non-negative");
  Var total = parts.likelihood;
  if (parts.coherence) total = diff::add(total, diff::mul_scalar(*parts.coherence, weights.lambda1));
  if (parts.entropy) total = diff::add(total, diff::mul_scalar(*parts.entropy, weights.lambda2));
  return total;
}

}  // namespace smokelens::losses
