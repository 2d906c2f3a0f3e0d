#include "smokelens/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "smokelens/errors.hpp"
#include "smokelens/parallel.hpp"

namespace smokelens::nn {

Param::Param(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()),
      adam_m(value.shape()), adam_v(value.shape()) {}

void Param::zero_grad() { std::fill(grad.values().begin(), grad.values().end(), 0.0); }

Var Binder::operator()(Param& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return it->second;
  Var v = trainable_ ? tape_.leaf(p.value) : tape_.constant(p.value);
  bound_.emplace(&p, v);
  return v;
}

void Binder::accumulate_grads() {
  for (auto& [param, var] : bound_) {
    if (!var.requires_grad()) continue;
    const Tensor& g = var.grad();
    for (std::size_t i = 0; i < g.numel(); ++i) param->grad[i] += g[i];
  }
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

Var dropout(const Var& x, const DropoutMode& mode) {
  const double keep = 1.0 - mode.rate;
  if (mode.rng == nullptr) return diff::mul_scalar(x, keep);
  Tensor mask(x.shape());
  for (double& v : mask.values()) v = mode.rng->bernoulli(keep) ? 1.0 : 0.0;
  return diff::apply_mask(x, mask);
}

}  // namespace

Conv2d::Conv2d(const std::string& name, int in, int out, int kernel, int stride_, Rng& rng)
    : stride(stride_), pad(kernel / 2) {
  const double fan_in = static_cast<double>(in) * kernel * kernel;
  weight = Param(name + ".weight", uniform_tensor(Shape{out, in, kernel, kernel},
                                                  std::sqrt(6.0 / fan_in), rng));
  bias = Param(name + ".bias", Tensor(Shape{1, out, 1, 1}));
}

Var Conv2d::operator()(Binder& bind, const Var& x) {
  return diff::conv2d(x, bind(weight), bind(bias), stride, pad);
}

BatchNorm::BatchNorm(const std::string& name, int channels)
    : gamma(name + ".gamma", Tensor(Shape{1, channels, 1, 1}, 1.0)),
      beta(name + ".beta", Tensor(Shape{1, channels, 1, 1}, 0.0)),
      running_mean(Shape{1, channels, 1, 1}, 0.0),
      running_var(Shape{1, channels, 1, 1}, 1.0) {}

Var BatchNorm::operator()(Binder& bind, const Var& x, NormMode mode) {
  if (mode == NormMode::Running) {
    return diff::batch_norm_fixed(x, bind(gamma), bind(beta), running_mean, running_var, eps);
  }
  auto out = diff::batch_norm_train(x, bind(gamma), bind(beta), eps);
  if (mode == NormMode::Train) {
    const double count = static_cast<double>(x.shape().n) * static_cast<double>(x.shape().plane());
    const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
    for (std::size_t c = 0; c < running_mean.numel(); ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * out.batch_mean[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * out.batch_var[c] * unbias;
    }
  }
  return out.out;
}

GeneratorNet::GeneratorNet(const ModelConfig& cfg, Rng& rng) : slope(cfg.leaky_slope) {
  const int d = cfg.latent_dim;
  enc1 = Conv2d("gen.enc1", 3, 8, 3, 2, rng);
  enc2 = Conv2d("gen.enc2", 8, 16, 3, 2, rng);
  enc3 = Conv2d("gen.enc3", 16, 32, 3, 2, rng);
  fuse = Conv2d("gen.fuse", 32 + d, 32, 3, 1, rng);
  skip1 = Conv2d("gen.skip1", 8, 8, 3, 1, rng);
  skip2 = Conv2d("gen.skip2", 16, 16, 3, 1, rng);
  skip3 = Conv2d("gen.skip3", 32, 32, 3, 1, rng);
  dec2 = Conv2d("gen.dec2", 32 + 16, 16, 3, 1, rng);
  dec1 = Conv2d("gen.dec1", 16 + 8, 8, 3, 1, rng);
  head = Conv2d("gen.head", 8 + 3, 1, 3, 1, rng);
  for (double& v : head.weight.value.values()) v *= 0.1;
}

Var GeneratorNet::forward(Binder& bind, const Var& x, const Var& z, const DropoutMode& drop) {
  using namespace diff;
  const Var e1 = leaky_relu(enc1(bind, x), slope);
  const Var e2 = leaky_relu(enc2(bind, e1), slope);
  const Var e3 = leaky_relu(enc3(bind, e2), slope);
  const Var tiled = tile_spatial(z, e3.shape().h, e3.shape().w);
  const Var f3 = leaky_relu(fuse(bind, concat_channels({e3, tiled})), slope);
  const Var s1 = dropout(leaky_relu(skip1(bind, e1), slope), drop);
  const Var s2 = dropout(leaky_relu(skip2(bind, e2), slope), drop);
  const Var s3 = dropout(leaky_relu(skip3(bind, f3), slope), drop);
  const Var d2 = leaky_relu(dec2(bind, concat_channels({upsample_nearest(s3, 2), s2})), slope);
  const Var d1 = leaky_relu(dec1(bind, concat_channels({upsample_nearest(d2, 2), s1})), slope);
  return head(bind, concat_channels({upsample_nearest(d1, 2), x}));
}

std::vector<Param*> GeneratorNet::params() {
  std::vector<Param*> out;
  for (Conv2d* c : {&enc1, &enc2, &enc3, &fuse, &skip1, &skip2, &skip3, &dec2, &dec1, &head}) {
    c->collect(out);
  }
  return out;
}

InferenceNet::InferenceNet(const ModelConfig& cfg, Rng& rng) : slope(cfg.leaky_slope) {
  c1 = Conv2d("inf.c1", 3, 8, 3, 2, rng);
  c2 = Conv2d("inf.c2", 8, 16, 3, 2, rng);
  c3 = Conv2d("inf.c3", 16, 16, 3, 2, rng);
  c4 = Conv2d("inf.c4", 16, 16, 3, 2, rng);
  c5 = Conv2d("inf.c5", 16, 16, 3, 1, rng);
  mu_head = Conv2d("inf.mu", 16, cfg.latent_dim, 1, 1, rng);
  log_sigma_head = Conv2d("inf.log_sigma", 16, cfg.latent_dim, 1, 1, rng);
  for (double& v : mu_head.weight.value.values()) v *= 0.1;
  for (double& v : log_sigma_head.weight.value.values()) v *= 0.1;
}

InferenceNet::Output InferenceNet::forward(Binder& bind, const Var& x) {
  using namespace diff;
  Var h = leaky_relu(c1(bind, x), slope);
  h = leaky_relu(c2(bind, h), slope);
  h = leaky_relu(c3(bind, h), slope);
  h = leaky_relu(c4(bind, h), slope);
  h = leaky_relu(c5(bind, h), slope);
  const Var pooled = global_avg_pool(h);
  return {mu_head(bind, pooled), log_sigma_head(bind, pooled)};
}

std::vector<Param*> InferenceNet::params() {
  std::vector<Param*> out;
  for (Conv2d* c : {&c1, &c2, &c3, &c4, &c5, &mu_head, &log_sigma_head}) c->collect(out);
  return out;
}

UncertaintyNet::UncertaintyNet(const ModelConfig& cfg, Rng& rng) : slope(cfg.leaky_slope) {
  e1 = Conv2d("unc.e1", 4, 8, 3, 1, rng);
  e2 = Conv2d("unc.e2", 8, 8, 3, 2, rng);
  e3 = Conv2d("unc.e3", 8, 16, 3, 2, rng);
  e4 = Conv2d("unc.e4", 16, 16, 3, 1, rng);
  e5 = Conv2d("unc.e5", 16, 16, 3, 1, rng);
  b1 = BatchNorm("unc.b1", 8);
  b2 = BatchNorm("unc.b2", 8);
  b3 = BatchNorm("unc.b3", 16);
  b4 = BatchNorm("unc.b4", 16);
  b5 = BatchNorm("unc.b5", 16);
  for (auto [dec, name] : {std::pair{&total, "unc.total"}, std::pair{&aleatoric, "unc.aleatoric"}}) {
    const std::string n = name;
    dec->c1 = Conv2d(n + ".c1", 16, 8, 3, 1, rng);
    dec->c2 = Conv2d(n + ".c2", 8, 4, 3, 1, rng);
    dec->c3 = Conv2d(n + ".c3", 4, 1, 3, 1, rng);
    dec->n1 = BatchNorm(n + ".n1", 8);
    dec->n2 = BatchNorm(n + ".n2", 4);
    for (double& v : dec->c3.weight.value.values()) v *= 0.1;
  }
}

UncertaintyNet::Output UncertaintyNet::forward(Binder& bind, const Var& image, const Var& prob,
                                               NormMode mode) {
  using namespace diff;
  Var h = concat_channels({image, prob});
  h = leaky_relu(b1(bind, e1(bind, h), mode), slope);
  h = leaky_relu(b2(bind, e2(bind, h), mode), slope);
  h = leaky_relu(b3(bind, e3(bind, h), mode), slope);
  h = leaky_relu(b4(bind, e4(bind, h), mode), slope);
  h = leaky_relu(b5(bind, e5(bind, h), mode), slope);
  auto decode = [&](Decoder& d) {
    Var u = leaky_relu(d.n1(bind, d.c1(bind, upsample_nearest(h, 2)), mode), slope);
    u = leaky_relu(d.n2(bind, d.c2(bind, upsample_nearest(u, 2)), mode), slope);
    return softplus(d.c3(bind, u));
  };
  const Var t = decode(total);
  const Var a = decode(aleatoric);
  return {t, a};
}

std::vector<Param*> UncertaintyNet::params() {
  std::vector<Param*> out;
  for (Conv2d* c : {&e1, &e2, &e3, &e4, &e5, &total.c1, &total.c2, &total.c3, &aleatoric.c1,
                    &aleatoric.c2, &aleatoric.c3}) {
    c->collect(out);
  }
  for (BatchNorm* n : norms()) n->collect(out);
  return out;
}

std::vector<BatchNorm*> UncertaintyNet::norms() {
  return {&b1, &b2, &b3, &b4, &b5, &total.n1, &total.n2, &aleatoric.n1, &aleatoric.n2};
}

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  require(config.latent_dim >= 1, "ModelConfig: latent_dim must be >= 1");
  require(config.dropout >= 0.0 && config.dropout < 1.0, "ModelConfig: dropout must be in [0,1)");
  Model m;
  m.config = config;
  Rng gen_rng(derive_seed(seed, "init-generator"));
  Rng inf_rng(derive_seed(seed, "init-inference"));
  Rng unc_rng(derive_seed(seed, "init-uncertainty"));
  m.generator = GeneratorNet(config, gen_rng);
  m.inference = InferenceNet(config, inf_rng);
  m.uncertainty = UncertaintyNet(config, unc_rng);
  return m;
}

std::map<std::string, Tensor*> Model::named_tensors() {
  std::map<std::string, Tensor*> out;
  for (Param* p : generator.params()) out[p->name] = &p->value;
  for (Param* p : inference.params()) out[p->name] = &p->value;
  for (Param* p : uncertainty.params()) out[p->name] = &p->value;
  for (BatchNorm* n : uncertainty.norms()) {
    const std::string base = n->gamma.name.substr(0, n->gamma.name.size() - std::string(".gamma").size());
    out[base + ".running_mean"] = &n->running_mean;
    out[base + ".running_var"] = &n->running_var;
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string form_name(losses::EntropyForm f) {
  return f == losses::EntropyForm::TwoClass ? "two-class" : "single-term";
}

}  // namespace

std::vector<std::pair<std::string, std::string>> TrainConfig::to_pairs() const {
  return {
      {"seed", std::to_string(seed)},
      {"epochs", std::to_string(epochs)},
      {"batch_size", std::to_string(batch_size)},
      {"mc_samples", std::to_string(mc_samples)},
      {"lambda1", fmt(weights.lambda1)},
      {"lambda2", fmt(weights.lambda2)},
      {"use_transmission", use_transmission ? "1" : "0"},
      {"use_entropy", use_entropy ? "1" : "0"},
      {"calibrated", calibrated ? "1" : "0"},
      {"entropy_form", form_name(entropy_form)},
      {"train_uncertainty", train_uncertainty ? "1" : "0"},
      {"lr_generator", fmt(lr_generator)},
      {"lr_uncertainty", fmt(lr_uncertainty)},
      {"lr_scale", fmt(lr_scale)},
      {"lr_decay_epoch", std::to_string(lr_decay_epoch)},
      {"lr_decay", fmt(lr_decay)},
      {"coherence_window", std::to_string(coherence.window)},
      {"coherence_sigma_p", fmt(coherence.sigma_p)},
      {"coherence_sigma_t", fmt(coherence.sigma_t)},
      {"pool", std::to_string(pool)},
      {"latent_dim", std::to_string(model.latent_dim)},
      {"dropout", fmt(model.dropout)},
      {"leaky_slope", fmt(model.leaky_slope)},
  };
}

TrainConfig TrainConfig::from_pairs(const std::map<std::string, std::string>& pairs) {
  TrainConfig c;
  auto get = [&](const char* key) -> const std::string* {
    auto it = pairs.find(key);
    return it == pairs.end() ? nullptr : &it->second;
  };
  try {
    if (auto v = get("seed")) c.seed = std::stoull(*v);
    if (auto v = get("epochs")) c.epochs = std::stoi(*v);
    if (auto v = get("batch_size")) c.batch_size = std::stoi(*v);
    if (auto v = get("mc_samples")) c.mc_samples = std::stoi(*v);
    if (auto v = get("lambda1")) c.weights.lambda1 = std::stod(*v);
    if (auto v = get("lambda2")) c.weights.lambda2 = std::stod(*v);
    if (auto v = get("use_transmission")) c.use_transmission = *v == "1";
    if (auto v = get("use_entropy")) c.use_entropy = *v == "1";
    if (auto v = get("calibrated")) c.calibrated = *v == "1";
    if (auto v = get("entropy_form")) {
      c.entropy_form = *v == "single-term" ? losses::EntropyForm::SingleTerm : losses::EntropyForm::TwoClass;
    }
    if (auto v = get("train_uncertainty")) c.train_uncertainty = *v == "1";
    if (auto v = get("lr_generator")) c.lr_generator = std::stod(*v);
    if (auto v = get("lr_uncertainty")) c.lr_uncertainty = std::stod(*v);
    if (auto v = get("lr_scale")) c.lr_scale = std::stod(*v);
    if (auto v = get("lr_decay_epoch")) c.lr_decay_epoch = std::stoi(*v);
    if (auto v = get("lr_decay")) c.lr_decay = std::stod(*v);
    if (auto v = get("coherence_window")) c.coherence.window = std::stoi(*v);
    if (auto v = get("coherence_sigma_p")) c.coherence.sigma_p = std::stod(*v);
    if (auto v = get("coherence_sigma_t")) c.coherence.sigma_t = std::stod(*v);
    if (auto v = get("pool")) c.pool = std::stoi(*v);
    if (auto v = get("latent_dim")) c.model.latent_dim = std::stoi(*v);
    if (auto v = get("dropout")) c.model.dropout = std::stod(*v);
    if (auto v = get("leaky_slope")) c.model.leaky_slope = std::stod(*v);
  } catch (const std::exception& e) {
    throw InvalidArgument(std::string("TrainConfig: unparsable value: ") + e.what());
  }
  return c;
}

void check_input_size(int width, int height) {
  const int f = GeneratorNet::kDownsample;
  if (width <= 0 || height <= 0 || width % f != 0 || height % f != 0) {
    throw InvalidArgument("input size " + std::to_string(width) + "x" + std::to_string(height) +
                          " is not divisible by " + std::to_string(f));
  }
}

Batch make_batch(std::span<const ImageRGB> images, std::span<const Mask> masks,
                 std::span<const TransmissionMap> transmission) {
  require(!images.empty(), "make_batch: no images");
  require(images.size() == masks.size() && images.size() == transmission.size(),
          "make_batch: list sizes differ");
  const int w = images[0].width();
  const int h = images[0].height();
  check_input_size(w, h);
  const int n = static_cast<int>(images.size());
  Batch b{Tensor(Shape{n, 3, h, w}), Tensor(Shape{n, 1, h, w}), Tensor(Shape{n, 1, h, w})};
  for (int i = 0; i < n; ++i) {
    const auto ii = static_cast<std::size_t>(i);
    require(images[ii].width() == w && images[ii].height() == h, "make_batch: mixed image sizes");
    require(masks[ii].width() == w && masks[ii].height() == h, "make_batch: mask size mismatch");
    require(transmission[ii].same_size(masks[ii]), "make_batch: transmission size mismatch");
    for (int c = 0; c < 3; ++c) {
      const auto& ch = images[ii].channel(c).data();
      std::copy(ch.begin(), ch.end(), b.images.data() + b.images.offset(i, c, 0, 0));
    }
    std::copy(masks[ii].data().begin(), masks[ii].data().end(), b.masks.data() + b.masks.offset(i, 0, 0, 0));
    std::copy(transmission[ii].data().begin(), transmission[ii].data().end(),
              b.transmission.data() + b.transmission.offset(i, 0, 0, 0));
  }
  return b;
}

Tensor standard_normal(Shape shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

Var reparameterize(const Var& mu, const Var& log_sigma, const Tensor& eps) {
  return diff::add(mu, diff::mul(diff::exp(log_sigma), mu.tape().constant(eps)));
}

LatentSample sample_latent(Model& model, const Tensor& images, Rng& rng) {
  Tape tape;
  Binder bind(tape, false);
  const auto post = model.inference.forward(bind, tape.constant(images));
  const Var z = reparameterize(post.mu, post.log_sigma, standard_normal(post.mu.shape(), rng));
  return {z.value(), post.mu.value(), post.log_sigma.value()};
}

namespace {

Tensor sigmoid_values(const Tensor& logits) {
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double x = logits[i];
    p[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return p;
}

// Learned U_p used as the temperature; no gradient flows through it.
Tensor temperature(Model& model, const Tensor& images, const Tensor& prob) {
  Tape tape;
  Binder bind(tape, false);
  auto out = model.uncertainty.forward(bind, tape.constant(images), tape.constant(prob),
                                       NormMode::BatchStats);
  return out.total.value();
}

}  // namespace

GeneratorLossValues generator_loss(Model& model, const Batch& batch, const TrainConfig& cfg,
                                   std::uint64_t step, bool accumulate_grads) {
  Tape tape;
  Binder bind(tape, accumulate_grads);
  const Var x = tape.constant(batch.images);
  const auto post = model.inference.forward(bind, x);
  Rng latent_rng(derive_seed(cfg.seed, "latent", step));
  const Var z = reparameterize(post.mu, post.log_sigma, standard_normal(post.mu.shape(), latent_rng));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout", step));
  const Var logits = model.generator.forward(bind, x, z, DropoutMode{&dropout_rng, model.config.dropout});

  const diff::Shape s = batch.masks.shape();
  const int pool = cfg.pool > 0 ? cfg.pool : losses::default_pool_size(s.w, s.h);
  const Var structure = losses::structure_loss(logits, batch.masks, pool);
  const Var kl = losses::kl_standard_normal(post.mu, post.log_sigma);

  losses::GeneratorLossParts parts{diff::add(structure, kl), std::nullopt, std::nullopt};
  if (cfg.use_transmission) {
    parts.coherence = losses::transmission_coherence_loss(diff::sigmoid(logits), batch.transmission,
                                                          cfg.coherence);
  }
  if (cfg.use_entropy) {
    if (cfg.calibrated) {
      const Tensor temp = temperature(model, batch.images, sigmoid_values(logits.value()));
      parts.entropy = losses::calibrated_entropy_loss(logits, temp, cfg.entropy_form);
    } else {
      parts.entropy = losses::entropy_loss(logits, cfg.entropy_form);
    }
  }
  const Var total = losses::total_generator_loss(parts, cfg.weights);
  if (accumulate_grads) {
    tape.backward(total);
    bind.accumulate_grads();
  }
  GeneratorLossValues v;
  v.total = total.item();
  v.structure = structure.item();
  v.kl = kl.item();
  v.coherence = parts.coherence ? parts.coherence->item() : 0.0;
  v.entropy = parts.entropy ? parts.entropy->item() : 0.0;
  return v;
}

Tensor deterministic_logits(Model& model, const Tensor& images) {
  check_input_size(images.shape().w, images.shape().h);
  Tape tape;
  Binder bind(tape, false);
  const Var x = tape.constant(images);
  const auto post = model.inference.forward(bind, x);
  return model.generator.forward(bind, x, post.mu, DropoutMode{nullptr, model.config.dropout}).value();
}

Tensor stochastic_logits(Model& model, const Tensor& images, std::uint64_t seed) {
  check_input_size(images.shape().w, images.shape().h);
  Tape tape;
  Binder bind(tape, false);
  const Var x = tape.constant(images);
  const auto post = model.inference.forward(bind, x);
  Rng latent_rng(derive_seed(seed, "latent"));
  const Var z = reparameterize(post.mu, post.log_sigma, standard_normal(post.mu.shape(), latent_rng));
  Rng dropout_rng(derive_seed(seed, "dropout"));
  return model.generator.forward(bind, x, z, DropoutMode{&dropout_rng, model.config.dropout}).value();
}

UncertaintyTargets mc_targets(Model& model, const Tensor& images, int samples, std::uint64_t seed) {
  require(samples >= 1, "mc_targets: need at least one sample");
  const Shape s = images.shape();
  std::vector<Tensor> probs;
  probs.reserve(static_cast<std::size_t>(samples));
  for (int b = 0; b < samples; ++b) {
    probs.push_back(sigmoid_values(stochastic_logits(model, images, derive_seed(seed, "sample", static_cast<std::uint64_t>(b)))));
  }
  UncertaintyTargets t{Tensor(Shape{s.n, 1, s.h, s.w}), Tensor(Shape{s.n, 1, s.h, s.w})};
  for (int n = 0; n < s.n; ++n) {
    SampleSet set;
    for (const Tensor& p : probs) set.probs.push_back(p.to_map(n, 0));
    const UncertaintyMaps maps = decompose(set);
    std::copy(maps.total.data().begin(), maps.total.data().end(), t.total.data() + t.total.offset(n, 0, 0, 0));
    std::copy(maps.aleatoric.data().begin(), maps.aleatoric.data().end(),
              t.aleatoric.data() + t.aleatoric.offset(n, 0, 0, 0));
  }
  return t;
}

double uncertainty_loss(Model& model, const Batch& batch, const UncertaintyTargets& targets,
                        NormMode mode, bool accumulate_grads) {
  const Tensor prob = sigmoid_values(deterministic_logits(model, batch.images));
  Tape tape;
  Binder bind(tape, accumulate_grads);
  auto out = model.uncertainty.forward(bind, tape.constant(batch.images), tape.constant(prob), mode);
  const Var loss = losses::uncertainty_consistency_loss(targets.total, targets.aleatoric, out.total,
                                                        out.aleatoric);
  if (accumulate_grads) {
    tape.backward(loss);
    bind.accumulate_grads();
  }
  return loss.item();
}

namespace {

void adam_step(const std::vector<Param*>& params, double lr, std::uint64_t t) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  for (Param* p : params) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double g = p->grad[i];
      p->adam_m[i] = kBeta1 * p->adam_m[i] + (1.0 - kBeta1) * g;
      p->adam_v[i] = kBeta2 * p->adam_v[i] + (1.0 - kBeta2) * g * g;
      p->value[i] -= lr * (p->adam_m[i] / c1) / (std::sqrt(p->adam_v[i] / c2) + kEps);
    }
  }
}

void zero_grads(const std::vector<Param*>& params) {
  for (Param* p : params) p->zero_grad();
}

}  // namespace

TrainResult train(const TrainingSet& data, const TrainConfig& cfg, const StepCallback& on_step) {
  require(!data.images.empty(), "train: empty dataset");
  require(data.images.size() == data.masks.size(), "train: image and mask counts differ");
  require(cfg.epochs >= 0 && cfg.batch_size >= 1 && cfg.mc_samples >= 1, "train: bad schedule");

  TrainResult result;
  result.model = Model::create(cfg.model, derive_seed(cfg.seed, "init"));
  Model& model = result.model;

  const std::size_t n = data.images.size();
  std::vector<TransmissionMap> transmission(n);
  parallel_for(n, [&](std::size_t i) {
    const ImageRGB& img = data.images[i];
    transmission[i] = estimate_transmission(img, TransmissionConfig::for_size(img.width(), img.height()));
  });

  std::vector<Param*> gen_params = model.generator.params();
  for (Param* p : model.inference.params()) gen_params.push_back(p);
  const std::vector<Param*> unc_params = model.uncertainty.params();

  std::vector<std::size_t> order(n);
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle_rng.next() % i);
      std::swap(order[i - 1], order[j]);
    }
    const double decay = epoch >= cfg.lr_decay_epoch ? cfg.lr_decay : 1.0;

    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<ImageRGB> imgs;
      std::vector<Mask> masks;
      std::vector<TransmissionMap> trans;
      for (std::size_t k = start; k < end; ++k) {
        imgs.push_back(data.images[order[k]]);
        masks.push_back(data.masks[order[k]]);
        trans.push_back(transmission[order[k]]);
      }
      const Batch batch = make_batch(imgs, masks, trans);

      StepLog log;
      log.epoch = epoch;
      log.step = step;
      zero_grads(gen_params);
      log.generator = generator_loss(model, batch, cfg, step, true);
      adam_step(gen_params, cfg.lr_generator * cfg.lr_scale * decay, step + 1);

      if (cfg.train_uncertainty) {
        const UncertaintyTargets targets =
            mc_targets(model, batch.images, cfg.mc_samples, derive_seed(cfg.seed, "mc", step));
        zero_grads(unc_params);
        log.uncertainty = uncertainty_loss(model, batch, targets, NormMode::Train, true);
        adam_step(unc_params, cfg.lr_uncertainty * cfg.lr_scale * decay, step + 1);
      }
      result.trace.push_back(log);
      if (on_step) on_step(log);
      ++step;
    }
  }
  result.steps = step;
  return result;
}

Prediction predict(Model& model, const ImageRGB& image) {
  check_input_size(image.width(), image.height());
  const Tensor x = Tensor::from_image(image);
  const Tensor prob = sigmoid_values(deterministic_logits(model, x));
  Tape tape;
  Binder bind(tape, false);
  auto out = model.uncertainty.forward(bind, tape.constant(x), tape.constant(prob), NormMode::Running);
  return {prob.to_map(), out.total.value().to_map(), out.aleatoric.value().to_map()};
}

SampleSet sample_predictions(Model& model, const ImageRGB& image, int samples, std::uint64_t seed) {
  require(samples >= 1, "sample_predictions: need at least one sample");
  check_input_size(image.width(), image.height());
  const Tensor x = Tensor::from_image(image);
  SampleSet set;
  set.probs.resize(static_cast<std::size_t>(samples));
  parallel_for(set.probs.size(), [&](std::size_t b) {
    set.probs[b] = sigmoid_values(stochastic_logits(model, x, derive_seed(seed, "sample", b))).to_map();
  });
  return set;
}

namespace {

constexpr const char* kMagic = "SMOKELENS-CHECKPOINT";

void put_f32(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

double get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Model& model, const TrainConfig& cfg,
                     std::uint64_t steps) {
  std::ostringstream header;
  header << kMagic << ' ' << kCheckpointVersion << "\n";
  header << "steps " << steps << "\n";
  for (const auto& [k, v] : cfg.to_pairs()) header << "config " << k << ' ' << v << "\n";
  std::string payload;
  std::size_t count = 0;
  for (const auto& [name, t] : model.named_tensors()) {
    const Shape s = t->shape();
    header << "tensor " << name << ' ' << s.n << ' ' << s.c << ' ' << s.h << ' ' << s.w << "\n";
    for (double v : t->values()) put_f32(payload, v);
    count += t->numel();
  }
  header << "data " << count << "\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("write failed for checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidCheckpoint("cannot open checkpoint '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw InvalidCheckpoint("empty checkpoint");
  {
    std::istringstream first(line);
    std::string magic;
    int version = 0;
    if (!(first >> magic >> version) || magic != kMagic) throw InvalidCheckpoint("not a smokelens checkpoint");
    if (version != kCheckpointVersion) {
      throw InvalidCheckpoint("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
  }
  Checkpoint ck;
  std::map<std::string, std::string> pairs;
  std::vector<std::pair<std::string, Shape>> tensors;
  std::size_t count = 0;
  bool saw_data = false;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string kind;
    fields >> kind;
    if (kind == "steps") {
      fields >> ck.steps;
    } else if (kind == "config") {
      std::string key, value;
      fields >> key >> value;
      pairs[key] = value;
    } else if (kind == "tensor") {
      std::string name;
      Shape s;
      if (!(fields >> name >> s.n >> s.c >> s.h >> s.w)) throw InvalidCheckpoint("malformed tensor line");
      tensors.emplace_back(name, s);
    } else if (kind == "data") {
      fields >> count;
      saw_data = true;
      break;
    } else {
      throw InvalidCheckpoint("unexpected header line '" + line + "'");
    }
  }
  if (!saw_data) throw InvalidCheckpoint("checkpoint header is truncated");
  try {
    ck.config = TrainConfig::from_pairs(pairs);
  } catch (const InvalidArgument& e) {
    throw InvalidCheckpoint(e.what());
  }

  std::vector<unsigned char> bytes(count * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw InvalidCheckpoint("checkpoint payload is truncated");

  ck.model = Model::create(ck.config.model, 0);
  auto named = ck.model.named_tensors();
  if (named.size() != tensors.size()) throw InvalidCheckpoint("checkpoint tensor set does not match the model");
  std::size_t offset = 0;
  for (const auto& [name, shape] : tensors) {
    auto it = named.find(name);
    if (it == named.end()) throw InvalidCheckpoint("unknown tensor '" + name + "'");
    Tensor& t = *it->second;
    if (!(t.shape() == shape)) throw InvalidCheckpoint("shape mismatch for tensor '" + name + "'");
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = get_f32(bytes.data() + 4 * (offset + i));
    offset += t.numel();
  }
  if (offset != count) throw InvalidCheckpoint("payload size does not match tensor table");
  return ck;
}

}  // namespace smokelens::nn
