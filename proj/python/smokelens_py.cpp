// NumPy-facing bindings. Maps are float64 (H, W) arrays, RGB images (H, W, 3),
// sample stacks (B, H, W).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "smokelens/errors.hpp"
#include "smokelens/image.hpp"
#include "smokelens/losses.hpp"
#include "smokelens/metrics.hpp"
#include "smokelens/nn.hpp"
#include "smokelens/synth.hpp"
#include "smokelens/transmission.hpp"
#include "smokelens/uncertainty.hpp"

namespace py = pybind11;
using namespace smokelens;
using diff::Tape;
using diff::Tensor;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

GrayMap to_map(const Array& a) {
  if (a.ndim() != 2) throw InvalidArgument("expected a 2-D array");
  const int h = static_cast<int>(a.shape(0));
  const int w = static_cast<int>(a.shape(1));
  return GrayMap(w, h, std::vector<double>(a.data(), a.data() + a.size()));
}

ImageRGB to_image(const Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw InvalidArgument("expected an (H, W, 3) array");
  const int h = static_cast<int>(a.shape(0));
  const int w = static_cast<int>(a.shape(1));
  ImageRGB img(w, h);
  auto v = a.unchecked<3>();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.channel(c)(x, y) = v(y, x, c);
  return img;
}

Array from_map(const GrayMap& m) {
  Array out({m.height(), m.width()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

Array from_image(const ImageRGB& img) {
  Array out({img.height(), img.width(), 3});
  auto v = out.mutable_unchecked<3>();
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) v(y, x, c) = img.channel(c)(x, y);
  return out;
}

Array from_tensor(const Tensor& t, std::vector<py::ssize_t> shape) {
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

SampleSet to_samples(const Array& a) {
  if (a.ndim() != 3) throw InvalidArgument("expected a (B, H, W) array");
  const auto b = a.shape(0), h = a.shape(1), w = a.shape(2);
  SampleSet set;
  for (py::ssize_t i = 0; i < b; ++i) {
    const double* p = a.data() + i * h * w;
    set.probs.emplace_back(static_cast<int>(w), static_cast<int>(h), std::vector<double>(p, p + h * w));
  }
  return set;
}

// Value and gradient of a scalar loss of one map-shaped input.
py::tuple value_and_grad(const Array& input, const std::function<diff::Var(const diff::Var&)>& loss) {
  const GrayMap m = to_map(input);
  Tape tape;
  const diff::Var v = tape.leaf(Tensor::from_map(m));
  const diff::Var out = loss(v);
  tape.backward(out);
  return py::make_tuple(out.item(), from_tensor(v.grad(), {m.height(), m.width()}));
}

}  // namespace

PYBIND11_MODULE(_smokelens, m) {
  m.doc() = "Transmission-guided, uncertainty-aware smoke segmentation at desk scale";

  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<CorruptDataset>(m, "CorruptDataset", PyExc_RuntimeError);
  py::register_exception<InvalidCheckpoint>(m, "InvalidCheckpoint", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("min_filter", [](const Array& a, int k) { return from_map(min_filter(to_map(a), k)); }, py::arg("map"),
        py::arg("k"));
  m.def("avg_pool", [](const Array& a, int k) { return from_map(avg_pool_same(to_map(a), k)); }, py::arg("map"),
        py::arg("k"));
  m.def("dark_channel", [](const Array& img, int k) { return from_map(dark_channel(to_image(img), k)); },
        py::arg("image"), py::arg("k"));
  m.def(
      "guided_filter",
      [](const Array& guide, const Array& input, int radius, double eps) {
        return from_map(guided_filter(to_map(guide), to_map(input), radius, eps));
      },
      py::arg("guide"), py::arg("input"), py::arg("radius") = 8, py::arg("eps") = 1e-3);
  m.def(
      "estimate_transmission",
      [](const Array& img, int patch, int radius, double eps, double fraction) {
        const ImageRGB image = to_image(img);
        TransmissionConfig cfg = TransmissionConfig::for_size(image.width(), image.height());
        if (patch > 0) cfg.patch = patch;
        cfg.radius = radius;
        cfg.eps = eps;
        cfg.fraction = fraction;
        const TransmissionEstimate est = estimate_transmission_detailed(image, cfg);
        return py::make_tuple(from_map(est.refined), py::make_tuple(est.light.r, est.light.g, est.light.b));
      },
      py::arg("image"), py::arg("patch") = 0, py::arg("radius") = 8, py::arg("eps") = 1e-3,
      py::arg("fraction") = 1e-3, "Refined transmission map and atmospheric light (r, g, b); patch 0 picks by size.");

  m.def(
      "structure_loss",
      [](const Array& logits, const Array& mask, int pool) {
        const GrayMap y = to_map(mask);
        const int k = pool > 0 ? pool : losses::default_pool_size(y.width(), y.height());
        return value_and_grad(logits, [&](const diff::Var& s) {
          return losses::structure_loss(s, Tensor::from_map(y), k);
        });
      },
      py::arg("logits"), py::arg("mask"), py::arg("pool") = 0, "(value, d/dlogits)");
  m.def(
      "kl_standard_normal",
      [](const std::vector<double>& mu, const std::vector<double>& log_sigma) {
        if (mu.size() != log_sigma.size() || mu.empty()) throw InvalidArgument("mu and log_sigma must match");
        const diff::Shape s{1, static_cast<int>(mu.size()), 1, 1};
        Tape tape;
        const diff::Var a = tape.leaf(Tensor(s, mu));
        const diff::Var b = tape.leaf(Tensor(s, log_sigma));
        const diff::Var out = losses::kl_standard_normal(a, b);
        tape.backward(out);
        return py::make_tuple(out.item(), a.grad().values(), b.grad().values());
      },
      py::arg("mu"), py::arg("log_sigma"), "(value, d/dmu, d/dlog_sigma) for one latent vector");
  m.def(
      "coherence_loss",
      [](const Array& prob, const Array& transmission, int window, double sigma_p, double sigma_t) {
        const Tensor t = Tensor::from_map(to_map(transmission));
        return value_and_grad(prob, [&](const diff::Var& s) {
          return losses::transmission_coherence_loss(s, t, losses::CoherenceConfig{window, sigma_p, sigma_t});
        });
      },
      py::arg("prob"), py::arg("transmission"), py::arg("window") = 5, py::arg("sigma_p") = 5.0,
      py::arg("sigma_t") = 0.1, "(value, d/dprob)");
  m.def(
      "calibrated_entropy_loss",
      [](const Array& logits, const Array& total_uncertainty) {
        const Tensor u = Tensor::from_map(to_map(total_uncertainty));
        return value_and_grad(logits, [&](const diff::Var& s) { return losses::calibrated_entropy_loss(s, u); });
      },
      py::arg("logits"), py::arg("total_uncertainty"), "(value, d/dlogits)");
  m.def(
      "consistency_loss",
      [](const Array& total, const Array& aleatoric, const Array& total_hat, const Array& aleatoric_hat) {
        const GrayMap th = to_map(total_hat);
        Tape tape;
        const diff::Var a = tape.leaf(Tensor::from_map(th));
        const diff::Var b = tape.leaf(Tensor::from_map(to_map(aleatoric_hat)));
        const diff::Var out = losses::uncertainty_consistency_loss(
            Tensor::from_map(to_map(total)), Tensor::from_map(to_map(aleatoric)), a, b);
        tape.backward(out);
        return py::make_tuple(out.item(), from_tensor(a.grad(), {th.height(), th.width()}),
                              from_tensor(b.grad(), {th.height(), th.width()}));
      },
      py::arg("total"), py::arg("aleatoric"), py::arg("total_hat"), py::arg("aleatoric_hat"));

  m.def("mean_prediction", [](const Array& s) { return from_map(mean_prediction(to_samples(s))); },
        py::arg("samples"));
  m.def(
      "decompose",
      [](const Array& s) {
        const UncertaintyMaps u = decompose(to_samples(s));
        return py::make_tuple(from_map(u.total), from_map(u.aleatoric), from_map(u.epistemic));
      },
      py::arg("samples"), "(total, aleatoric, epistemic) entropy maps from a (B, H, W) stack");

  m.def("mse", [](const Array& p, const Array& g) { return metrics::mse(to_map(p), to_map(g)); }, py::arg("pred"),
        py::arg("gt"));
  m.def(
      "f_measure",
      [](const Array& p, const Array& g, double beta2, bool adaptive) {
        metrics::FMeasureOptions o;
        o.beta2 = beta2;
        o.mode = adaptive ? metrics::ThresholdMode::Adaptive : metrics::ThresholdMode::Fixed;
        return metrics::f_measure(to_map(p), to_map(g), o);
      },
      py::arg("pred"), py::arg("gt"), py::arg("beta2") = 0.3, py::arg("adaptive") = false,
      "None when the ground truth has no positives");
  m.def(
      "ece", [](const Array& p, const Array& g, int bins) { return metrics::ece(to_map(p), to_map(g), bins).ece; },
      py::arg("pred"), py::arg("gt"), py::arg("bins") = 10);

  m.def(
      "generate_scene",
      [](std::uint64_t seed, int size) {
        const synth::LabeledScene sc = synth::generate(synth::SceneSpec::random(seed, size));
        return py::make_tuple(from_image(sc.image), from_map(sc.mask), from_map(sc.alpha));
      },
      py::arg("seed"), py::arg("size") = 64, "(image, mask, alpha) for the scene drawn from this seed");

  py::class_<nn::Checkpoint>(m, "Model")
      .def_static("load", &nn::load_checkpoint, py::arg("path"))
      .def_readonly("steps", &nn::Checkpoint::steps)
      .def("config", [](const nn::Checkpoint& ck) {
        py::dict d;
        for (const auto& [k, v] : ck.config.to_pairs()) d[py::str(k)] = v;
        return d;
      })
      .def(
          "predict",
          [](nn::Checkpoint& ck, const Array& img) {
            const nn::Prediction p = nn::predict(ck.model, to_image(img));
            return py::make_tuple(from_map(p.probability), from_map(p.total_hat), from_map(p.aleatoric_hat));
          },
          py::arg("image"), "(probability, total_hat, aleatoric_hat)")
      .def(
          "sample",
          [](nn::Checkpoint& ck, const Array& img, int samples, std::uint64_t seed) {
            const SampleSet set = nn::sample_predictions(ck.model, to_image(img), samples, seed);
            const auto h = set.probs.front().height(), w = set.probs.front().width();
            Array out({static_cast<py::ssize_t>(set.count()), static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
            double* dst = out.mutable_data();
            for (const GrayMap& p : set.probs) dst = std::copy(p.values().begin(), p.values().end(), dst);
            return out;
          },
          py::arg("image"), py::arg("samples") = 10, py::arg("seed") = 1, "(B, H, W) stochastic probabilities");
}
