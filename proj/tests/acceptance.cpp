// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cli_checks.hpp"
#include "nn_checks.hpp"
#include "oracles.hpp"
#include "smokelens/losses.hpp"
#include "smokelens/metrics.hpp"
#include "smokelens/nn.hpp"
#include "smokelens/parallel.hpp"
#include "smokelens/synth.hpp"
#include "smokelens/transmission.hpp"
#include "smokelens/uncertainty.hpp"

using namespace smokelens;
using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double loss_gradient_error(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x) {
  Tape tape;
  const Var v = tape.leaf(x);
  tape.backward(f(tape, v));
  const Tensor numeric = oracle::numeric_gradient(
      [&](const Tensor& t) {
        Tape probe;
        return f(probe, probe.constant(t)).item();
      },
      x);
  return oracle::max_relative_error(v.grad(), numeric);
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  using namespace losses;
  double worst_loss = 0.0;
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor y = Tensor::from_map(oracle::random_mask(rng, 8, 8));
    const Tensor t = Tensor::from_map(oracle::random_map(rng, 8, 8));
    const Tensor up = oracle::random_tensor(rng, y.shape(), 0.05, 0.7);
    const Tensor ua = oracle::random_tensor(rng, y.shape(), 0.0, 0.7);
    const Tensor logits = oracle::random_tensor(rng, y.shape(), -2, 2);
    const Tensor latent = oracle::random_tensor(rng, Shape{2, 8, 1, 1}, -1, 1);
    const Tensor latent2 = oracle::random_tensor(rng, Shape{2, 8, 1, 1}, -1, 1);
    const std::vector<double> errs = {
        loss_gradient_error([&](Tape&, const Var& v) { return structure_loss(v, y, 5); }, logits),
        loss_gradient_error([&](Tape& tp, const Var& v) { return kl_standard_normal(v, tp.constant(latent2)); }, latent),
        loss_gradient_error([&](Tape& tp, const Var& v) { return kl_standard_normal(tp.constant(latent), v); }, latent2),
        loss_gradient_error([&](Tape&, const Var& v) { return transmission_coherence_loss(sigmoid(v), t, {}); }, logits),
        loss_gradient_error([&](Tape&, const Var& v) { return calibrated_entropy_loss(v, up); }, logits),
        loss_gradient_error(
            [&](Tape& tp, const Var& v) { return uncertainty_consistency_loss(up, ua, v, tp.constant(ua)); }, up),
        loss_gradient_error(
            [&](Tape& tp, const Var& v) { return uncertainty_consistency_loss(up, ua, tp.constant(up), v); }, ua),
    };
    for (double e : errs) worst_loss = std::max(worst_loss, e);
  }
  double worst_e2e = 0.0;
  std::size_t coords = 0, kinks = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto check = oracle::end_to_end_gradient(seed);
    worst_e2e = std::max(worst_e2e, check.max_rel);
    coords += check.coordinates;
    kinks += check.kinks;
  }
  const double secs = seconds_since(t0);
  return {worst_loss < 1e-5 && worst_e2e < 1e-4 && secs < 120.0,
          "losses max rel " + fmt("%.2e", worst_loss) + " (<1e-5), end-to-end " + fmt("%.2e", worst_e2e) +
              " (<1e-4) over " + std::to_string(coords) + " coordinates, " + std::to_string(kinks) +
              " across a kink, " + fmt("%.1f s", secs) + " (<120 s)"};
}

Outcome oracle_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  int mismatches = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const int w = rng.uniform_int(2, 16);
    const int h = rng.uniform_int(2, 16);
    const int k = 2 * rng.uniform_int(0, 4) + 1;
    const ImageRGB img = oracle::random_image(rng, w, h);
    const GrayMap m = oracle::random_map(rng, w, h);
    if (!(min_filter(m, k) == oracle::min_filter(m, k))) ++mismatches;
    if (!(dark_channel(img, k) == oracle::dark_channel(img, k))) ++mismatches;

    const GrayMap pooled = avg_pool_same(m, k);
    const GrayMap want_pool = oracle::box_mean(m, k);
    for (std::size_t i = 0; i < pooled.size(); ++i) worst = std::max(worst, std::abs(pooled[i] - want_pool[i]));

    const int radius = rng.uniform_int(1, std::min({4, w - 1, h - 1}));
    const double eps = rng.uniform(1e-4, 1e-1);
    const GrayMap guide = oracle::random_map(rng, w, h);
    const GrayMap gf = guided_filter(guide, m, radius, eps);
    const GrayMap want_gf = oracle::guided_filter(guide, m, radius, eps);
    for (std::size_t i = 0; i < gf.size(); ++i) worst = std::max(worst, std::abs(gf[i] - want_gf[i]));

    losses::CoherenceConfig cc;
    cc.window = k;
    cc.sigma_p = rng.uniform(0.5, 6.0);
    cc.sigma_t = rng.uniform(0.05, 0.5);
    const GrayMap s = oracle::random_map(rng, w, h);
    const GrayMap t = oracle::random_map(rng, w, h);
    Tape tape;
    const double got =
        losses::transmission_coherence_loss(tape.constant(Tensor::from_map(s)), Tensor::from_map(t), cc).item();
    worst = std::max(worst, std::abs(got - oracle::coherence_loss(s, t, cc)));
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && worst <= 1e-10 && secs < 60.0,
          std::to_string(mismatches) + " inexact min/dark results, max deviation " + fmt("%.2e", worst) +
              " (<=1e-10), " + fmt("%.2f s", secs)};
}

Outcome decomposition_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(303);
  const double ln2 = std::log(2.0);
  int violations = 0;
  double worst_identical = 0.0;
  const int sizes[] = {2, 5, 10};
  for (int trial = 0; trial < 100; ++trial) {
    const int b = sizes[trial % 3];
    const int w = rng.uniform_int(1, 16);
    const int h = rng.uniform_int(1, 16);
    SampleSet set;
    for (int i = 0; i < b; ++i) {
      // Mix in saturated probabilities so the endpoints are exercised.
      GrayMap p = oracle::random_map(rng, w, h);
      for (double& v : p.data()) {
        const double u = rng.uniform();
        if (u < 0.05) v = 0.0;
        else if (u < 0.1) v = 1.0;
      }
      set.probs.push_back(p);
    }
    const UncertaintyMaps u = decompose(set);
    for (std::size_t i = 0; i < u.total.size(); ++i) {
      if (u.total[i] < u.aleatoric[i] - 1e-9) ++violations;
      for (const GrayMap* m : {&u.total, &u.aleatoric, &u.epistemic}) {
        if ((*m)[i] < 0.0 || (*m)[i] > ln2) ++violations;
      }
    }
    SampleSet same;
    same.probs.assign(static_cast<std::size_t>(b), set.probs.front());
    const UncertaintyMaps flat = decompose(same);
    for (double v : flat.epistemic.data()) worst_identical = std::max(worst_identical, v);
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && worst_identical < 1e-12 && secs < 30.0,
          std::to_string(violations) + " bound violations, identical-sample U_e max " + fmt("%.2e", worst_identical) +
              ", " + fmt("%.2f s", secs)};
}

Outcome bilateral_suite() {
  Rng rng(404);
  double worst = 0.0;
  double t_one = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const int w = rng.uniform_int(4, 16);
    const int h = rng.uniform_int(4, 16);
    losses::CoherenceConfig cc;
    cc.window = 2 * rng.uniform_int(1, 3) + 1;
    const Tensor t = Tensor::from_map(oracle::random_map(rng, w, h));
    const auto bw = losses::bilateral_weights(t, cc);
    for (std::size_t m = 0; m < t.numel(); ++m) {
      double sum = 0.0;
      for (const Tensor& wt : bw.weight) sum += wt[m];
      worst = std::max(worst, std::abs(sum - 1.0));
    }
    Tape tape;
    const Tensor s = Tensor::from_map(oracle::random_map(rng, w, h));
    t_one = std::max(t_one, losses::transmission_coherence_loss(tape.constant(s), Tensor(t.shape(), 1.0), cc).item());
  }
  return {worst <= 1e-9 && t_one == 0.0,
          "max |sum W - 1| " + fmt("%.2e", worst) + ", loss at T=1 " + fmt("%.1g", t_one)};
}

Outcome calibration_sanity() {
  // Positives placed so every occupied bin's accuracy equals its confidence.
  Mask seventy(10, 10, 0.0);
  for (int i = 0; i < 70; ++i) seventy[static_cast<std::size_t>(i)] = 1.0;
  const double calibrated = metrics::ece(GrayMap(10, 10, 0.7), seventy).ece;

  GrayMap mixed(20, 10, 0.0);
  Mask mixed_gt(20, 10, 0.0);
  for (int i = 0; i < 100; ++i) {
    mixed[static_cast<std::size_t>(i)] = 0.8;
    mixed_gt[static_cast<std::size_t>(i)] = i < 80 ? 1.0 : 0.0;
  }
  for (int i = 100; i < 200; ++i) {
    mixed[static_cast<std::size_t>(i)] = 0.05;  // confidence 0.95 in class 0
    mixed_gt[static_cast<std::size_t>(i)] = i < 105 ? 1.0 : 0.0;
  }
  const double calibrated2 = metrics::ece(mixed, mixed_gt).ece;

  Mask half(10, 10, 0.0);
  for (int i = 0; i < 50; ++i) half[static_cast<std::size_t>(i)] = 1.0;
  const double off = metrics::ece(GrayMap(10, 10, 0.9), half).ece;
  return {calibrated < 1e-12 && calibrated2 < 1e-12 && std::abs(off - 0.4) <= 1e-12,
          "calibrated " + fmt("%.1e", std::max(calibrated, calibrated2)) + ", 0.9 vs 0.5 -> " + fmt("%.15f", off)};
}

// Shared training protocol for the two ablation criteria.
struct Split {
  nn::TrainingSet train;
  std::vector<ImageRGB> test_images;
  std::vector<Mask> test_masks;
};

Split protocol_split() {
  Split s;
  const auto scenes = synth::generate_set(200, 64, 7);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (i < 160) {
      s.train.images.push_back(scenes[i].image);
      s.train.masks.push_back(scenes[i].mask);
    } else {
      s.test_images.push_back(scenes[i].image);
      s.test_masks.push_back(scenes[i].mask);
    }
  }
  return s;
}

enum class Row { Baseline = 1, Transmission = 2, PlainEntropy = 3, Calibrated = 4 };

nn::TrainConfig row_config(Row row, std::uint64_t seed) {
  nn::TrainConfig cfg;
  cfg.seed = seed;
  cfg.epochs = 10;
  cfg.lr_decay_epoch = 8;
  cfg.batch_size = 8;
  cfg.mc_samples = 10;
  cfg.use_transmission = row != Row::Baseline;
  cfg.weights.lambda1 = cfg.use_transmission ? 0.3 : 0.0;
  cfg.use_entropy = row == Row::PlainEntropy || row == Row::Calibrated;
  cfg.weights.lambda2 = cfg.use_entropy ? 0.01 : 0.0;
  cfg.calibrated = row == Row::Calibrated;
  // Only the calibrated loss reads the uncertainty net during training.
  cfg.train_uncertainty = row == Row::Calibrated;
  return cfg;
}

struct RowScore {
  double f_beta = 0.0;
  double ece = 0.0;
};

std::vector<RowScore> run_rows(const Split& split, Row row) {
  std::vector<RowScore> out(3);
  parallel_for(3, [&](std::size_t i) {
    nn::TrainResult r = nn::train(split.train, row_config(row, i + 1));
    std::vector<GrayMap> preds;
    for (const ImageRGB& img : split.test_images) preds.push_back(nn::predict(r.model, img).probability);
    out[i].f_beta = metrics::mean_f_measure(preds, split.test_masks).value_or(0.0);
    out[i].ece = metrics::mean_ece(preds, split.test_masks);
  });
  return out;
}

std::string per_seed(const std::vector<RowScore>& rows, bool f) {
  std::string s;
  for (const auto& r : rows) s += (s.empty() ? "" : "/") + fmt("%.4f", f ? r.f_beta : r.ece);
  return s;
}

double mean_of(const std::vector<RowScore>& rows, bool f) {
  double acc = 0.0;
  for (const auto& r : rows) acc += f ? r.f_beta : r.ece;
  return acc / static_cast<double>(rows.size());
}

Outcome ablation_transmission(const Split& split) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto base = run_rows(split, Row::Baseline);
  const auto trans = run_rows(split, Row::Transmission);
  const double secs = seconds_since(t0);
  const double fb = mean_of(base, true);
  const double ft = mean_of(trans, true);
  return {ft > fb && secs < 45 * 60.0,
          "mean F_beta lambda1=0.3 " + fmt("%.4f", ft) + " [" + per_seed(trans, true) + "] vs lambda1=0 " +
              fmt("%.4f", fb) + " [" + per_seed(base, true) + "], " + fmt("%.0f s", secs)};
}

Outcome ablation_calibration(const Split& split) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto plain = run_rows(split, Row::PlainEntropy);
  const auto calib = run_rows(split, Row::Calibrated);
  const double secs = seconds_since(t0);
  const double ep = mean_of(plain, false);
  const double ec = mean_of(calib, false);
  return {ec < ep,
          "mean ECE calibrated " + fmt("%.4f", ec) + " [" + per_seed(calib, false) + "] vs plain entropy " +
              fmt("%.4f", ep) + " [" + per_seed(plain, false) + "], " + fmt("%.0f s", secs)};
}

Outcome transmission_plausibility() {
  int wins = 0;
  int scenes = 0;
  for (std::uint64_t s = 0; scenes < 50; ++s) {
    synth::SceneSpec spec = synth::SceneSpec::random(derive_seed(8, "plausibility", s));
    if (spec.opacity < 0.6) continue;
    ++scenes;
    const synth::LabeledScene sc = synth::generate(spec);
    const TransmissionMap t = estimate_transmission(sc.image, TransmissionConfig::for_size(spec.width, spec.height));
    double in = 0, out = 0;
    int nin = 0, nout = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (sc.mask[i] > 0.5) {
        in += t[i];
        ++nin;
      } else {
        out += t[i];
        ++nout;
      }
    }
    if (nin > 0 && nout > 0 && in / nin < out / nout) ++wins;
  }
  return {wins >= 45, std::to_string(wins) + "/50 scenes with lower mean T inside the mask (need >= 45)"};
}

Outcome cli_determinism() {
  const auto root = std::filesystem::temp_directory_path() / "smokelens_acceptance_cli";
  try {
    const auto steps = clicheck::run_pipeline(root, 8, 32, 1);
    const auto reference = clicheck::snapshot(root);
    std::string failures;
    for (const auto& step : steps) {
      const std::string why = clicheck::replay(root, step, reference);
      if (!why.empty()) failures += (failures.empty() ? "" : "; ") + why;
    }
    std::filesystem::remove_all(root);
    if (!failures.empty()) return {false, failures};
    return {true, std::to_string(steps.size()) + " subcommands replayed from their echoed configs, " +
                      std::to_string(reference.size()) + " files identical"};
  } catch (const std::exception& ex) {
    return {false, ex.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

  std::optional<Split> split;
  auto get_split = [&]() -> const Split& {
    if (!split) split = protocol_split();
    return *split;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"oracle equivalence", oracle_suite},
      {"uncertainty decomposition bounds", decomposition_suite},
      {"bilateral normalization", bilateral_suite},
      {"calibration metric sanity", calibration_sanity},
      {"transmission-loss ablation direction", [&] { return ablation_transmission(get_split()); }},
      {"calibrated-entropy ablation direction", [&] { return ablation_calibration(get_split()); }},
      {"transmission plausibility", transmission_plausibility},
      {"CLI replay determinism", cli_determinism},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!wanted(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    if (!o.pass) ++failed;
    std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
