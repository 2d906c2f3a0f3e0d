#include "smokelens/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "smokelens/errors.hpp"
#include "smokelens/image.hpp"
#include "smokelens/metrics.hpp"
#include "smokelens/nn.hpp"
#include "smokelens/parallel.hpp"
#include "smokelens/synth.hpp"
#include "smokelens/transmission.hpp"
#include "smokelens/uncertainty.hpp"

namespace smokelens::cli {

namespace fs = std::filesystem;

void RunConfig::write(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write run config '" + path.string() + "'");
  out << "subcommand = " << subcommand << "\n";
  for (const auto& [k, v] : values) out << k << " = " << v << "\n";
}

RunConfig RunConfig::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read run config '" + path.string() + "'");
  RunConfig rc;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw InvalidArgument("malformed run config line '" + line + "'");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 3);
    if (key == "subcommand") {
      rc.subcommand = value;
    } else {
      rc.values.emplace_back(std::move(key), std::move(value));
    }
  }
  if (rc.subcommand.empty()) throw InvalidArgument("run config has no subcommand");
  return rc;
}

std::vector<std::string> RunConfig::to_args() const {
  std::vector<std::string> args{subcommand};
  for (const auto& [k, v] : values) {
    if (v == "true") {
      args.push_back("--" + k);
    } else if (v != "false") {
      args.push_back("--" + k);
      args.push_back(v);
    }
  }
  return args;
}

namespace {

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

RunConfig echo(const CLI::App& sub) {
  RunConfig rc;
  rc.subcommand = sub.get_name();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help") continue;
    if (opt->get_expected_max() == 0) {
      rc.values.emplace_back(name, opt->count() > 0 ? "true" : "false");
    } else {
      rc.values.emplace_back(name, opt->count() > 0 ? opt->results().front() : opt->get_default_str());
    }
  }
  return rc;
}

// "image_0003.png" -> "0003"; other files keep their stem.
std::string sample_key(const fs::path& file, const std::string& prefix) {
  std::string stem = file.stem().string();
  if (stem.rfind(prefix, 0) == 0) stem = stem.substr(prefix.size());
  return stem;
}

std::vector<fs::path> png_files(const fs::path& dir, const std::string& prefix) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) throw CorruptDataset("'" + dir.string() + "' is not a directory");
  for (const auto& entry : fs::directory_iterator(dir)) {
    const fs::path& p = entry.path();
    if (!entry.is_regular_file() || p.extension() != ".png") continue;
    if (!prefix.empty() && p.filename().string().rfind(prefix, 0) != 0) continue;
    files.push_back(p);
  }
  std::sort(files.begin(), files.end());
  return files;
}

fs::path sibling(const fs::path& file, const std::string& suffix) {
  return fs::path(file.string() + suffix);
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

GrayMap scaled_by_ln2(const GrayMap& u) {
  GrayMap out = u;
  for (double& v : out.data()) v = std::clamp(v / std::log(2.0), 0.0, 1.0);
  return out;
}

struct TransmissionArgs {
  std::string in, out;
  int k = 0;
  int radius = 8;
  double eps = 1e-3;
  double fraction = 1e-3;
};

int run_transmission(const TransmissionArgs& a, const RunConfig& rc, std::ostream& out) {
  const ImageRGB image = read_png_rgb(a.in);
  TransmissionConfig cfg = TransmissionConfig::for_size(image.width(), image.height());
  if (a.k > 0) cfg.patch = a.k;
  cfg.radius = a.radius;
  cfg.eps = a.eps;
  cfg.fraction = a.fraction;
  const TransmissionEstimate est = estimate_transmission_detailed(image, cfg);

  const fs::path dst = a.out;
  ensure_parent(dst);
  write_png_gray(dst, est.refined);
  std::ofstream side(sibling(dst, ".txt"));
  if (!side) throw IoError("cannot write sidecar for '" + dst.string() + "'");
  side << "width " << image.width() << "\n"
       << "height " << image.height() << "\n"
       << "atmospheric_light " << fmt(est.light.r) << ' ' << fmt(est.light.g) << ' ' << fmt(est.light.b) << "\n"
       << "patch " << cfg.patch << "\n"
       << "fraction " << fmt(cfg.fraction) << "\n"
       << "radius " << cfg.radius << "\n"
       << "eps " << fmt(cfg.eps) << "\n"
       << "mean_transmission " << fmt(est.refined.mean()) << "\n";
  rc.write(sibling(dst, ".config.ini"));
  out << "transmission written to " << dst.string() << "\n";
  return kExitOk;
}

struct SynthArgs {
  int n = 200;
  int size = 64;
  std::uint64_t seed = 1;
  std::string out;
};

int run_synth(const SynthArgs& a, const RunConfig& rc, std::ostream& out) {
  const auto scenes = synth::generate_set(static_cast<std::size_t>(a.n), a.size, a.seed);
  synth::write_dataset(scenes, a.out);
  rc.write(fs::path(a.out) / "run_config.ini");
  out << scenes.size() << " scenes written to " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data, out;
  std::uint64_t seed = 1;
  int epochs = 10;
  int batch = 8;
  int samples = 10;
  double lambda1 = 0.3;
  double lambda2 = 0.01;
  bool no_trans = false;
  bool no_calib = false;
  bool plain_entropy = false;
  bool skip_uncertainty_net = false;
  std::string entropy_form = "two-class";
  double lr_scale = 100.0;
  int decay_epoch = 40;
};

nn::TrainConfig train_config(const TrainArgs& a) {
  nn::TrainConfig cfg;
  cfg.seed = a.seed;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.mc_samples = a.samples;
  cfg.weights = {a.lambda1, a.lambda2};
  cfg.use_transmission = !a.no_trans && a.lambda1 != 0.0;
  cfg.use_entropy = !a.no_calib && a.lambda2 != 0.0;
  cfg.calibrated = !a.plain_entropy;
  cfg.entropy_form = a.entropy_form == "single-term" ? losses::EntropyForm::SingleTerm
                                                     : losses::EntropyForm::TwoClass;
  cfg.train_uncertainty = !a.skip_uncertainty_net;
  cfg.lr_scale = a.lr_scale;
  cfg.lr_decay_epoch = a.decay_epoch;
  return cfg;
}

int run_train(const TrainArgs& a, const RunConfig& rc, std::ostream& out) {
  const synth::Dataset data = synth::read_dataset(a.data);
  nn::TrainingSet set{data.images, data.masks};
  const nn::TrainConfig cfg = train_config(a);

  const fs::path ckpt = a.out;
  ensure_parent(ckpt);
  std::ofstream trace(sibling(ckpt, ".trace.csv"));
  if (!trace) throw IoError("cannot write loss trace next to '" + ckpt.string() + "'");
  trace << "step,epoch,total,structure,kl,coherence,entropy,uncertainty\n";
  const auto result = nn::train(set, cfg, [&](const nn::StepLog& s) {
    trace << s.step << ',' << s.epoch << ',' << fmt(s.generator.total) << ',' << fmt(s.generator.structure)
          << ',' << fmt(s.generator.kl) << ',' << fmt(s.generator.coherence) << ','
          << fmt(s.generator.entropy) << ',' << fmt(s.uncertainty) << "\n";
  });
  nn::Model model = result.model;
  nn::save_checkpoint(ckpt, model, cfg, result.steps);
  rc.write(sibling(ckpt, ".config.ini"));
  if (!result.trace.empty()) {
    out << "trained " << result.steps << " steps, final L_gen " << fmt(result.trace.back().generator.total, "%.6f")
        << "\n";
  }
  return kExitOk;
}

struct PredictArgs {
  std::string ckpt, in, out_dir;
};

int run_predict(const PredictArgs& a, const RunConfig& rc, std::ostream& out) {
  nn::Checkpoint ck = nn::load_checkpoint(a.ckpt);
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.in)) {
    inputs = png_files(a.in, "image_");
    if (inputs.empty()) inputs = png_files(a.in, "");
  } else {
    inputs.push_back(a.in);
  }
  if (inputs.empty()) throw CorruptDataset("no PNG inputs under '" + a.in + "'");
  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  for (const fs::path& p : inputs) {
    const std::string key = sample_key(p, "image_");
    const nn::Prediction pred = nn::predict(ck.model, read_png_rgb(p));
    write_png_gray(dir / ("pred_" + key + ".png"), pred.probability);
    write_png_gray(dir / ("uphat_" + key + ".png"), scaled_by_ln2(pred.total_hat));
    write_png_gray(dir / ("uahat_" + key + ".png"), scaled_by_ln2(pred.aleatoric_hat));
  }
  rc.write(dir / "run_config.ini");
  out << inputs.size() << " predictions written to " << dir.string() << "\n";
  return kExitOk;
}

struct UncertaintyArgs {
  std::string model, in, out_dir;
  int samples = 10;
  std::uint64_t seed = 1;
};

int run_uncertainty(const UncertaintyArgs& a, const RunConfig& rc, std::ostream& out) {
  nn::Checkpoint ck = nn::load_checkpoint(a.model);
  const ImageRGB image = read_png_rgb(a.in);
  const SampleSet set = nn::sample_predictions(ck.model, image, a.samples, a.seed);
  const UncertaintyMaps maps = decompose(set);

  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  const std::string stem = fs::path(a.in).stem().string();
  write_png_gray(dir / (stem + "_up.png"), scaled_by_ln2(maps.total));
  write_png_gray(dir / (stem + "_ua.png"), scaled_by_ln2(maps.aleatoric));
  write_png_gray(dir / (stem + "_ue.png"), scaled_by_ln2(maps.epistemic));
  write_png_gray(dir / (stem + "_mean.png"), mean_prediction(set));
  const std::vector<GrayMap> raw{maps.total, maps.aleatoric, maps.epistemic};
  write_raw_f32(dir / (stem + "_uncertainty.f32"), raw);
  std::ofstream meta(dir / (stem + "_uncertainty.txt"));
  meta << "format float32-le\n"
       << "width " << image.width() << "\n"
       << "height " << image.height() << "\n"
       << "maps U_p U_a U_e\n"
       << "units nats\n"
       << "samples " << a.samples << "\n";
  rc.write(dir / "run_config.ini");
  out << "mean U_p " << fmt(maps.total.mean(), "%.6f") << ", mean U_a " << fmt(maps.aleatoric.mean(), "%.6f")
      << ", mean U_e " << fmt(maps.epistemic.mean(), "%.6f") << "\n";
  return kExitOk;
}

struct Pairs {
  std::vector<std::string> names;
  std::vector<GrayMap> preds;
  std::vector<Mask> masks;
};

Pairs load_pairs(const std::string& pred_dir, const std::string& gt_dir) {
  const auto gts = png_files(gt_dir, "mask_");
  if (gts.empty()) throw CorruptDataset("no mask_*.png files in '" + gt_dir + "'");
  Pairs pairs;
  pairs.names.resize(gts.size());
  pairs.preds.resize(gts.size());
  pairs.masks.resize(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) {
    pairs.names[i] = sample_key(gts[i], "mask_");
    const fs::path pred = fs::path(pred_dir) / ("pred_" + pairs.names[i] + ".png");
    if (!fs::exists(pred)) throw CorruptDataset("missing prediction '" + pred.string() + "'");
  }
  parallel_for(gts.size(), [&](std::size_t i) {
    pairs.masks[i] = binarize(read_png_gray(gts[i]));
    pairs.preds[i] = read_png_gray(fs::path(pred_dir) / ("pred_" + pairs.names[i] + ".png"));
    if (!pairs.preds[i].same_size(pairs.masks[i])) {
      throw CorruptDataset("size mismatch for sample '" + pairs.names[i] + "'");
    }
  });
  return pairs;
}

struct EvalArgs {
  std::string pred_dir, gt_dir, out;
  int bins = 10;
  bool adaptive = false;
};

int run_eval(const EvalArgs& a, const RunConfig& rc, std::ostream& out) {
  const Pairs pairs = load_pairs(a.pred_dir, a.gt_dir);
  metrics::FMeasureOptions fopts;
  if (a.adaptive) fopts.mode = metrics::ThresholdMode::Adaptive;
  const std::size_t n = pairs.preds.size();
  std::vector<double> mses(n), eces(n);
  std::vector<std::optional<double>> fs_(n);
  parallel_for(n, [&](std::size_t i) {
    mses[i] = metrics::mse(pairs.preds[i], pairs.masks[i]);
    fs_[i] = metrics::f_measure(pairs.preds[i], pairs.masks[i], fopts);
    eces[i] = metrics::ece(pairs.preds[i], pairs.masks[i], a.bins).ece;
  });

  const fs::path dst = a.out;
  ensure_parent(dst);
  std::ofstream csv(dst);
  if (!csv) throw IoError("cannot write '" + dst.string() + "'");
  csv << "image,mse,f_beta,ece\n";
  double mse_sum = 0.0, f_sum = 0.0, ece_sum = 0.0;
  std::size_t f_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    csv << pairs.names[i] << ',' << fmt(mses[i], "%.10g") << ','
        << (fs_[i] ? fmt(*fs_[i], "%.10g") : "NA") << ',' << fmt(eces[i], "%.10g") << "\n";
    mse_sum += mses[i];
    ece_sum += eces[i];
    if (fs_[i]) {
      f_sum += *fs_[i];
      ++f_count;
    }
  }
  const double dn = static_cast<double>(n);
  const std::string f_mean = f_count ? fmt(f_sum / static_cast<double>(f_count), "%.10g") : "NA";
  csv << "mean," << fmt(mse_sum / dn, "%.10g") << ',' << f_mean << ',' << fmt(ece_sum / dn, "%.10g") << "\n";
  rc.write(sibling(dst, ".config.ini"));
  out << "mMSE " << fmt(mse_sum / dn, "%.6f") << "  F_beta " << f_mean << "  ECE " << fmt(ece_sum / dn, "%.6f")
      << "  (" << n << " images)\n";
  return kExitOk;
}

struct ReportArgs {
  std::string pred_dir, gt_dir, reliability;
  int bins = 10;
};

int run_report(const ReportArgs& a, const RunConfig& rc, std::ostream& out) {
  const Pairs pairs = load_pairs(a.pred_dir, a.gt_dir);
  const metrics::ReliabilityReport rep = metrics::pooled_reliability(pairs.preds, pairs.masks, a.bins);
  const fs::path dst = a.reliability;
  ensure_parent(dst);
  std::ofstream csv(dst);
  if (!csv) throw IoError("cannot write '" + dst.string() + "'");
  csv << "bin,lower,upper,count,confidence,accuracy\n";
  for (std::size_t b = 0; b < rep.bins.size(); ++b) {
    const auto& bin = rep.bins[b];
    csv << b << ',' << fmt(bin.lower, "%.10g") << ',' << fmt(bin.upper, "%.10g") << ',' << bin.count << ','
        << fmt(bin.confidence, "%.10g") << ',' << fmt(bin.accuracy, "%.10g") << "\n";
  }
  rc.write(sibling(dst, ".config.ini"));
  out << "pooled ECE " << fmt(rep.ece, "%.6f") << " over " << rep.total << " pixels\n";
  return kExitOk;
}

int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err, bool allow_config) {
  CLI::App app{"smokelens: smoke segmentation with transmission guidance and calibrated uncertainty"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(0, 1);
  std::string config_path;
  if (allow_config) app.add_option("--config", config_path, "Replay a run from its echoed config file");

  TransmissionArgs ta;
  auto* t = app.add_subcommand("transmission", "Dark-channel transmission map of one image");
  t->add_option("--in", ta.in, "Input RGB PNG")->required();
  t->add_option("--out", ta.out, "Output grayscale PNG")->required();
  t->add_option("--k", ta.k, "Dark-channel patch side (odd); 0 picks by image size")
      ->check(CLI::NonNegativeNumber);
  t->add_option("--radius", ta.radius, "Guided-filter radius")->check(CLI::PositiveNumber);
  t->add_option("--eps", ta.eps, "Guided-filter regularizer")->check(CLI::PositiveNumber);
  t->add_option("--fraction", ta.fraction, "Brightest dark-channel fraction")->check(CLI::Range(1e-9, 1.0));

  SynthArgs sa;
  auto* s = app.add_subcommand("synth", "Generate a labeled synthetic smoke dataset");
  s->add_option("--n", sa.n, "Scene count")->check(CLI::PositiveNumber);
  s->add_option("--size", sa.size, "Square frame side")->check(CLI::Range(8, 4096));
  s->add_option("--seed", sa.seed, "Root seed");
  s->add_option("--out", sa.out, "Output directory")->required();

  TrainArgs tra;
  auto* tr = app.add_subcommand("train", "Train the segmentation and uncertainty networks");
  tr->add_option("--data", tra.data, "Dataset directory")->required();
  tr->add_option("--out", tra.out, "Checkpoint path")->required();
  tr->add_option("--seed", tra.seed, "Root seed");
  tr->add_option("--epochs", tra.epochs, "Epochs")->check(CLI::NonNegativeNumber);
  tr->add_option("--batch", tra.batch, "Batch size")->check(CLI::PositiveNumber);
  tr->add_option("--B", tra.samples, "Monte Carlo samples per step")->check(CLI::PositiveNumber);
  tr->add_option("--lambda1", tra.lambda1, "Transmission coherence weight")->check(CLI::NonNegativeNumber);
  tr->add_option("--lambda2", tra.lambda2, "Entropy weight")->check(CLI::NonNegativeNumber);
  tr->add_flag("--no-trans", tra.no_trans, "Drop the transmission coherence term");
  tr->add_flag("--no-calib", tra.no_calib, "Drop the entropy regularizer");
  tr->add_flag("--plain-entropy", tra.plain_entropy, "Entropy without the uncertainty temperature");
  tr->add_flag("--skip-uncertainty-net", tra.skip_uncertainty_net, "Do not fit the uncertainty network");
  tr->add_option("--entropy-form", tra.entropy_form, "two-class or single-term")
      ->check(CLI::IsMember({"two-class", "single-term"}));
  tr->add_option("--lr-scale", tra.lr_scale, "Multiplier on the base learning rates")->check(CLI::PositiveNumber);
  tr->add_option("--decay-epoch", tra.decay_epoch, "Epoch from which the learning rate is scaled by 0.8")
      ->check(CLI::NonNegativeNumber);

  PredictArgs pa;
  auto* p = app.add_subcommand("predict", "Sampling-free prediction and uncertainty maps");
  p->add_option("--ckpt", pa.ckpt, "Checkpoint")->required();
  p->add_option("--in", pa.in, "Input PNG or directory of image_*.png")->required();
  p->add_option("--out-dir", pa.out_dir, "Output directory")->required();

  UncertaintyArgs ua;
  auto* u = app.add_subcommand("uncertainty", "Monte Carlo uncertainty decomposition of one image");
  u->add_option("--model", ua.model, "Checkpoint")->required();
  u->add_option("--in", ua.in, "Input RGB PNG")->required();
  u->add_option("--B", ua.samples, "Sample count")->check(CLI::PositiveNumber);
  u->add_option("--seed", ua.seed, "Root seed");
  u->add_option("--out-dir", ua.out_dir, "Output directory")->required();

  EvalArgs ea;
  auto* e = app.add_subcommand("eval", "Per-image and mean mMSE, F-beta and ECE");
  e->add_option("--pred-dir", ea.pred_dir, "Directory of pred_*.png")->required();
  e->add_option("--gt-dir", ea.gt_dir, "Directory of mask_*.png")->required();
  e->add_option("--out", ea.out, "CSV report")->required();
  e->add_option("--bins", ea.bins, "ECE bins")->check(CLI::PositiveNumber);
  e->add_flag("--adaptive", ea.adaptive, "Adaptive F-beta threshold (twice the mean prediction)");

  ReportArgs ra;
  auto* r = app.add_subcommand("report", "Pooled reliability-diagram table");
  r->add_option("--pred-dir", ra.pred_dir, "Directory of pred_*.png")->required();
  r->add_option("--gt-dir", ra.gt_dir, "Directory of mask_*.png")->required();
  r->add_option("--reliability", ra.reliability, "CSV bin table")->required();
  r->add_option("--bins", ra.bins, "Bin count")->check(CLI::PositiveNumber);

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  if (!config_path.empty()) {
    if (!app.get_subcommands().empty()) {
      err << "error: --config cannot be combined with a subcommand\n";
      return kExitUsage;
    }
    RunConfig rc;
    try {
      rc = RunConfig::read(config_path);
    } catch (const std::exception& ex) {
      err << "error: " << ex.what() << "\n";
      return kExitUsage;
    }
    return dispatch(rc.to_args(), out, err, false);
  }
  if (app.get_subcommands().empty()) {
    err << "error: a subcommand is required\n" << app.help();
    return kExitUsage;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const RunConfig rc = echo(*sub);
  try {
    if (sub == t) return run_transmission(ta, rc, out);
    if (sub == s) return run_synth(sa, rc, out);
    if (sub == tr) return run_train(tra, rc, out);
    if (sub == p) return run_predict(pa, rc, out);
    if (sub == u) return run_uncertainty(ua, rc, out);
    if (sub == e) return run_eval(ea, rc, out);
    if (sub == r) return run_report(ra, rc, out);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  return dispatch(args, out, err, true);
}

}  // namespace smokelens::cli
