#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli_checks.hpp"
#include "doctest.h"
#include "smokelens/cli.hpp"
#include "smokelens/image.hpp"

using namespace smokelens;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("smokelens_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("synth writes pairs and a manifest") {
  const fs::path dir = scratch("synth");
  std::ostringstream out, err;
  CHECK(cli::run({"synth", "--n", "2", "--size", "16", "--out", dir.string()}, out, err) == cli::kExitOk);
  CHECK(fs::exists(dir / "image_0000.png"));
  CHECK(fs::exists(dir / "mask_0001.png"));
  CHECK_FALSE(fs::exists(dir / "image_0002.png"));
  CHECK(fs::exists(dir / "manifest.txt"));
  CHECK(fs::exists(dir / "run_config.ini"));
  fs::remove_all(dir);
}

TEST_CASE("usage errors exit 1 with help") {
  std::ostringstream out, err;
  CHECK(cli::run({"frobnicate"}, out, err) == cli::kExitUsage);
  CHECK(err.str().find("synth") != std::string::npos);
  std::ostringstream out2, err2;
  CHECK(cli::run({}, out2, err2) == cli::kExitUsage);
  std::ostringstream out3, err3;
  CHECK(cli::run({"synth"}, out3, err3) == cli::kExitUsage);
  std::ostringstream out4, err4;
  CHECK(cli::run({"--config", "/nonexistent/run.ini"}, out4, err4) == cli::kExitUsage);
  std::ostringstream out5, err5;
  CHECK(cli::run({"--help"}, out5, err5) == cli::kExitOk);
}

TEST_CASE("data errors exit 2") {
  const fs::path dir = scratch("dataerr");
  fs::create_directories(dir);
  std::ostringstream out, err;
  CHECK(cli::run({"train", "--data", dir.string(), "--out", (dir / "m.ckpt").string()}, out, err) ==
        cli::kExitData);
  std::ofstream(dir / "junk.png") << "not a png";
  CHECK(cli::run({"transmission", "--in", (dir / "junk.png").string(), "--out", (dir / "t.png").string()}, out,
                 err) == cli::kExitData);
  CHECK(cli::run({"eval", "--pred-dir", dir.string(), "--gt-dir", dir.string(), "--out", (dir / "e.csv").string()},
                 out, err) == cli::kExitData);
  fs::remove_all(dir);
}

TEST_CASE("run config round trip") {
  const fs::path dir = scratch("rc");
  fs::create_directories(dir);
  cli::RunConfig rc;
  rc.subcommand = "train";
  rc.values = {{"data", "/tmp/x y"}, {"epochs", "3"}, {"no-trans", "true"}, {"plain-entropy", "false"}};
  rc.write(dir / "c.ini");
  const cli::RunConfig back = cli::RunConfig::read(dir / "c.ini");
  CHECK(back.subcommand == "train");
  CHECK(back.values == rc.values);
  const auto args = back.to_args();
  CHECK(std::find(args.begin(), args.end(), "--no-trans") != args.end());
  CHECK(std::find(args.begin(), args.end(), "--plain-entropy") == args.end());
  fs::remove_all(dir);
}

TEST_CASE("full pipeline is fast and replays bit-identically") {
  const fs::path root = scratch("pipeline");
  const auto t0 = std::chrono::steady_clock::now();
  const auto steps = clicheck::run_pipeline(root, 8, 32, 1);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 60.0);

  const std::string csv = read_text(root / "eval.csv");
  CHECK(csv.rfind("image,mse,f_beta,ece\n", 0) == 0);
  CHECK(csv.find("\nmean,") != std::string::npos);
  CHECK(fs::exists(root / "pred" / "pred_0007.png"));
  CHECK(fs::exists(root / "unc" / "image_0001_uncertainty.f32"));
  CHECK(read_png_gray(root / "trans.png").width() == 32);

  const auto reference = clicheck::snapshot(root);
  for (const auto& step : steps) {
    INFO(step.name);
    CHECK(clicheck::replay(root, step, reference) == "");
  }
  fs::remove_all(root);
}
