#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace smokelens::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

// args excludes the program name. `--config <file>` replays an echoed run.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Echo file written next to every run's outputs: "key = value" lines, the
// first being "subcommand = <name>".
struct RunConfig {
  std::string subcommand;
  std::vector<std::pair<std::string, std::string>> values;  // in declaration order

  void write(const std::filesystem::path& path) const;
  static RunConfig read(const std::filesystem::path& path);
  // argv tokens that reproduce the run; boolean flags appear only when true.
  std::vector<std::string> to_args() const;
};

}  // namespace smokelens::cli
