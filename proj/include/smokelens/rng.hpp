#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace smokelens {

// Stable sub-seed for (root seed, purpose, index). Independent of platform and
// standard library, so every random stream in a run can be re-derived.
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose,
                          std::uint64_t index = 0);

// Deterministic generator. std::mt19937_64's output sequence is fixed by the
// standard; the distributions below are hand-rolled because the std ones are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace smokelens
