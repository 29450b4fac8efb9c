#pragma once

// Seeded random streams. Every stochastic step in the pipeline draws from an
// Rng constructed via derive_seed(master, stream_id), so a single master seed
// reproduces the whole run.

#include <cstdint>
#include <random>

namespace stad {

// Stream ids for derive_seed. Fixed constants; changing them changes every
// seeded artifact.
enum class SeedStream : std::uint64_t {
  kStage1Init = 1,
  kStage1Batch = 2,
  kStage2Init = 3,
  kStage2Batch = 4,
  kStage3Init = 5,
  kStage3Batch = 6,
  kSynthReference = 7,
  kSynthTarget = 8,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(splitmix64(master) ^ splitmix64(stream * 0x2545f4914f6cdd1dULL));
}

inline std::uint64_t derive_seed(std::uint64_t master, SeedStream stream) {
  return derive_seed(master, static_cast<std::uint64_t>(stream));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  // Uniform integer in [0, n).
  int below(int n) { return static_cast<int>(eng_() % static_cast<std::uint64_t>(n)); }
  int poisson(double rate) {
    return std::poisson_distribution<int>(rate)(eng_);
  }
  bool bernoulli(double p) {
    return std::bernoulli_distribution(p)(eng_);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = eng_() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace stad
