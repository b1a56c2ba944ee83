#pragma once

#include <cstdint>
#include <vector>

namespace regce {

// Stream tags keep independent random-number consumers from colliding on
// the same counter keys even when they share the experiment seed.
enum class RngStream : std::uint64_t {
  init = 1,        // parameter initialization
  noise = 2,       // label-noise injection
  shuffle = 3,     // per-epoch index shuffling
  augment = 4,     // per-sample augmentation draws
  split = 5,       // confident-split views
  mixmatch = 6,    // mixup lambdas, unlabeled view draws
  sharpness = 7,   // perturbation directions
  synthetic = 8,   // synthetic dataset generation
  resample = 9,    // class-balanced resampling
};

// Sequential splitmix64 generator. All randomness in the project flows
// through this engine (never std:: distributions, whose sequences are
// implementation-defined) so runs are reproducible bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  Rng(std::uint64_t seed, RngStream stream);

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [0, n), n > 0.
  std::int64_t uniform_int(std::int64_t n);
  // Standard normal via Box-Muller; consumes two uniforms per call.
  double normal();
  // Gamma(alpha, 1), alpha > 0 (Marsaglia-Tsang, boosted for alpha < 1).
  double gamma(double alpha);
  // Beta(alpha, beta) via the two-gamma ratio.
  double beta(double alpha, double beta);

  // Fisher-Yates shuffle, iteration order fixed.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      const std::int64_t j = uniform_int(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::uint64_t state_;
};

// Counter-based per-sample stream: the key (seed, stream, epoch, sample,
// view) fully determines the draw sequence, so augmenting sample i at
// epoch e yields the same result no matter which batch or thread touched
// it, or in which order.
class SampleRng {
 public:
  SampleRng(std::uint64_t seed, RngStream stream, std::uint64_t epoch,
            std::uint64_t sample, std::uint64_t view);

  double uniform();
  double uniform(double lo, double hi);
  std::int64_t uniform_int(std::int64_t n);
  double normal();
  bool bernoulli(double p);

 private:
  Rng rng_;
};

}  // namespace regce
