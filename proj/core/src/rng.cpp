#include "regce/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace regce {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t combine(std::uint64_t h, std::uint64_t v) {
  return mix64(h ^ (v + kGolden + (h << 6) + (h >> 2)));
}

}  // namespace

Rng::Rng(std::uint64_t seed) : state_(mix64(seed + kGolden)) {}

Rng::Rng(std::uint64_t seed, RngStream stream)
    : state_(combine(mix64(seed + kGolden), static_cast<std::uint64_t>(stream))) {}

std::uint64_t Rng::next_u64() {
  state_ += kGolden;
  return mix64(state_);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::int64_t Rng::uniform_int(std::int64_t n) {
  if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
  // Lemire's multiply-shift with rejection; unbiased.
  const std::uint64_t range = static_cast<std::uint64_t>(n);
  unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * range;
  std::uint64_t low = static_cast<std::uint64_t>(m);
  if (low < range) {
    const std::uint64_t threshold = (0ULL - range) % range;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(next_u64()) * range;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::int64_t>(m >> 64);
}

double Rng::normal() {
  // Box-Muller; u clamped away from 0 so log stays finite.
  double u = uniform();
  if (u < 1e-300) u = 1e-300;
  const double v = uniform();
  const double r = std::sqrt(-2.0 * std::log(u));
  return r * std::cos(6.283185307179586476925286766559 * v);
}

double Rng::gamma(double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("Rng::gamma: alpha must be positive");
  if (alpha < 1.0) {
    const double u = uniform();
    return gamma(alpha + 1.0) * std::pow(u > 0.0 ? u : 1e-300, 1.0 / alpha);
  }
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x;
    double v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u > 0.0 ? u : 1e-300) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
      return d * v;
    }
  }
}

double Rng::beta(double alpha, double beta) {
  const double x = gamma(alpha);
  const double y = gamma(beta);
  const double s = x + y;
  if (s <= 0.0) return 0.5;
  return x / s;
}

SampleRng::SampleRng(std::uint64_t seed, RngStream stream, std::uint64_t epoch,
                     std::uint64_t sample, std::uint64_t view)
    : rng_(0) {
  std::uint64_t h = mix64(seed + kGolden);
  h = combine(h, static_cast<std::uint64_t>(stream));
  h = combine(h, epoch);
  h = combine(h, sample);
  h = combine(h, view);
  rng_ = Rng(h);
}

double SampleRng::uniform() { return rng_.uniform(); }

double SampleRng::uniform(double lo, double hi) { return rng_.uniform(lo, hi); }

std::int64_t SampleRng::uniform_int(std::int64_t n) { return rng_.uniform_int(n); }

double SampleRng::normal() { return rng_.normal(); }

bool SampleRng::bernoulli(double p) { return rng_.uniform() < p; }

}  // namespace regce
