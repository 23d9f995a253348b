#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "xferepi/hash.hpp"

namespace xferepi::util {

/// splitmix64 finalizer. Bijective on 64-bit words.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a master seed and a textual label.
/// Distinct labels give statistically independent streams, so work can be
/// scheduled in any order without perturbing results.
inline std::uint64_t derive_stream(std::uint64_t master, std::string_view label) {
  return mix64(master ^ fnv1a64(label));
}

/// Counter-style generator: output i is mix64 of seed + i * golden gamma
/// (splitmix64). Cheap to construct, no warm-up required.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in (0, 1]; safe as a log() argument.
  double uniform_pos() { return 1.0 - uniform01(); }

  /// Unbiased integer in [0, n). Lemire rejection scheme.
  std::uint64_t uniform_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_below: n must be positive");
    std::uint64_t threshold = (0 - n) % n;
    while (true) {
      unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
      if (static_cast<std::uint64_t>(m) >= threshold)
        return static_cast<std::uint64_t>(m >> 64);
    }
  }

 private:
  std::uint64_t state_;
};

/// Exact binomial draw by skipping geometric gaps between successes.
/// Expected work is O(n*p + 1), and probabilities below ~1e-9 neither
/// underflow nor bias the count.
inline std::int64_t binomial(CounterRng& rng, std::int64_t n, double p) {
  if (n < 0) throw std::invalid_argument("binomial: n must be non-negative");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("binomial: p outside [0,1]");
  if (n == 0 || p == 0.0) return 0;
  if (p == 1.0) return n;
  if (p > 0.5) return n - binomial(rng, n, 1.0 - p);

  const double log_q = std::log1p(-p);  // < 0
  std::int64_t count = 0;
  std::int64_t trials_used = 0;
  while (true) {
    // Failures before the next success, geometric with parameter p.
    double failures = std::floor(std::log(rng.uniform_pos()) / log_q);
    if (failures >= static_cast<double>(n - trials_used)) return count;
    trials_used += static_cast<std::int64_t>(failures) + 1;
    ++count;
  }
}

/// Joint draw of two exclusive outcomes from n trials: first ~ Bin(n, p1),
/// second ~ Bin(n - first, p2 / (1 - p1)). Marginals are Bin(n, p1) and
/// Bin(n, p2), and first + second <= n always holds.
struct TrinomialDraw {
  std::int64_t first = 0;
  std::int64_t second = 0;
};

inline TrinomialDraw trinomial(CounterRng& rng, std::int64_t n, double p1, double p2) {
  if (!(p1 >= 0.0 && p2 >= 0.0 && p1 + p2 <= 1.0 + 1e-12))
    throw std::invalid_argument("trinomial: probabilities invalid");
  TrinomialDraw out;
  out.first = binomial(rng, n, std::min(p1, 1.0));
  double rest = p1 >= 1.0 ? 0.0 : std::min(p2 / (1.0 - p1), 1.0);
  out.second = binomial(rng, n - out.first, rest);
  return out;
}

/// Fisher-Yates shuffle driven by the given stream.
template <typename T>
void shuffle(std::vector<T>& items, CounterRng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.uniform_below(i));
    std::swap(items[i - 1], items[j]);
  }
}

/// Inverse-CDF sampler over non-negative weights. Duplicating a row is
/// equivalent to doubling its weight, which downstream bootstrap logic
/// relies on.
class WeightedSampler {
 public:
  explicit WeightedSampler(std::span<const double> weights) {
    cumulative_.reserve(weights.size());
    double acc = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("WeightedSampler: negative weight");
      acc += w;
      cumulative_.push_back(acc);
    }
    if (cumulative_.empty() || acc <= 0.0)
      throw std::invalid_argument("WeightedSampler: total weight must be positive");
  }

  std::size_t sample(CounterRng& rng) const {
    double u = rng.uniform01() * cumulative_.back();
    std::size_t lo = 0, hi = cumulative_.size() - 1;
    while (lo < hi) {
      std::size_t mid = (lo + hi) / 2;
      if (cumulative_[mid] <= u)
        lo = mid + 1;
      else
        hi = mid;
    }
    return lo;
  }

  double total() const { return cumulative_.back(); }

 private:
  std::vector<double> cumulative_;
};

}  // namespace xferepi::util
