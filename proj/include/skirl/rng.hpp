#pragma once

// Seeded RNG with named sub-streams. All randomness in a run flows from one
// root seed; sub(name) derives an independent deterministic stream, so adding
// a consumer in one component does not shift the draws of another.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace skirl {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(splitmix64(seed)) {}

  Rng sub(const std::string& name) const { return Rng(splitmix64(seed_ ^ fnv1a64(name))); }

  uint64_t u64() { return eng_(); }

  // uniform in [0,1)
  double uniform() { return double(u64() >> 11) * 0x1.0p-53; }

  float uniform_float(float lo, float hi) { return lo + float(uniform()) * (hi - lo); }

  // integer in [0, n)
  int below(int n) { return int(u64() % uint64_t(n)); }

  float normal() { return std::normal_distribution<float>(0.0f, 1.0f)(eng_); }

  // index sampled proportionally to nonnegative weights; all-zero -> uniform
  int categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (total <= 0.0) return below(int(weights.size()));
    double r = uniform() * total;
    double acc = 0.0;
    int last = 0;
    for (size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      acc += weights[i];
      last = int(i);
      if (r < acc) return last;
    }
    return last;
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
};

}  // namespace skirl
