#pragma once

#include <cstdint>

namespace xspec {

// splitmix64 generator. Small, fast and fully deterministic across
// platforms, which matters because dataset generation, batch sampling and
// parameter init must replay bit-exactly for a given seed.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed + 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

  // Unbiased integer in [0, bound). bound must be > 0.
  uint32_t uniform_u32(uint32_t bound) {
    uint64_t m = static_cast<uint64_t>(next_u32()) * bound;
    uint32_t lo = static_cast<uint32_t>(m);
    if (lo < bound) {
      uint32_t threshold = -bound % bound;
      while (lo < threshold) {
        m = static_cast<uint64_t>(next_u32()) * bound;
        lo = static_cast<uint32_t>(m);
      }
    }
    return static_cast<uint32_t>(m >> 32);
  }

  // Uniform in [0, 1) with 24 bits of mantissa.
  float uniform01() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  // Uniform in [lo, hi).
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform01(); }

  // Derive an independent stream, e.g. one per view or per batch.
  Rng fork(uint64_t salt) {
    return Rng(next_u64() ^ (salt * 0xd1342543de82ef95ull));
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

 private:
  uint64_t state_;
};

}  // namespace xspec
