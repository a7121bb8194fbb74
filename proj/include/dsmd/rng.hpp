#pragma once

#include <array>
#include <cstdint>

namespace dsmd {

/// xoshiro256** seeded through splitmix64. The generator and every derived
/// draw below are fixed forever so that seeds reproduce across platforms.
///
///   uniform()   53 high bits of next() scaled to [0, 1)
///   gaussian()  Box-Muller, consumes exactly two uniform() draws, returns the
///               cosine branch (no cached second value)
///   index(n)    rejection sampling on next(), unbiased in [0, n)
class SeededRng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit SeededRng(std::uint64_t seed);

  std::uint64_t next();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double gaussian();
  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }
  std::uint64_t index(std::uint64_t n);

  const State& state() const { return s_; }
  void set_state(const State& s) { s_ = s; }

  /// Independent child stream; advances this generator by one draw.
  SeededRng split();

  static std::uint64_t splitmix64(std::uint64_t& x);

 private:
  SeededRng() = default;
  State s_{};
};

}  // namespace dsmd
