#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mhcl {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace detail

enum class RngStream : std::uint32_t {
  process = 1,
  imu = 2,
  rf = 3,
  init = 4,
};

// Counter-based generator: every (seed, realization, step, stream, a, b)
// tuple opens an independent reproducible draw sequence, so results do not
// depend on execution order or thread count.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  class Draws {
   public:
    explicit Draws(std::uint64_t state) : state_(state) {}

    double uniform() {  // in (0, 1]
      const std::uint64_t bits = detail::splitmix64(state_);
      return 1.0 - static_cast<double>(bits >> 11) * 0x1.0p-53;
    }

    double normal() {
      const double u1 = uniform();
      const double u2 = uniform();
      return std::sqrt(-2.0 * std::log(u1)) *
             std::cos(2.0 * std::numbers::pi * u2);
    }

   private:
    std::uint64_t state_;
  };

  Draws draws(std::uint32_t realization, std::uint32_t step, RngStream stream,
              std::int32_t a = 0, std::int32_t b = 0) const {
    std::uint64_t s = seed_;
    detail::splitmix64(s);
    s ^= (static_cast<std::uint64_t>(realization) << 32) | step;
    detail::splitmix64(s);
    s ^= (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
    detail::splitmix64(s);
    s ^= static_cast<std::uint64_t>(stream);
    detail::splitmix64(s);
    return Draws(s);
  }

 private:
  std::uint64_t seed_;
};

}  // namespace mhcl
