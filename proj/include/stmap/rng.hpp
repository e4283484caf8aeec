#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace stmap {

/// Stream tags used to carve independent substreams out of one run seed.
enum class Stream : std::uint64_t {
  Initial = 1,
  Brownian = 2,
  Bank = 3,
  Target = 4,
  Repetition = 5,
  Probe = 6,
};

namespace detail {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

}  // namespace detail

/// Hashes a seed and a tuple of integers into a substream key. Distinct tuples
/// give statistically independent streams.
constexpr std::uint64_t derive_key(std::uint64_t seed,
                                   std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t k = detail::mix64(seed + detail::kGolden);
  for (std::uint64_t p : path) k = detail::mix64(k ^ detail::mix64(p + detail::kGolden));
  return k;
}

/// Counter-based generator: the n-th output is a pure function of (key, n),
/// so a particle's draws do not depend on evaluation order or thread count.
/// Satisfies UniformRandomBitGenerator.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr CounterRng(std::uint64_t key) noexcept : key_(key) {}
  CounterRng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) noexcept
      : key_(derive_key(seed, path)) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  constexpr result_type operator()() noexcept {
    return detail::mix64(key_ + (++counter_) * detail::kGolden);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return double((*this)() >> 11) * 0x1.0p-53; }

  std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

/// Fills `out` with i.i.d. standard normals from one fresh stream.
template <typename Range>
void fill_standard_normal(CounterRng& rng, Range&& out) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : out) v = nd(rng);
}

}  // namespace stmap
