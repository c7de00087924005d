#pragma once

#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

namespace soapapo {

/// SplitMix64 (Steele, Lea, Flood 2014). The state starts at the seed and every
/// draw adds the golden-gamma constant before mixing, so sequences are identical
/// on every platform and easy to reproduce in any language.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform-ish index in [0, bound). Plain modulo: the bias is below 2^-50 for
  /// the sizes this project shuffles and keeps the recipe trivial to port.
  std::uint64_t below(std::uint64_t bound) noexcept { return next() % bound; }

 private:
  std::uint64_t state_;
};

/// Fisher-Yates from the last position down: for i = n-1 .. 1, swap(i, below(i+1)).
template <typename T>
void fisher_yates(std::vector<T>& items, SplitMix64& rng) {
  if (items.size() < 2) return;
  for (std::size_t i = items.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i + 1));
    std::swap(items[i], items[j]);
  }
}

/// Shuffled permutation of 0..n-1 under the recipe above.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  SplitMix64 rng(seed);
  fisher_yates(idx, rng);
  return idx;
}

}  // namespace soapapo
