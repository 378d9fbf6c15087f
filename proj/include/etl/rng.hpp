#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace etl {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

/// Derives an independent stream seed from a root seed and a role tag,
/// e.g. derive_seed(root, "shadow").
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t index);

/// Seeded generator whose output is identical on every platform.
///
/// The standard distributions are implementation-defined, so all draws are
/// built directly on the raw 64-bit output of mt19937_64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 bits of precision.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n);
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

std::vector<std::size_t> iota_indices(std::size_t n);

}  // namespace etl
