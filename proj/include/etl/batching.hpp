#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace etl {

// Shuffled mini-batches for one pass over n items. The permutation depends
// only on (seed, epoch); the final partial batch is kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

/// Endless stream of full batches, reshuffling after each pass.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  std::size_t n_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace etl
