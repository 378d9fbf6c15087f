#include "etl/batching.hpp"

#include <algorithm>

#include "etl/errors.hpp"
#include "etl/rng.hpp"

namespace etl {

namespace {

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  auto order = iota_indices(n);
  Rng rng(derive_seed(seed, "epoch", epoch));
  rng.shuffle(order);
  return order;
}

}  // namespace

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  auto order = permutation(n, seed, epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

BatchStream::BatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_size_(std::min(batch_size, n)), seed_(seed) {
  if (n == 0) throw Error("cannot draw batches from an empty set");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
}

std::vector<std::size_t> BatchStream::next() {
  if (order_.empty() || cursor_ + batch_size_ > order_.size()) {
    order_ = permutation(n_, seed_, pass_++);
    cursor_ = 0;
  }
  std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_size_));
  cursor_ += batch_size_;
  return batch;
}

}  // namespace etl
