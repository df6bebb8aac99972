#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace hilcbm {

/// Counter-based generator: output k of stream (seed, stream) is the
/// SplitMix64 finalizer applied to seed-derived key + k * golden-ratio
/// increment. Uses only integer arithmetic and one exact power-of-two
/// scaling, so every platform produces the same sequence.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed ^ mix(stream + 0x632BE59BD9B4E019ULL))) {}

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9E3779B97F4A7C15ULL); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Approximate standard normal: Irwin-Hall sum of twelve uniforms minus six.
  /// Mean 0, variance 1, support [-6, 6]; needs no transcendental functions.
  double normal() {
    double sum = 0.0;
    for (int i = 0; i < 12; ++i) sum += uniform();
    return sum - 6.0;
  }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  std::uint64_t counter() const noexcept { return counter_; }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> permutation(std::size_t n, CounterRng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.index(i)]);
  return p;
}

/// Endless stream of fixed-size batches; reshuffles whenever an epoch runs out.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : n_(n), batch_size_(batch_size < n ? batch_size : n), rng_(seed, 0xBA7C4) {}

  std::vector<std::size_t> next() {
    std::vector<std::size_t> batch;
    batch.reserve(batch_size_);
    while (batch.size() < batch_size_) {
      if (cursor_ == order_.size()) {
        order_ = permutation(n_, rng_);
        cursor_ = 0;
      }
      batch.push_back(order_[cursor_++]);
    }
    return batch;
  }

 private:
  std::size_t n_;
  std::size_t batch_size_;
  CounterRng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace hilcbm
