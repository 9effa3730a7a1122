#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace cmrc {

// Deterministic random stream. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; every distribution on top of it is
// implemented here so draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                          // [0, 1), 53-bit resolution
  double uniform(double lo, double hi);
  std::uint64_t below(std::uint64_t n);      // [0, n), unbiased
  std::int64_t range(std::int64_t lo, std::int64_t hi);  // [lo, hi] inclusive
  double normal();
  double truncated_normal(double stddev, double bound_in_stddevs = 2.0);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  // Independent child stream keyed by (this seed, key).
  Rng fork(std::uint64_t key) const;
  Rng fork(std::string_view key) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace cmrc
