#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace panfm {

// Seeded random stream with purpose-keyed substream derivation. All
// randomness in a run flows from one master seed; substreams keep data
// order, masking, probe init and dropout draws independent of each other
// so paired evaluation designs hold across checkpoints.
//
// Draw methods avoid std::distribution types: mt19937_64 output is
// specified by the standard, so sequences are stable across library
// versions.
class RngStream {
 public:
  explicit RngStream(uint64_t seed);

  // uniform in [0, 1)
  double u01();
  // standard normal (Box-Muller, pairs cached)
  double normal();
  // uniform integer in [0, n), n >= 1; unbiased via rejection
  uint64_t uniform_int(uint64_t n);
  // uniform integer in [lo, hi] inclusive
  int64_t uniform_range(int64_t lo, int64_t hi);

  // Derives an independent stream for (purpose, key). Depends only on the
  // seed this stream was constructed with, never on draw position.
  RngStream substream(std::string_view purpose, uint64_t key = 0) const;

  uint64_t seed() const { return seed_; }

  // Fisher-Yates shuffle driven by this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

uint64_t splitmix64(uint64_t x);

}  // namespace panfm
