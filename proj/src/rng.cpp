#include "panfm/rng.hpp"

#include <cmath>

#include "panfm/util.hpp"

namespace panfm {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

RngStream::RngStream(uint64_t seed) : seed_(seed), eng_(splitmix64(seed)) {}

double RngStream::u01() {
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = u01();
  while (u1 <= 0.0) u1 = u01();
  const double u2 = u01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

uint64_t RngStream::uniform_int(uint64_t n) {
  PF_CHECK(n >= 1, "uniform_int: n must be >= 1, got ", n);
  if (n == 1) return 0;
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = eng_();
  } while (x >= limit);
  return x % n;
}

int64_t RngStream::uniform_range(int64_t lo, int64_t hi) {
  PF_CHECK(lo <= hi, "uniform_range: empty range [", lo, ", ", hi, "]");
  return lo + static_cast<int64_t>(uniform_int(static_cast<uint64_t>(hi - lo + 1)));
}

RngStream RngStream::substream(std::string_view purpose, uint64_t key) const {
  const uint64_t p = fnv1a64(purpose.data(), purpose.size());
  return RngStream(splitmix64(splitmix64(seed_ ^ p) + key));
}

}  // namespace panfm
