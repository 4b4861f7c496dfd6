#include "ndg/rng.hpp"

#include <cmath>

namespace ndg {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}
RngStream::RngStream(std::uint64_t key, int) : key_(key) {}

RngStream RngStream::fork(std::string_view label) const {
  return RngStream(mix64(key_ ^ fnv1a(label)), 0);
}

RngStream RngStream::fork(std::uint64_t index) const {
  return RngStream(mix64(key_ ^ ((index + 1) * 0xD1B54A32D192ED03ULL)), 0);
}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

real RngStream::uniform() {
  // 53 high bits; exact in double, rounds harmlessly in float.
  return static_cast<real>((next_u64() >> 11) * (1.0 / 9007199254740992.0));
}

real RngStream::uniform(real a, real b) { return a + (b - a) * uniform(); }

real RngStream::normal() {
  const double u1 = ((next_u64() >> 11) + 1.0) * (1.0 / 9007199254740993.0);  // (0, 1]
  const double u2 = (next_u64() >> 11) * (1.0 / 9007199254740992.0);
  return static_cast<real>(std::sqrt(-2.0 * std::log(u1)) *
                           std::cos(2.0 * 3.14159265358979323846 * u2));
}

int RngStream::uniform_int(int n) {
  return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

Array RngStream::uniform_array(Shape shape, real a, real b) {
  Array out = Array::uninit(std::move(shape));
  real* p = out.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) p[i] = uniform(a, b);
  return out;
}

Array RngStream::normal_array(Shape shape) {
  Array out = Array::uninit(std::move(shape));
  real* p = out.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) p[i] = normal();
  return out;
}

}  // namespace ndg
