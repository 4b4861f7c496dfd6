#pragma once

#include <cstdint>
#include <string_view>

#include "ndg/array.hpp"

namespace ndg {

// Counter-based stream: output i depends only on (key, i), so a stream can be
// replayed or forked without shared mutable state. Forks derive a child key
// from a label or index and never consume draws from the parent.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  RngStream fork(std::string_view label) const;
  RngStream fork(std::uint64_t index) const;

  std::uint64_t next_u64();
  real uniform();                    // [0, 1)
  real uniform(real a, real b);
  real normal();                     // Box-Muller; consumes two u64 draws
  int uniform_int(int n);            // [0, n)

  Array uniform_array(Shape shape, real a, real b);
  Array normal_array(Shape shape);

  std::uint64_t key() const { return key_; }

 private:
  RngStream(std::uint64_t key, int);  // raw key constructor
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace ndg
