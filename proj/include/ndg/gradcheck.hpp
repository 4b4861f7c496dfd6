#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ndg/rng.hpp"
#include "ndg/tape.hpp"

namespace ndg {

struct GradCheckCase {
  std::string name;
  // Builds the graph under test and returns its output node. Leaves on the
  // tape are the parameters to be checked.
  std::function<Var(Tape&, RngStream&)> build;
  real step = real(1e-5);
  real tol = real(1e-6);
  // Elements probed per leaf; larger leaves are subsampled.
  int max_probes = 24;
};

struct GradCheckResult {
  std::string name;
  bool pass = false;
  real max_rel_err = 0;
  std::string worst_leaf;
  std::size_t worst_index = 0;
  std::string message;
};

// Backward vs central finite differences of <cot, output> through replay().
// Error metric is |fd - ad| / max(1, |fd|, |ad|): relative for large
// gradients, absolute near zero.
GradCheckResult check_gradient(const GradCheckCase& c, std::uint64_t seed);

std::vector<GradCheckResult> run_gradcheck_suite(const std::vector<GradCheckCase>& cases,
                                                 std::uint64_t seed);

}  // namespace ndg
