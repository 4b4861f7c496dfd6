#pragma once

#include <string>
#include <utility>

#include "ndg/array.hpp"

namespace sds::diffusion {

using ndg::real;

enum class ScheduleKind {
  Cosine,     // alpha = cos(pi t / 2), sigma = sin(pi t / 2)
  LinearVar,  // sigma^2 = t
};

ScheduleKind schedule_kind_from_string(const std::string& s);

// Variance-preserving coefficients: alpha(t)^2 + sigma(t)^2 == 1 on [0, 1].
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::Cosine;

  std::pair<real, real> coeffs(real t) const;  // (alpha, sigma)
  real alpha(real t) const { return coeffs(t).first; }
  real sigma(real t) const { return coeffs(t).second; }
};

}  // namespace sds::diffusion
