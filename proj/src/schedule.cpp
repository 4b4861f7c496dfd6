#include "sds/schedule.hpp"

#include <cmath>

namespace sds::diffusion {

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "linear_var") return ScheduleKind::LinearVar;
  throw ndg::UsageError("unknown schedule '" + s + "' (cosine | linear_var)");
}

std::pair<real, real> NoiseSchedule::coeffs(real t) const {
  if (!(t >= real(0) && t <= real(1)))
    throw ndg::UsageError("schedule: t = " + std::to_string(t) + " outside [0, 1]");
  switch (kind) {
    case ScheduleKind::Cosine: {
      const double h = 1.5707963267948966 * static_cast<double>(t);
      return {static_cast<real>(std::cos(h)), static_cast<real>(std::sin(h))};
    }
    case ScheduleKind::LinearVar: {
      const double s2 = static_cast<double>(t);
      return {static_cast<real>(std::sqrt(1.0 - s2)), static_cast<real>(std::sqrt(s2))};
    }
  }
  throw ndg::UsageError("schedule: bad kind");
}

}  // namespace sds::diffusion
