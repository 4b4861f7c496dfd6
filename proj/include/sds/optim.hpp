#pragma once

#include <cstdint>

#include "sds/params.hpp"

namespace sds {

struct AdamConfig {
  real beta1 = real(0.9);
  real beta2 = real(0.99);
  real eps = real(1e-8);
};

// Adam with bias correction. Parameters missing from the gradient map are
// treated as zero-gradient (their moments still decay), so a step over the
// same keys is deterministic regardless of which leaves were touched.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamMap& params, const ndg::GradientMap& grads, real lr);

  const ParamMap& m() const { return m_; }
  const ParamMap& v() const { return v_; }
  std::int64_t t() const { return t_; }
  void restore(ParamMap m, ParamMap v, std::int64_t t);

 private:
  AdamConfig cfg_;
  ParamMap m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace sds
