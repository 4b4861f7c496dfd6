// Test-side oracles, independent of the library code paths they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ndg/rng.hpp"
#include "sds/score_model.hpp"

namespace oracles {

using ndg::Array;
using ndg::real;

inline real sample_mean(const std::vector<real>& v) {
  real s = 0;
  for (real x : v) s += x;
  return s / static_cast<real>(v.size());
}

inline real sample_var(const std::vector<real>& v) {
  const real m = sample_mean(v);
  real s = 0;
  for (real x : v) s += (x - m) * (x - m);
  return s / static_cast<real>(v.size() - 1);
}

inline Array draw_from_mixture(const sds::diffusion::GaussianMixture& mix, ndg::RngStream& rng) {
  real u = rng.uniform();
  std::size_t k = 0;
  for (; k + 1 < mix.weights.size(); ++k) {
    if (u < mix.weights[k]) break;
    u -= mix.weights[k];
  }
  Array x = rng.normal_array(mix.means[k].shape());
  return ndg::add(ndg::scale(x, mix.stds[k]), mix.means[k]);
}

// Monte-Carlo posterior-mean denoiser E[eps | z_t] by self-normalized
// importance sampling with the prior as proposal.
inline Array mc_optimal_denoiser(const sds::diffusion::GaussianMixture& mix,
                                 const sds::diffusion::NoiseSchedule& sched, const Array& z,
                                 real t, int ndraws, ndg::RngStream& rng) {
  const auto [alpha, sigma] = sched.coeffs(t);
  const std::size_t d = z.size();
  std::vector<Array> xs;
  std::vector<double> logw(ndraws);
  xs.reserve(ndraws);
  for (int i = 0; i < ndraws; ++i) {
    Array x = draw_from_mixture(mix, rng);
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double dj = z.at(j) - alpha * x.at(j);
      sq += dj * dj;
    }
    logw[i] = -sq / (2.0 * sigma * sigma);
    xs.push_back(std::move(x));
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  double denom = 0;
  Array ex = Array::zeros(z.shape());
  real* pe = ex.mutable_data();
  for (int i = 0; i < ndraws; ++i) {
    const double w = std::exp(logw[i] - mx);
    denom += w;
    for (std::size_t j = 0; j < d; ++j) pe[j] += static_cast<real>(w) * xs[i].at(j);
  }
  for (std::size_t j = 0; j < d; ++j) pe[j] /= static_cast<real>(denom);
  // eps = (z - alpha x) / sigma, so E[eps|z] = (z - alpha E[x|z]) / sigma
  return ndg::scale(ndg::add_scaled(z, ex, -alpha), real(1) / sigma);
}

}  // namespace oracles
