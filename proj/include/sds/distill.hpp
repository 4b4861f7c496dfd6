#pragma once

#include <optional>

#include "sds/diffusion.hpp"
#include "sds/dip.hpp"

namespace sds::distill {

using diffusion::Conditioning;
using diffusion::NoiseSchedule;
using diffusion::ScoreModel;
using ndg::Array;
using ndg::Var;

enum class WeightKind { SigmaSq, Uniform };

struct SdsConfig {
  real omega = 100;
  WeightKind weight_kind = WeightKind::SigmaSq;
  bool weight_includes_alpha = false;  // optional extra alpha_t factor in w(t)
  real t_min = real(0.02);
  real t_max = real(0.98);
  int batch = 1;  // (t, eps) draws averaged per call

  void validate() const;
};

real sample_timestep(const SdsConfig& cfg, ndg::RngStream& rng);
real weight(const SdsConfig& cfg, const NoiseSchedule& sched, real t);

// One scalar whose gradient is the distillation update: the mean over `batch`
// draws of w(t) <stop(eps_hat - eps), x>. The score model is evaluated as a
// plain value call and enters the tape as a constant, so no backward pass ever
// crosses the model.
struct SdsTerm {
  Var proxy;
  real t_first = 0;        // t of the first draw
  real resid_norm = 0;     // ||eps_hat - eps|| of the first draw
};

SdsTerm sds_proxy(ndg::Tape& tape, Var x_model, const ScoreModel& model,
                  const Conditioning& cond, const SdsConfig& cfg, ndg::RngStream& rng);

struct SdsGradReport {
  ndg::GradientMap gradient;
  real proxy_loss = 0;
  real t_first = 0;
  real resid_norm = 0;
};

// Distillation gradient for a whole parameterization: builds the generator on
// a fresh tape, forms the proxy, and runs backward.
SdsGradReport sds_grad(const ScoreModel& model, const dip::ImageParameterization& dip,
                       const ParamMap& params, const Conditioning& cond, const SdsConfig& cfg,
                       ndg::RngStream& rng);

// Full diffusion-loss gradient, model Jacobian included: mean over draws of
// w(t) (eps_hat - eps) (d eps_hat / d z) alpha_t (d x / d theta), realized by
// seeding backward at the taped model output with cotangent w(t)(eps_hat-eps).
// Requires the model's input-gradient capability.
ndg::GradientMap ldiff_full_grad(const ScoreModel& model, const dip::ImageParameterization& dip,
                                 const ParamMap& params, const Conditioning& cond,
                                 const SdsConfig& cfg, ndg::RngStream& rng);

struct GaussianPrior {
  Array mean;
  real std = 1;
};

struct GaussianOracle {
  real kl = 0;          // KL(N(alpha theta, sigma^2 I) || smoothed prior at t)
  Array d_kl_d_theta;   // gradient scaled by w(t) sigma_t / alpha_t
};

// Closed form for the identity parameterization and Gaussian priors. With
// omega > 0 the guided score of conditional/unconditional Gaussian priors is
// again affine in z; the gradient then uses the guided residual mean. The KL
// value itself is reported for the unguided (conditional) smoothed prior.
GaussianOracle kl_gaussian_oracle(const Array& theta, real t, const GaussianPrior& prior,
                                  const SdsConfig& cfg, const NoiseSchedule& sched,
                                  const std::optional<GaussianPrior>& uncond_prior = std::nullopt);

}  // namespace sds::distill
