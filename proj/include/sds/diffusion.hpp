#pragma once

#include <functional>

#include "sds/optim.hpp"
#include "sds/score_model.hpp"

namespace sds::diffusion {

// z_t = alpha_t x + sigma_t eps
Array diffuse(const NoiseSchedule& sched, const Array& x, real t, const Array& eps);

// x_hat = (z - sigma_t eps_hat) / alpha_t; alpha_t below the floor is an error.
Array tweedie_denoise(const NoiseSchedule& sched, const Array& z, const Array& eps_hat, real t);
constexpr real kTweedieAlphaFloor = real(1e-4);

// (1 + omega) * eps_cond - omega * eps_uncond
Array cfg_guide(const Array& eps_cond, const Array& eps_uncond, real omega);

// Guided prediction: cfg_guide over conditional and unconditional calls, or
// the plain conditional call when omega == 0 or cond is already unconditional.
Array guided_predict(const ScoreModel& model, const Array& z, real t, const Conditioning& cond,
                     real omega);

// Reverse-step noise magnitude.
//   ForwardMatch: sigma_t^2 - (alpha_t/alpha_s)^2 sigma_s^2, the step's own
//     forward noise. Keeps unit-Gaussian marginals exact at any step count.
//   Posterior: sigma_s^2 (1 - alpha_t^2 sigma_s^2 / (alpha_s^2 sigma_t^2)),
//     the conditional posterior variance. Under-disperses at coarse grids
//     (about -6% final variance for unit-Gaussian data at 64 steps).
enum class StepVariance { ForwardMatch, Posterior };

struct AncestralConfig {
  int nstep = 64;
  real tmin = real(1.0 / 64.0);
  real tmax = 1;
  real omega = 0;
  StepVariance variance = StepVariance::ForwardMatch;
  real eta = 1;  // noise std multiplier; 0 = deterministic
};

Array ancestral_sample(const ScoreModel& model, const Conditioning& cond,
                       const AncestralConfig& cfg, ndg::RngStream& rng);

// One reverse step t -> s: posterior mean around the Tweedie estimate plus
// noise of the selected magnitude.
Array ddpm_update(const NoiseSchedule& sched, const Array& z, const Array& eps_hat, real t,
                  real s, StepVariance variance, real eta, ndg::RngStream& rng);

struct DenoiserLossReport {
  real loss = 0;
  real t = 0;
  ndg::GradientMap grads;
};

enum class LossWeight { Uniform, SigmaSq };

// Single-draw weighted denoising objective w(t) ||eps_hat - eps||^2 with
// gradients for the model weights. `batch` rows of x share one t draw per row.
DenoiserLossReport denoiser_loss(const DenoiserMlp& model, const Array& x_rows,
                                 const std::vector<Conditioning>& conds, LossWeight weight,
                                 ndg::RngStream& rng);

struct DenoiserTrainConfig {
  int steps = 5000;
  int batch = 64;
  real lr = real(1e-3);
  real lr_final = real(1e-4);       // cosine decay endpoint
  real cond_drop_prob = real(0.1);  // rows trained against the unconditional output
  LossWeight weight = LossWeight::Uniform;
  AdamConfig adam;

  real lr_at(int step) const;
};

// Streams (x row, conditioning) minibatches; returns per-step loss.
using BatchSource =
    std::function<void(int step, int batch, ndg::RngStream& rng, Array& x_rows,
                       std::vector<Conditioning>& conds)>;

// Trains in place; invokes on_step(step, loss) when provided. Throws
// NumericError on divergence with the step index in the message.
void train_denoiser(DenoiserMlp& model, const BatchSource& source,
                    const DenoiserTrainConfig& cfg, ndg::RngStream& rng,
                    const std::function<void(int, real)>& on_step = {}, Adam* adam = nullptr,
                    int start_step = 0);

}  // namespace sds::diffusion
