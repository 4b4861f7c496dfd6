#include "sds/diffusion.hpp"

#include <cmath>

namespace sds::diffusion {

Array diffuse(const NoiseSchedule& sched, const Array& x, real t, const Array& eps) {
  if (x.shape() != eps.shape())
    throw ndg::ShapeError("diffuse: x " + ndg::shape_str(x.shape()) + " vs eps " +
                          ndg::shape_str(eps.shape()));
  const auto [alpha, sigma] = sched.coeffs(t);
  return ndg::add(ndg::scale(x, alpha), ndg::scale(eps, sigma));
}

Array tweedie_denoise(const NoiseSchedule& sched, const Array& z, const Array& eps_hat, real t) {
  if (z.shape() != eps_hat.shape()) throw ndg::ShapeError("tweedie: shape mismatch");
  const auto [alpha, sigma] = sched.coeffs(t);
  if (alpha < kTweedieAlphaFloor)
    throw ndg::NumericError("tweedie: alpha(" + std::to_string(t) + ") = " +
                            std::to_string(alpha) + " below the 1e-4 floor");
  return ndg::scale(ndg::add_scaled(z, eps_hat, -sigma), real(1) / alpha);
}

Array cfg_guide(const Array& eps_cond, const Array& eps_uncond, real omega) {
  if (eps_cond.shape() != eps_uncond.shape()) throw ndg::ShapeError("cfg_guide: shape mismatch");
  if (omega < 0) throw ndg::UsageError("cfg_guide: omega must be >= 0");
  return ndg::add_scaled(ndg::scale(eps_cond, real(1) + omega), eps_uncond, -omega);
}

Array guided_predict(const ScoreModel& model, const Array& z, real t, const Conditioning& cond,
                     real omega) {
  Array eps_c = model.predict_eps(z, t, cond);
  if (omega == 0 || cond.unconditional()) return eps_c;
  Conditioning uncond = model.make_conditioning(std::nullopt, ViewTag::None);
  Array eps_u = model.predict_eps(z, t, uncond);
  return cfg_guide(eps_c, eps_u, omega);
}

Array ddpm_update(const NoiseSchedule& sched, const Array& z, const Array& eps_hat, real t,
                  real s, StepVariance variance, real eta, ndg::RngStream& rng) {
  const auto [at, st] = sched.coeffs(t);
  const auto [as, ss] = sched.coeffs(s);
  Array x_hat = tweedie_denoise(sched, z, eps_hat, t);
  const real ratio = (at * ss) / (as * st);
  // posterior mean: alpha_s x_hat + sigma_s ratio eps_hat
  Array out = ndg::add_scaled(ndg::scale(x_hat, as), eps_hat, ss * ratio);
  real noise_var;
  if (variance == StepVariance::Posterior) {
    noise_var = ss * ss * std::max(real(0), real(1) - ratio * ratio);
  } else {
    noise_var = std::max(real(0), st * st - (at / as) * (at / as) * ss * ss);
  }
  const real noise_std = eta * std::sqrt(noise_var);
  if (noise_std > 0) out = ndg::add_scaled(out, rng.normal_array(z.shape()), noise_std);
  return out;
}

Array ancestral_sample(const ScoreModel& model, const Conditioning& cond,
                       const AncestralConfig& cfg, ndg::RngStream& rng) {
  if (cfg.nstep < 1) throw ndg::UsageError("ancestral_sample: nstep must be >= 1");
  if (!(cfg.tmin > 0 && cfg.tmin <= cfg.tmax && cfg.tmax <= 1))
    throw ndg::UsageError("ancestral_sample: need 0 < tmin <= tmax <= 1");

  // The grid is clamped where alpha underflows; cos(pi/2) is ~6e-17 and the
  // posterior mean divides by it.
  const real t_ceiling = real(0.9999);
  auto grid_t = [&](int i) {
    real t = cfg.nstep == 1 ? cfg.tmax
                            : cfg.tmax + (cfg.tmin - cfg.tmax) * static_cast<real>(i) /
                                             static_cast<real>(cfg.nstep - 1);
    return std::min(t, t_ceiling);
  };

  Array z = rng.normal_array(model.data_shape());
  Array eps_hat;
  real t_last = grid_t(0);
  for (int i = 0; i < cfg.nstep; ++i) {
    const real t = grid_t(i);
    eps_hat = guided_predict(model, z, t, cond, cfg.omega);
    if (!eps_hat.all_finite())
      throw ndg::NumericError("ancestral_sample: non-finite prediction at step " +
                              std::to_string(i) + " (t = " + std::to_string(t) + ")");
    if (i + 1 < cfg.nstep) z = ddpm_update(model.schedule(), z, eps_hat, t, grid_t(i + 1), cfg.variance, cfg.eta, rng);
    t_last = t;
  }
  return tweedie_denoise(model.schedule(), z, eps_hat, t_last);
}

DenoiserLossReport denoiser_loss(const DenoiserMlp& model, const Array& x_rows,
                                 const std::vector<Conditioning>& conds, LossWeight weight,
                                 ndg::RngStream& rng) {
  using namespace ndg;
  const std::size_t b = x_rows.shape()[0];
  const std::size_t d = x_rows.shape()[1];
  if (conds.size() != b) throw ShapeError("denoiser_loss: conditioning row count");

  // one t per row, endpoints clamped away from the exact schedule edges
  std::vector<real> ts(b);
  for (auto& t : ts) t = rng.uniform(real(1e-3), real(1) - real(1e-3));
  Array eps = rng.normal_array({b, d});

  Array z = Array::uninit({b, d});
  Array w_rows = Array::uninit({b, 1});
  for (std::size_t r = 0; r < b; ++r) {
    const auto [alpha, sigma] = model.schedule().coeffs(ts[r]);
    for (std::size_t j = 0; j < d; ++j)
      z.mutable_data()[r * d + j] = alpha * x_rows.at2(r, j) + sigma * eps.at2(r, j);
    w_rows.mutable_data()[r] = weight == LossWeight::SigmaSq ? sigma * sigma : real(1);
  }

  Tape tape;
  auto leaves = register_leaves(tape, model.params());
  auto weights = [&](const std::string& name) { return leaves.at(name); };
  Var pred = model.build(tape, tape.constant(z), model.time_features(ts),
                         model.embedding_rows(conds), weights);
  Var resid = sub(pred, tape.constant(eps));
  Var per_row = sum_axis(mul(resid, resid), 1);
  Var loss = mean_all(mul(per_row, tape.constant(w_rows)));

  DenoiserLossReport rep;
  rep.loss = loss.value().at(0);
  rep.t = ts[0];
  if (!std::isfinite(rep.loss)) {
    real znorm = ndg::l2norm(z);
    throw NumericError("denoiser_loss: non-finite loss (t[0] = " + std::to_string(ts[0]) +
                       ", |z| = " + std::to_string(znorm) + ")");
  }
  rep.grads = tape.backward(loss);
  return rep;
}

real DenoiserTrainConfig::lr_at(int step) const {
  if (steps <= 1) return lr;
  const real f = static_cast<real>(step) / static_cast<real>(steps - 1);
  return lr_final + (lr - lr_final) * real(0.5) * (real(1) + std::cos(real(3.14159265358979) * f));
}

void train_denoiser(DenoiserMlp& model, const BatchSource& source,
                    const DenoiserTrainConfig& cfg, ndg::RngStream& rng,
                    const std::function<void(int, real)>& on_step, Adam* adam_external,
                    int start_step) {
  Adam local(cfg.adam);
  Adam& adam = adam_external ? *adam_external : local;
  for (int step = start_step; step < cfg.steps; ++step) {
    ndg::RngStream step_rng = rng.fork(static_cast<std::uint64_t>(step));
    Array x_rows;
    std::vector<Conditioning> conds;
    ndg::RngStream data_rng = step_rng.fork("data");
    source(step, cfg.batch, data_rng, x_rows, conds);
    // classifier-free guidance needs the unconditional branch trained too
    ndg::RngStream drop_rng = step_rng.fork("cond_drop");
    for (auto& c : conds)
      if (!c.unconditional() && drop_rng.uniform() < cfg.cond_drop_prob)
        c = model.make_conditioning(std::nullopt, ViewTag::None);

    ndg::RngStream loss_rng = step_rng.fork("loss");
    DenoiserLossReport rep = denoiser_loss(model, x_rows, conds, cfg.weight, loss_rng);
    if (!rep.grads.all_finite())
      throw ndg::NumericError("train_denoiser: non-finite gradient at step " +
                              std::to_string(step));
    adam.step(model.mutable_params(), rep.grads, cfg.lr_at(step));
    if (on_step) on_step(step, rep.loss);
  }
}

}  // namespace sds::diffusion
