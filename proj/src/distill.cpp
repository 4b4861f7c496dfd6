#include "sds/distill.hpp"

#include <cmath>

namespace sds::distill {

using namespace ndg;

void SdsConfig::validate() const {
  if (!(t_min > 0 && t_min <= t_max && t_max < 1))
    throw UsageError("sds config: need 0 < t_min <= t_max < 1");
  if (omega < 0) throw UsageError("sds config: omega must be >= 0");
  if (batch < 1) throw UsageError("sds config: batch must be >= 1");
}

real sample_timestep(const SdsConfig& cfg, ndg::RngStream& rng) {
  if (cfg.t_min == cfg.t_max) return cfg.t_min;
  return rng.uniform(cfg.t_min, cfg.t_max);
}

real weight(const SdsConfig& cfg, const NoiseSchedule& sched, real t) {
  real w = cfg.weight_kind == WeightKind::SigmaSq ? sched.sigma(t) * sched.sigma(t) : real(1);
  if (cfg.weight_includes_alpha) w *= sched.alpha(t);
  return w;
}

SdsTerm sds_proxy(ndg::Tape& tape, Var x_model, const ScoreModel& model,
                  const Conditioning& cond, const SdsConfig& cfg, ndg::RngStream& rng) {
  cfg.validate();
  const Array x_val = x_model.value();
  SdsTerm term;
  Var acc;
  for (int b = 0; b < cfg.batch; ++b) {
    const real t = sample_timestep(cfg, rng);
    const Array eps = rng.normal_array(x_val.shape());
    const Array z = diffusion::diffuse(model.schedule(), x_val, t, eps);
    const Array eps_hat = diffusion::guided_predict(model, z, t, cond, cfg.omega);
    if (!eps_hat.all_finite())
      throw NumericError("sds: non-finite prediction at t = " + std::to_string(t));
    const Array resid = ndg::sub(eps_hat, eps);
    const real w = weight(cfg, model.schedule(), t);
    // w(t) <stop(eps_hat - eps), x>; the residual is a constant on the tape
    Var draw = dot(tape.constant(ndg::scale(resid, w)), x_model);
    acc = b == 0 ? draw : add(acc, draw);
    if (b == 0) {
      term.t_first = t;
      term.resid_norm = ndg::l2norm(resid);
    }
  }
  term.proxy = cfg.batch == 1 ? acc : mul_const(acc, real(1) / static_cast<real>(cfg.batch));
  return term;
}

namespace {
Var generated_in_model_space(ndg::Tape& tape, const dip::ImageParameterization& dip,
                             const ParamMap& params, const ScoreModel& model) {
  auto leaves = register_leaves(tape, params);
  Var x = dip.generate(tape, leaves);
  if (x.value().shape() != model.data_shape())
    throw ShapeError("generator output " + shape_str(x.value().shape()) +
                     " does not match model data shape " + shape_str(model.data_shape()));
  if (model.data_scale() != 1 || model.data_shift() != 0)
    x = add_const(mul_const(x, model.data_scale()), model.data_shift());
  return x;
}
}  // namespace

SdsGradReport sds_grad(const ScoreModel& model, const dip::ImageParameterization& dip,
                       const ParamMap& params, const Conditioning& cond, const SdsConfig& cfg,
                       ndg::RngStream& rng) {
  ndg::Tape tape;
  Var x = generated_in_model_space(tape, dip, params, model);
  SdsTerm term = sds_proxy(tape, x, model, cond, cfg, rng);
  SdsGradReport rep;
  rep.gradient = tape.backward(term.proxy);
  rep.proxy_loss = term.proxy.value().at(0);
  rep.t_first = term.t_first;
  rep.resid_norm = term.resid_norm;
  return rep;
}

ndg::GradientMap ldiff_full_grad(const ScoreModel& model, const dip::ImageParameterization& dip,
                                 const ParamMap& params, const Conditioning& cond,
                                 const SdsConfig& cfg, ndg::RngStream& rng) {
  cfg.validate();
  if (!model.supports_input_gradient())
    throw UsageError("full diffusion-loss gradient needs a model with input gradients");
  ndg::Tape tape;
  Var x = generated_in_model_space(tape, dip, params, model);
  GradientMap total;
  for (int b = 0; b < cfg.batch; ++b) {
    const real t = sample_timestep(cfg, rng);
    const auto [alpha, sigma] = model.schedule().coeffs(t);
    const Array eps = rng.normal_array(x.value().shape());
    Var z = add(mul_const(x, alpha), tape.constant(ndg::scale(eps, sigma)));
    Var pred = model.predict_eps_taped(tape, z, t, cond);
    if (cfg.omega > 0 && !cond.unconditional()) {
      Conditioning uncond = model.make_conditioning(std::nullopt);
      Var pred_u = model.predict_eps_taped(tape, z, t, uncond);
      pred = sub(mul_const(pred, real(1) + cfg.omega), mul_const(pred_u, cfg.omega));
    }
    const real w = weight(cfg, model.schedule(), t);
    const Array cot = ndg::scale(ndg::sub(pred.value(), eps), w);
    total.add_scaled_in_place(tape.backward(pred, cot), real(1) / static_cast<real>(cfg.batch));
  }
  return total;
}

GaussianOracle kl_gaussian_oracle(const Array& theta, real t, const GaussianPrior& prior,
                                  const SdsConfig& cfg, const NoiseSchedule& sched,
                                  const std::optional<GaussianPrior>& uncond_prior) {
  if (!(prior.std > 0) || (uncond_prior && !(uncond_prior->std > 0)))
    throw UsageError("gaussian oracle: degenerate prior std");
  if (theta.shape() != prior.mean.shape())
    throw ShapeError("gaussian oracle: theta/prior shape mismatch");
  const auto [alpha, sigma] = sched.coeffs(t);
  const real w = weight(cfg, sched, t);
  const real d = static_cast<real>(theta.size());
  const real v_c = alpha * alpha * prior.std * prior.std + sigma * sigma;

  GaussianOracle out;
  // guided smoothed density: precision (1+w)/v_c - w/v_u, Gaussian when positive
  real v_g = v_c;
  Array mean_g = ndg::scale(prior.mean, alpha);
  if (uncond_prior && cfg.omega > 0) {
    const real v_u =
        alpha * alpha * uncond_prior->std * uncond_prior->std + sigma * sigma;
    const real lam = (real(1) + cfg.omega) / v_c - cfg.omega / v_u;
    if (!(lam > 0))
      throw NumericError("gaussian oracle: guided precision is not positive at omega = " +
                         std::to_string(cfg.omega));
    v_g = real(1) / lam;
    mean_g = ndg::scale(
        ndg::add_scaled(ndg::scale(prior.mean, (real(1) + cfg.omega) * alpha / v_c),
                        uncond_prior->mean, -cfg.omega * alpha / v_u),
        v_g);
  }

  real sq = 0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const real diff = alpha * theta.at(i) - mean_g.at(i);
    sq += diff * diff;
  }
  out.kl = real(0.5) * (d * sigma * sigma / v_g + sq / v_g - d +
                        d * std::log(v_g / (sigma * sigma)));

  // d/dtheta of sigma/alpha w(t) KL = w sigma (alpha theta - mean_g) / v_g
  out.d_kl_d_theta = Array::uninit(theta.shape());
  real* g = out.d_kl_d_theta.mutable_data();
  for (std::size_t i = 0; i < theta.size(); ++i)
    g[i] = w * sigma * (alpha * theta.at(i) - mean_g.at(i)) / v_g;
  return out;
}

}  // namespace sds::distill
