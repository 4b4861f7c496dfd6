#include "sds/sceneopt.hpp"

#include <cmath>
#include <thread>

namespace sds::sceneopt {

using namespace ndg;

real LrSchedule::at(std::int64_t step) const {
  if (step <= warmup_steps && warmup_steps > 0) {
    const real f = static_cast<real>(step) / static_cast<real>(warmup_steps);
    return lr_init + (lr_peak - lr_init) * f;
  }
  if (step <= warmup_steps) return lr_peak;
  const std::int64_t last = std::max<std::int64_t>(total_steps - 1, warmup_steps + 1);
  const real f = std::min<real>(
      1, static_cast<real>(step - warmup_steps) / static_cast<real>(last - warmup_steps));
  return lr_final + (lr_peak - lr_final) * real(0.5) * (real(1) + std::cos(real(3.14159265358979323846) * f));
}

real RegularizerSchedule::orient_weight_at(std::int64_t step) const {
  if (step >= orient_anneal_steps) return orient_target;
  const real f = static_cast<real>(step) / static_cast<real>(orient_anneal_steps);
  return orient_start + (orient_target - orient_start) * f;
}

ModeChoice select_render_mode(const ShadingSchedule& sched, std::int64_t step,
                              ndg::RngStream& rng, bool enable_shading, bool enable_textureless,
                              std::optional<RenderMode> forced) {
  ModeChoice choice;
  auto lit = [&](RenderMode m) {
    choice.mode = m;
    choice.ambient = sched.ambient_on;
    choice.diffuse = sched.diffuse_on;
  };
  if (forced) {
    if (*forced == RenderMode::Albedo) return choice;
    lit(*forced);
    return choice;
  }
  if (step < sched.warmup_steps || !enable_shading) return choice;  // albedo
  if (rng.uniform() < sched.p_shaded) {
    const bool textureless =
        enable_textureless && rng.uniform() < sched.p_textureless_given_shaded;
    lit(textureless ? RenderMode::Textureless : RenderMode::Shaded);
  }
  return choice;
}

ViewTag resolve_view_tag(real elevation_deg, real azimuth_deg) {
  if (elevation_deg > 60) return ViewTag::Overhead;
  real az = std::fmod(azimuth_deg, real(360));
  if (az < 0) az += 360;
  // angular distance to front (0), side (90/270), back (180)
  auto dist = [az](real center) {
    real d = std::abs(az - center);
    return std::min(d, 360 - d);
  };
  const real d_front = dist(0);
  const real d_side = std::min(dist(90), dist(270));
  const real d_back = dist(180);
  if (d_front <= d_side && d_front <= d_back) return ViewTag::Front;
  if (d_side <= d_back) return ViewTag::Side;
  return ViewTag::Back;
}

Conditioning resolve_view_prompt(const ScoreModel& model, const std::string& base_tag,
                                 const CameraSample& cam, bool view_dependent, bool blend) {
  const std::optional<std::string> tag =
      base_tag.empty() ? std::nullopt : std::optional<std::string>(base_tag);
  if (!view_dependent || !tag) return model.make_conditioning(tag, ViewTag::None);
  const ViewTag near_tag = resolve_view_tag(cam.elevation_deg, cam.azimuth_deg);
  Conditioning cond = model.make_conditioning(tag, near_tag);
  if (!blend || near_tag == ViewTag::Overhead || !cond.embedding.defined()) return cond;

  // linear interpolation toward the second-nearest quadrant embedding
  real az = std::fmod(cam.azimuth_deg, real(360));
  if (az < 0) az += 360;
  const real quadrant = std::floor((az + 45) / 90);  // 0..4, centers at 0/90/180/270
  const real center = quadrant * 90;
  const real offset = az - center;  // in [-45, 45)
  const real next_center = center + (offset >= 0 ? 90 : -90);
  auto tag_at = [](real c) {
    real cc = std::fmod(c + 360, real(360));
    if (cc < 45 || cc >= 315) return ViewTag::Front;
    if (cc < 135 || (cc >= 225 && cc < 315)) return ViewTag::Side;
    return ViewTag::Back;
  };
  Conditioning other = model.make_conditioning(tag, tag_at(next_center));
  const real f = std::abs(offset) / 90;
  cond.embedding = ndg::add(ndg::scale(cond.embedding, 1 - f), ndg::scale(other.embedding, f));
  return cond;
}

SceneState init_scene(const TrainConfig& cfg, ndg::RngStream& rng) {
  SceneState st;
  ndg::RngStream init_rng = rng.fork("scene_init");
  st.params = render::init_field_params(cfg.render.arch, cfg.render.ipe, init_rng);
  st.adam = Adam(cfg.adam);
  return st;
}

namespace {

struct ViewResult {
  GradientMap grads;
  StepMetrics metrics;
};

ViewResult run_view(const SceneState& state, const TrainConfig& cfg, const ScoreModel& model,
                    std::int64_t step, int view) {
  ndg::RngStream view_rng =
      ndg::RngStream(cfg.seed).fork("train").fork(static_cast<std::uint64_t>(step)).fork("view").fork(
          static_cast<std::uint64_t>(view));

  ndg::RngStream cam_rng = view_rng.fork("camera");
  CameraSample cam = render::sample_camera(cfg.camera, cam_rng);
  ndg::RngStream light_rng = view_rng.fork("light");
  const Vec3 light_pos =
      render::sample_light_position(cam.pose, light_rng, cfg.light_noise_scale);
  ndg::RngStream mode_rng = view_rng.fork("mode");
  ModeChoice mode = select_render_mode(cfg.shading, step, mode_rng, cfg.enable_shading,
                                       cfg.enable_textureless);

  render::RenderInputs in;
  in.pose = cam.pose;
  in.focal_px = cam.focal_multiplier * static_cast<real>(cfg.render.width);
  in.light.position = light_pos;
  in.light.ambient = mode.ambient;
  in.light.diffuse = mode.diffuse;
  in.mode = mode.mode;
  in.lambda_sigma = cfg.render.ipe.lambda_at(step);
  in.jitter_salt = view_rng.fork("jitter").key();

  render::RenderValue rv = render::render_image(state.params, cfg.render, in);
  if (!rv.rgb.all_finite())
    throw NumericError("train step " + std::to_string(step) + ": non-finite render");

  Conditioning cond =
      resolve_view_prompt(model, cfg.base_tag, cam, cfg.view_dependent_prompts,
                          cfg.view_prompt_blend);

  // distillation cotangent: mean over draws of w(t) (eps_hat - eps), pushed
  // through the model-space affine
  const real scale_aff = model.data_scale();
  const real shift_aff = model.data_shift();
  Array x_model = rv.rgb;
  if (scale_aff != 1 || shift_aff != 0)
    x_model = ndg::add_scalar(ndg::scale(rv.rgb, scale_aff), shift_aff);
  if (x_model.shape() != model.data_shape())
    throw ShapeError("train step: render shape " + shape_str(x_model.shape()) +
                     " vs model data shape " + shape_str(model.data_shape()));

  ndg::RngStream sds_rng = view_rng.fork("sds");
  Array cot = Array::zeros(x_model.shape());
  ViewResult out;
  real proxy = 0;
  for (int b = 0; b < cfg.sds.batch; ++b) {
    const real t = distill::sample_timestep(cfg.sds, sds_rng);
    const Array eps = sds_rng.normal_array(x_model.shape());
    const Array z = diffusion::diffuse(model.schedule(), x_model, t, eps);
    const Array eps_hat = diffusion::guided_predict(model, z, t, cond, cfg.sds.omega);
    if (!eps_hat.all_finite())
      throw NumericError("train step " + std::to_string(step) +
                         ": non-finite prediction at t = " + std::to_string(t));
    const Array resid = ndg::sub(eps_hat, eps);
    const real w = distill::weight(cfg.sds, model.schedule(), t);
    cot = ndg::add_scaled(cot, resid, w * scale_aff / static_cast<real>(cfg.sds.batch));
    proxy += w * ndg::dot(resid, x_model) / static_cast<real>(cfg.sds.batch);
    if (b == 0) {
      out.metrics.t_drawn = t;
      out.metrics.resid_norm = ndg::l2norm(resid);
    }
  }

  render::RenderBackward rb =
      render::render_backward(state.params, cfg.render, in, cot,
                              cfg.reg.orient_weight_at(step), cfg.reg.opacity_weight);
  out.grads = std::move(rb.grads);
  out.metrics.sds_proxy = proxy;
  out.metrics.loss_orient = rb.orient_loss;
  out.metrics.loss_opacity = rb.opacity_loss;
  out.metrics.opacity_mean = ndg::mean(rv.opacity);
  out.metrics.first_mode = mode.mode;
  return out;
}

}  // namespace

ndg::GradientMap view_gradient(const SceneState& state, const TrainConfig& cfg,
                               const ScoreModel& model, std::int64_t step, int view,
                               StepMetrics* metrics) {
  ViewResult r = run_view(state, cfg, model, step, view);
  if (metrics) *metrics = r.metrics;
  return std::move(r.grads);
}

StepMetrics train_step(SceneState& state, const TrainConfig& cfg, const ScoreModel& model) {
  const std::int64_t step = state.step;
  std::vector<ViewResult> results(cfg.views);

  if (cfg.parallel_views && cfg.views > 1) {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(cfg.views);
    for (int v = 0; v < cfg.views; ++v) {
      pool.emplace_back([&, v] {
        try {
          results[v] = run_view(state, cfg, model, step, v);
        } catch (...) {
          errors[v] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (int v = 0; v < cfg.views; ++v) results[v] = run_view(state, cfg, model, step, v);
  }

  // mean over views, merged in view order
  GradientMap total;
  StepMetrics metrics = results[0].metrics;
  real opacity_acc = 0, orient_acc = 0, opac_loss_acc = 0;
  for (int v = 0; v < cfg.views; ++v) {
    total.add_scaled_in_place(results[v].grads, real(1) / static_cast<real>(cfg.views));
    opacity_acc += results[v].metrics.opacity_mean;
    orient_acc += results[v].metrics.loss_orient;
    opac_loss_acc += results[v].metrics.loss_opacity;
  }
  metrics.opacity_mean = opacity_acc / static_cast<real>(cfg.views);
  metrics.loss_orient = orient_acc / static_cast<real>(cfg.views);
  metrics.loss_opacity = opac_loss_acc / static_cast<real>(cfg.views);

  if (!total.all_finite()) {
    throw NumericError("train step " + std::to_string(step) +
                       ": non-finite gradient (t = " + std::to_string(metrics.t_drawn) +
                       ", |eps_hat - eps| = " + std::to_string(metrics.resid_norm) +
                       ", opacity mean = " + std::to_string(metrics.opacity_mean) + ")");
  }

  metrics.lr = cfg.lr.at(step);
  state.adam.step(state.params, total, metrics.lr);
  state.step += 1;
  return metrics;
}

}  // namespace sds::sceneopt
