#pragma once

#include <optional>

#include "sds/distill.hpp"
#include "sds/renderer.hpp"

namespace sds::sceneopt {

using diffusion::Conditioning;
using diffusion::ScoreModel;
using diffusion::ViewTag;
using render::CameraDistribution;
using render::CameraSample;
using render::LightSpec;
using render::RenderMode;
using render::Vec3;
using ndg::Array;

// Linear warmup to the peak, then cosine decay to the final value at the last
// iteration.
struct LrSchedule {
  real lr_init = real(1e-9);
  real lr_peak = real(1e-4);
  real lr_final = real(1e-6);
  int warmup_steps = 3000;
  int total_steps = 15000;

  real at(std::int64_t step) const;
};

struct RegularizerSchedule {
  real orient_start = real(1e-4);
  real orient_target = real(1e-2);
  int orient_anneal_steps = 5000;
  real opacity_weight = real(2e-3);  // reasonable range [1e-3, 5e-3]

  real orient_weight_at(std::int64_t step) const;  // piecewise linear
};

struct ShadingSchedule {
  int warmup_steps = 1000;  // albedo-only opening
  real p_shaded = real(0.75);
  real p_textureless_given_shaded = real(0.5);
  Vec3 ambient_on = {real(0.1), real(0.1), real(0.1)};
  Vec3 diffuse_on = {real(0.9), real(0.9), real(0.9)};
};

struct ModeChoice {
  RenderMode mode = RenderMode::Albedo;
  Vec3 ambient = {1, 1, 1};
  Vec3 diffuse = {0, 0, 0};
};

// Warmup steps render albedo with ambient-one light; afterwards shading fires
// with probability p_shaded and textureless with p_textureless within that.
// enable_* gate the respective branches (the ablation switches).
ModeChoice select_render_mode(const ShadingSchedule& sched, std::int64_t step,
                              ndg::RngStream& rng, bool enable_shading = true,
                              bool enable_textureless = true,
                              std::optional<RenderMode> forced = std::nullopt);

// Overhead above 60 degrees elevation; otherwise the azimuth quadrant nearest
// front (0), side (+-90), back (180).
ViewTag resolve_view_tag(real elevation_deg, real azimuth_deg);

// Conditioning for a sampled view. With `blend`, the embedding interpolates
// between the two nearest azimuth-quadrant embeddings instead of snapping.
Conditioning resolve_view_prompt(const ScoreModel& model, const std::string& base_tag,
                                 const CameraSample& cam, bool view_dependent, bool blend);

struct TrainConfig {
  std::int64_t iterations = 15000;
  std::size_t resolution = 64;
  int views = 1;
  std::string base_tag;  // empty = unconditional

  distill::SdsConfig sds;  // omega defaults to 100
  LrSchedule lr;
  RegularizerSchedule reg;
  ShadingSchedule shading;
  AdamConfig adam{real(0.9), real(0.99), real(1e-8)};
  render::RenderConfig render;
  CameraDistribution camera;
  real light_noise_scale = 1;

  bool view_dependent_prompts = true;
  bool view_prompt_blend = false;
  bool enable_shading = true;
  bool enable_textureless = true;
  bool parallel_views = false;

  std::uint64_t seed = 0;

  void sync() {
    render.width = render.height = resolution;
    lr.total_steps = static_cast<int>(iterations);
  }
};

struct SceneState {
  ParamMap params;
  Adam adam;
  std::int64_t step = 0;
};

SceneState init_scene(const TrainConfig& cfg, ndg::RngStream& rng);

struct StepMetrics {
  real sds_proxy = 0;
  real resid_norm = 0;
  real t_drawn = 0;
  real loss_orient = 0;
  real loss_opacity = 0;
  real opacity_mean = 0;
  real lr = 0;
  RenderMode first_mode = RenderMode::Albedo;
};

// One optimization step: per view, sample camera/light/mode, render, form the
// distillation cotangent with view-resolved conditioning, add regularizers,
// backprop through the renderer; view gradients are averaged in view order and
// applied with Adam. Per-view work may run in parallel without changing any
// bit of the result.
StepMetrics train_step(SceneState& state, const TrainConfig& cfg, const ScoreModel& model);

// The per-view gradient (before averaging), exposed for the parallel-views
// equality contract.
ndg::GradientMap view_gradient(const SceneState& state, const TrainConfig& cfg,
                               const ScoreModel& model, std::int64_t step, int view,
                               StepMetrics* metrics = nullptr);

}  // namespace sds::sceneopt
