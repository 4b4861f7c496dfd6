#pragma once

#include <functional>
#include <optional>

#include "sds/camera.hpp"
#include "sds/params.hpp"

namespace sds::render {

using ndg::Shape;
using ndg::Var;

enum class RenderMode { Albedo, Shaded, Textureless };
const char* render_mode_name(RenderMode m);

struct LightSpec {
  Vec3 position{};
  Vec3 diffuse{};  // l_rho
  Vec3 ambient{};  // l_a
};

// Integrated positional encoding: sin/cos at frequencies 2^0..2^(L-1), each
// damped by exp(-(2^k lambda)^2 / 2) — the expected encoding under an
// isotropic Gaussian with std lambda.
struct IpeConfig {
  int L = 8;
  real lambda_start = real(5e-2);
  real lambda_end = real(2e-3);
  int anneal_steps = 5000;

  // linear anneal over the first anneal_steps optimization steps
  real lambda_at(std::int64_t step) const;
};

Array integrated_pos_enc(const Array& positions, real lambda_sigma, int L);  // [N x 6L]
// Features plus their per-coordinate derivatives (for density normals).
void integrated_pos_enc_with_tangents(const Array& positions, real lambda_sigma, int L,
                                      Array& feats, std::array<Array, 3>& dfeats);

struct FieldArch {
  int width = 128;
  int blocks = 5;
  int bg_width = 64;
  int bg_layers = 3;
  int bg_freqs = 4;
};

struct BlobConfig {
  real scale = 5;        // lambda_tau
  real sigma = real(0.2);  // sigma_tau
};

ParamMap init_field_params(const FieldArch& arch, const IpeConfig& ipe, ndg::RngStream& rng);

// Pointwise field evaluation on a tape. dtau is the density gradient with
// respect to position, [N x 3], present when normals were requested.
struct FieldEval {
  Var tau;  // [N x 1]
  Var rho;  // [N x 3]; undefined when albedo was not requested
  std::optional<Var> dtau;
};

using FieldFn = std::function<FieldEval(ndg::Tape&, const Array& positions, bool want_normals,
                                        bool want_albedo)>;
using BackgroundFn = std::function<Var(ndg::Tape&, const Array& dirs)>;

// The scene field: residual MLP over IPE features, exp density head plus the
// center density blob, sigmoid albedo head.
FieldFn mlp_field(const std::map<std::string, Var>& leaves, const FieldArch& arch,
                  const IpeConfig& ipe, real lambda_sigma, const BlobConfig& blob);
BackgroundFn mlp_background(const std::map<std::string, Var>& leaves, const FieldArch& arch);
BackgroundFn constant_background(const Vec3& color);

// Normals from the density gradient: n = -g / ||g||, with a unit-z fallback
// where the gradient is shorter than 1e-8. valid_mask marks non-fallback rows.
struct NormalsResult {
  Var normals;  // [N x 3]
  Array valid_mask;  // [N x 1] constant 0/1
};
NormalsResult normals_from_density_gradient(ndg::Tape& tape, Var dtau);

// c = rho * (l_rho * max(0, n . dir_to_light) + l_a); Textureless uses white
// albedo, Albedo returns rho untouched.
Var shade(ndg::Tape& tape, Var rho, const std::optional<Var>& normals, const Array& positions,
          const LightSpec& light, RenderMode mode);

// alpha_i = 1 - exp(-tau_i delta_i); w_i = alpha_i prod_{j<i} (1 - alpha_j);
// rgb = sum_i w_i c_i + (1 - sum_i w_i) background.
struct CompositeResult {
  Var rgb;      // [rays x 3]
  Var weights;  // [rays x S]
  Var opacity;  // [rays x 1]
};
CompositeResult composite(ndg::Tape& tape, Var tau, Var colors, const Array& deltas,
                          Var background);

// sum over samples of stop_grad(w_i) max(0, n_i . view)^2, averaged per ray.
Var orientation_loss(ndg::Tape& tape, Var weights, Var normals, const Array& view_dirs,
                     const Array& valid_mask);
// sqrt((sum_i w_i)^2 + 0.01) per ray, averaged.
Var opacity_loss(ndg::Tape& tape, Var opacity);

struct RenderConfig {
  std::size_t width = 64;
  std::size_t height = 64;
  int samples_per_ray = 64;
  real sphere_radius = real(1.4);
  IpeConfig ipe;
  FieldArch arch;
  BlobConfig blob;
  int rows_per_chunk = 8;
  int threads = 1;
  bool whiten_background = false;  // substitute white background in textureless renders
};

struct RenderInputs {
  CameraPose pose;
  real focal_px = 64;
  LightSpec light;
  RenderMode mode = RenderMode::Albedo;
  real lambda_sigma = real(2e-3);
  std::uint64_t jitter_salt = 0;  // stream id for stratified samples
};

// Taped render of pixel rows [row0, row1).
struct RowsTaped {
  Var rgb;           // [rays x 3]
  Var opacity;       // [rays x 1]
  Var weights;       // [rays x S]
  std::optional<Var> normals;  // [points x 3]
  Var orient_sum;    // [1], per-ray mean over this chunk's rays
  Var opacity_sum;   // [1], per-ray mean over this chunk's rays
  std::size_t rays = 0;
};
RowsTaped render_rows_taped(ndg::Tape& tape, const FieldFn& field, const BackgroundFn& background,
                            const RenderConfig& cfg, const RenderInputs& in, std::size_t row0,
                            std::size_t row1);

struct RenderValue {
  Array rgb;      // [H x W x 3]
  Array opacity;  // [H x W]
};

// Forward-only render; chunked, optionally threaded, identical results for
// any chunking/thread count.
RenderValue render_image(const ParamMap& params, const RenderConfig& cfg, const RenderInputs& in);
RenderValue render_image_with(const FieldFn& field, const BackgroundFn& background,
                              const RenderConfig& cfg, const RenderInputs& in);

struct RenderBackward {
  ndg::GradientMap grads;
  real orient_loss = 0;
  real opacity_loss = 0;
};

// Recomputes the render chunk by chunk and runs backward with the given image
// cotangent plus regularizer weights. Chunks merge in a fixed order, so the
// result does not depend on the thread count.
RenderBackward render_backward(const ParamMap& params, const RenderConfig& cfg,
                               const RenderInputs& in, const Array& rgb_cotangent,
                               real w_orient, real w_opacity);

}  // namespace sds::render
