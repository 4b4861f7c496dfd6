#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ndg/rng.hpp"
#include "sds/params.hpp"
#include "sds/schedule.hpp"

namespace sds::diffusion {

using ndg::Array;
using ndg::Shape;
using ndg::Var;

enum class ViewTag { None, Front, Side, Back, Overhead };
const char* view_tag_name(ViewTag v);

// Symbolic conditioning plus the model-resolved embedding row. The
// unconditional case is a distinguished value (empty tag, dedicated
// embedding row), never an all-zero vector by convention.
struct Conditioning {
  std::optional<std::string> tag;  // base vocabulary tag; nullopt = unconditional
  ViewTag view = ViewTag::None;
  Array embedding;                 // [d_cond]; undefined for models without embeddings

  bool unconditional() const { return !tag.has_value(); }
};

// Maps a noisy latent to predicted noise. Implementations are read-only after
// construction; concurrent predict calls are safe.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;

  virtual Array predict_eps(const Array& z, real t, const Conditioning& cond) const = 0;
  virtual Conditioning make_conditioning(const std::optional<std::string>& tag,
                                         ViewTag view) const = 0;
  Conditioning make_conditioning(const std::optional<std::string>& tag) const {
    return make_conditioning(tag, ViewTag::None);
  }
  virtual const NoiseSchedule& schedule() const = 0;
  virtual Shape data_shape() const = 0;

  // Differentiation through z; only models that can express their prediction
  // on a tape support it.
  virtual bool supports_input_gradient() const { return false; }
  virtual Var predict_eps_taped(ndg::Tape& tape, Var z, real t, const Conditioning& cond) const;

  virtual std::size_t param_count() const { return 0; }
  // Affine map from generator output into the model's data space.
  virtual real data_scale() const { return 1; }
  virtual real data_shift() const { return 0; }
};

// ---- analytic Gaussian-mixture score ----

struct GaussianMixture {
  std::vector<real> weights;  // sums to 1
  std::vector<Array> means;   // each [D]
  std::vector<real> stds;     // isotropic

  std::size_t dim() const { return means.empty() ? 0 : means[0].size(); }
  void validate() const;
};

// Closed-form score of the forward-smoothed mixture: component k at time t is
// N(alpha_t mu_k, (alpha_t^2 s_k^2 + sigma_t^2) I), and the predicted noise is
// -sigma_t times the score of that density.
class GaussianMixtureScore : public ScoreModel {
 public:
  GaussianMixtureScore(NoiseSchedule sched, GaussianMixture uncond,
                       std::map<std::string, GaussianMixture> cond = {});

  Array predict_eps(const Array& z, real t, const Conditioning& cond) const override;
  using ScoreModel::make_conditioning;
  Conditioning make_conditioning(const std::optional<std::string>& tag,
                                 ViewTag view) const override;
  const NoiseSchedule& schedule() const override { return sched_; }
  Shape data_shape() const override;

  bool supports_input_gradient() const override { return true; }
  Var predict_eps_taped(ndg::Tape& tape, Var z, real t, const Conditioning& cond) const override;

  const GaussianMixture& mixture_for(const Conditioning& cond) const;

 private:
  NoiseSchedule sched_;
  GaussianMixture uncond_;
  std::map<std::string, GaussianMixture> cond_;
};

// ---- trainable denoiser ----

struct DenoiserArch {
  Shape data_shape;                    // shape of one sample
  int width = 256;
  int blocks = 4;
  int time_features = 16;              // sin/cos pairs
  int d_cond = 16;
  std::vector<std::string> base_tags;  // closed vocabulary (view tags are built in)
  real data_scale = 1;                 // model space = scale * x + shift
  real data_shift = 0;

  std::size_t data_dim() const { return ndg::shape_numel(data_shape); }
};

// Residual MLP over (flattened latent, Fourier features of t, conditioning
// embedding). The embedding table rows: one per base tag, one per view tag,
// and a distinguished unconditional row.
class DenoiserMlp : public ScoreModel {
 public:
  DenoiserMlp(DenoiserArch arch, ParamMap params);
  static DenoiserMlp init(DenoiserArch arch, ndg::RngStream& rng);

  Array predict_eps(const Array& z, real t, const Conditioning& cond) const override;
  // Batched prediction: z [B x D], per-row conditioning.
  Array predict_eps_batch(const Array& z, const std::vector<real>& ts,
                          const std::vector<Conditioning>& conds) const;
  using ScoreModel::make_conditioning;
  Conditioning make_conditioning(const std::optional<std::string>& tag,
                                 ViewTag view) const override;
  const NoiseSchedule& schedule() const override { return sched_; }
  Shape data_shape() const override { return arch_.data_shape; }

  bool supports_input_gradient() const override { return true; }
  Var predict_eps_taped(ndg::Tape& tape, Var z, real t, const Conditioning& cond) const override;

  std::size_t param_count() const override { return sds::param_count(params_); }
  real data_scale() const override { return arch_.data_scale; }
  real data_shift() const override { return arch_.data_shift; }

  const DenoiserArch& arch() const { return arch_; }
  const ParamMap& params() const { return params_; }
  ParamMap& mutable_params() { return params_; }
  void set_schedule(NoiseSchedule s) { sched_ = s; }

  // Builds the network on a tape. `weights` resolves parameter names to Vars
  // (leaves during training, constants during prediction). z_rows is
  // [B x D], time/cond features are per-row constants.
  Var build(ndg::Tape& tape, Var z_rows, const Array& time_feats, const Array& cond_rows,
            const std::function<Var(const std::string&)>& weights) const;

  Array time_features(const std::vector<real>& ts) const;     // [B x 2F]
  Array embedding_rows(const std::vector<Conditioning>& conds) const;  // [B x d_cond]
  int tag_index(const std::string& tag) const;

 private:
  DenoiserArch arch_;
  NoiseSchedule sched_;
  ParamMap params_;
};

}  // namespace sds::diffusion
