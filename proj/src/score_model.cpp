#include "sds/score_model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace sds::diffusion {

const char* view_tag_name(ViewTag v) {
  switch (v) {
    case ViewTag::None: return "none";
    case ViewTag::Front: return "front view";
    case ViewTag::Side: return "side view";
    case ViewTag::Back: return "back view";
    case ViewTag::Overhead: return "overhead view";
  }
  return "?";
}

Var ScoreModel::predict_eps_taped(ndg::Tape&, Var, real, const Conditioning&) const {
  throw ndg::UsageError("score model does not support input gradients");
}

// ---- GaussianMixtureScore ----

void GaussianMixture::validate() const {
  if (weights.empty() || weights.size() != means.size() || weights.size() != stds.size())
    throw ndg::UsageError("mixture: component lists disagree");
  real wsum = 0;
  for (real w : weights) {
    if (w < 0) throw ndg::UsageError("mixture: negative weight");
    wsum += w;
  }
  if (std::abs(wsum - real(1)) > real(1e-5))
    throw ndg::UsageError("mixture: weights sum to " + std::to_string(wsum));
  for (const Array& m : means)
    if (m.size() != means[0].size()) throw ndg::ShapeError("mixture: mean dims disagree");
  for (real s : stds)
    if (!(s > 0)) throw ndg::UsageError("mixture: std must be positive");
}

GaussianMixtureScore::GaussianMixtureScore(NoiseSchedule sched, GaussianMixture uncond,
                                           std::map<std::string, GaussianMixture> cond)
    : sched_(sched), uncond_(std::move(uncond)), cond_(std::move(cond)) {
  uncond_.validate();
  for (const auto& [tag, m] : cond_) m.validate();
}

const GaussianMixture& GaussianMixtureScore::mixture_for(const Conditioning& cond) const {
  if (cond.unconditional()) return uncond_;
  auto it = cond_.find(*cond.tag);
  if (it == cond_.end()) throw ndg::UsageError("mixture score: unknown tag '" + *cond.tag + "'");
  return it->second;
}

Conditioning GaussianMixtureScore::make_conditioning(const std::optional<std::string>& tag,
                                                     ViewTag view) const {
  if (tag && cond_.find(*tag) == cond_.end())
    throw ndg::UsageError("mixture score: unknown tag '" + *tag + "'");
  Conditioning c;
  c.tag = tag;
  c.view = view;
  return c;
}

Shape GaussianMixtureScore::data_shape() const { return uncond_.means[0].shape(); }

Array GaussianMixtureScore::predict_eps(const Array& z, real t, const Conditioning& cond) const {
  const GaussianMixture& mix = mixture_for(cond);
  const auto [alpha, sigma] = sched_.coeffs(t);
  const std::size_t k = mix.weights.size();
  const std::size_t d = z.size();

  // responsibilities over smoothed components, log-sum-exp stabilized
  std::vector<real> logits(k);
  for (std::size_t i = 0; i < k; ++i) {
    const real v = alpha * alpha * mix.stds[i] * mix.stds[i] + sigma * sigma;
    real sq = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const real dj = z.at(j) - alpha * mix.means[i].at(j);
      sq += dj * dj;
    }
    logits[i] = std::log(mix.weights[i]) - real(0.5) * static_cast<real>(d) * std::log(v) -
                sq / (2 * v);
  }
  const real mx = *std::max_element(logits.begin(), logits.end());
  real denom = 0;
  for (std::size_t i = 0; i < k; ++i) {
    logits[i] = std::exp(logits[i] - mx);
    denom += logits[i];
  }

  Array out = Array::zeros(z.shape());
  real* po = out.mutable_data();
  for (std::size_t i = 0; i < k; ++i) {
    const real r = logits[i] / denom;
    const real v = alpha * alpha * mix.stds[i] * mix.stds[i] + sigma * sigma;
    const real c = r * sigma / v;
    for (std::size_t j = 0; j < d; ++j) po[j] += c * (z.at(j) - alpha * mix.means[i].at(j));
  }
  return out;
}

Var GaussianMixtureScore::predict_eps_taped(ndg::Tape& tape, Var z, real t,
                                            const Conditioning& cond) const {
  const GaussianMixture& mix = mixture_for(cond);
  const auto [alpha, sigma] = sched_.coeffs(t);
  const std::size_t k = mix.weights.size();
  const real d = static_cast<real>(z.value().size());

  std::vector<Var> diffs;
  std::vector<Var> logits;
  std::vector<real> vars(k);
  for (std::size_t i = 0; i < k; ++i) {
    vars[i] = alpha * alpha * mix.stds[i] * mix.stds[i] + sigma * sigma;
    Var diff = sub(z, tape.constant(ndg::scale(mix.means[i], alpha)));
    diffs.push_back(diff);
    Var sq = sum_all(mul(diff, diff));
    logits.push_back(add_const(mul_const(sq, real(-0.5) / vars[i]),
                               std::log(mix.weights[i]) - real(0.5) * d * std::log(vars[i])));
  }
  // softmax with a constant shift taken from the forward values
  real mx = logits[0].value().at(0);
  for (const Var& l : logits) mx = std::max(mx, l.value().at(0));
  Var denom = tape.constant(real(0));
  std::vector<Var> es;
  for (std::size_t i = 0; i < k; ++i) {
    Var e = exp(add_const(logits[i], -mx));
    es.push_back(e);
    denom = add(denom, e);
  }
  Var out = tape.constant(Array::zeros(z.value().shape()));
  for (std::size_t i = 0; i < k; ++i) {
    Var r = div(es[i], denom);
    out = add(out, mul(broadcast_to(mul_const(r, sigma / vars[i]), z.value().shape()), diffs[i]));
  }
  return out;
}

// ---- DenoiserMlp ----

namespace {
std::string blk(int i, const char* suffix) {
  return "den.b" + std::to_string(i) + "." + suffix;
}
}  // namespace

DenoiserMlp::DenoiserMlp(DenoiserArch arch, ParamMap params)
    : arch_(std::move(arch)), params_(std::move(params)) {}

DenoiserMlp DenoiserMlp::init(DenoiserArch arch, ndg::RngStream& rng) {
  ParamMap p;
  const std::size_t d = arch.data_dim();
  const std::size_t in_dim = d + 2 * static_cast<std::size_t>(arch.time_features) +
                             static_cast<std::size_t>(arch.d_cond);
  const std::size_t w = static_cast<std::size_t>(arch.width);
  auto dense = [&](const std::string& name, std::size_t rows, std::size_t cols, real gain) {
    const real std_dev = gain / std::sqrt(static_cast<real>(rows));
    p[name + "_w"] = ndg::scale(rng.normal_array({rows, cols}), std_dev);
    p[name + "_b"] = Array::zeros({1, cols});
  };
  dense("den.stem", in_dim, w, std::sqrt(real(2)));
  for (int b = 0; b < arch.blocks; ++b) {
    dense("den.b" + std::to_string(b) + ".l1", w, w, std::sqrt(real(2)));
    dense("den.b" + std::to_string(b) + ".l2", w, w, real(0.5));
  }
  dense("den.head", w, d, real(0.01));
  const std::size_t dc = static_cast<std::size_t>(arch.d_cond);
  if (!arch.base_tags.empty())
    p["cond.base"] = ndg::scale(rng.normal_array({arch.base_tags.size(), dc}), real(0.3));
  p["cond.view"] = ndg::scale(rng.normal_array({5, dc}), real(0.3));
  p["cond.uncond"] = ndg::scale(rng.normal_array({1, dc}), real(0.3));
  return DenoiserMlp(std::move(arch), std::move(p));
}

int DenoiserMlp::tag_index(const std::string& tag) const {
  for (std::size_t i = 0; i < arch_.base_tags.size(); ++i)
    if (arch_.base_tags[i] == tag) return static_cast<int>(i);
  throw ndg::UsageError("denoiser: tag '" + tag + "' not in vocabulary");
}

Conditioning DenoiserMlp::make_conditioning(const std::optional<std::string>& tag,
                                            ViewTag view) const {
  Conditioning c;
  c.tag = tag;
  c.view = view;
  const std::size_t dc = static_cast<std::size_t>(arch_.d_cond);
  Array emb = Array::zeros({dc});
  real* pe = emb.mutable_data();
  if (!tag) {
    const Array& u = params_.at("cond.uncond");
    for (std::size_t j = 0; j < dc; ++j) pe[j] = u.at(j);
  } else {
    const int ti = tag_index(*tag);
    const Array& base = params_.at("cond.base");
    const Array& views = params_.at("cond.view");
    const int vi = static_cast<int>(view);
    for (std::size_t j = 0; j < dc; ++j)
      pe[j] = base.at2(static_cast<std::size_t>(ti), j) + views.at2(static_cast<std::size_t>(vi), j);
  }
  c.embedding = emb;
  return c;
}

Array DenoiserMlp::time_features(const std::vector<real>& ts) const {
  // Geometric frequencies pi .. 64 pi; octaves past ~2^6 oscillate faster
  // than the network can resolve on t in [0, 1] and only inject noise.
  const std::size_t f = static_cast<std::size_t>(arch_.time_features);
  const real base = real(3.14159265358979323846);
  const real top = real(64);
  Array out = Array::uninit({ts.size(), 2 * f});
  real* p = out.mutable_data();
  for (std::size_t r = 0; r < ts.size(); ++r) {
    for (std::size_t k = 0; k < f; ++k) {
      const real freq =
          base * std::pow(top, f > 1 ? static_cast<real>(k) / static_cast<real>(f - 1) : 0);
      p[r * 2 * f + 2 * k] = std::sin(freq * ts[r]);
      p[r * 2 * f + 2 * k + 1] = std::cos(freq * ts[r]);
    }
  }
  return out;
}

Array DenoiserMlp::embedding_rows(const std::vector<Conditioning>& conds) const {
  const std::size_t dc = static_cast<std::size_t>(arch_.d_cond);
  Array out = Array::uninit({conds.size(), dc});
  real* p = out.mutable_data();
  for (std::size_t r = 0; r < conds.size(); ++r) {
    if (!conds[r].embedding.defined() || conds[r].embedding.size() != dc)
      throw ndg::UsageError("denoiser: conditioning lacks a resolved embedding");
    for (std::size_t j = 0; j < dc; ++j) p[r * dc + j] = conds[r].embedding.at(j);
  }
  return out;
}

Var DenoiserMlp::build(ndg::Tape& tape, Var z_rows, const Array& time_feats,
                       const Array& cond_rows,
                       const std::function<Var(const std::string&)>& weights) const {
  using namespace ndg;
  Var in = concat({z_rows, tape.constant(time_feats), tape.constant(cond_rows)}, 1);
  Var h = add(matmul(in, weights("den.stem_w")), weights("den.stem_b"));
  for (int b = 0; b < arch_.blocks; ++b) {
    const std::string l1 = "den.b" + std::to_string(b) + ".l1";
    const std::string l2 = "den.b" + std::to_string(b) + ".l2";
    Var f = layernorm_last(h);
    f = swish(add(matmul(f, weights(l1 + "_w")), weights(l1 + "_b")));
    f = add(matmul(f, weights(l2 + "_w")), weights(l2 + "_b"));
    h = add(h, f);
  }
  Var out = add(matmul(layernorm_last(h), weights("den.head_w")), weights("den.head_b"));
  return out;
}

Array DenoiserMlp::predict_eps(const Array& z, real t, const Conditioning& cond) const {
  return predict_eps_batch(z.reshaped({1, arch_.data_dim()}), {t}, {cond})
      .reshaped(z.shape());
}

Array DenoiserMlp::predict_eps_batch(const Array& z, const std::vector<real>& ts,
                                     const std::vector<Conditioning>& conds) const {
  if (z.rank() != 2 || z.shape()[0] != ts.size() || ts.size() != conds.size())
    throw ndg::ShapeError("denoiser batch: row counts disagree");
  ndg::Tape tape;
  auto weights = [&](const std::string& name) { return tape.constant(params_.at(name)); };
  Var zv = tape.constant(z);
  Var out = build(tape, zv, time_features(ts), embedding_rows(conds), weights);
  return out.value();
}

Var DenoiserMlp::predict_eps_taped(ndg::Tape& tape, Var z, real t,
                                   const Conditioning& cond) const {
  const Shape orig = z.value().shape();
  Var rows = reshape(z, {1, arch_.data_dim()});
  auto weights = [&](const std::string& name) { return tape.constant(params_.at(name)); };
  Var out = build(tape, rows, time_features({t}), embedding_rows({cond}), weights);
  return reshape(out, orig);
}

}  // namespace sds::diffusion
