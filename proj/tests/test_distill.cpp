#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sds/distill.hpp"

using namespace sds::distill;
namespace dip = sds::dip;
using namespace sds::diffusion;
using sds::ParamMap;
using ndg::Array;
using ndg::real;

namespace {

NoiseSchedule cosine() { return NoiseSchedule{ScheduleKind::Cosine}; }

GaussianMixture single(real mean, real s, std::size_t d) {
  GaussianMixture m;
  m.weights = {1};
  m.means = {Array::full({d}, mean)};
  m.stds = {s};
  return m;
}

// eps_hat = (z - alpha x0) / sigma: recovers the injected noise exactly when
// the generator currently outputs x0.
class PosteriorEchoModel : public ScoreModel {
 public:
  using ScoreModel::make_conditioning;
  PosteriorEchoModel(NoiseSchedule s, Array x0) : sched_(s), x0_(std::move(x0)) {}
  Array predict_eps(const Array& z, real t, const Conditioning&) const override {
    const auto [alpha, sigma] = sched_.coeffs(t);
    return ndg::scale(ndg::add_scaled(z, x0_, -alpha), real(1) / sigma);
  }
  Conditioning make_conditioning(const std::optional<std::string>& tag, ViewTag v) const override {
    Conditioning c;
    c.tag = tag;
    c.view = v;
    return c;
  }
  const NoiseSchedule& schedule() const override { return sched_; }
  ndg::Shape data_shape() const override { return x0_.shape(); }

 private:
  NoiseSchedule sched_;
  Array x0_;
};

// eps_hat = c z; constant Jacobian c I.
class LinearScoreModel : public ScoreModel {
 public:
  using ScoreModel::make_conditioning;
  LinearScoreModel(NoiseSchedule s, ndg::Shape shape, real c) : sched_(s), shape_(shape), c_(c) {}
  Array predict_eps(const Array& z, real, const Conditioning&) const override {
    return ndg::scale(z, c_);
  }
  Conditioning make_conditioning(const std::optional<std::string>& tag, ViewTag v) const override {
    Conditioning c;
    c.tag = tag;
    c.view = v;
    return c;
  }
  const NoiseSchedule& schedule() const override { return sched_; }
  ndg::Shape data_shape() const override { return shape_; }
  bool supports_input_gradient() const override { return true; }
  ndg::Var predict_eps_taped(ndg::Tape&, ndg::Var z, real, const Conditioning&) const override {
    return ndg::mul_const(z, c_);
  }

 private:
  NoiseSchedule sched_;
  ndg::Shape shape_;
  real c_;
};

// eps_hat constant in z: the model Jacobian vanishes.
class ConstantModel : public ScoreModel {
 public:
  using ScoreModel::make_conditioning;
  ConstantModel(NoiseSchedule s, Array v) : sched_(s), v_(std::move(v)) {}
  Array predict_eps(const Array&, real, const Conditioning&) const override { return v_; }
  Conditioning make_conditioning(const std::optional<std::string>& tag, ViewTag v) const override {
    Conditioning c;
    c.tag = tag;
    c.view = v;
    return c;
  }
  const NoiseSchedule& schedule() const override { return sched_; }
  ndg::Shape data_shape() const override { return v_.shape(); }
  bool supports_input_gradient() const override { return true; }
  ndg::Var predict_eps_taped(ndg::Tape& tape, ndg::Var, real, const Conditioning&) const override {
    return tape.constant(v_);
  }

 private:
  NoiseSchedule sched_;
  Array v_;
};

// Counts capability invocations; forwards everything else.
class CapabilityProbe : public ScoreModel {
 public:
  using ScoreModel::make_conditioning;
  explicit CapabilityProbe(const ScoreModel& inner) : inner_(inner) {}
  Array predict_eps(const Array& z, real t, const Conditioning& c) const override {
    return inner_.predict_eps(z, t, c);
  }
  Conditioning make_conditioning(const std::optional<std::string>& tag, ViewTag v) const override {
    return inner_.make_conditioning(tag, v);
  }
  const NoiseSchedule& schedule() const override { return inner_.schedule(); }
  ndg::Shape data_shape() const override { return inner_.data_shape(); }
  bool supports_input_gradient() const override { return true; }
  ndg::Var predict_eps_taped(ndg::Tape& tape, ndg::Var z, real t,
                             const Conditioning& c) const override {
    ++taped_calls;
    return inner_.predict_eps_taped(tape, z, t, c);
  }
  mutable int taped_calls = 0;

 private:
  const ScoreModel& inner_;
};

SdsConfig fixed_t_config(real t, WeightKind w = WeightKind::SigmaSq, real omega = 0) {
  SdsConfig cfg;
  cfg.omega = omega;
  cfg.weight_kind = w;
  // a point mass at t: representable since t_min == t_max short-circuits
  cfg.t_min = cfg.t_max = t;
  return cfg;
}

}  // namespace

TEST_CASE("timestep sampling") {
  SdsConfig cfg;
  ndg::RngStream rng(1);
  real mn = 1, mx = 0, acc = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const real t = sample_timestep(cfg, rng);
    mn = std::min(mn, t);
    mx = std::max(mx, t);
    acc += t;
  }
  CHECK(mn >= 0.02);
  CHECK(mx <= 0.98);
  CHECK(std::abs(acc / n - 0.5) < 0.01);

  SdsConfig pt = fixed_t_config(real(0.37));
  for (int i = 0; i < 10; ++i) CHECK(sample_timestep(pt, rng) == real(0.37));
}

TEST_CASE("sds gradient: unit-Gaussian expectation matches w alpha sigma theta") {
  GaussianMixtureScore model(cosine(), single(0, 1, 2));
  Conditioning uc = model.make_conditioning(std::nullopt);
  dip::IdentityDip gen({2});
  ParamMap params;
  params["theta"] = Array::from_data({2}, {real(0.8), real(-1.3)});

  const real t = real(0.5);
  SdsConfig cfg = fixed_t_config(t);
  const auto [alpha, sigma] = model.schedule().coeffs(t);
  const real w = sigma * sigma;

  const int n = 100000;
  ndg::RngStream rng(7);
  std::vector<real> g0(n), g1(n);
  for (int i = 0; i < n; ++i) {
    auto rep = sds_grad(model, gen, params, uc, cfg, rng);
    g0[i] = rep.gradient.at("theta").at(0);
    g1[i] = rep.gradient.at("theta").at(1);
  }
  const real want0 = w * alpha * sigma * real(0.8);
  const real want1 = w * alpha * sigma * real(-1.3);
  const real se0 = std::sqrt(oracles::sample_var(g0) / n);
  const real se1 = std::sqrt(oracles::sample_var(g1) / n);
  CHECK(std::abs(oracles::sample_mean(g0) - want0) < 3 * se0);
  CHECK(std::abs(oracles::sample_mean(g1) - want1) < 3 * se1);
}

TEST_CASE("sds gradient vanishes in expectation at the prior mean") {
  GaussianMixtureScore model(cosine(), single(real(1.5), real(0.5), 2));
  Conditioning uc = model.make_conditioning(std::nullopt);
  dip::IdentityDip gen({2});
  ParamMap params;
  params["theta"] = Array::full({2}, real(1.5));

  SdsConfig cfg = fixed_t_config(real(0.4));
  const int n = 20000;
  ndg::RngStream rng(8);
  std::vector<real> g0(n);
  for (int i = 0; i < n; ++i)
    g0[i] = sds_grad(model, gen, params, uc, cfg, rng).gradient.at("theta").at(0);
  const real se = std::sqrt(oracles::sample_var(g0) / n);
  CHECK(std::abs(oracles::sample_mean(g0)) < 3 * se);
}

TEST_CASE("control variate: echoed prediction gives exactly zero gradient") {
  Array x0 = Array::from_data({3}, {real(0.2), real(-0.4), real(1.0)});
  PosteriorEchoModel model(cosine(), x0);
  Conditioning uc = model.make_conditioning(std::nullopt);
  dip::IdentityDip gen({3});
  ParamMap params;
  params["theta"] = x0;

  SdsConfig cfg;
  cfg.omega = 0;
  ndg::RngStream rng(9);
  for (int i = 0; i < 50; ++i) {
    auto rep = sds_grad(model, gen, params, uc, cfg, rng);
    // the echoed residual is zero up to the rounding of z - alpha x0
    CHECK(std::abs(rep.proxy_loss) < 1e-12);
    if (rep.gradient.contains("theta"))
      for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(rep.gradient.at("theta").at(j)) < 1e-12);
  }
}

TEST_CASE("oracle equivalence: MC mean of the SDS gradient matches the KL gradient") {
  struct PriorCase {
    real mean, std;
  };
  for (PriorCase pc : {PriorCase{0, 1}, PriorCase{real(1.5), real(0.5)}}) {
    GaussianMixtureScore model(cosine(), single(pc.mean, pc.std, 1));
    Conditioning uc = model.make_conditioning(std::nullopt);
    dip::IdentityDip gen({1});
    ParamMap params;
    params["theta"] = Array::full({1}, real(0.7));
    GaussianPrior prior{Array::full({1}, pc.mean), pc.std};

    for (WeightKind wk : {WeightKind::SigmaSq, WeightKind::Uniform}) {
      for (real t : {real(0.1), real(0.3), real(0.5), real(0.7), real(0.9)}) {
        SdsConfig cfg = fixed_t_config(t, wk);
        const int n = 20000;
        ndg::RngStream rng(static_cast<std::uint64_t>(1000 * t) + (wk == WeightKind::Uniform));
        std::vector<real> gs(n);
        for (int i = 0; i < n; ++i)
          gs[i] = sds_grad(model, gen, params, uc, cfg, rng).gradient.at("theta").at(0);
        auto oracle = kl_gaussian_oracle(params["theta"], t, prior, cfg, model.schedule());
        const real se = std::sqrt(oracles::sample_var(gs) / n);
        INFO("prior mean ", pc.mean, " weight ", int(wk), " t ", t);
        CHECK(std::abs(oracles::sample_mean(gs) - oracle.d_kl_d_theta.at(0)) < 3 * se);
      }
    }
  }
}

TEST_CASE("oracle: zero gradient at the mean and score limit at small t") {
  NoiseSchedule sched = cosine();
  SdsConfig cfg;
  GaussianPrior prior{Array::full({1}, real(1.5)), real(0.5)};

  auto at_mean = kl_gaussian_oracle(Array::full({1}, real(1.5)), real(0.5), prior, cfg, sched);
  CHECK(at_mean.d_kl_d_theta.at(0) == doctest::Approx(0.0));
  CHECK(at_mean.kl >= 0);

  // t -> 0: scaled gradient approaches -w sigma/alpha times the prior score
  const real t = real(0.02);
  Array theta = Array::full({1}, real(0.9));
  auto near0 = kl_gaussian_oracle(theta, t, prior, cfg, sched);
  const auto [alpha, sigma] = sched.coeffs(t);
  const real w = weight(cfg, sched, t);
  const real score = -(theta.at(0) - real(1.5)) / (real(0.5) * real(0.5));
  const real want = -w * sigma / alpha * score;
  CHECK(std::abs(near0.d_kl_d_theta.at(0) - want) / std::abs(want) < 0.02);

  CHECK_THROWS_AS(
      kl_gaussian_oracle(theta, t, GaussianPrior{Array::full({1}, real(0)), 0}, cfg, sched),
      ndg::UsageError);
}

TEST_CASE("oracle equivalence holds under guidance") {
  // conditional prior N(1, 0.6), unconditional N(-0.5, 1.0), omega = 2
  GaussianMixture cond_mix = single(1, real(0.6), 1);
  GaussianMixture uncond_mix = single(real(-0.5), 1, 1);
  GaussianMixtureScore model(cosine(), uncond_mix, {{"obj", cond_mix}});
  Conditioning cc = model.make_conditioning(std::string("obj"));
  dip::IdentityDip gen({1});
  ParamMap params;
  params["theta"] = Array::full({1}, real(0.3));

  const real t = real(0.5);
  SdsConfig cfg = fixed_t_config(t);
  cfg.omega = 2;

  const int n = 30000;
  ndg::RngStream rng(12);
  std::vector<real> gs(n);
  for (int i = 0; i < n; ++i)
    gs[i] = sds_grad(model, gen, params, cc, cfg, rng).gradient.at("theta").at(0);

  GaussianPrior prior{Array::full({1}, real(1)), real(0.6)};
  GaussianPrior uprior{Array::full({1}, real(-0.5)), real(1)};
  auto oracle = kl_gaussian_oracle(params["theta"], t, prior, cfg, model.schedule(), uprior);
  const real se = std::sqrt(oracles::sample_var(gs) / n);
  CHECK(std::abs(oracles::sample_mean(gs) - oracle.d_kl_d_theta.at(0)) < 3 * se);
}

TEST_CASE("control variate reduces per-draw variance without moving the mean") {
  // With the exact unit-Gaussian prediction eps_hat = sigma z, the per-draw
  // variances are w^2 alpha^4 (with the control variate) and w^2 sigma^4
  // (without): subtraction wins exactly where 2 cov(eps_hat, eps) > var(eps),
  // i.e. sigma^2 > 1/2. The fixed-t grid lives in that regime; the aggregate
  // over the default t distribution is also checked.
  const real theta = real(0.8);
  NoiseSchedule sched = cosine();

  auto draw_pair = [&](real t, ndg::RngStream& rng, real& cv, real& plain) {
    const auto [alpha, sigma] = sched.coeffs(t);
    const real w = sigma * sigma;
    const real eps = rng.normal();
    const real z = alpha * theta + sigma * eps;
    const real eps_hat = sigma * z;  // exact unit-Gaussian prediction
    cv = w * (eps_hat - eps);
    plain = w * eps_hat;
  };

  for (real t : {real(0.55), real(0.65), real(0.75), real(0.85), real(0.95)}) {
    const int n = 10000;
    ndg::RngStream rng(static_cast<std::uint64_t>(100 * t));
    std::vector<real> with_cv(n), without_cv(n);
    for (int i = 0; i < n; ++i) draw_pair(t, rng, with_cv[i], without_cv[i]);
    const real se = std::sqrt((oracles::sample_var(with_cv) + oracles::sample_var(without_cv)) / n);
    INFO("t = ", t);
    CHECK(std::abs(oracles::sample_mean(with_cv) - oracles::sample_mean(without_cv)) < 3 * se);
    CHECK(oracles::sample_var(with_cv) < oracles::sample_var(without_cv));
  }

  // aggregate over t ~ U(0.02, 0.98): the operating regime
  {
    const int n = 40000;
    ndg::RngStream rng(777);
    std::vector<real> with_cv(n), without_cv(n);
    for (int i = 0; i < n; ++i) {
      const real t = rng.uniform(real(0.02), real(0.98));
      draw_pair(t, rng, with_cv[i], without_cv[i]);
    }
    CHECK(oracles::sample_var(with_cv) < oracles::sample_var(without_cv));
  }
}

TEST_CASE("sds never touches the model's input-gradient capability") {
  GaussianMixtureScore inner(cosine(), single(0, 1, 2));
  CapabilityProbe probe(inner);
  Conditioning uc = probe.make_conditioning(std::nullopt);
  dip::IdentityDip gen({2});
  ParamMap params;
  params["theta"] = Array::full({2}, real(0.4));

  SdsConfig cfg;
  cfg.batch = 4;
  ndg::RngStream rng(13);
  sds_grad(probe, gen, params, uc, cfg, rng);
  CHECK(probe.taped_calls == 0);

  // positive control: the full gradient does use it
  ldiff_full_grad(probe, gen, params, uc, cfg, rng);
  CHECK(probe.taped_calls > 0);
}

TEST_CASE("full diffusion-loss gradient") {
  NoiseSchedule sched = cosine();
  dip::IdentityDip gen({2});
  ParamMap params;
  params["theta"] = Array::from_data({2}, {real(0.5), real(-0.2)});

  SUBCASE("linear model: equals the sds gradient scaled by c alpha, per draw") {
    const real c = real(0.7);
    LinearScoreModel model(sched, {2}, c);
    Conditioning uc = model.make_conditioning(std::nullopt);
    const real t = real(0.45);
    SdsConfig cfg = fixed_t_config(t);
    const real alpha = sched.alpha(t);
    for (int i = 0; i < 20; ++i) {
      ndg::RngStream r1(100 + i), r2(100 + i);
      auto sds_rep = sds_grad(model, gen, params, uc, cfg, r1);
      auto full = ldiff_full_grad(model, gen, params, uc, cfg, r2);
      for (std::size_t j = 0; j < 2; ++j)
        CHECK(full.at("theta").at(j) ==
              doctest::Approx(c * alpha * sds_rep.gradient.at("theta").at(j)).epsilon(1e-6));
    }
  }

  SUBCASE("constant model: zero gradient despite nonzero residual") {
    ConstantModel model(sched, Array::full({2}, real(0.9)));
    Conditioning uc = model.make_conditioning(std::nullopt);
    SdsConfig cfg;
    ndg::RngStream rng(14);
    auto full = ldiff_full_grad(model, gen, params, uc, cfg, rng);
    CHECK(!full.contains("theta"));  // nothing reaches the leaves
  }

  SUBCASE("matches finite differences of the half squared residual") {
    GaussianMixture mix;
    mix.weights = {real(0.5), real(0.5)};
    mix.means = {Array::from_data({2}, {real(-1), real(0.5)}),
                 Array::from_data({2}, {real(1), real(-0.5)})};
    mix.stds = {real(0.7), real(0.9)};
    GaussianMixtureScore model(sched, mix);
    Conditioning uc = model.make_conditioning(std::nullopt);
    const real t = real(0.6);
    SdsConfig cfg = fixed_t_config(t);

    ndg::RngStream rng(15);
    auto full = ldiff_full_grad(model, gen, params, uc, cfg, rng);

    // replay the same draw for the finite-difference loss
    ndg::RngStream rng2(15);
    const real t_used = sample_timestep(cfg, rng2);
    Array eps = rng2.normal_array({2});
    const auto [alpha, sigma] = sched.coeffs(t_used);
    const real w = weight(cfg, sched, t_used);
    auto loss_at = [&](const Array& th) {
      Array z = ndg::add_scaled(ndg::scale(th, alpha), eps, sigma);
      Array pred = model.predict_eps(z, t_used, uc);
      Array r = ndg::sub(pred, eps);
      return real(0.5) * w * ndg::dot(r, r);
    };
    const real h = real(1e-5);
    for (std::size_t j = 0; j < 2; ++j) {
      std::vector<real> tp = params["theta"].to_vector();
      tp[j] += h;
      const real up = loss_at(Array::from_data({2}, tp));
      tp[j] -= 2 * h;
      const real dn = loss_at(Array::from_data({2}, tp));
      const real fd = (up - dn) / (2 * h);
      CHECK(std::abs(fd - full.at("theta").at(j)) <
            real(1e-4) * std::max({real(1), std::abs(fd)}));
    }
  }
}

TEST_CASE("mode seeking: descent lands on a mixture mean, mirror stays symmetric") {
  // two modes at +-2 with std 0.1
  GaussianMixture mix;
  mix.weights = {real(0.5), real(0.5)};
  mix.means = {Array::full({1}, real(-2)), Array::full({1}, real(2))};
  mix.stds = {real(0.1), real(0.1)};
  GaussianMixtureScore model(cosine(), mix);
  Conditioning uc = model.make_conditioning(std::nullopt);
  dip::IdentityDip gen({1});

  SdsConfig cfg;
  cfg.omega = 0;
  cfg.batch = 4;
  // keep the draw distribution in the mode-seeking regime: high-t draws pull
  // the stationary point toward the smoothed center (about +-1.36 over the
  // full default range, +-1.997 with t_max = 0.4)
  cfg.t_max = real(0.4);

  ndg::RngStream starts(16);
  for (int trial = 0; trial < 6; ++trial) {
    real start = starts.uniform(real(-1.5), real(1.5));
    if (std::abs(start) < real(0.05)) start += real(0.1);  // keep off the symmetry axis
    ParamMap params;
    params["theta"] = Array::full({1}, start);
    ndg::RngStream rng = starts.fork(trial);
    const int steps = 900;
    for (int i = 0; i < steps; ++i) {
      auto rep = sds_grad(model, gen, params, uc, cfg, rng);
      const real lr = real(0.15) * (i < 600 ? real(1) : real(0.2));
      params["theta"] = ndg::add_scaled(params["theta"], rep.gradient.get_or_zeros("theta", {1}),
                                        -lr);
    }
    const real got = params["theta"].at(0);
    INFO("start ", start, " -> ", got);
    CHECK(std::min(std::abs(got - 2), std::abs(got + 2)) < 0.05);
  }
}
