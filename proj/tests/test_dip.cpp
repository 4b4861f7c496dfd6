#include <doctest.h>

#include <cmath>

#include "ndg/gradcheck.hpp"
#include "sds/dip.hpp"

using namespace sds::dip;
using sds::ParamMap;
using ndg::Array;
using ndg::real;

TEST_CASE("identity parameterization") {
  IdentityDip dip({2, 3}, /*squash=*/false);
  ndg::Tape tape;
  ParamMap p;
  p["theta"] = Array::zeros({2, 3});
  ndg::Var x = dip.generate_from(tape, p);
  for (std::size_t i = 0; i < 6; ++i) CHECK(x.value().at(i) == 0);

  ndg::GradientMap g = tape.backward(ndg::sum_all(x));
  for (std::size_t i = 0; i < 6; ++i) CHECK(g.at("theta").at(i) == doctest::Approx(1.0));
}

TEST_CASE("mirror parameterization") {
  const std::size_t h = 4, w = 8, c = 3;
  MirrorSymmetricDip dip(h, w, c, /*squash=*/false);
  ndg::RngStream rng(2);
  ParamMap p = dip.init(rng);

  SUBCASE("columns mirror exactly") {
    ndg::Tape tape;
    ndg::Var x = dip.generate_from(tape, p);
    const Array& img = x.value();
    CHECK(img.shape() == ndg::Shape{h, w, c});
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t k = 0; k < c; ++k)
          CHECK(img.at((i * w + j) * c + k) == img.at((i * w + (w - 1 - j)) * c + k));
  }

  SUBCASE("one-hot cotangent folds into the half image") {
    ndg::Tape tape;
    ndg::Var x = dip.generate_from(tape, p);
    // cotangent hot at (1, 2, 0), zero at its mirror (1, 5, 0)
    Array cot = Array::zeros({h, w, c});
    cot.mutable_data()[(1 * w + 2) * c + 0] = 1;
    ndg::GradientMap g = tape.backward(x, cot);
    const Array& gt = g.at("theta");
    // left-half column j reads theta column w/2 - 1 - j
    const std::size_t hw = w / 2;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < hw; ++j)
        for (std::size_t k = 0; k < c; ++k) {
          const real want = (i == 1 && j == hw - 1 - 2 && k == 0) ? real(1) : real(0);
          CHECK(gt.at((i * hw + j) * c + k) == want);
        }
  }

  SUBCASE("width-2 degenerate case duplicates the single column") {
    MirrorSymmetricDip tiny(2, 2, 1, false);
    ndg::RngStream r2(3);
    ParamMap tp = tiny.init(r2);
    ndg::Tape tape;
    ndg::Var x = tiny.generate_from(tape, tp);
    for (std::size_t i = 0; i < 2; ++i)
      CHECK(x.value().at(i * 2) == x.value().at(i * 2 + 1));
  }

  SUBCASE("odd target width is a configuration error") {
    CHECK_THROWS_AS(MirrorSymmetricDip(4, 7, 3), ndg::UsageError);
  }
}

TEST_CASE("coordinate MLP") {
  CoordMlpDip::Options opt;
  opt.resolution = 32;
  CoordMlpDip dip(opt);

  SUBCASE("zero weights give the constant 0.5 image") {
    ndg::RngStream rng(4);
    ParamMap p = dip.init(rng);
    for (auto& [name, a] : p) a = Array::zeros(a.shape());
    ndg::Tape tape;
    ndg::Var x = dip.generate_from(tape, p);
    for (std::size_t i = 0; i < x.value().size(); ++i)
      CHECK(x.value().at(i) == doctest::Approx(0.5));
  }

  SUBCASE("renders consistent content across resolutions") {
    ndg::RngStream rng(5);
    ParamMap p = dip.init(rng);
    ndg::Tape tape;
    auto leaves = sds::register_leaves(tape, p);
    ndg::Var lo = dip.generate_at(tape, leaves, 32);
    ndg::Var hi = dip.generate_at(tape, leaves, 64);
    // 2x2 area downsample of the 64^2 render vs the 32^2 render
    real acc = 0;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x2 = 0; x2 < 32; ++x2)
        for (std::size_t k = 0; k < 3; ++k) {
          real m = 0;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx)
              m += hi.value().at(((2 * y + dy) * 64 + (2 * x2 + dx)) * 3 + k);
          m /= 4;
          acc += std::abs(m - lo.value().at((y * 32 + x2) * 3 + k));
        }
    acc /= 32 * 32 * 3;
    CHECK(acc < 0.05);
  }
}

TEST_CASE("every parameterization passes finite differences") {
  auto make_case = [](const std::string& name, auto dip_factory) {
    ndg::GradCheckCase c;
    c.name = name;
    c.build = [dip_factory](ndg::Tape& tape, ndg::RngStream& rng) {
      auto dip = dip_factory();
      ParamMap p = dip.init(rng);
      auto leaves = sds::register_leaves(tape, p);
      ndg::Var x = dip.generate(tape, leaves);
      ndg::Var cotw = tape.constant(rng.normal_array(x.value().shape()));
      return ndg::dot(cotw, x);
    };
    c.tol = real(1e-4);
    c.step = real(1e-5);
    c.max_probes = 20;
    return c;
  };

  auto c1 = make_case("identity_squashed", [] { return IdentityDip({4, 4, 3}, true); });
  auto c2 = make_case("mirror", [] { return MirrorSymmetricDip(4, 8, 3, true); });
  auto c3 = make_case("coord_mlp_8x8", [] {
    CoordMlpDip::Options o;
    o.resolution = 8;
    o.width = 32;
    return CoordMlpDip(o);
  });
  for (const auto& c : {c1, c2, c3}) {
    auto r = ndg::check_gradient(c, 31);
    INFO(c.name, ": ", r.message);
    CHECK(r.pass);
  }
}
