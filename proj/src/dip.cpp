#include "sds/dip.hpp"

#include <cmath>

namespace sds::dip {

using namespace ndg;

Var ImageParameterization::generate_from(ndg::Tape& tape, const ParamMap& params) const {
  auto leaves = register_leaves(tape, params);
  return generate(tape, leaves);
}

// ---- IdentityDip ----

ParamMap IdentityDip::init(ndg::RngStream& rng) const {
  ParamMap p;
  p["theta"] = ndg::scale(rng.normal_array(shape_), real(0.1));
  return p;
}

Var IdentityDip::generate(ndg::Tape&, const std::map<std::string, Var>& leaves) const {
  Var theta = leaves.at("theta");
  return squash_ ? sigmoid(theta) : theta;
}

// ---- MirrorSymmetricDip ----

MirrorSymmetricDip::MirrorSymmetricDip(std::size_t h, std::size_t w, std::size_t c, bool squash)
    : h_(h), w_(w), c_(c), squash_(squash) {
  if (w_ % 2 != 0)
    throw UsageError("mirror DIP: target width " + std::to_string(w_) + " must be even");
}

ParamMap MirrorSymmetricDip::init(ndg::RngStream& rng) const {
  ParamMap p;
  p["theta"] = ndg::scale(rng.normal_array({h_, w_ / 2, c_}), real(0.1));
  return p;
}

Var MirrorSymmetricDip::generate(ndg::Tape&, const std::map<std::string, Var>& leaves) const {
  Var theta = leaves.at("theta");
  Var x = concat({flip(theta, 1), theta}, 1);
  return squash_ ? sigmoid(x) : x;
}

// ---- CoordMlpDip ----

namespace {
std::string lname(int i) { return "cmlp.l" + std::to_string(i); }

// pixel-center grid encoded with sin/cos at octave frequencies
Array coord_features(std::size_t res, int freqs) {
  const std::size_t n = res * res;
  const std::size_t dim = 2 * 2 * static_cast<std::size_t>(freqs);
  Array out = Array::uninit({n, dim});
  real* p = out.mutable_data();
  for (std::size_t y = 0; y < res; ++y) {
    for (std::size_t x = 0; x < res; ++x) {
      const real u = real(-1) + (real(2) * (static_cast<real>(x) + real(0.5))) / res;
      const real v = real(-1) + (real(2) * (static_cast<real>(y) + real(0.5))) / res;
      real* row = p + (y * res + x) * dim;
      real freq = real(3.14159265358979323846);
      for (int k = 0; k < freqs; ++k) {
        row[4 * k + 0] = std::sin(freq * u);
        row[4 * k + 1] = std::cos(freq * u);
        row[4 * k + 2] = std::sin(freq * v);
        row[4 * k + 3] = std::cos(freq * v);
        freq *= 2;
      }
    }
  }
  return out;
}
}  // namespace

ParamMap CoordMlpDip::init(ndg::RngStream& rng) const {
  ParamMap p;
  const std::size_t in_dim = 4 * static_cast<std::size_t>(opt_.frequencies);
  const std::size_t w = static_cast<std::size_t>(opt_.width);
  std::size_t prev = in_dim;
  for (int i = 0; i < opt_.layers; ++i) {
    const std::size_t next = i + 1 == opt_.layers ? 3 : w;
    const real gain = i + 1 == opt_.layers ? real(0.5) : std::sqrt(real(2));
    p[lname(i) + "_w"] = ndg::scale(rng.normal_array({prev, next}),
                                    gain / std::sqrt(static_cast<real>(prev)));
    p[lname(i) + "_b"] = Array::zeros({1, next});
    prev = next;
  }
  return p;
}

Var CoordMlpDip::generate(ndg::Tape& tape, const std::map<std::string, Var>& leaves) const {
  return generate_at(tape, leaves, opt_.resolution);
}

Var CoordMlpDip::generate_at(ndg::Tape& tape, const std::map<std::string, Var>& leaves,
                             std::size_t resolution) const {
  Var h = tape.constant(coord_features(resolution, opt_.frequencies));
  for (int i = 0; i < opt_.layers; ++i) {
    h = add(matmul(h, leaves.at(lname(i) + "_w")), leaves.at(lname(i) + "_b"));
    if (i + 1 < opt_.layers) h = swish(h);
  }
  return reshape(sigmoid(h), {resolution, resolution, 3});
}

}  // namespace sds::dip
