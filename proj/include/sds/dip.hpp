#pragma once

#include <memory>

#include "ndg/rng.hpp"
#include "sds/params.hpp"

namespace sds::dip {

using ndg::Array;
using ndg::Shape;
using ndg::Var;

// Differentiable generator from named parameters to an image-shaped array.
// generate() is deterministic given the leaf values; gradients flow through
// the tape it records on.
class ImageParameterization {
 public:
  virtual ~ImageParameterization() = default;

  virtual ParamMap init(ndg::RngStream& rng) const = 0;
  virtual Shape image_shape() const = 0;
  virtual Var generate(ndg::Tape& tape, const std::map<std::string, Var>& leaves) const = 0;

  // Convenience: register leaves and generate in one go.
  Var generate_from(ndg::Tape& tape, const ParamMap& params) const;
};

// x = theta, optionally squashed through a sigmoid so pixel values live in
// (0, 1). The squash stays off for parameter-space uses where x must equal
// theta exactly.
class IdentityDip : public ImageParameterization {
 public:
  explicit IdentityDip(Shape shape, bool squash = false) : shape_(std::move(shape)), squash_(squash) {}

  ParamMap init(ndg::RngStream& rng) const override;
  Shape image_shape() const override { return shape_; }
  Var generate(ndg::Tape& tape, const std::map<std::string, Var>& leaves) const override;

 private:
  Shape shape_;
  bool squash_;
};

// Half image theta [H x W/2 x C]; x = (flip(theta), theta) along the width,
// then the sigmoid squash. Output columns satisfy x[:, j] == x[:, W-1-j]
// exactly.
class MirrorSymmetricDip : public ImageParameterization {
 public:
  MirrorSymmetricDip(std::size_t h, std::size_t w, std::size_t c, bool squash = true);

  ParamMap init(ndg::RngStream& rng) const override;
  Shape image_shape() const override { return {h_, w_, c_}; }
  Var generate(ndg::Tape& tape, const std::map<std::string, Var>& leaves) const override;

 private:
  std::size_t h_, w_, c_;
  bool squash_;
};

// Coordinate MLP evaluated on the pixel-center grid of [-1, 1]^2 with
// sinusoidal encoding; sigmoid RGB output. Resolution is a render-time
// argument in spirit, fixed per instance here.
class CoordMlpDip : public ImageParameterization {
 public:
  struct Options {
    std::size_t resolution = 32;
    int width = 128;
    int layers = 4;
    int frequencies = 6;
  };
  explicit CoordMlpDip(Options opt) : opt_(opt) {}

  ParamMap init(ndg::RngStream& rng) const override;
  Shape image_shape() const override { return {opt_.resolution, opt_.resolution, 3}; }
  Var generate(ndg::Tape& tape, const std::map<std::string, Var>& leaves) const override;

  // Same parameters rendered at another resolution.
  Var generate_at(ndg::Tape& tape, const std::map<std::string, Var>& leaves,
                  std::size_t resolution) const;

 private:
  Options opt_;
};

}  // namespace sds::dip
