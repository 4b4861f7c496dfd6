#pragma once

#include <array>

#include "ndg/rng.hpp"

namespace sds::render {

using ndg::Array;
using ndg::real;

using Vec3 = std::array<real, 3>;

Vec3 normalize(const Vec3& v);
Vec3 cross(const Vec3& a, const Vec3& b);
real dot3(const Vec3& a, const Vec3& b);
real norm3(const Vec3& v);

// Orthonormal camera frame; forward points into the scene.
struct CameraPose {
  Vec3 position{};
  Vec3 right{}, up{}, forward{};
};

CameraPose look_at_pose(const Vec3& position, const Vec3& target, const Vec3& up_hint);

struct CameraSample {
  real elevation_deg = 0;
  real azimuth_deg = 0;
  real distance = 1;
  real focal_multiplier = 1;  // focal length in pixels = multiplier * image width
  Vec3 look_at{};
  CameraPose pose;
};

struct CameraDistribution {
  real elevation_min_deg = -10;
  real elevation_max_deg = 90;
  real distance_min = 1;
  real distance_max = real(1.5);
  real focal_min = real(0.7);
  real focal_max = real(1.35);
  real position_jitter = real(0.1);   // U(-j, j)^3 on the position
  real look_at_std = real(0.2);
  real up_noise_std = real(0.02);
};

// Elevation comes from a 50/50 mixture of uniform-in-angle over the full
// range and uniform-in-area on the upper half-sphere.
CameraSample sample_camera(const CameraDistribution& dist, ndg::RngStream& rng);

// Deterministic pose on the orbit (turntables, fixed evaluation views).
CameraSample fixed_camera(real elevation_deg, real azimuth_deg, real distance,
                          real focal_multiplier);

// Light direction drawn from N(camera position, noise_scale^2 I) and
// normalized; distance from U(0.8, 1.5). noise_scale = 0 puts the light
// exactly along the camera direction.
Vec3 sample_light_position(const CameraPose& cam, ndg::RngStream& rng, real noise_scale = 1);

// Pixel-center rays for rows [row0, row1); origins/dirs are [n x 3].
void rays_for_rows(const CameraPose& pose, real focal_px, std::size_t width, std::size_t height,
                   std::size_t row0, std::size_t row1, Array& origins, Array& dirs);

}  // namespace sds::render
