#include "sds/camera.hpp"

#include <cmath>

namespace sds::render {

namespace {
constexpr real kPi = real(3.14159265358979323846);
constexpr real kDeg = kPi / 180;
}  // namespace

real dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
real norm3(const Vec3& v) { return std::sqrt(dot3(v, v)); }

Vec3 normalize(const Vec3& v) {
  const real n = norm3(v);
  if (n == 0) throw ndg::NumericError("normalize: zero vector");
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

CameraPose look_at_pose(const Vec3& position, const Vec3& target, const Vec3& up_hint) {
  CameraPose p;
  p.position = position;
  p.forward = normalize({target[0] - position[0], target[1] - position[1],
                         target[2] - position[2]});
  p.right = normalize(cross(p.forward, up_hint));
  p.up = cross(p.right, p.forward);
  return p;
}

CameraSample sample_camera(const CameraDistribution& dist, ndg::RngStream& rng) {
  CameraSample s;
  if (rng.uniform() < real(0.5)) {
    s.elevation_deg = rng.uniform(dist.elevation_min_deg, dist.elevation_max_deg);
  } else {
    // uniform in area on the upper half-sphere: sin(elev) ~ U(0, 1)
    s.elevation_deg = std::asin(rng.uniform()) / kDeg;
  }
  s.azimuth_deg = rng.uniform(0, 360);
  s.distance = rng.uniform(dist.distance_min, dist.distance_max);
  s.focal_multiplier = rng.uniform(dist.focal_min, dist.focal_max);

  const real el = s.elevation_deg * kDeg;
  const real az = s.azimuth_deg * kDeg;
  Vec3 pos = {s.distance * std::cos(el) * std::cos(az), s.distance * std::cos(el) * std::sin(az),
              s.distance * std::sin(el)};
  for (auto& c : pos) c += rng.uniform(-dist.position_jitter, dist.position_jitter);
  s.look_at = {dist.look_at_std * rng.normal(), dist.look_at_std * rng.normal(),
               dist.look_at_std * rng.normal()};
  Vec3 up_hint = {dist.up_noise_std * rng.normal(), dist.up_noise_std * rng.normal(),
                  1 + dist.up_noise_std * rng.normal()};
  s.pose = look_at_pose(pos, s.look_at, up_hint);
  return s;
}

CameraSample fixed_camera(real elevation_deg, real azimuth_deg, real distance,
                          real focal_multiplier) {
  CameraSample s;
  s.elevation_deg = elevation_deg;
  s.azimuth_deg = azimuth_deg;
  s.distance = distance;
  s.focal_multiplier = focal_multiplier;
  const real el = elevation_deg * kDeg;
  const real az = azimuth_deg * kDeg;
  Vec3 pos = {distance * std::cos(el) * std::cos(az), distance * std::cos(el) * std::sin(az),
              distance * std::sin(el)};
  s.look_at = {0, 0, 0};
  s.pose = look_at_pose(pos, s.look_at, {0, 0, 1});
  return s;
}

Vec3 sample_light_position(const CameraPose& cam, ndg::RngStream& rng, real noise_scale) {
  Vec3 q = {cam.position[0] + noise_scale * rng.normal(),
            cam.position[1] + noise_scale * rng.normal(),
            cam.position[2] + noise_scale * rng.normal()};
  Vec3 dir = normalize(q);
  const real r = rng.uniform(real(0.8), real(1.5));
  return {dir[0] * r, dir[1] * r, dir[2] * r};
}

void rays_for_rows(const CameraPose& pose, real focal_px, std::size_t width, std::size_t height,
                   std::size_t row0, std::size_t row1, Array& origins, Array& dirs) {
  const std::size_t n = (row1 - row0) * width;
  origins = Array::uninit({n, 3});
  dirs = Array::uninit({n, 3});
  real* po = origins.mutable_data();
  real* pd = dirs.mutable_data();
  std::size_t idx = 0;
  for (std::size_t py = row0; py < row1; ++py) {
    const real yn = -(static_cast<real>(py) + real(0.5) - static_cast<real>(height) / 2);
    for (std::size_t px = 0; px < width; ++px, ++idx) {
      const real xn = static_cast<real>(px) + real(0.5) - static_cast<real>(width) / 2;
      Vec3 d = {xn * pose.right[0] + yn * pose.up[0] + focal_px * pose.forward[0],
                xn * pose.right[1] + yn * pose.up[1] + focal_px * pose.forward[1],
                xn * pose.right[2] + yn * pose.up[2] + focal_px * pose.forward[2]};
      d = normalize(d);
      for (int k = 0; k < 3; ++k) {
        po[idx * 3 + k] = pose.position[k];
        pd[idx * 3 + k] = d[k];
      }
    }
  }
}

}  // namespace sds::render
