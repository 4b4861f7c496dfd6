#include "sds/renderer.hpp"

#include <cmath>
#include <atomic>
#include <thread>

namespace sds::render {

using namespace ndg;

const char* render_mode_name(RenderMode m) {
  switch (m) {
    case RenderMode::Albedo: return "albedo";
    case RenderMode::Shaded: return "shaded";
    case RenderMode::Textureless: return "textureless";
  }
  return "?";
}

real IpeConfig::lambda_at(std::int64_t step) const {
  if (step >= anneal_steps) return lambda_end;
  const real f = static_cast<real>(step) / static_cast<real>(anneal_steps);
  return lambda_start + (lambda_end - lambda_start) * f;
}

// ---- integrated positional encoding ----

Array integrated_pos_enc(const Array& positions, real lambda_sigma, int L) {
  if (!(lambda_sigma > 0)) throw UsageError("ipe: lambda_sigma must be positive");
  const std::size_t n = positions.shape()[0];
  Array out = Array::uninit({n, static_cast<std::size_t>(6 * L)});
  const real* p = positions.data();
  real* o = out.mutable_data();
  const std::size_t dim = static_cast<std::size_t>(6 * L);
  for (std::size_t r = 0; r < n; ++r) {
    real freq = 1;
    for (int k = 0; k < L; ++k) {
      const real damp = std::exp(real(-0.5) * freq * lambda_sigma * freq * lambda_sigma);
      for (int j = 0; j < 3; ++j) {
        const real x = freq * p[r * 3 + j];
        o[r * dim + k * 6 + 2 * j + 0] = damp * std::sin(x);
        o[r * dim + k * 6 + 2 * j + 1] = damp * std::cos(x);
      }
      freq *= 2;
    }
  }
  return out;
}

void integrated_pos_enc_with_tangents(const Array& positions, real lambda_sigma, int L,
                                      Array& feats, std::array<Array, 3>& dfeats) {
  feats = integrated_pos_enc(positions, lambda_sigma, L);
  const std::size_t n = positions.shape()[0];
  const std::size_t dim = static_cast<std::size_t>(6 * L);
  for (int j = 0; j < 3; ++j) dfeats[j] = Array::zeros({n, dim});
  const real* p = positions.data();
  for (std::size_t r = 0; r < n; ++r) {
    real freq = 1;
    for (int k = 0; k < L; ++k) {
      const real damp = std::exp(real(-0.5) * freq * lambda_sigma * freq * lambda_sigma);
      for (int j = 0; j < 3; ++j) {
        const real x = freq * p[r * 3 + j];
        // d/dmu_j of damp*sin(freq mu_j) and damp*cos(freq mu_j)
        dfeats[j].mutable_data()[r * dim + k * 6 + 2 * j + 0] = damp * freq * std::cos(x);
        dfeats[j].mutable_data()[r * dim + k * 6 + 2 * j + 1] = -damp * freq * std::sin(x);
      }
      freq *= 2;
    }
  }
}

// ---- field MLP ----

namespace {

std::string fblk(int i, const char* leaf) {
  return "field.b" + std::to_string(i) + "." + leaf;
}

// JVP of layernorm: dy = (dx - mean(dx) - y mean(y dx)) / sqrt(var(x) + eps).
// Built from primitives so the tangent itself stays differentiable.
Var layernorm_jvp(Var x, Var y, Var dx) {
  Var c = sub(x, mean_axis(x, 1));
  Var variance = mean_axis(mul(c, c), 1);
  Var s = sqrt(add_const(variance, real(1e-6)));
  Var num = sub(sub(dx, mean_axis(dx, 1)), mul(y, mean_axis(mul(y, dx), 1)));
  return div(num, s);
}

// JVP of swish through the stored output: d = s + y (1 - s), s = sigmoid(x).
Var swish_jvp_factor(Var x, Var y) {
  Var s = sigmoid(x);
  return add(s, mul(y, add_const(mul_const(s, -1), 1)));
}

Array blob_density(const Array& positions, const BlobConfig& blob) {
  const std::size_t n = positions.shape()[0];
  Array out = Array::uninit({n, 1});
  const real* p = positions.data();
  real* o = out.mutable_data();
  const real inv2s2 = real(1) / (2 * blob.sigma * blob.sigma);
  for (std::size_t r = 0; r < n; ++r) {
    const real sq = p[r * 3] * p[r * 3] + p[r * 3 + 1] * p[r * 3 + 1] + p[r * 3 + 2] * p[r * 3 + 2];
    o[r] = blob.scale * std::exp(-sq * inv2s2);
  }
  return out;
}

Array blob_density_gradient(const Array& positions, const Array& blob_vals,
                            const BlobConfig& blob, int coord) {
  const std::size_t n = positions.shape()[0];
  Array out = Array::uninit({n, 1});
  const real* p = positions.data();
  const real* b = blob_vals.data();
  real* o = out.mutable_data();
  const real inv_s2 = real(1) / (blob.sigma * blob.sigma);
  for (std::size_t r = 0; r < n; ++r) o[r] = -p[r * 3 + coord] * inv_s2 * b[r];
  return out;
}

}  // namespace

ParamMap init_field_params(const FieldArch& arch, const IpeConfig& ipe, ndg::RngStream& rng) {
  ParamMap p;
  const std::size_t w = static_cast<std::size_t>(arch.width);
  const std::size_t in_dim = static_cast<std::size_t>(6 * ipe.L);
  auto dense = [&](const std::string& name, std::size_t rows, std::size_t cols, real gain,
                   real bias = 0) {
    p[name + "_w"] =
        ndg::scale(rng.normal_array({rows, cols}), gain / std::sqrt(static_cast<real>(rows)));
    p[name + "_b"] = Array::full({1, cols}, bias);
  };
  dense("field.stem", in_dim, w, std::sqrt(real(2)));
  for (int b = 0; b < arch.blocks; ++b) {
    dense(fblk(b, "l1"), w, w, std::sqrt(real(2)));
    dense(fblk(b, "l2"), w, w, real(0.5));
  }
  // density starts low so the blob dominates early geometry
  dense("field.tau", w, 1, real(0.1), real(-2));
  dense("field.rho", w, 3, real(0.1));

  const std::size_t bg_in = static_cast<std::size_t>(6 * arch.bg_freqs);
  std::size_t prev = bg_in;
  for (int i = 0; i < arch.bg_layers; ++i) {
    const std::size_t next =
        i + 1 == arch.bg_layers ? 3 : static_cast<std::size_t>(arch.bg_width);
    dense("bg.l" + std::to_string(i), prev, next, i + 1 == arch.bg_layers ? real(0.1)
                                                                          : std::sqrt(real(2)));
    prev = next;
  }
  return p;
}

FieldFn mlp_field(const std::map<std::string, Var>& leaves, const FieldArch& arch,
                  const IpeConfig& ipe, real lambda_sigma, const BlobConfig& blob) {
  return [&leaves, arch, ipe, lambda_sigma, blob](ndg::Tape& tape, const Array& positions,
                                                  bool want_normals, bool want_albedo) {
    auto W = [&](const std::string& name) -> Var { return leaves.at(name); };
    FieldEval out;

    Array feats_a;
    std::array<Array, 3> dfeats_a;
    if (want_normals) {
      integrated_pos_enc_with_tangents(positions, lambda_sigma, ipe.L, feats_a, dfeats_a);
    } else {
      feats_a = integrated_pos_enc(positions, lambda_sigma, ipe.L);
    }

    Var h = add(matmul(tape.constant(feats_a), W("field.stem_w")), W("field.stem_b"));
    std::array<Var, 3> th;
    if (want_normals)
      for (int j = 0; j < 3; ++j) th[j] = matmul(tape.constant(dfeats_a[j]), W("field.stem_w"));

    for (int b = 0; b < arch.blocks; ++b) {
      Var ln = layernorm_last(h);
      Var u = add(matmul(ln, W(fblk(b, "l1_w"))), W(fblk(b, "l1_b")));
      Var sw = swish(u);
      Var v = add(matmul(sw, W(fblk(b, "l2_w"))), W(fblk(b, "l2_b")));
      if (want_normals) {
        Var swf = swish_jvp_factor(u, sw);
        for (int j = 0; j < 3; ++j) {
          Var dln = layernorm_jvp(h, ln, th[j]);
          Var du = matmul(dln, W(fblk(b, "l1_w")));
          Var dv = matmul(mul(swf, du), W(fblk(b, "l2_w")));
          th[j] = add(th[j], dv);
        }
      }
      h = add(h, v);
    }

    Var lnf = layernorm_last(h);
    Var tau_raw = add(matmul(lnf, W("field.tau_w")), W("field.tau_b"));
    Var tau_mlp = exp(tau_raw);
    Array blob_a = blob_density(positions, blob);
    out.tau = add(tau_mlp, tape.constant(blob_a));

    if (want_albedo) out.rho = sigmoid(add(matmul(lnf, W("field.rho_w")), W("field.rho_b")));

    if (want_normals) {
      std::array<Var, 3> dtau;
      for (int j = 0; j < 3; ++j) {
        Var dlnf = layernorm_jvp(h, lnf, th[j]);
        Var dtau_raw = matmul(dlnf, W("field.tau_w"));
        dtau[j] = add(mul(tau_mlp, dtau_raw),
                      tape.constant(blob_density_gradient(positions, blob_a, blob, j)));
      }
      out.dtau = concat({dtau[0], dtau[1], dtau[2]}, 1);
    }
    return out;
  };
}

namespace {
Array plain_dir_encoding(const Array& dirs, int freqs) {
  const std::size_t n = dirs.shape()[0];
  const std::size_t dim = static_cast<std::size_t>(6 * freqs);
  Array out = Array::uninit({n, dim});
  const real* p = dirs.data();
  real* o = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r) {
    real freq = 1;
    for (int k = 0; k < freqs; ++k) {
      for (int j = 0; j < 3; ++j) {
        const real x = freq * p[r * 3 + j];
        o[r * dim + k * 6 + 2 * j] = std::sin(x);
        o[r * dim + k * 6 + 2 * j + 1] = std::cos(x);
      }
      freq *= 2;
    }
  }
  return out;
}
}  // namespace

BackgroundFn mlp_background(const std::map<std::string, Var>& leaves, const FieldArch& arch) {
  return [&leaves, arch](ndg::Tape& tape, const Array& dirs) {
    Var h = tape.constant(plain_dir_encoding(dirs, arch.bg_freqs));
    for (int i = 0; i < arch.bg_layers; ++i) {
      const std::string l = "bg.l" + std::to_string(i);
      h = add(matmul(h, leaves.at(l + "_w")), leaves.at(l + "_b"));
      if (i + 1 < arch.bg_layers) h = swish(h);
    }
    return sigmoid(h);
  };
}

BackgroundFn constant_background(const Vec3& color) {
  return [color](ndg::Tape& tape, const Array& dirs) {
    const std::size_t n = dirs.shape()[0];
    Array c = Array::uninit({n, 3});
    for (std::size_t r = 0; r < n; ++r)
      for (int k = 0; k < 3; ++k) c.mutable_data()[r * 3 + k] = color[k];
    return tape.constant(c);
  };
}

// ---- normals / shading / compositing ----

NormalsResult normals_from_density_gradient(ndg::Tape& tape, Var dtau) {
  const Array& g = dtau.value();
  const std::size_t n = g.shape()[0];
  NormalsResult out;
  out.valid_mask = Array::uninit({n, 1});
  Array fallback = Array::zeros({n, 3});
  for (std::size_t r = 0; r < n; ++r) {
    const real nr = std::sqrt(g.at2(r, 0) * g.at2(r, 0) + g.at2(r, 1) * g.at2(r, 1) +
                              g.at2(r, 2) * g.at2(r, 2));
    const bool ok = nr > real(1e-8);
    out.valid_mask.mutable_data()[r] = ok ? 1 : 0;
    if (!ok) fallback.mutable_data()[r * 3 + 2] = 1;  // unit z
  }
  // max-with-constant kills the gradient through degenerate norms
  Var nrm = max_const(l2norm_last(dtau), real(1e-8));
  Var unit = div(mul_const(dtau, -1), nrm);
  Var masked = mul(unit, tape.constant(out.valid_mask));
  out.normals = add(masked, tape.constant(fallback));
  return out;
}

Var shade(ndg::Tape& tape, Var rho, const std::optional<Var>& normals, const Array& positions,
          const LightSpec& light, RenderMode mode) {
  if (mode == RenderMode::Albedo) return rho;
  if (!normals) throw UsageError("shade: lit modes need normals");
  const std::size_t n = positions.shape()[0];
  Array to_light = Array::uninit({n, 3});
  const real* p = positions.data();
  for (std::size_t r = 0; r < n; ++r) {
    Vec3 d = {light.position[0] - p[r * 3], light.position[1] - p[r * 3 + 1],
              light.position[2] - p[r * 3 + 2]};
    const real len = norm3(d);
    if (len < real(1e-9))
      throw NumericError("shade: light coincides with a sample point");
    for (int k = 0; k < 3; ++k) to_light.mutable_data()[r * 3 + k] = d[k] / len;
  }
  Var lit = max_const(sum_axis(mul(*normals, tape.constant(to_light)), 1), 0);  // [n x 1]
  Array diffuse = Array::from_data({1, 3}, {light.diffuse[0], light.diffuse[1], light.diffuse[2]});
  Array ambient = Array::from_data({1, 3}, {light.ambient[0], light.ambient[1], light.ambient[2]});
  Var illum = add(mul(lit, tape.constant(diffuse)), tape.constant(ambient));  // [n x 3]
  if (mode == RenderMode::Textureless) return illum;
  return mul(rho, illum);
}

CompositeResult composite(ndg::Tape& tape, Var tau, Var colors, const Array& deltas,
                          Var background) {
  const std::size_t rays = deltas.shape()[0];
  const std::size_t s = deltas.shape()[1];
  for (std::size_t i = 0; i < deltas.size(); ++i)
    if (deltas.at(i) < 0) throw UsageError("composite: negative interval width");
  for (std::size_t i = 0; i < tau.value().size(); ++i)
    if (tau.value().at(i) < 0) throw UsageError("composite: negative density");

  Var tau_rows = reshape(tau, {rays, s});
  Var optical = mul(tau_rows, tape.constant(deltas));  // tau_i delta_i
  // alpha_i = 1 - exp(-tau_i delta_i)
  Var alpha = add_const(mul_const(exp(mul_const(optical, -1)), -1), 1);
  // transmittance T_i = exp(-sum_{j<i} tau_j delta_j) via a strict
  // lower-triangular ones matrix: matmul computes the exclusive prefix sum
  Array strict_lower = Array::zeros({s, s});
  for (std::size_t j = 0; j < s; ++j)
    for (std::size_t i = j + 1; i < s; ++i) strict_lower.mutable_data()[j * s + i] = 1;
  Var prefix = matmul(optical, tape.constant(strict_lower));
  Var trans = exp(mul_const(prefix, -1));
  CompositeResult out;
  out.weights = mul(alpha, trans);
  out.opacity = sum_axis(out.weights, 1);

  std::vector<Var> channels;
  for (int k = 0; k < 3; ++k) {
    Var ck = reshape(slice(colors, 1, static_cast<std::size_t>(k), 1), {rays, s});
    channels.push_back(sum_axis(mul(out.weights, ck), 1));
  }
  Var fg = concat(channels, 1);  // [rays x 3]
  Var bg_weight = add_const(mul_const(out.opacity, -1), 1);
  out.rgb = add(fg, mul(background, bg_weight));
  return out;
}

Var orientation_loss(ndg::Tape& tape, Var weights, Var normals, const Array& view_dirs,
                     const Array& valid_mask) {
  const std::size_t rays = weights.value().shape()[0];
  const std::size_t s = weights.value().shape()[1];
  Var facing = max_const(sum_axis(mul(normals, tape.constant(view_dirs)), 1), 0);  // [n x 1]
  Var sq = mul(mul(facing, facing), tape.constant(valid_mask));
  Var w_flat = reshape(stop_gradient(weights), {rays * s, 1});
  Var total = sum_all(mul(w_flat, sq));
  return mul_const(total, real(1) / static_cast<real>(rays));
}

Var opacity_loss(ndg::Tape& tape, Var opacity) {
  (void)tape;
  Var per_ray = sqrt(add_const(mul(opacity, opacity), real(0.01)));
  return mean_all(per_ray);
}

// ---- ray marching ----

namespace {

struct RaySamples {
  Array positions;  // [rays*s x 3]
  Array deltas;     // [rays x s]
  Array view_dirs;  // [rays*s x 3] (per point, equal within a ray)
};

// Stratified midpoints inside fixed bins of the ray-sphere intersection.
// Missed rays get zero-width intervals at the origin, which composite to
// pure background through the same code path.
RaySamples stratified_samples(const Array& origins, const Array& dirs, const RenderConfig& cfg,
                              std::uint64_t jitter_salt, std::size_t ray_index_base) {
  const std::size_t rays = origins.shape()[0];
  const std::size_t s = static_cast<std::size_t>(cfg.samples_per_ray);
  RaySamples out;
  out.positions = Array::zeros({rays * s, 3});
  out.deltas = Array::zeros({rays, s});
  out.view_dirs = Array::uninit({rays * s, 3});
  ndg::RngStream salt_stream(jitter_salt);

  for (std::size_t r = 0; r < rays; ++r) {
    const real ox = origins.at2(r, 0), oy = origins.at2(r, 1), oz = origins.at2(r, 2);
    const real dx = dirs.at2(r, 0), dy = dirs.at2(r, 1), dz = dirs.at2(r, 2);
    for (std::size_t i = 0; i < s; ++i)
      for (int k = 0; k < 3; ++k)
        out.view_dirs.mutable_data()[(r * s + i) * 3 + k] = dirs.at2(r, k);

    // |o + t d|^2 = R^2 with unit d
    const real b = ox * dx + oy * dy + oz * dz;
    const real c = ox * ox + oy * oy + oz * oz - cfg.sphere_radius * cfg.sphere_radius;
    const real disc = b * b - c;
    if (disc <= 0) continue;  // miss: keep zero-width intervals
    const real sq = std::sqrt(disc);
    const real near = std::max(real(0), -b - sq);
    const real far = -b + sq;
    if (far <= near) continue;
    const real width = (far - near) / static_cast<real>(s);

    ndg::RngStream jitter = salt_stream.fork(ray_index_base + r);
    for (std::size_t i = 0; i < s; ++i) {
      const real tmid = near + (static_cast<real>(i) + jitter.uniform()) * width;
      out.deltas.mutable_data()[r * s + i] = width;
      out.positions.mutable_data()[(r * s + i) * 3 + 0] = ox + tmid * dx;
      out.positions.mutable_data()[(r * s + i) * 3 + 1] = oy + tmid * dy;
      out.positions.mutable_data()[(r * s + i) * 3 + 2] = oz + tmid * dz;
    }
  }
  return out;
}

}  // namespace

RowsTaped render_rows_taped(ndg::Tape& tape, const FieldFn& field, const BackgroundFn& background,
                            const RenderConfig& cfg, const RenderInputs& in, std::size_t row0,
                            std::size_t row1) {
  Array origins, dirs;
  rays_for_rows(in.pose, in.focal_px, cfg.width, cfg.height, row0, row1, origins, dirs);
  RaySamples samples =
      stratified_samples(origins, dirs, cfg, in.jitter_salt, row0 * cfg.width);

  const bool want_normals = in.mode != RenderMode::Albedo;
  const bool want_albedo = in.mode != RenderMode::Textureless;
  FieldEval fe = field(tape, samples.positions, want_normals, want_albedo);

  RowsTaped out;
  out.rays = origins.shape()[0];

  std::optional<Var> normals;
  Array valid_mask;
  if (want_normals) {
    NormalsResult nr = normals_from_density_gradient(tape, *fe.dtau);
    normals = nr.normals;
    valid_mask = nr.valid_mask;
    out.normals = nr.normals;
  }

  Var colors = shade(tape, fe.rho, normals, samples.positions, in.light, in.mode);

  Var bg = (cfg.whiten_background && in.mode == RenderMode::Textureless)
               ? constant_background({1, 1, 1})(tape, dirs)
               : background(tape, dirs);
  CompositeResult comp = composite(tape, fe.tau, colors, samples.deltas, bg);
  out.rgb = comp.rgb;
  out.opacity = comp.opacity;
  out.weights = comp.weights;

  if (want_normals) {
    out.orient_sum = orientation_loss(tape, comp.weights, *normals, samples.view_dirs, valid_mask);
  } else {
    out.orient_sum = tape.constant(real(0));
  }
  out.opacity_sum = opacity_loss(tape, comp.opacity);
  return out;
}

// ---- whole-image drivers ----

namespace {

struct ChunkRange {
  std::size_t row0, row1;
};

std::vector<ChunkRange> chunk_rows(const RenderConfig& cfg) {
  std::vector<ChunkRange> chunks;
  const std::size_t step = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.rows_per_chunk));
  for (std::size_t r = 0; r < cfg.height; r += step)
    chunks.push_back({r, std::min(cfg.height, r + step)});
  return chunks;
}

template <typename Fn>
void run_chunks(const std::vector<ChunkRange>& chunks, int threads, Fn&& fn) {
  if (threads <= 1 || chunks.size() <= 1) {
    for (std::size_t i = 0; i < chunks.size(); ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(chunks.size());
  const int nthreads = std::min<int>(threads, static_cast<int>(chunks.size()));
  for (int t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= chunks.size()) break;
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

RenderValue render_image_with(const FieldFn& field, const BackgroundFn& background,
                              const RenderConfig& cfg, const RenderInputs& in) {
  RenderValue out;
  out.rgb = Array::uninit({cfg.height, cfg.width, 3});
  out.opacity = Array::uninit({cfg.height, cfg.width});
  const auto chunks = chunk_rows(cfg);
  run_chunks(chunks, cfg.threads, [&](std::size_t ci) {
    ndg::Tape tape;
    RowsTaped rt = render_rows_taped(tape, field, background, cfg, in, chunks[ci].row0,
                                     chunks[ci].row1);
    const Array& rgb = rt.rgb.value();
    const Array& op = rt.opacity.value();
    real* prgb = out.rgb.mutable_data() + chunks[ci].row0 * cfg.width * 3;
    real* pop = out.opacity.mutable_data() + chunks[ci].row0 * cfg.width;
    std::copy(rgb.data(), rgb.data() + rgb.size(), prgb);
    std::copy(op.data(), op.data() + op.size(), pop);
  });
  return out;
}

RenderValue render_image(const ParamMap& params, const RenderConfig& cfg, const RenderInputs& in) {
  // Each chunk registers its own leaves; values only, so per-chunk tapes are
  // independent and discarded.
  RenderValue out;
  out.rgb = Array::uninit({cfg.height, cfg.width, 3});
  out.opacity = Array::uninit({cfg.height, cfg.width});
  const auto chunks = chunk_rows(cfg);
  run_chunks(chunks, cfg.threads, [&](std::size_t ci) {
    ndg::Tape tape;
    auto leaves = register_leaves(tape, params);
    FieldFn field = mlp_field(leaves, cfg.arch, cfg.ipe, in.lambda_sigma, cfg.blob);
    BackgroundFn bg = mlp_background(leaves, cfg.arch);
    RowsTaped rt = render_rows_taped(tape, field, bg, cfg, in, chunks[ci].row0, chunks[ci].row1);
    const Array& rgb = rt.rgb.value();
    const Array& op = rt.opacity.value();
    std::copy(rgb.data(), rgb.data() + rgb.size(),
              out.rgb.mutable_data() + chunks[ci].row0 * cfg.width * 3);
    std::copy(op.data(), op.data() + op.size(),
              out.opacity.mutable_data() + chunks[ci].row0 * cfg.width);
  });
  return out;
}

RenderBackward render_backward(const ParamMap& params, const RenderConfig& cfg,
                               const RenderInputs& in, const Array& rgb_cotangent,
                               real w_orient, real w_opacity) {
  if (rgb_cotangent.shape() != Shape{cfg.height, cfg.width, 3})
    throw ShapeError("render_backward: cotangent shape mismatch");
  const auto chunks = chunk_rows(cfg);
  const real ray_norm = static_cast<real>(1) / static_cast<real>(cfg.height * cfg.width);

  std::vector<GradientMap> grads(chunks.size());
  std::vector<real> orient(chunks.size()), opac(chunks.size());
  run_chunks(chunks, cfg.threads, [&](std::size_t ci) {
    ndg::Tape tape;
    auto leaves = register_leaves(tape, params);
    FieldFn field = mlp_field(leaves, cfg.arch, cfg.ipe, in.lambda_sigma, cfg.blob);
    BackgroundFn bg = mlp_background(leaves, cfg.arch);
    RowsTaped rt = render_rows_taped(tape, field, bg, cfg, in, chunks[ci].row0, chunks[ci].row1);

    const std::size_t n = rt.rays * 3;
    Array cot = Array::uninit({rt.rays, 3});
    std::copy(rgb_cotangent.data() + chunks[ci].row0 * cfg.width * 3,
              rgb_cotangent.data() + chunks[ci].row0 * cfg.width * 3 + n, cot.mutable_data());

    // chunk losses carry per-chunk ray means; rescale to the image mean
    const real chunk_scale =
        static_cast<real>(rt.rays) * ray_norm;
    Var total = dot(tape.constant(cot), rt.rgb);
    if (w_orient != 0)
      total = add(total, mul_const(rt.orient_sum, w_orient * chunk_scale));
    if (w_opacity != 0)
      total = add(total, mul_const(rt.opacity_sum, w_opacity * chunk_scale));
    grads[ci] = tape.backward(total);
    orient[ci] = rt.orient_sum.value().at(0) * chunk_scale;
    opac[ci] = rt.opacity_sum.value().at(0) * chunk_scale;
  });

  RenderBackward out;
  for (std::size_t ci = 0; ci < chunks.size(); ++ci) {
    out.grads.add_scaled_in_place(grads[ci], 1);
    out.orient_loss += orient[ci];
    out.opacity_loss += opac[ci];
  }
  return out;
}

}  // namespace sds::render
