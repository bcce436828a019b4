#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "spf/nn.hpp"
#include "spf/rng.hpp"
#include "spf/tensor.hpp"

namespace spf {

// Procedural RGB-D scene generator. Primitives are layered front-to-back in
// disjoint depth bands, so semantic boundaries and depth discontinuities
// coincide by construction; normals come from each primitive's analytic
// geometry; RGB carries high-frequency texture that is independent of depth.

struct SynthConfig {
  std::uint64_t seed = 1;
  int height = 96;   // HR rows
  int width = 96;    // HR cols
  int scale = 4;     // s, LR = HR / s
  int min_objects = 3;
  int max_objects = 8;
  double depth_min_cm = 50.0;
  double depth_max_cm = 500.0;
  double texture_amplitude = 0.25;
  double noise_std = 0.0;  // in the 0-255 depth convention; variance 25 => 5
};

struct Scene {
  Tensor<float> rgb;       // (3, sH, sW) in [0,1]
  Tensor<float> depth_gt;  // (1, sH, sW) centimeters
  Tensor<float> normal;    // (3, sH, sW) unit vectors
  Tensor<float> semantic;  // (1, sH, sW) labels rescaled to [0,1]
  Tensor<float> depth_lr;  // (1, H, W) centimeters
  Tensor<float> valid;     // (1, sH, sW) 1 = valid
};

// world scale: centimeters per HR pixel
constexpr double kPixelPitchCm = 2.0;
constexpr int kMaxLabel = 8;

struct Primitive {
  enum class Kind { Plane, Sphere, Box } kind = Kind::Plane;
  int label = 0;
  // plane/box surface: z = z0 + ax*(x-cx) + ay*(y-cy), coordinates in cm
  double z0 = 0, ax = 0, ay = 0;
  double cx = 0, cy = 0;       // center, cm
  double half_w = 0, half_h = 0;  // box/plane footprint half extents, cm
  double rot = 0;              // plane footprint rotation, radians
  double radius = 0;           // sphere radius, cm
  // base color and texture
  double color[3] = {0.5, 0.5, 0.5};
  double tex_amp = 0.0;
  double tex_freq = 0.1, tex_dir = 0.0, tex_phase = 0.0;
  bool plaid = false;

  // depth and unit normal at world point (x, y); returns false outside the
  // footprint
  bool sample(double x, double y, double& z, double n[3]) const {
    const double dx = x - cx, dy = y - cy;
    switch (kind) {
      case Kind::Sphere: {
        // rendered as a spherical cap (footprint 0.75 r) so the surface
        // slope stays bounded and the silhouette is the only discontinuity
        const double d2 = dx * dx + dy * dy;
        if (d2 >= 0.5625 * radius * radius) return false;
        const double s = std::sqrt(radius * radius - d2);
        z = z0 - s;
        n[0] = -dx / radius;
        n[1] = -dy / radius;
        n[2] = s / radius;
        return true;
      }
      case Kind::Box: {
        if (std::abs(dx) > half_w || std::abs(dy) > half_h) return false;
        break;
      }
      case Kind::Plane: {
        const double c = std::cos(rot), s = std::sin(rot);
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        if (std::abs(u) > half_w || std::abs(v) > half_h) return false;
        break;
      }
    }
    z = z0 + ax * dx + ay * dy;
    const double inv = 1.0 / std::sqrt(ax * ax + ay * ay + 1.0);
    n[0] = -ax * inv;
    n[1] = -ay * inv;
    n[2] = inv;
    return true;
  }

  double texture(double x, double y) const {
    const double c = std::cos(tex_dir), s = std::sin(tex_dir);
    double t = std::sin(tex_freq * (c * x + s * y) + tex_phase);
    if (plaid) t *= std::sin(tex_freq * (-s * x + c * y) + 1.7 * tex_phase);
    return tex_amp * t;
  }
};

inline std::vector<Primitive> make_primitives(const SynthConfig& cfg, Rng& rng) {
  check(cfg.max_objects <= kMaxLabel, "synth: max_objects must be <= " + std::to_string(kMaxLabel));
  check(cfg.min_objects >= 0 && cfg.min_objects <= cfg.max_objects, "synth: bad object count range");
  const double span = cfg.depth_max_cm - cfg.depth_min_cm;
  const double ext_x = cfg.width * kPixelPitchCm, ext_y = cfg.height * kPixelPitchCm;

  std::vector<Primitive> prims;
  // background plane, label 0, occupies the far band
  {
    Primitive bg;
    bg.kind = Primitive::Kind::Box;
    bg.label = 0;
    bg.cx = ext_x / 2;
    bg.cy = ext_y / 2;
    bg.half_w = ext_x;  // covers everything
    bg.half_h = ext_y;
    bg.z0 = cfg.depth_min_cm + span * rng.uniform(0.82, 0.92);
    bg.ax = rng.uniform(-0.08, 0.08);
    bg.ay = rng.uniform(-0.08, 0.08);
    for (auto& c : bg.color) c = rng.uniform(0.15, 0.85);
    bg.tex_amp = cfg.texture_amplitude;
    bg.tex_freq = 2.0 * 3.14159265358979323846 / rng.uniform(8.0, 16.0) / kPixelPitchCm;
    bg.tex_dir = rng.uniform(0.0, 3.14159265358979323846);
    bg.tex_phase = rng.uniform(0.0, 6.28318530717958647);
    bg.plaid = rng.uniform() < 0.5;
    prims.push_back(bg);
  }

  const int n = int(rng.uniform_int(cfg.min_objects, cfg.max_objects));
  // disjoint depth bands, front to back, all strictly in front of the
  // background so every silhouette is a depth discontinuity
  const double band = span * 0.72 / kMaxLabel;
  for (int k = 0; k < n; ++k) {
    Primitive p;
    p.label = k + 1;
    const double band_lo = cfg.depth_min_cm + span * 0.04 + band * k;
    const double kind_pick = rng.uniform();
    p.cx = rng.uniform(0.15, 0.85) * ext_x;
    p.cy = rng.uniform(0.15, 0.85) * ext_y;
    for (auto& c : p.color) c = rng.uniform(0.15, 0.85);
    p.tex_amp = cfg.texture_amplitude;
    p.tex_freq = 2.0 * 3.14159265358979323846 / rng.uniform(8.0, 16.0) / kPixelPitchCm;
    p.tex_dir = rng.uniform(0.0, 3.14159265358979323846);
    p.tex_phase = rng.uniform(0.0, 6.28318530717958647);
    p.plaid = rng.uniform() < 0.5;
    if (kind_pick < 0.34) {
      p.kind = Primitive::Kind::Sphere;
      p.radius = rng.uniform(0.08, 0.22) * std::min(ext_x, ext_y);
      // cap depth spans [z0 - r, z0 - 0.66 r]; keep it inside the band with
      // a front pad so every band gap stays a real jump
      if (p.radius > band * 0.70 / 0.34) p.radius = band * 0.70 / 0.34;
      p.z0 = band_lo + band * 0.02 + p.radius;
    } else {
      p.kind = kind_pick < 0.67 ? Primitive::Kind::Box : Primitive::Kind::Plane;
      p.half_w = rng.uniform(0.10, 0.28) * ext_x;
      p.half_h = rng.uniform(0.10, 0.28) * ext_y;
      p.rot = p.kind == Primitive::Kind::Plane ? rng.uniform(0.0, 1.5707963267948966) : 0.0;
      const double reach = p.half_w + p.half_h;
      double amax = band * 0.3 / std::max(reach, 1.0);
      amax = std::min(amax, 0.35);
      p.ax = rng.uniform(-amax, amax);
      p.ay = rng.uniform(-amax, amax);
      p.z0 = band_lo + band * 0.375;
    }
    prims.push_back(p);
  }
  return prims;
}

// z-buffer render of a primitive list; nearest surface wins and supplies
// depth, normal, label and albedo
inline Scene render_primitives(const SynthConfig& cfg, const std::vector<Primitive>& prims) {
  const std::int64_t sh = cfg.height, sw = cfg.width;
  Scene sc;
  sc.rgb = Tensor<float>::zeros({3, sh, sw});
  sc.depth_gt = Tensor<float>::zeros({1, sh, sw});
  sc.normal = Tensor<float>::zeros({3, sh, sw});
  sc.semantic = Tensor<float>::zeros({1, sh, sw});
  sc.valid = Tensor<float>::full({1, sh, sw}, 1.0f);
  for (std::int64_t yy = 0; yy < sh; ++yy)
    for (std::int64_t xx = 0; xx < sw; ++xx) {
      const double wx = (double(xx) + 0.5) * kPixelPitchCm;
      const double wy = (double(yy) + 0.5) * kPixelPitchCm;
      double best_z = 1e30;
      const Primitive* win = nullptr;
      double best_n[3] = {0, 0, 1};
      for (const auto& p : prims) {
        double z, n[3];
        if (p.sample(wx, wy, z, n) && z < best_z) {
          best_z = z;
          win = &p;
          best_n[0] = n[0];
          best_n[1] = n[1];
          best_n[2] = n[2];
        }
      }
      check(win != nullptr, "render_primitives: uncovered pixel (no background?)");
      const std::int64_t i = yy * sw + xx;
      sc.depth_gt.data()[i] = float(best_z);
      for (int c = 0; c < 3; ++c) sc.normal.data()[c * sh * sw + i] = float(best_n[c]);
      sc.semantic.data()[i] = float(double(win->label) / kMaxLabel);
      const double tex = win->texture(wx, wy);
      for (int c = 0; c < 3; ++c) {
        double v = win->color[c] + tex;
        sc.rgb.data()[c * sh * sw + i] = float(std::clamp(v, 0.0, 1.0));
      }
    }
  return sc;
}

// bicubic downsample by s, then optional Gaussian noise in the 0-255
// convention over [lo, hi], clamped back to [lo, hi]
inline Tensor<float> degrade(const Tensor<float>& depth_gt, int s, double noise_std, double lo, double hi,
                             Rng& rng) {
  check(depth_gt.rank() == 3 && depth_gt.dim(0) == 1, "degrade: expects (1, sH, sW) depth");
  const std::int64_t sh = depth_gt.dim(1), sw = depth_gt.dim(2);
  check(sh % s == 0 && sw % s == 0, "degrade: extents " + shape_str(depth_gt.shape()) +
                                        " not divisible by scale " + std::to_string(s));
  Tensor<float> d4 = reshape(depth_gt, {1, 1, sh, sw});
  Tensor<float> lr4 = bicubic_down(d4, s);
  Tensor<float> lr = reshape(lr4, {1, sh / s, sw / s});
  if (noise_std > 0.0) {
    const double cm_per_level = (hi - lo) / 255.0;
    for (auto& v : lr.values()) {
      double d = double(v) + rng.normal() * noise_std * cm_per_level;
      v = float(std::clamp(d, lo, hi));
    }
  }
  return lr;
}

inline Scene generate_scene(const SynthConfig& cfg, std::int64_t index) {
  check(cfg.height % cfg.scale == 0 && cfg.width % cfg.scale == 0,
        "synth: image size must be divisible by scale");
  Rng rng(Rng::mix(cfg.seed, std::uint64_t(index)));
  auto prims = make_primitives(cfg, rng);
  Scene sc = render_primitives(cfg, prims);
  Rng noise_rng(Rng::mix(cfg.seed, std::uint64_t(index) ^ 0x9e3779b97f4a7c15ull));
  sc.depth_lr = degrade(sc.depth_gt, cfg.scale, cfg.noise_std, cfg.depth_min_cm, cfg.depth_max_cm, noise_rng);
  return sc;
}

// ---------------------------------------------------------------------------
// dataset manifests

struct ManifestEntry {
  std::int64_t index;
  std::uint64_t seed;
};

struct SplitManifests {
  std::vector<ManifestEntry> train, val;
};

inline SplitManifests make_split(const SynthConfig& cfg, int n_train, int n_val, std::int64_t train_start = 0,
                                 std::int64_t val_start = -1) {
  if (val_start < 0) val_start = train_start + n_train;
  const std::int64_t t0 = train_start, t1 = train_start + n_train;
  const std::int64_t v0 = val_start, v1 = val_start + n_val;
  check(t1 <= v0 || v1 <= t0, "make_split: train range [" + std::to_string(t0) + "," + std::to_string(t1) +
                                  ") overlaps val range [" + std::to_string(v0) + "," + std::to_string(v1) + ")");
  SplitManifests m;
  for (std::int64_t i = t0; i < t1; ++i) m.train.push_back({i, cfg.seed});
  for (std::int64_t i = v0; i < v1; ++i) m.val.push_back({i, cfg.seed});
  return m;
}

// ---------------------------------------------------------------------------
// masks used by tests and the kernel inspector

inline std::vector<int> label_map(const Scene& sc) {
  std::vector<int> lab(std::size_t(sc.semantic.numel()));
  for (std::size_t i = 0; i < lab.size(); ++i)
    lab[i] = int(std::lround(double(sc.semantic.data()[i]) * kMaxLabel));
  return lab;
}

inline std::vector<unsigned char> semantic_edge_mask(const Scene& sc) {
  const std::int64_t H = sc.semantic.dim(1), W = sc.semantic.dim(2);
  const auto lab = label_map(sc);
  std::vector<unsigned char> e(std::size_t(H * W), 0);
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      const int l = lab[std::size_t(y * W + x)];
      if ((x + 1 < W && lab[std::size_t(y * W + x + 1)] != l) ||
          (y + 1 < H && lab[std::size_t((y + 1) * W + x)] != l))
        e[std::size_t(y * W + x)] = 1;
    }
  return e;
}

inline std::vector<unsigned char> depth_edge_mask(const Scene& sc, double thresh_cm) {
  const std::int64_t H = sc.depth_gt.dim(1), W = sc.depth_gt.dim(2);
  const float* d = sc.depth_gt.data();
  std::vector<unsigned char> e(std::size_t(H * W), 0);
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      const double v = d[y * W + x];
      if ((x + 1 < W && std::abs(d[y * W + x + 1] - v) > thresh_cm) ||
          (y + 1 < H && std::abs(d[(y + 1) * W + x] - v) > thresh_cm))
        e[std::size_t(y * W + x)] = 1;
    }
  return e;
}

// LR-resolution mask of pixels whose semantic neighborhood is uniform while
// the (downsampled) RGB still shows texture
inline std::vector<unsigned char> textured_uniform_mask_lr(const Scene& sc, double rgb_std_thresh = 0.015) {
  const int s = int(sc.depth_gt.dim(1) / sc.depth_lr.dim(1));
  const std::int64_t H = sc.depth_lr.dim(1), W = sc.depth_lr.dim(2);
  const std::int64_t sH = sc.depth_gt.dim(1), sW = sc.depth_gt.dim(2);
  const auto lab = label_map(sc);
  // nearest-subsampled labels
  std::vector<int> lab_lr(std::size_t(H * W));
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x)
      lab_lr[std::size_t(y * W + x)] = lab[std::size_t((y * s + s / 2) * sW + (x * s + s / 2))];
  // gray LR image
  Tensor<float> gray = Tensor<float>::zeros({1, 1, sH, sW});
  for (std::int64_t i = 0; i < sH * sW; ++i)
    gray.data()[i] = (sc.rgb.data()[i] + sc.rgb.data()[sH * sW + i] + sc.rgb.data()[2 * sH * sW + i]) / 3.0f;
  Tensor<float> gray_lr = bicubic_down(gray, s);
  std::vector<unsigned char> mask(std::size_t(H * W), 0);
  for (std::int64_t y = 1; y + 1 < H; ++y)
    for (std::int64_t x = 1; x + 1 < W; ++x) {
      bool uniform = true;
      for (std::int64_t dy = -1; dy <= 1 && uniform; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx)
          if (lab_lr[std::size_t((y + dy) * W + (x + dx))] != lab_lr[std::size_t(y * W + x)]) {
            uniform = false;
            break;
          }
      if (!uniform) continue;
      double s1 = 0, s2 = 0;
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const double v = gray_lr.data()[(y + dy) * W + (x + dx)];
          s1 += v;
          s2 += v * v;
        }
      const double mean = s1 / 9.0;
      const double var = s2 / 9.0 - mean * mean;
      if (var > rgb_std_thresh * rgb_std_thresh) mask[std::size_t(y * W + x)] = 1;
    }
  return mask;
}

}  // namespace spf
