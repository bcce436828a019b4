#pragma once

#include <optional>

#include "spf/nn.hpp"
#include "spf/tensor.hpp"

namespace spf {

// All-in-one prior propagation: patch-cosine similarity between each prior
// feature and the depth feature, RGB weight fusion, and interference
// attenuation of the previous stage's filtered features.

constexpr double kPatchNormEps = 1e-8;

namespace detail {

template <typename T>
void patch_dot3(const T* a, const T* b, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t y,
                std::int64_t x, double& dot, double& na2, double& nb2) {
  dot = na2 = nb2 = 0.0;
  for (std::int64_t c = 0; c < C; ++c) {
    const T* pa = a + c * H * W;
    const T* pb = b + c * H * W;
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
      const std::int64_t yy = y + dy;
      if (yy < 0 || yy >= H) continue;
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        const std::int64_t xx = x + dx;
        if (xx < 0 || xx >= W) continue;
        const double va = double(pa[yy * W + xx]);
        const double vb = double(pb[yy * W + xx]);
        dot += va * vb;
        na2 += va * va;
        nb2 += vb * vb;
      }
    }
  }
}

}  // namespace detail

// Normalized inner product of 3x3 patches (zero padding 1), one scalar per
// pixel. Norms are clamped below by eps; the clamp is treated as constant in
// the backward pass.
template <typename T>
Tensor<T> patch_similarity(const Tensor<T>& prior_feat, const Tensor<T>& depth_feat, double eps = kPatchNormEps) {
  check(prior_feat.rank() == 4 && depth_feat.rank() == 4, "patch_similarity: expects 4-D BCHW inputs");
  check(prior_feat.shape() == depth_feat.shape(),
        "patch_similarity: spatial/channel mismatch: " + shape_str(prior_feat.shape()) + " vs " +
            shape_str(depth_feat.shape()));
  const std::int64_t B = prior_feat.dim(0), C = prior_feat.dim(1), H = prior_feat.dim(2), W = prior_feat.dim(3);
  Tensor<T> out = Tensor<T>::zeros({B, 1, H, W});

  for (std::int64_t b = 0; b < B; ++b) {
    const T* pa = prior_feat.data() + b * C * H * W;
    const T* pb = depth_feat.data() + b * C * H * W;
    T* po = out.data() + b * H * W;
    parallel_for_work(H, C * H * W * 18, [&](std::int64_t y) {
      for (std::int64_t x = 0; x < W; ++x) {
        double dot, na2, nb2;
        detail::patch_dot3(pa, pb, C, H, W, y, x, dot, na2, nb2);
        const double np = std::max(std::sqrt(na2), eps);
        const double nd = std::max(std::sqrt(nb2), eps);
        po[y * W + x] = T(dot / (np * nd));
      }
    });
  }

  detail::maybe_record(out, {prior_feat, depth_feat}, [=]() mutable {
    const auto& g = out.grad();
    const bool need_a = prior_feat.requires_grad();
    const bool need_b = depth_feat.requires_grad();
    if (need_a && prior_feat.storage()->grad.empty())
      prior_feat.storage()->grad.assign(std::size_t(prior_feat.numel()), T(0));
    if (need_b && depth_feat.storage()->grad.empty())
      depth_feat.storage()->grad.assign(std::size_t(depth_feat.numel()), T(0));
    for (std::int64_t b = 0; b < B; ++b) {
      const T* pa = prior_feat.data() + b * C * H * W;
      const T* pb = depth_feat.data() + b * C * H * W;
      const T* pg = g.data() + b * H * W;
      T* ga = need_a ? prior_feat.storage()->grad.data() + b * C * H * W : nullptr;
      T* gb = need_b ? depth_feat.storage()->grad.data() + b * C * H * W : nullptr;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          const double gv = double(pg[y * W + x]);
          if (gv == 0.0) continue;
          double dot, na2, nb2;
          detail::patch_dot3(pa, pb, C, H, W, y, x, dot, na2, nb2);
          const double na = std::sqrt(na2);
          const double nb = std::sqrt(nb2);
          const double np = std::max(na, eps);
          const double nd = std::max(nb, eps);
          const double sigma = dot / (np * nd);
          const double inv = 1.0 / (np * nd);
          const bool a_live = na > eps;
          const bool b_live = nb > eps;
          for (std::int64_t c = 0; c < C; ++c) {
            const T* ac = pa + c * H * W;
            const T* bc = pb + c * H * W;
            for (std::int64_t dy = -1; dy <= 1; ++dy) {
              const std::int64_t yy = y + dy;
              if (yy < 0 || yy >= H) continue;
              for (std::int64_t dx = -1; dx <= 1; ++dx) {
                const std::int64_t xx = x + dx;
                if (xx < 0 || xx >= W) continue;
                const std::int64_t idx = c * H * W + yy * W + xx;
                const double va = double(ac[yy * W + xx]);
                const double vb = double(bc[yy * W + xx]);
                if (need_a) ga[idx] += T(gv * (vb * inv - (a_live ? sigma * va / (np * np) : 0.0)));
                if (need_b) gb[idx] += T(gv * (va * inv - (b_live ? sigma * vb / (nd * nd) : 0.0)));
              }
            }
          }
        }
    }
  });
  return out;
}

// w_r = g1 * w_n + g2 * w_s + sigma_r, with missing modalities dropped
template <typename T>
Tensor<T> fuse_rgb_weight(const Tensor<T>& w_n, const Tensor<T>& w_s, const Tensor<T>& sigma_r,
                          const Tensor<T>& gamma1, const Tensor<T>& gamma2) {
  Tensor<T> w_r = sigma_r;
  if (w_n.defined()) w_r = add(w_r, mul(w_n, gamma1));
  if (w_s.defined()) w_r = add(w_r, mul(w_s, gamma2));
  return w_r;
}

// f_rg(prev * w + prev), the one-channel weight broadcast over channels
template <typename T>
Tensor<T> propagate(const Tensor<T>& prev_filtered, const Tensor<T>& w, const ResidualGroupParams<T>& rg) {
  return residual_group(add(mul(prev_filtered, w), prev_filtered), rg);
}

template <typename T>
struct SimilarityWeights {
  Tensor<T> w_n, w_s, w_r;  // (B,1,h,w); undefined when the modality is disabled
};

template <typename T>
struct EnhancedPriors {
  Tensor<T> normal, rgb, semantic;  // F_en, F_er, F_es
};

template <typename T>
struct AppParams {
  ResidualGroupParams<T> rg_normal, rg_rgb, rg_semantic;
  Tensor<T> gamma1, gamma2;  // scalars, zero-initialized
};

template <typename T>
struct PriorFeatures {
  Tensor<T> normal, rgb, semantic;
};

// One APP stage. Prior-branch features arrive at their native (HR)
// resolution and are bicubically downsampled to the depth feature's extent;
// prev_filtered carries the previous OPE outputs (or their stage-1
// bootstrap).
template <typename T>
std::pair<SimilarityWeights<T>, EnhancedPriors<T>> app_stage(const PriorFeatures<T>& priors,
                                                             const Tensor<T>& depth_feat,
                                                             const PriorFeatures<T>& prev_filtered,
                                                             const AppParams<T>& params) {
  const std::int64_t h = depth_feat.dim(2), w = depth_feat.dim(3);
  auto to_depth_res = [&](const Tensor<T>& f) {
    if (f.dim(2) == h && f.dim(3) == w) return f;
    check(f.dim(2) % h == 0 && f.dim(2) / h == f.dim(3) / w,
          "app_stage: prior extent " + shape_str(f.shape()) + " not an integer multiple of depth extent");
    return bicubic_down(f, int(f.dim(2) / h));
  };

  SimilarityWeights<T> weights;
  Tensor<T> sigma_r;
  if (priors.normal.defined()) weights.w_n = patch_similarity(to_depth_res(priors.normal), depth_feat);
  if (priors.semantic.defined()) weights.w_s = patch_similarity(to_depth_res(priors.semantic), depth_feat);
  sigma_r = patch_similarity(to_depth_res(priors.rgb), depth_feat);
  weights.w_r = fuse_rgb_weight(weights.w_n, weights.w_s, sigma_r, params.gamma1, params.gamma2);

  EnhancedPriors<T> enhanced;
  if (priors.normal.defined()) enhanced.normal = propagate(prev_filtered.normal, weights.w_n, params.rg_normal);
  enhanced.rgb = propagate(prev_filtered.rgb, weights.w_r, params.rg_rgb);
  if (priors.semantic.defined())
    enhanced.semantic = propagate(prev_filtered.semantic, weights.w_s, params.rg_semantic);
  return {weights, enhanced};
}

}  // namespace spf
