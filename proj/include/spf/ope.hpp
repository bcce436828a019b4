#pragma once

#include <array>
#include <optional>
#include <vector>

#include "spf/app.hpp"
#include "spf/nn.hpp"
#include "spf/tensor.hpp"

namespace spf {

// One-to-one prior embedding: sequential per-modality mutual guided
// filtering with predicted spatially-variant kernels, then fusion back into
// the depth feature.

// Applies one predicted K x K kernel per output pixel, shared across
// channels, with zero padding (K-1)/2.
template <typename T>
Tensor<T> svf_filter(const Tensor<T>& x, const Tensor<T>& kernels) {
  check(x.rank() == 4 && kernels.rank() == 4, "svf_filter: expects 4-D BCHW inputs");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(kernels.dim(0) == B && kernels.dim(2) == H && kernels.dim(3) == W,
        "svf_filter: kernel field " + shape_str(kernels.shape()) + " does not match input " +
            shape_str(x.shape()));
  const std::int64_t K2 = kernels.dim(1);
  const std::int64_t K = std::int64_t(std::lround(std::sqrt(double(K2))));
  check(K * K == K2 && K % 2 == 1, "svf_filter: kernel channel count " + std::to_string(K2) +
                                       " is not an odd square");
  const std::int64_t R = K / 2;

  Tensor<T> out = Tensor<T>::zeros({B, C, H, W});
  for (std::int64_t b = 0; b < B; ++b) {
    const T* xb = x.data() + b * C * H * W;
    const T* kb = kernels.data() + b * K2 * H * W;
    T* ob = out.data() + b * C * H * W;
    parallel_for_work(C, C * H * W * K2, [&](std::int64_t c) {
      const T* xc = xb + c * H * W;
      T* oc = ob + c * H * W;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x2 = 0; x2 < W; ++x2) {
          double acc = 0.0;
          for (std::int64_t dy = -R; dy <= R; ++dy) {
            const std::int64_t yy = y + dy;
            if (yy < 0 || yy >= H) continue;
            for (std::int64_t dx = -R; dx <= R; ++dx) {
              const std::int64_t xx = x2 + dx;
              if (xx < 0 || xx >= W) continue;
              const std::int64_t t = (dy + R) * K + (dx + R);
              acc += double(kb[t * H * W + y * W + x2]) * double(xc[yy * W + xx]);
            }
          }
          oc[y * W + x2] = T(acc);
        }
    });
  }

  detail::maybe_record(out, {x, kernels}, [=]() mutable {
    const auto& g = out.grad();
    const bool need_x = x.requires_grad();
    const bool need_k = kernels.requires_grad();
    if (need_x && x.storage()->grad.empty()) x.storage()->grad.assign(std::size_t(x.numel()), T(0));
    if (need_k && kernels.storage()->grad.empty())
      kernels.storage()->grad.assign(std::size_t(kernels.numel()), T(0));
    for (std::int64_t b = 0; b < B; ++b) {
      const T* xb = x.data() + b * C * H * W;
      const T* kb = kernels.data() + b * K2 * H * W;
      const T* gb = g.data() + b * C * H * W;
      if (need_k) {
        T* gk = kernels.storage()->grad.data() + b * K2 * H * W;
        parallel_for_work(H, C * H * W * K2, [&](std::int64_t y) {
          for (std::int64_t x2 = 0; x2 < W; ++x2)
            for (std::int64_t dy = -R; dy <= R; ++dy) {
              const std::int64_t yy = y + dy;
              if (yy < 0 || yy >= H) continue;
              for (std::int64_t dx = -R; dx <= R; ++dx) {
                const std::int64_t xx = x2 + dx;
                if (xx < 0 || xx >= W) continue;
                const std::int64_t t = (dy + R) * K + (dx + R);
                double acc = 0.0;
                for (std::int64_t c = 0; c < C; ++c)
                  acc += double(gb[c * H * W + y * W + x2]) * double(xb[c * H * W + yy * W + xx]);
                gk[t * H * W + y * W + x2] += T(acc);
              }
            }
        });
      }
      if (need_x) {
        T* gx = x.storage()->grad.data() + b * C * H * W;
        parallel_for_work(C, C * H * W * K2, [&](std::int64_t c) {
          const T* gc = gb + c * H * W;
          T* gxc = gx + c * H * W;
          for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x2 = 0; x2 < W; ++x2) {
              const double gv = double(gc[y * W + x2]);
              if (gv == 0.0) continue;
              for (std::int64_t dy = -R; dy <= R; ++dy) {
                const std::int64_t yy = y + dy;
                if (yy < 0 || yy >= H) continue;
                for (std::int64_t dx = -R; dx <= R; ++dx) {
                  const std::int64_t xx = x2 + dx;
                  if (xx < 0 || xx >= W) continue;
                  const std::int64_t t = (dy + R) * K + (dx + R);
                  gxc[yy * W + xx] += T(double(kb[t * H * W + y * W + x2]) * gv);
                }
              }
            }
        });
      }
    }
  });
  return out;
}

// kernels = tanh(conv1x1(feat * w + feat)); the similarity modulation is the
// same form as the APP attenuation. tanh keeps entries in (-1,1) and makes a
// zero-initialized generator an exact identity in the residual filter paths.
template <typename T>
Tensor<T> kernel_generate(const Tensor<T>& feat, const Tensor<T>& w, const ConvParams<T>& kg,
                          bool use_similarity = true) {
  Tensor<T> in = (use_similarity && w.defined()) ? add(mul(feat, w), feat) : feat;
  return tanh_op(conv2d(in, kg));
}

enum class MgfMode { None, D2P, P2D, D2PThenP2D, P2DThenD2P };

inline const char* mgf_mode_name(MgfMode m) {
  switch (m) {
    case MgfMode::None: return "none";
    case MgfMode::D2P: return "d2p";
    case MgfMode::P2D: return "p2d";
    case MgfMode::D2PThenP2D: return "d2p_p2d";
    case MgfMode::P2DThenD2P: return "p2d_d2p";
  }
  return "?";
}

template <typename T>
struct MgfParams {
  ConvParams<T> input_proj;                 // f_c, 1x1
  std::optional<ConvParams<T>> kg_prior;    // prior-to-depth generator
  std::optional<ConvParams<T>> kg_depth;    // depth-to-prior generator
};

template <typename T>
struct MgfResult {
  Tensor<T> filtered_depth;  // F_pd
  Tensor<T> filtered_prior;  // F_dp
  Tensor<T> k_pd, k_dp;      // kernel fields, undefined when a path is off
};

// Bidirectional filtering; both directions are residual, so zero-initialized
// generators make this an identity pair.
template <typename T>
MgfResult<T> mgf(const Tensor<T>& depth_in, const Tensor<T>& prior, const Tensor<T>& w, const MgfParams<T>& p,
                 MgfMode mode = MgfMode::P2DThenD2P, bool use_similarity = true) {
  check(depth_in.shape() == prior.shape(), "mgf: depth/prior shape mismatch: " + shape_str(depth_in.shape()) +
                                               " vs " + shape_str(prior.shape()));
  MgfResult<T> r;
  r.filtered_depth = depth_in;
  r.filtered_prior = prior;
  auto p2d = [&](const Tensor<T>& kernel_src) {
    r.k_pd = kernel_generate(kernel_src, w, *p.kg_prior, use_similarity);
    r.filtered_depth = add(svf_filter(depth_in, r.k_pd), depth_in);
  };
  auto d2p = [&](const Tensor<T>& kernel_src) {
    r.k_dp = kernel_generate(kernel_src, w, *p.kg_depth, use_similarity);
    r.filtered_prior = add(svf_filter(prior, r.k_dp), prior);
  };
  switch (mode) {
    case MgfMode::None:
      break;
    case MgfMode::P2D:
      p2d(prior);
      break;
    case MgfMode::D2P:
      d2p(depth_in);
      break;
    case MgfMode::P2DThenD2P:
      p2d(prior);
      d2p(r.filtered_depth);
      break;
    case MgfMode::D2PThenP2D:
      d2p(depth_in);
      p2d(r.filtered_prior);
      break;
  }
  return r;
}

enum class Modality { Normal, Semantic, Rgb };

inline char modality_letter(Modality m) {
  switch (m) {
    case Modality::Normal: return 'n';
    case Modality::Semantic: return 's';
    case Modality::Rgb: return 'r';
  }
  return '?';
}

template <typename T>
struct OpeParams {
  MgfParams<T> mgf_normal, mgf_semantic, mgf_rgb;
  ConvParams<T> fuse_fd;          // 1x1, m*C -> C
  FusionGroupParams<T> fusion;    // (m+1)*C -> C
};

template <typename T>
struct OpeOutputs {
  PriorFeatures<T> filtered_prior;  // F_dn, F_dr, F_ds
  PriorFeatures<T> filtered_depth;  // F_nd, F_rd, F_sd
  Tensor<T> fused_depth;            // F_fd
  Tensor<T> depth_next;             // F_d^i
  // prior-to-depth / depth-to-prior kernel fields per modality, for
  // diagnostics
  Tensor<T> k_pd_normal, k_pd_semantic, k_pd_rgb;
  Tensor<T> k_dp_normal, k_dp_semantic, k_dp_rgb;
};

// One OPE stage. `order` lists the enabled modalities in embedding order;
// the first consumes f_c(F_d), the second f_c(F_d + <first filtered depth>),
// the third f_c(<first> + <second> filtered depths).
template <typename T>
OpeOutputs<T> ope_stage(const Tensor<T>& depth_prev, const EnhancedPriors<T>& enhanced,
                        const SimilarityWeights<T>& weights, const OpeParams<T>& params,
                        const std::vector<Modality>& order, MgfMode mode = MgfMode::P2DThenD2P,
                        bool use_similarity = true) {
  check(!order.empty(), "ope_stage: empty modality order");
  OpeOutputs<T> out;
  std::vector<Tensor<T>> fd_seq, fp_seq;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const Modality m = order[pos];
    const MgfParams<T>* mp = nullptr;
    Tensor<T> prior, w;
    switch (m) {
      case Modality::Normal:
        mp = &params.mgf_normal;
        prior = enhanced.normal;
        w = weights.w_n;
        break;
      case Modality::Semantic:
        mp = &params.mgf_semantic;
        prior = enhanced.semantic;
        w = weights.w_s;
        break;
      case Modality::Rgb:
        mp = &params.mgf_rgb;
        prior = enhanced.rgb;
        w = weights.w_r;
        break;
    }
    check(prior.defined(), "ope_stage: modality in order but its enhanced feature is missing");
    Tensor<T> proj_in;
    if (pos == 0)
      proj_in = depth_prev;
    else if (pos == 1)
      proj_in = add(depth_prev, fd_seq[0]);
    else
      proj_in = add(fd_seq[pos - 2], fd_seq[pos - 1]);
    Tensor<T> depth_in = conv2d(proj_in, mp->input_proj);
    MgfResult<T> r = mgf(depth_in, prior, w, *mp, mode, use_similarity);
    fd_seq.push_back(r.filtered_depth);
    fp_seq.push_back(r.filtered_prior);
    switch (m) {
      case Modality::Normal:
        out.filtered_depth.normal = r.filtered_depth;
        out.filtered_prior.normal = r.filtered_prior;
        out.k_pd_normal = r.k_pd;
        out.k_dp_normal = r.k_dp;
        break;
      case Modality::Semantic:
        out.filtered_depth.semantic = r.filtered_depth;
        out.filtered_prior.semantic = r.filtered_prior;
        out.k_pd_semantic = r.k_pd;
        out.k_dp_semantic = r.k_dp;
        break;
      case Modality::Rgb:
        out.filtered_depth.rgb = r.filtered_depth;
        out.filtered_prior.rgb = r.filtered_prior;
        out.k_pd_rgb = r.k_pd;
        out.k_dp_rgb = r.k_dp;
        break;
    }
  }
  out.fused_depth = add(conv2d(concat_channels(fd_seq), params.fuse_fd), depth_prev);
  std::vector<Tensor<T>> cat = fp_seq;
  cat.push_back(out.fused_depth);
  out.depth_next = fusion_group(concat_channels(cat), depth_prev, params.fusion);
  return out;
}

// ---------------------------------------------------------------------------
// kernel-field diagnostics

struct KernelStats {
  static constexpr int kBins = 32;
  static constexpr double kRange = 4.0;  // max |dx|+|dy| for kernels in (-1,1)
  std::array<double, kBins> hist{};
  double mean = 0.0;
  double variance = 0.0;
};

// Spatial-gradient magnitudes (|forward dx| + |forward dy| per kernel entry)
// binned into a fixed histogram, plus their mean and variance.
template <typename T>
KernelStats kernel_stats(const Tensor<T>& k) {
  check(k.rank() == 4, "kernel_stats: expects 4-D (B,K^2,H,W)");
  const std::int64_t B = k.dim(0), K2 = k.dim(1), H = k.dim(2), W = k.dim(3);
  KernelStats st;
  double s1 = 0.0, s2 = 0.0;
  std::int64_t n = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < K2; ++t) {
      const T* plane = k.data() + (b * K2 + t) * H * W;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          double m = 0.0;
          if (x + 1 < W) m += std::abs(double(plane[y * W + x + 1]) - double(plane[y * W + x]));
          if (y + 1 < H) m += std::abs(double(plane[(y + 1) * W + x]) - double(plane[y * W + x]));
          int bin = int(m / KernelStats::kRange * KernelStats::kBins);
          if (bin >= KernelStats::kBins) bin = KernelStats::kBins - 1;
          if (bin < 0) bin = 0;
          st.hist[std::size_t(bin)] += 1.0;
          s1 += m;
          s2 += m * m;
          ++n;
        }
    }
  if (n > 0) {
    for (auto& h : st.hist) h /= double(n);
    st.mean = s1 / double(n);
    st.variance = s2 / double(n) - st.mean * st.mean;
  }
  return st;
}

// Mean gradient magnitude restricted to a pixel mask (1 = counted). Used to
// compare modality kernels on texture-heavy regions.
template <typename T>
double kernel_grad_mean_masked(const Tensor<T>& k, const std::vector<unsigned char>& mask) {
  const std::int64_t B = k.dim(0), K2 = k.dim(1), H = k.dim(2), W = k.dim(3);
  check(std::int64_t(mask.size()) == H * W, "kernel_grad_mean_masked: mask size mismatch");
  double s = 0.0;
  std::int64_t n = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < K2; ++t) {
      const T* plane = k.data() + (b * K2 + t) * H * W;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          if (!mask[std::size_t(y * W + x)]) continue;
          double m = 0.0;
          if (x + 1 < W) m += std::abs(double(plane[y * W + x + 1]) - double(plane[y * W + x]));
          if (y + 1 < H) m += std::abs(double(plane[(y + 1) * W + x]) - double(plane[y * W + x]));
          s += m;
          ++n;
        }
    }
  return n > 0 ? s / double(n) : 0.0;
}

}  // namespace spf
