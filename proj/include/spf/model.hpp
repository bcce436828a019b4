#pragma once

#include <functional>
#include <string>
#include <vector>

#include "spf/app.hpp"
#include "spf/nn.hpp"
#include "spf/ope.hpp"
#include "spf/tensor.hpp"

namespace spf {

enum class Variant { SPFNet, SPFNetT };

inline const char* variant_name(Variant v) { return v == Variant::SPFNet ? "spfnet" : "spfnet-t"; }

struct ModelConfig {
  Variant variant = Variant::SPFNet;
  int channels = 16;
  int stages = 3;
  int scale = 4;
  std::string order = "nsr";  // embedding order over enabled modalities
  int rg_depth = 2;           // residual blocks per group
  std::string prior_downsample = "bicubic";
  bool use_normal = true;
  bool use_semantic = true;
  bool use_app = true;
  MgfMode mgf_mode = MgfMode::P2DThenD2P;
  bool mgf_similarity = true;
  double depth_scale_cm = 500.0;  // input depth normalization

  static ModelConfig preset(Variant v) {
    ModelConfig c;
    c.variant = v;
    c.channels = v == Variant::SPFNet ? 16 : 8;
    return c;
  }

  std::vector<Modality> modality_order() const {
    std::vector<Modality> mo;
    for (char ch : order) {
      if (ch == 'n') {
        if (use_normal) mo.push_back(Modality::Normal);
      } else if (ch == 's') {
        if (use_semantic) mo.push_back(Modality::Semantic);
      } else if (ch == 'r') {
        mo.push_back(Modality::Rgb);
      } else {
        fail("ModelConfig.order: unknown modality letter '" + std::string(1, ch) + "'");
      }
    }
    return mo;
  }

  void validate() const {
    check(channels >= 4, "ModelConfig.channels: must be >= 4, got " + std::to_string(channels));
    check(stages >= 1 && stages <= 4, "ModelConfig.stages: must be in [1,4], got " + std::to_string(stages));
    check(scale == 2 || scale == 4 || scale == 8 || scale == 16,
          "ModelConfig.scale: must be 2, 4, 8 or 16, got " + std::to_string(scale));
    check(rg_depth >= 1 && rg_depth <= 4, "ModelConfig.rg_depth: must be in [1,4]");
    check(prior_downsample == "bicubic", "ModelConfig.prior_downsample: only 'bicubic' is implemented");
    check(depth_scale_cm > 0, "ModelConfig.depth_scale_cm: must be positive");
    std::string sorted = order;
    std::sort(sorted.begin(), sorted.end());
    check(sorted == "nrs", "ModelConfig.order: must be a permutation of n, s, r, got '" + order + "'");
    const auto mo = modality_order();
    bool has_rgb = false;
    for (auto m : mo) has_rgb = has_rgb || (m == Modality::Rgb);
    check(has_rgb, "ModelConfig.order: RGB guidance cannot be disabled");
  }
};

template <typename T>
struct StageParams {
  AppParams<T> app;
  OpeParams<T> ope;
  // prior-branch update: filtered prior features upsampled to HR and fused
  UpsamplerParams<T> up_normal, up_semantic, up_rgb;
  FusionGroupParams<T> fuse_normal, fuse_semantic, fuse_rgb;
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  ConvParams<T> head_conv_rgb, head_conv_normal, head_conv_semantic, head_conv_depth;
  ResidualGroupParams<T> head_rg_rgb, head_rg_normal, head_rg_semantic, head_rg_depth;
  std::vector<StageParams<T>> stages;
  UpsamplerParams<T> recon_up;
  FusionGroupParams<T> recon_fuse;
  ConvParams<T> recon_out;  // C -> 1, zero-initialized: D_r = 0 at init
};

// ---------------------------------------------------------------------------
// named parameter traversal (fixed order: optimizer state, checkpoints and
// deterministic initialization all rely on it)

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

template <typename T>
void visit_params(ConvParams<T>& c, const std::string& prefix, const ParamVisitor<T>& fn) {
  if (!c.weight.defined()) return;  // degenerate / never-built layer
  fn(prefix + ".w", c.weight);
  fn(prefix + ".b", c.bias);
}

template <typename T>
void visit_params(ResidualGroupParams<T>& rg, const std::string& prefix, const ParamVisitor<T>& fn) {
  for (std::size_t i = 0; i < rg.blocks.size(); ++i) {
    visit_params(rg.blocks[i].conv1, prefix + ".b" + std::to_string(i) + ".c1", fn);
    visit_params(rg.blocks[i].conv2, prefix + ".b" + std::to_string(i) + ".c2", fn);
  }
  visit_params(rg.tail, prefix + ".tail", fn);
}

template <typename T>
void visit_params(FusionGroupParams<T>& fg, const std::string& prefix, const ParamVisitor<T>& fn) {
  visit_params(fg.reduce, prefix + ".reduce", fn);
  for (std::size_t i = 0; i < fg.blocks.size(); ++i) {
    visit_params(fg.blocks[i].conv1, prefix + ".b" + std::to_string(i) + ".c1", fn);
    visit_params(fg.blocks[i].conv2, prefix + ".b" + std::to_string(i) + ".c2", fn);
  }
  visit_params(fg.tail, prefix + ".tail", fn);
}

template <typename T>
void visit_params(UpsamplerParams<T>& up, const std::string& prefix, const ParamVisitor<T>& fn) {
  for (std::size_t i = 0; i < up.steps.size(); ++i)
    visit_params(up.steps[i], prefix + ".up" + std::to_string(i), fn);
}

template <typename T>
void visit_params(MgfParams<T>& m, const std::string& prefix, const ParamVisitor<T>& fn) {
  visit_params(m.input_proj, prefix + ".fc", fn);
  if (m.kg_prior) visit_params(*m.kg_prior, prefix + ".kgp", fn);
  if (m.kg_depth) visit_params(*m.kg_depth, prefix + ".kgd", fn);
}

template <typename T>
void visit_params(ModelParams<T>& p, const ParamVisitor<T>& fn) {
  const auto& cfg = p.cfg;
  visit_params(p.head_conv_rgb, "head.r.conv", fn);
  visit_params(p.head_rg_rgb, "head.r.rg", fn);
  if (cfg.use_normal) {
    visit_params(p.head_conv_normal, "head.n.conv", fn);
    visit_params(p.head_rg_normal, "head.n.rg", fn);
  }
  if (cfg.use_semantic) {
    visit_params(p.head_conv_semantic, "head.s.conv", fn);
    visit_params(p.head_rg_semantic, "head.s.rg", fn);
  }
  visit_params(p.head_conv_depth, "head.d.conv", fn);
  visit_params(p.head_rg_depth, "head.d.rg", fn);
  for (std::size_t si = 0; si < p.stages.size(); ++si) {
    auto& st = p.stages[si];
    const std::string sp = "s" + std::to_string(si);
    if (cfg.use_app) {
      if (cfg.use_normal) visit_params(st.app.rg_normal, sp + ".app.n", fn);
      visit_params(st.app.rg_rgb, sp + ".app.r", fn);
      if (cfg.use_semantic) visit_params(st.app.rg_semantic, sp + ".app.s", fn);
      if (cfg.use_normal) fn(sp + ".app.g1", st.app.gamma1);
      if (cfg.use_semantic) fn(sp + ".app.g2", st.app.gamma2);
    }
    if (cfg.use_normal) visit_params(st.ope.mgf_normal, sp + ".ope.n", fn);
    if (cfg.use_semantic) visit_params(st.ope.mgf_semantic, sp + ".ope.s", fn);
    visit_params(st.ope.mgf_rgb, sp + ".ope.r", fn);
    visit_params(st.ope.fuse_fd, sp + ".ope.fd", fn);
    visit_params(st.ope.fusion, sp + ".ope.fuse", fn);
    if (cfg.use_normal) {
      visit_params(st.up_normal, sp + ".prior.n", fn);
      visit_params(st.fuse_normal, sp + ".prior.n.fuse", fn);
    }
    if (cfg.use_semantic) {
      visit_params(st.up_semantic, sp + ".prior.s", fn);
      visit_params(st.fuse_semantic, sp + ".prior.s.fuse", fn);
    }
    visit_params(st.up_rgb, sp + ".prior.r", fn);
    visit_params(st.fuse_rgb, sp + ".prior.r.fuse", fn);
  }
  visit_params(p.recon_up, "recon", fn);
  visit_params(p.recon_fuse, "recon.fuse", fn);
  visit_params(p.recon_out, "recon.out", fn);
}

template <typename T>
std::int64_t count_params(ModelParams<T>& p) {
  std::int64_t n = 0;
  visit_params<T>(p, [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

// ---------------------------------------------------------------------------

template <typename T>
MgfParams<T> make_mgf_params(const ModelConfig& cfg, Rng& rng) {
  MgfParams<T> m;
  m.input_proj = make_conv<T>(cfg.channels, cfg.channels, 1, rng);
  const bool wants_p2d = cfg.mgf_mode == MgfMode::P2D || cfg.mgf_mode == MgfMode::P2DThenD2P ||
                         cfg.mgf_mode == MgfMode::D2PThenP2D;
  const bool wants_d2p = cfg.mgf_mode == MgfMode::D2P || cfg.mgf_mode == MgfMode::P2DThenD2P ||
                         cfg.mgf_mode == MgfMode::D2PThenP2D;
  // kernel generators start at zero so the filter paths begin as identities
  if (wants_p2d) m.kg_prior = make_conv<T>(9, cfg.channels, 1, rng, /*zero_init=*/true);
  if (wants_d2p) m.kg_depth = make_conv<T>(9, cfg.channels, 1, rng, /*zero_init=*/true);
  return m;
}

template <typename T>
ModelParams<T> build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(Rng::mix(seed, 0x5046u /* "PF" */));
  const std::int64_t C = cfg.channels;
  const int d = cfg.rg_depth;
  const int n_mod = 1 + (cfg.use_normal ? 1 : 0) + (cfg.use_semantic ? 1 : 0);

  ModelParams<T> p;
  p.cfg = cfg;
  p.head_conv_rgb = make_conv<T>(C, 3, 3, rng);
  p.head_rg_rgb = make_residual_group<T>(C, d, rng);
  if (cfg.use_normal) {
    p.head_conv_normal = make_conv<T>(C, 3, 3, rng);
    p.head_rg_normal = make_residual_group<T>(C, d, rng);
  }
  if (cfg.use_semantic) {
    p.head_conv_semantic = make_conv<T>(C, 1, 3, rng);
    p.head_rg_semantic = make_residual_group<T>(C, d, rng);
  }
  p.head_conv_depth = make_conv<T>(C, 1, 3, rng);
  p.head_rg_depth = make_residual_group<T>(C, d, rng);

  for (int s = 0; s < cfg.stages; ++s) {
    StageParams<T> st;
    if (cfg.use_app) {
      if (cfg.use_normal) st.app.rg_normal = make_residual_group<T>(C, d, rng);
      st.app.rg_rgb = make_residual_group<T>(C, d, rng);
      if (cfg.use_semantic) st.app.rg_semantic = make_residual_group<T>(C, d, rng);
      st.app.gamma1 = Tensor<T>::scalar(T(0), true);
      st.app.gamma2 = Tensor<T>::scalar(T(0), true);
    }
    if (cfg.use_normal) st.ope.mgf_normal = make_mgf_params<T>(cfg, rng);
    if (cfg.use_semantic) st.ope.mgf_semantic = make_mgf_params<T>(cfg, rng);
    st.ope.mgf_rgb = make_mgf_params<T>(cfg, rng);
    st.ope.fuse_fd = make_conv<T>(C, n_mod * C, 1, rng);
    st.ope.fusion = make_fusion_group<T>((n_mod + 1) * C, C, d, rng);
    if (cfg.use_normal) {
      st.up_normal = make_upsampler<T>(C, cfg.scale, rng);
      st.fuse_normal = make_fusion_group<T>(2 * C, C, d, rng);
    }
    if (cfg.use_semantic) {
      st.up_semantic = make_upsampler<T>(C, cfg.scale, rng);
      st.fuse_semantic = make_fusion_group<T>(2 * C, C, d, rng);
    }
    st.up_rgb = make_upsampler<T>(C, cfg.scale, rng);
    st.fuse_rgb = make_fusion_group<T>(2 * C, C, d, rng);
    p.stages.push_back(std::move(st));
  }

  p.recon_up = make_upsampler<T>(C, cfg.scale, rng);
  p.recon_fuse = make_fusion_group<T>((n_mod + 1) * C, C, d, rng);
  p.recon_out = make_conv<T>(1, C, 3, rng, /*zero_init=*/true);
  return p;
}

// ---------------------------------------------------------------------------
// forward

template <typename T>
struct StageDiagnostics {
  SimilarityWeights<T> weights;
  Tensor<T> k_pd_normal, k_pd_semantic, k_pd_rgb;
  Tensor<T> k_dp_normal, k_dp_semantic, k_dp_rgb;
  PriorFeatures<T> pre_app;   // downsampled prior features entering APP
  EnhancedPriors<T> enhanced; // APP outputs
  Tensor<T> depth_feat;       // F_d^{i-1}
};

template <typename T>
struct ForwardDiagnostics {
  std::vector<StageDiagnostics<T>> stages;
};

// Full two-branch forward pass; D_lr is (1,h,w), priors are (c, s*h, s*w),
// output D_hr is (1, s*h, s*w).
template <typename T>
Tensor<T> forward(ModelParams<T>& p, const Tensor<T>& d_lr, const Tensor<T>& rgb, const Tensor<T>& normal,
                  const Tensor<T>& semantic, ForwardDiagnostics<T>* diag = nullptr) {
  const ModelConfig& cfg = p.cfg;
  const int s = cfg.scale;
  check(d_lr.rank() == 3 && d_lr.dim(0) == 1, "forward: D_lr must be (1,h,w), got " + shape_str(d_lr.shape()));
  const std::int64_t h = d_lr.dim(1), w = d_lr.dim(2);
  auto check_prior = [&](const Tensor<T>& t, std::int64_t ch, const char* name) {
    check(t.rank() == 3 && t.dim(0) == ch && t.dim(1) == s * h && t.dim(2) == s * w,
          std::string("forward: ") + name + " must be (" + std::to_string(ch) + "," + std::to_string(s * h) +
              "," + std::to_string(s * w) + "), got " + shape_str(t.shape()));
  };
  check_prior(rgb, 3, "I_r");
  if (cfg.use_normal) check_prior(normal, 3, "I_n");
  if (cfg.use_semantic) check_prior(semantic, 1, "I_s");

  Tensor<T> d4 = reshape(d_lr, {1, 1, h, w});
  Tensor<T> d_norm = scalar_mul(d4, T(1.0 / cfg.depth_scale_cm));

  // heads
  Tensor<T> f_r = residual_group(conv2d(reshape(rgb, {1, 3, s * h, s * w}), p.head_conv_rgb), p.head_rg_rgb);
  Tensor<T> f_n, f_s;
  if (cfg.use_normal)
    f_n = residual_group(conv2d(reshape(normal, {1, 3, s * h, s * w}), p.head_conv_normal), p.head_rg_normal);
  if (cfg.use_semantic)
    f_s = residual_group(conv2d(reshape(semantic, {1, 1, s * h, s * w}), p.head_conv_semantic),
                         p.head_rg_semantic);
  Tensor<T> f_d = residual_group(conv2d(d_norm, p.head_conv_depth), p.head_rg_depth);

  // stage-1 bootstrap: previous filtered features = downsampled priors
  PriorFeatures<T> prev_filtered;
  if (cfg.use_normal) prev_filtered.normal = bicubic_down(f_n, s);
  prev_filtered.rgb = bicubic_down(f_r, s);
  if (cfg.use_semantic) prev_filtered.semantic = bicubic_down(f_s, s);

  const auto order = cfg.modality_order();
  for (auto& st : p.stages) {
    PriorFeatures<T> priors{cfg.use_normal ? f_n : Tensor<T>(), f_r,
                            cfg.use_semantic ? f_s : Tensor<T>()};
    SimilarityWeights<T> weights;
    EnhancedPriors<T> enhanced;
    if (cfg.use_app) {
      auto we = app_stage(priors, f_d, prev_filtered, st.app);
      weights = we.first;
      enhanced = we.second;
    } else {
      // neutral weights: kernel generation sees the plain features
      Tensor<T> zero_w = Tensor<T>::zeros({1, 1, h, w});
      if (cfg.use_normal) weights.w_n = zero_w;
      if (cfg.use_semantic) weights.w_s = zero_w;
      weights.w_r = zero_w;
      enhanced.normal = prev_filtered.normal;
      enhanced.rgb = prev_filtered.rgb;
      enhanced.semantic = prev_filtered.semantic;
    }

    OpeOutputs<T> ope = ope_stage(f_d, enhanced, weights, st.ope, order, cfg.mgf_mode, cfg.mgf_similarity);

    if (diag) {
      StageDiagnostics<T> sd;
      sd.weights = weights;
      sd.k_pd_normal = ope.k_pd_normal;
      sd.k_pd_semantic = ope.k_pd_semantic;
      sd.k_pd_rgb = ope.k_pd_rgb;
      sd.k_dp_normal = ope.k_dp_normal;
      sd.k_dp_semantic = ope.k_dp_semantic;
      sd.k_dp_rgb = ope.k_dp_rgb;
      sd.pre_app.normal = cfg.use_normal ? bicubic_down(f_n, s) : Tensor<T>();
      sd.pre_app.rgb = bicubic_down(f_r, s);
      sd.pre_app.semantic = cfg.use_semantic ? bicubic_down(f_s, s) : Tensor<T>();
      sd.enhanced = enhanced;
      sd.depth_feat = f_d;
      diag->stages.push_back(std::move(sd));
    }

    // prior branch: fuse each HR prior feature with its upsampled filtered
    // counterpart
    if (cfg.use_normal)
      f_n = fusion_group(concat_channels<T>({f_n, upsample_features(ope.filtered_prior.normal, st.up_normal)}),
                         f_n, st.fuse_normal);
    f_r = fusion_group(concat_channels<T>({f_r, upsample_features(ope.filtered_prior.rgb, st.up_rgb)}), f_r,
                       st.fuse_rgb);
    if (cfg.use_semantic)
      f_s = fusion_group(
          concat_channels<T>({f_s, upsample_features(ope.filtered_prior.semantic, st.up_semantic)}), f_s,
          st.fuse_semantic);

    f_d = ope.depth_next;
    prev_filtered = ope.filtered_prior;
  }

  // reconstruction: upsample the final depth feature, aggregate with the
  // prior branch, and predict the residual on top of bicubic upsampling
  Tensor<T> up_d = upsample_features(f_d, p.recon_up);
  std::vector<Tensor<T>> cat{up_d};
  if (cfg.use_normal) cat.push_back(f_n);
  if (cfg.use_semantic) cat.push_back(f_s);
  cat.push_back(f_r);
  Tensor<T> fused = fusion_group(concat_channels(cat), up_d, p.recon_fuse);
  Tensor<T> d_res = scalar_mul(conv2d(fused, p.recon_out), T(cfg.depth_scale_cm));
  Tensor<T> d_hr = add(d_res, bicubic_up(d4, s));
  return reshape(d_hr, {1, s * h, s * w});
}

}  // namespace spf
