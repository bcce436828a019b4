#pragma once

#include <string>
#include <vector>

#include "spf/app.hpp"
#include "spf/gradcheck.hpp"
#include "spf/model.hpp"
#include "spf/nn.hpp"
#include "spf/ope.hpp"
#include "spf/rng.hpp"
#include "spf/synth.hpp"
#include "spf/train.hpp"

namespace spf {

struct GradCheckItem {
  std::string name;
  double max_rel_err;
};

struct GradCheckReport {
  std::vector<GradCheckItem> items;
  double worst = 0.0;
  bool pass(double tol = 1e-4) const { return worst < tol; }
};

namespace detail {

// values bounded away from relu/abs kinks
inline Tensor<double> rand_tensor(Shape shape, Rng& rng, bool rg = true) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape), rg);
  for (auto& v : t.values()) {
    const double m = 0.1 + 0.9 * rng.uniform();
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

// random fixed projection so gradient errors cannot cancel in a plain sum
inline Tensor<double> rand_proj(const Shape& shape, Rng& rng) {
  Tensor<double> t = Tensor<double>::zeros(shape, false);
  for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace detail

// Finite-difference verification of every differentiable operation plus the
// full SPFNet-T forward; 64-bit, central differences.
inline GradCheckReport run_gradcheck_suite(bool include_full_model = true, double step = 1e-5) {
  GradCheckReport rep;
  Rng rng(20240117);

  auto run = [&](const std::string& name, const std::function<Tensor<double>()>& f,
                 const std::vector<Tensor<double>>& inputs) {
    const double e = grad_check(f, inputs, step);
    rep.items.push_back({name, e});
    if (e > rep.worst) rep.worst = e;
  };

  {
    auto a = detail::rand_tensor({2, 3, 4, 5}, rng);
    auto b = detail::rand_tensor({2, 3, 4, 5}, rng);
    auto cmap = detail::rand_tensor({2, 1, 4, 5}, rng);
    auto sc = detail::rand_tensor({1}, rng);
    auto proj = detail::rand_proj({2, 3, 4, 5}, rng);
    run("add", [&] { return sum(mul(add(a, b), proj)); }, {a, b});
    run("sub", [&] { return sum(mul(sub(a, b), proj)); }, {a, b});
    run("mul", [&] { return sum(mul(mul(a, b), proj)); }, {a, b});
    run("mul_channel_map", [&] { return sum(mul(mul(a, cmap), proj)); }, {a, cmap});
    run("mul_scalar_tensor", [&] { return sum(mul(mul(a, sc), proj)); }, {a, sc});
    run("scalar_mul", [&] { return sum(mul(scalar_mul(a, 2.5), proj)); }, {a});
    run("relu", [&] { return sum(mul(relu(a), proj)); }, {a});
    run("leaky_relu", [&] { return sum(mul(leaky_relu(a, 0.1), proj)); }, {a});
    run("tanh", [&] { return sum(mul(tanh_op(a), proj)); }, {a});
    run("abs", [&] { return sum(mul(abs_op(a), proj)); }, {a});
    auto proj_flat = detail::rand_proj({2, 3, 20}, rng);
    run("reshape", [&] { return sum(mul(reshape(a, {2, 3, 20}), proj_flat)); }, {a});
    auto proj_cat = detail::rand_proj({2, 6, 4, 5}, rng);
    run("concat_channels", [&] { return sum(mul(concat_channels<double>({a, b}), proj_cat)); }, {a, b});
  }

  {
    auto x = detail::rand_tensor({2, 3, 5, 6}, rng);
    auto w = detail::rand_tensor({4, 3, 3, 3}, rng);
    auto bias = detail::rand_tensor({4}, rng);
    auto proj = detail::rand_proj({2, 4, 5, 6}, rng);
    ConvParams<double> p{w, bias, 1, 1};
    run("conv2d_3x3", [&] { return sum(mul(conv2d(x, p), proj)); }, {x, w, bias});
    auto w1 = detail::rand_tensor({2, 3, 1, 1}, rng);
    auto b1 = detail::rand_tensor({2}, rng);
    ConvParams<double> p1{w1, b1, 1, 0};
    auto proj1 = detail::rand_proj({2, 2, 5, 6}, rng);
    run("conv2d_1x1", [&] { return sum(mul(conv2d(x, p1), proj1)); }, {x, w1, b1});
    auto ws = detail::rand_tensor({2, 3, 3, 3}, rng);
    auto bs = detail::rand_tensor({2}, rng);
    ConvParams<double> ps{ws, bs, 2, 1};
    auto projs = detail::rand_proj({2, 2, 3, 3}, rng);
    run("conv2d_stride2", [&] { return sum(mul(conv2d(x, ps), projs)); }, {x, ws, bs});
  }

  {
    auto x = detail::rand_tensor({1, 2, 4, 5}, rng);
    auto proj = detail::rand_proj({1, 18, 20}, rng);
    run("unfold3x3", [&] { return sum(mul(unfold3x3(x), proj)); }, {x});
    auto pat = detail::rand_tensor({1, 18, 20}, rng);
    auto proj2 = detail::rand_proj({1, 2, 4, 5}, rng);
    run("fold3x3", [&] { return sum(mul(fold3x3(pat, {1, 2, 4, 5}, false), proj2)); }, {pat});
    run("fold3x3_norm", [&] { return sum(mul(fold3x3(pat, {1, 2, 4, 5}, true), proj2)); }, {pat});
  }

  {
    auto x = detail::rand_tensor({1, 2, 4, 4}, rng);
    auto proj_up = detail::rand_proj({1, 2, 8, 8}, rng);
    auto proj_dn = detail::rand_proj({1, 2, 2, 2}, rng);
    run("bicubic_up2", [&] { return sum(mul(bicubic_up(x, 2), proj_up)); }, {x});
    run("bicubic_down2", [&] { return sum(mul(bicubic_down(x, 2), proj_dn)); }, {x});
    auto xs = detail::rand_tensor({1, 8, 3, 3}, rng);
    auto proj_ps = detail::rand_proj({1, 2, 6, 6}, rng);
    run("pixel_shuffle", [&] { return sum(mul(pixel_shuffle(xs, 2), proj_ps)); }, {xs});
  }

  {
    Rng init(7);
    auto rg = make_residual_group<double>(4, 2, init);
    auto x = detail::rand_tensor({1, 4, 6, 6}, rng);
    auto proj = detail::rand_proj({1, 4, 6, 6}, rng);
    std::vector<Tensor<double>> inputs{x};
    visit_params<double>(rg, "rg", [&](const std::string&, Tensor<double>& t) {
      for (auto& v : t.values()) v += 0.05;  // move tails off exact zero
      inputs.push_back(t);
    });
    run("residual_group", [&] { return sum(mul(residual_group(x, rg), proj)); }, inputs);

    auto fg = make_fusion_group<double>(8, 4, 2, init);
    auto xc = detail::rand_tensor({1, 8, 6, 6}, rng);
    auto skip = detail::rand_tensor({1, 4, 6, 6}, rng);
    std::vector<Tensor<double>> finputs{xc, skip};
    visit_params<double>(fg, "fg", [&](const std::string&, Tensor<double>& t) {
      for (auto& v : t.values()) v += 0.05;
      finputs.push_back(t);
    });
    run("fusion_group", [&] { return sum(mul(fusion_group(xc, skip, fg), proj)); }, finputs);

    auto up = make_upsampler<double>(4, 2, init);
    auto proj_u = detail::rand_proj({1, 4, 12, 12}, rng);
    std::vector<Tensor<double>> uinputs{x};
    visit_params<double>(up, "up", [&](const std::string&, Tensor<double>& t) { uinputs.push_back(t); });
    run("upsample_features", [&] { return sum(mul(upsample_features(x, up), proj_u)); }, uinputs);
  }

  {
    auto a = detail::rand_tensor({1, 2, 5, 5}, rng);
    auto b = detail::rand_tensor({1, 2, 5, 5}, rng);
    auto proj = detail::rand_proj({1, 1, 5, 5}, rng);
    run("patch_similarity", [&] { return sum(mul(patch_similarity(a, b), proj)); }, {a, b});
  }

  {
    auto x = detail::rand_tensor({1, 2, 5, 5}, rng);
    auto k = detail::rand_tensor({1, 9, 5, 5}, rng);
    auto proj = detail::rand_proj({1, 2, 5, 5}, rng);
    run("svf_filter", [&] { return sum(mul(svf_filter(x, k), proj)); }, {x, k});

    Rng init(11);
    auto kg = make_conv<double>(9, 2, 1, init);
    auto w = detail::rand_tensor({1, 1, 5, 5}, rng);
    run("kernel_generate_svf",
        [&] { return sum(mul(svf_filter(x, kernel_generate(x, w, kg, true)), proj)); },
        {x, w, kg.weight, kg.bias});

    MgfParams<double> mp;
    mp.input_proj = make_conv<double>(2, 2, 1, init);
    mp.kg_prior = make_conv<double>(9, 2, 1, init);
    mp.kg_depth = make_conv<double>(9, 2, 1, init);
    auto prior = detail::rand_tensor({1, 2, 5, 5}, rng);
    std::vector<Tensor<double>> minputs{x, prior, w};
    visit_params<double>(mp, "m", [&](const std::string&, Tensor<double>& t) { minputs.push_back(t); });
    run("mgf",
        [&] {
          auto r = mgf(conv2d(x, mp.input_proj), prior, w, mp, MgfMode::P2DThenD2P, true);
          return add(sum(mul(r.filtered_depth, proj)), sum(mul(r.filtered_prior, proj)));
        },
        minputs);
  }

  {
    // one APP + OPE stage pair at 4 channels, 6x6
    Rng init(13);
    ModelConfig mc;
    mc.channels = 4;
    mc.stages = 1;
    mc.scale = 2;
    mc.validate();
    AppParams<double> app;
    app.rg_normal = make_residual_group<double>(4, 1, init);
    app.rg_rgb = make_residual_group<double>(4, 1, init);
    app.rg_semantic = make_residual_group<double>(4, 1, init);
    app.gamma1 = Tensor<double>::scalar(0.3, true);
    app.gamma2 = Tensor<double>::scalar(-0.2, true);
    OpeParams<double> ope;
    ope.mgf_normal = make_mgf_params<double>(mc, init);
    ope.mgf_semantic = make_mgf_params<double>(mc, init);
    ope.mgf_rgb = make_mgf_params<double>(mc, init);
    ope.fuse_fd = make_conv<double>(4, 12, 1, init);
    ope.fusion = make_fusion_group<double>(16, 4, 1, init);

    PriorFeatures<double> priors{detail::rand_tensor({1, 4, 12, 12}, rng),
                                 detail::rand_tensor({1, 4, 12, 12}, rng),
                                 detail::rand_tensor({1, 4, 12, 12}, rng)};
    PriorFeatures<double> prev{detail::rand_tensor({1, 4, 6, 6}, rng), detail::rand_tensor({1, 4, 6, 6}, rng),
                               detail::rand_tensor({1, 4, 6, 6}, rng)};
    auto fd = detail::rand_tensor({1, 4, 6, 6}, rng);
    auto proj = detail::rand_proj({1, 4, 6, 6}, rng);

    std::vector<Tensor<double>> inputs{priors.normal, priors.rgb, priors.semantic,
                                       prev.normal,   prev.rgb,   prev.semantic,
                                       fd,            app.gamma1, app.gamma2};
    visit_params<double>(app.rg_normal, "a", [&](const std::string&, Tensor<double>& t) {
      for (auto& v : t.values()) v += 0.03;
      inputs.push_back(t);
    });
    std::vector<Modality> order{Modality::Normal, Modality::Semantic, Modality::Rgb};
    // randomize the zero-initialized kernel generators so both paths carry
    // real gradients
    for (auto* mp : {&ope.mgf_normal, &ope.mgf_semantic, &ope.mgf_rgb}) {
      for (auto& v : mp->kg_prior->weight.values()) v = rng.uniform(-0.3, 0.3);
      for (auto& v : mp->kg_depth->weight.values()) v = rng.uniform(-0.3, 0.3);
      inputs.push_back(mp->kg_prior->weight);
      inputs.push_back(mp->kg_depth->weight);
      inputs.push_back(mp->input_proj.weight);
    }
    inputs.push_back(ope.fuse_fd.weight);
    inputs.push_back(ope.fusion.reduce.weight);
    run("app_ope_stage",
        [&] {
          auto we = app_stage(priors, fd, prev, app);
          auto oo = ope_stage(fd, we.second, we.first, ope, order, MgfMode::P2DThenD2P, true);
          return sum(mul(oo.depth_next, proj));
        },
        inputs);
  }

  {
    auto pred = detail::rand_tensor({1, 4, 4}, rng);
    auto gt = detail::rand_tensor({1, 4, 4}, rng, false);
    Tensor<double> mask = Tensor<double>::full({1, 4, 4}, 1.0);
    mask.data()[3] = 0.0;
    run("l1_loss", [&] { return l1_loss(pred, gt, mask); }, {pred});
  }

  if (include_full_model) {
    // full SPFNet-T: C=4, one stage, 8x8 LR, x2
    ModelConfig mc = ModelConfig::preset(Variant::SPFNetT);
    mc.channels = 4;
    mc.stages = 1;
    mc.scale = 2;
    auto model = build<double>(mc, 99);
    std::vector<Tensor<double>> inputs;
    visit_params<double>(model, [&](const std::string&, Tensor<double>& t) { inputs.push_back(t); });
    // perturb zero-initialized tails so no gradient path is gated off
    Rng prng(3);
    for (auto& t : inputs)
      for (auto& v : t.values())
        if (v == 0.0) v = prng.uniform(-0.05, 0.05);

    SynthConfig sc;
    sc.seed = 5;
    sc.height = 16;
    sc.width = 16;
    sc.scale = 2;
    sc.min_objects = 1;
    sc.max_objects = 2;
    // central differences around the L1 kink are meaningless, so pick the
    // first scene whose prediction keeps every pixel clear of pred == gt
    Tensor<double> d_lr, rgb, nor, sem, gt, mask;
    for (std::int64_t idx = 0;; ++idx) {
      check(idx < 32, "gradcheck: no kink-free scene found");
      Scene scene = generate_scene(sc, idx);
      d_lr = cast_to<double>(scene.depth_lr);
      rgb = cast_to<double>(scene.rgb);
      nor = cast_to<double>(scene.normal);
      sem = cast_to<double>(scene.semantic);
      gt = cast_to<double>(scene.depth_gt);
      mask = cast_to<double>(scene.valid);
      Tensor<double> pred = forward(model, d_lr, rgb, nor, sem);
      double min_gap = 1e30;
      for (std::int64_t i = 0; i < pred.numel(); ++i)
        min_gap = std::min(min_gap, std::abs(pred.data()[i] - gt.data()[i]));
      if (min_gap > 1e-2) break;
    }
    d_lr.set_requires_grad(true);
    inputs.push_back(d_lr);
    run("spfnet_t_full", [&] { return l1_loss(forward(model, d_lr, rgb, nor, sem), gt, mask); }, inputs);
  }

  return rep;
}

}  // namespace spf
