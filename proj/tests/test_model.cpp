#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include "spf/gradcheck.hpp"
#include "spf/model.hpp"
#include "spf/synth.hpp"
#include "spf/train.hpp"

using namespace spf;

namespace {

Scene tiny_scene(int hr, int s, std::uint64_t seed, std::int64_t index = 0) {
  SynthConfig sc;
  sc.seed = seed;
  sc.height = hr;
  sc.width = hr;
  sc.scale = s;
  sc.min_objects = 1;
  sc.max_objects = 3;
  return generate_scene(sc, index);
}

// independent parameter-count arithmetic from the layer shapes
std::int64_t conv_count(std::int64_t o, std::int64_t i, std::int64_t k) { return o * i * k * k + o; }
std::int64_t rg_count(std::int64_t c, int depth) {
  return depth * 2 * conv_count(c, c, 3) + conv_count(c, c, 3);
}
std::int64_t fusion_count(std::int64_t in, std::int64_t c, int depth) {
  return conv_count(c, in, 1) + depth * 2 * conv_count(c, c, 3) + conv_count(c, c, 3);
}
std::int64_t upsampler_count(std::int64_t c, int scale) {
  std::int64_t n = 0;
  for (int f = scale; f > 1; f /= 2) n += conv_count(4 * c, c, 3);
  return n;
}

std::int64_t expected_params(const ModelConfig& cfg) {
  const std::int64_t C = cfg.channels;
  const int d = cfg.rg_depth;
  const int m = 1 + (cfg.use_normal ? 1 : 0) + (cfg.use_semantic ? 1 : 0);
  std::int64_t n = 0;
  // heads: rgb (3ch), optional normal (3ch), optional semantic (1ch), depth (1ch)
  n += conv_count(C, 3, 3) + rg_count(C, d);
  if (cfg.use_normal) n += conv_count(C, 3, 3) + rg_count(C, d);
  if (cfg.use_semantic) n += conv_count(C, 1, 3) + rg_count(C, d);
  n += conv_count(C, 1, 3) + rg_count(C, d);
  const bool p2d = cfg.mgf_mode == MgfMode::P2D || cfg.mgf_mode == MgfMode::P2DThenD2P ||
                   cfg.mgf_mode == MgfMode::D2PThenP2D;
  const bool d2p = cfg.mgf_mode == MgfMode::D2P || cfg.mgf_mode == MgfMode::P2DThenD2P ||
                   cfg.mgf_mode == MgfMode::D2PThenP2D;
  for (int s = 0; s < cfg.stages; ++s) {
    // per-modality groups plus one gamma per auxiliary modality in use
    if (cfg.use_app) n += m * rg_count(C, d) + (cfg.use_normal ? 1 : 0) + (cfg.use_semantic ? 1 : 0);
    std::int64_t mgf = conv_count(C, C, 1);        // f_c
    if (p2d) mgf += conv_count(9, C, 1);
    if (d2p) mgf += conv_count(9, C, 1);
    n += m * mgf;
    n += conv_count(C, m * C, 1);            // F_fd fusion conv
    n += fusion_count((m + 1) * C, C, d);    // depth fusion group
    n += m * (upsampler_count(C, cfg.scale) + fusion_count(2 * C, C, d));  // prior branch
  }
  n += upsampler_count(C, cfg.scale) + fusion_count((m + 1) * C, C, d) + conv_count(1, C, 3);
  return n;
}

}  // namespace

TEST_CASE("build") {
  SUBCASE("bitwise-deterministic initialization") {
    ModelConfig cfg = ModelConfig::preset(Variant::SPFNetT);
    cfg.stages = 2;
    auto a = build<float>(cfg, 42);
    auto b = build<float>(cfg, 42);
    auto na = collect_params(a);
    auto nb = collect_params(b);
    REQUIRE(na.size() == nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) {
      CHECK(na[i].first == nb[i].first);
      CHECK(std::memcmp(na[i].second.data(), nb[i].second.data(),
                        std::size_t(na[i].second.numel()) * 4) == 0);
    }
    auto c = build<float>(cfg, 43);
    auto nc = collect_params(c);
    bool any_diff = false;
    for (std::size_t i = 0; i < na.size() && !any_diff; ++i)
      any_diff = std::memcmp(na[i].second.data(), nc[i].second.data(),
                             std::size_t(na[i].second.numel()) * 4) != 0;
    CHECK(any_diff);
  }

  SUBCASE("SPFNet-T has strictly fewer parameters than SPFNet") {
    auto t = build<float>(ModelConfig::preset(Variant::SPFNetT), 1);
    auto f = build<float>(ModelConfig::preset(Variant::SPFNet), 1);
    CHECK(count_params(t) < count_params(f));
  }

  SUBCASE("parameter count matches the hand formula for C=8, i=3") {
    ModelConfig cfg;
    cfg.variant = Variant::SPFNetT;
    cfg.channels = 8;
    cfg.stages = 3;
    cfg.scale = 4;
    auto m = build<float>(cfg, 7);
    CHECK(count_params(m) == expected_params(cfg));
  }

  SUBCASE("doubling channels scales conv parameters as expected, per layer") {
    ModelConfig a;
    a.channels = 8;
    a.stages = 1;
    ModelConfig b = a;
    b.channels = 16;
    CHECK(count_params(*std::make_unique<ModelParams<float>>(build<float>(a, 1))) == expected_params(a));
    CHECK(count_params(*std::make_unique<ModelParams<float>>(build<float>(b, 1))) == expected_params(b));
  }

  SUBCASE("ablated modalities and mgf modes drop their parameters") {
    ModelConfig cfg;
    cfg.channels = 8;
    cfg.stages = 2;
    for (bool un : {true, false})
      for (bool us : {true, false})
        for (MgfMode mode : {MgfMode::None, MgfMode::D2P, MgfMode::P2D, MgfMode::P2DThenD2P}) {
          cfg.use_normal = un;
          cfg.use_semantic = us;
          cfg.mgf_mode = mode;
          auto m = build<float>(cfg, 3);
          CHECK(count_params(m) == expected_params(cfg));
        }
  }

  SUBCASE("invalid configs are rejected with the field name") {
    ModelConfig cfg;
    cfg.channels = 2;
    CHECK_THROWS_WITH_AS(build<float>(cfg, 1), doctest::Contains("channels"), std::invalid_argument);
    cfg = ModelConfig();
    cfg.stages = 7;
    CHECK_THROWS_WITH_AS(build<float>(cfg, 1), doctest::Contains("stages"), std::invalid_argument);
    cfg = ModelConfig();
    cfg.scale = 3;
    CHECK_THROWS_WITH_AS(build<float>(cfg, 1), doctest::Contains("scale"), std::invalid_argument);
    cfg = ModelConfig();
    cfg.order = "nn";
    CHECK_THROWS_WITH_AS(build<float>(cfg, 1), doctest::Contains("order"), std::invalid_argument);
  }

  SUBCASE("a degenerate config with no layers counts zero parameters") {
    ModelParams<float> p;  // nothing built: every layer undefined
    p.cfg = ModelConfig();
    CHECK(count_params(p) == 0);
  }
}

TEST_CASE("forward") {
  ModelConfig cfg = ModelConfig::preset(Variant::SPFNetT);
  cfg.stages = 2;
  cfg.scale = 2;

  SUBCASE("identity at init: D_hr equals bicubic upsampling exactly") {
    auto m = build<float>(cfg, 11);
    for (int idx = 0; idx < 3; ++idx) {
      Scene sc = tiny_scene(32, 2, 5, idx);
      auto d_hr = forward(m, sc.depth_lr, sc.rgb, sc.normal, sc.semantic);
      auto bic = reshape(bicubic_up(reshape(sc.depth_lr, {1, 1, 16, 16}), 2), {1, 32, 32});
      CHECK(d_hr.shape() == bic.shape());
      CHECK(std::memcmp(d_hr.data(), bic.data(), std::size_t(bic.numel()) * 4) == 0);
    }
  }

  SUBCASE("output shape contract") {
    auto m = build<float>(cfg, 11);
    Scene sc = tiny_scene(24, 2, 6);
    auto d_hr = forward(m, sc.depth_lr, sc.rgb, sc.normal, sc.semantic);
    CHECK(d_hr.shape() == Shape{1, 24, 24});
  }

  SUBCASE("resolution inconsistencies rejected") {
    auto m = build<float>(cfg, 11);
    Scene sc = tiny_scene(32, 2, 6);
    Scene other = tiny_scene(24, 2, 6);
    CHECK_THROWS_WITH_AS(forward(m, sc.depth_lr, other.rgb, sc.normal, sc.semantic),
                         doctest::Contains("I_r"), std::invalid_argument);
  }

  SUBCASE("deterministic and thread-count independent") {
    auto m = build<float>(cfg, 12);
    // move the zero tails so the whole network computes
    Rng rng(1);
    visit_params<float>(m, [&](const std::string&, Tensor<float>& t) {
      for (auto& v : t.values())
        if (v == 0.0f) v = float(rng.uniform(-0.05, 0.05));
    });
    Scene sc = tiny_scene(32, 2, 7);
    set_max_threads(1);
    auto a = forward(m, sc.depth_lr, sc.rgb, sc.normal, sc.semantic);
    set_max_threads(4);
    auto b = forward(m, sc.depth_lr, sc.rgb, sc.normal, sc.semantic);
    set_max_threads(1);
    auto c = forward(m, sc.depth_lr, sc.rgb, sc.normal, sc.semantic);
    CHECK(std::memcmp(a.data(), b.data(), std::size_t(a.numel()) * 4) == 0);
    CHECK(std::memcmp(a.data(), c.data(), std::size_t(a.numel()) * 4) == 0);
  }

  SUBCASE("filter order rewires the network") {
    ModelConfig c1 = cfg, c2 = cfg;
    c2.order = "srn";
    auto m1 = build<float>(c1, 13);
    auto m2 = build<float>(c2, 13);
    Rng rng(2);
    // identical non-zero perturbation of both parameter sets
    auto perturb = [&rng](ModelParams<float>& m) {
      Rng local(99);
      visit_params<float>(m, [&](const std::string&, Tensor<float>& t) {
        for (auto& v : t.values()) v += float(local.uniform(-0.05, 0.05));
      });
    };
    perturb(m1);
    perturb(m2);
    Scene sc = tiny_scene(32, 2, 8);
    auto a = forward(m1, sc.depth_lr, sc.rgb, sc.normal, sc.semantic);
    auto b = forward(m2, sc.depth_lr, sc.rgb, sc.normal, sc.semantic);
    CHECK(std::memcmp(a.data(), b.data(), std::size_t(a.numel()) * 4) != 0);
  }

  SUBCASE("diagnostics carry per-stage weights and kernel fields") {
    auto m = build<float>(cfg, 14);
    Scene sc = tiny_scene(32, 2, 9);
    ForwardDiagnostics<float> diag;
    forward(m, sc.depth_lr, sc.rgb, sc.normal, sc.semantic, &diag);
    REQUIRE(diag.stages.size() == 2);
    CHECK(diag.stages[0].weights.w_r.shape() == Shape{1, 1, 16, 16});
    CHECK(diag.stages[0].k_pd_rgb.shape() == Shape{1, 9, 16, 16});
    CHECK(diag.stages[0].k_dp_normal.defined());
    CHECK(diag.stages[0].enhanced.rgb.defined());
  }
}

TEST_CASE("every parameter earns a gradient after a short warm-up") {
  TrainConfig tc;
  tc.scale = 2;
  tc.scene_size = 32;
  tc.crop = 24;
  tc.n_train = 8;
  tc.n_val = 2;
  tc.batch = 4;
  tc.epochs = 1;
  tc.stages = 2;
  tc.seed = 3;
  tc.lr = 1e-3;  // enough to open the zero-initialized gates quickly

  const ModelConfig mc = tc.model_config();
  const SynthConfig sc = tc.synth_config();
  auto model = build<float>(mc, tc.seed);
  auto named = collect_params(model);
  AdamState<float> adam;
  std::map<std::string, bool> saw_grad;
  for (auto& [n, t] : named) saw_grad[n] = false;

  Rng crop_rng(1);
  auto scenes = generate_scenes(sc, make_split(sc, tc.n_train, 0).train);
  for (int step = 0; step < 10; ++step) {
    Tape<float> tape;
    Tensor<float> loss;
    {
      Tape<float>::Scope scope(tape);
      Tensor<float> acc;
      for (int bi = 0; bi < tc.batch; ++bi) {
        const Scene& s = scenes[std::size_t((step * tc.batch + bi) % scenes.size())];
        auto pred = forward(model, s.depth_lr, s.rgb, s.normal, s.semantic);
        auto li = l1_loss(pred, s.depth_gt, s.valid);
        acc = acc.defined() ? add(acc, li) : li;
      }
      loss = scalar_mul(acc, 0.25f);
    }
    tape.backward(loss);
    for (auto& [n, t] : named)
      if (t.has_grad())
        for (auto g : t.grad())
          if (g != 0.0f) {
            saw_grad[n] = true;
            break;
          }
    adam_step(named, adam, tc.lr);
    zero_grads(named);
  }
  std::set<std::string> dead;
  for (auto& [n, ok] : saw_grad)
    if (!ok) dead.insert(n);
  if (!dead.empty()) {
    for (const auto& n : dead) MESSAGE("dead parameter: ", n);
  }
  CHECK(dead.empty());
}

TEST_CASE("full-model gradient check, C=4, one stage, x2") {
  // the L1 kink invalidates central differences whenever a pixel sits at
  // pred == gt; scan seeds until the draw keeps every pixel clear of it
  for (std::uint64_t seed = 21;; ++seed) {
    REQUIRE(seed < 60);
    ModelConfig mc = ModelConfig::preset(Variant::SPFNetT);
    mc.channels = 4;
    mc.stages = 1;
    mc.scale = 2;
    auto model = build<double>(mc, seed);
    std::vector<Tensor<double>> inputs;
    visit_params<double>(model, [&](const std::string&, Tensor<double>& t) { inputs.push_back(t); });
    Rng prng(seed + 100);
    for (auto& t : inputs)
      for (auto& v : t.values())
        if (v == 0.0) v = prng.uniform(-0.05, 0.05);
    Scene sc = tiny_scene(12, 2, 31, std::int64_t(seed));
    Tensor<double> d_lr = cast_to<double>(sc.depth_lr);
    d_lr.set_requires_grad(true);
    inputs.push_back(d_lr);
    Tensor<double> rgb = cast_to<double>(sc.rgb), nor = cast_to<double>(sc.normal),
                   sem = cast_to<double>(sc.semantic), gt = cast_to<double>(sc.depth_gt),
                   mask = cast_to<double>(sc.valid);
    auto pred = forward(model, d_lr, rgb, nor, sem);
    double min_gap = 1e30;
    for (std::int64_t i = 0; i < pred.numel(); ++i)
      min_gap = std::min(min_gap, std::abs(pred.data()[i] - gt.data()[i]));
    if (min_gap < 1e-2) continue;
    const double err =
        grad_check([&] { return l1_loss(forward(model, d_lr, rgb, nor, sem), gt, mask); }, inputs, 1e-5);
    CHECK(err < 1e-4);
    break;
  }
}
