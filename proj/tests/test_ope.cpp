#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "spf/gradcheck.hpp"
#include "spf/model.hpp"
#include "spf/ope.hpp"
#include "spf/rng.hpp"

using namespace spf;

namespace {

template <typename T>
Tensor<T> rand_t(Shape s, Rng& rng, bool rg = false) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s), rg);
  for (auto& v : t.values()) v = T(rng.uniform(-1, 1));
  return t;
}

MgfParams<float> fresh_mgf(int ch, Rng& rng) {
  ModelConfig mc;
  mc.channels = ch;
  return make_mgf_params<float>(mc, rng);
}

}  // namespace

TEST_CASE("svf_filter") {
  Rng rng(2);

  SUBCASE("zero kernels give zero output") {
    auto x = rand_t<float>({1, 2, 4, 4}, rng);
    auto k = Tensor<float>::zeros({1, 9, 4, 4});
    auto y = svf_filter(x, k);
    for (auto v : y.values()) CHECK(v == 0.0f);
  }

  SUBCASE("center-delta kernels reproduce the input") {
    auto x = rand_t<float>({1, 3, 5, 5}, rng);
    auto k = Tensor<float>::zeros({1, 9, 5, 5});
    for (std::int64_t i = 0; i < 25; ++i) k.data()[4 * 25 + i] = 1.0f;  // tap (0,0)
    auto y = svf_filter(x, k);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  }

  SUBCASE("matches a per-pixel weighted-sum oracle") {
    auto x = rand_t<float>({1, 1, 3, 3}, rng);
    auto k = rand_t<float>({1, 9, 3, 3}, rng);
    auto y = svf_filter(x, k);
    for (std::int64_t yy = 0; yy < 3; ++yy)
      for (std::int64_t xx = 0; xx < 3; ++xx) {
        double want = 0;
        for (std::int64_t dy = -1; dy <= 1; ++dy)
          for (std::int64_t dx = -1; dx <= 1; ++dx) {
            const std::int64_t sy = yy + dy, sx = xx + dx;
            if (sy < 0 || sy >= 3 || sx < 0 || sx >= 3) continue;
            const std::int64_t t = (dy + 1) * 3 + (dx + 1);
            want += double(k.data()[t * 9 + yy * 3 + xx]) * double(x.data()[sy * 3 + sx]);
          }
        CHECK(y.data()[yy * 3 + xx] == doctest::Approx(want).epsilon(1e-6));
      }
  }

  SUBCASE("linear in the filtered tensor") {
    auto x = rand_t<float>({1, 2, 5, 5}, rng);
    auto y = rand_t<float>({1, 2, 5, 5}, rng);
    auto k = rand_t<float>({1, 9, 5, 5}, rng);
    const float a = 1.7f, b = -0.4f;
    auto lhs = svf_filter(add(scalar_mul(x, a), scalar_mul(y, b)), k);
    auto rhs = add(scalar_mul(svf_filter(x, k), a), scalar_mul(svf_filter(y, k), b));
    for (std::int64_t i = 0; i < lhs.numel(); ++i)
      CHECK(lhs.data()[i] == doctest::Approx(rhs.data()[i]).epsilon(1e-5));
  }

  SUBCASE("uniform kernel field equals conv2d with that kernel") {
    auto x = rand_t<float>({1, 1, 6, 6}, rng);
    std::vector<float> kv(9);
    for (auto& v : kv) v = float(rng.uniform(-1, 1));
    auto k = Tensor<float>::zeros({1, 9, 6, 6});
    for (int t = 0; t < 9; ++t)
      for (int i = 0; i < 36; ++i) k.data()[t * 36 + i] = kv[std::size_t(t)];
    auto got = svf_filter(x, k);
    ConvParams<float> p{Tensor<float>::from({1, 1, 3, 3}, kv), Tensor<float>::zeros({1}), 1, 1};
    auto want = conv2d(x, p);
    for (std::int64_t i = 0; i < got.numel(); ++i)
      CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-6));
  }

  SUBCASE("extent mismatch rejected") {
    auto x = Tensor<float>::zeros({1, 1, 4, 4});
    CHECK_THROWS_AS(svf_filter(x, Tensor<float>::zeros({1, 9, 5, 5})), std::invalid_argument);
    CHECK_THROWS_AS(svf_filter(x, Tensor<float>::zeros({1, 8, 4, 4})), std::invalid_argument);
  }

  SUBCASE("gradients match finite differences") {
    auto x = rand_t<double>({1, 2, 5, 5}, rng, true);
    auto k = rand_t<double>({1, 9, 5, 5}, rng, true);
    auto proj = rand_t<double>({1, 2, 5, 5}, rng);
    const double err = grad_check([&] { return sum(mul(svf_filter(x, k), proj)); }, {x, k}, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("kernel_generate") {
  Rng rng(3);

  SUBCASE("zero-initialized generator emits all-zero kernels") {
    auto p = fresh_mgf(4, rng);
    auto feat = rand_t<float>({1, 4, 5, 5}, rng);
    auto w = rand_t<float>({1, 1, 5, 5}, rng);
    auto k = kernel_generate(feat, w, *p.kg_prior, true);
    CHECK(k.shape() == Shape{1, 9, 5, 5});
    for (auto v : k.values()) CHECK(v == 0.0f);
  }

  SUBCASE("zero weight map reduces the generator to the plain features") {
    auto kg = make_conv<float>(9, 4, 1, rng);  // non-zero for this test
    auto feat = rand_t<float>({1, 4, 5, 5}, rng);
    auto w0 = Tensor<float>::zeros({1, 1, 5, 5});
    auto got = kernel_generate(feat, w0, kg, true);
    auto want = tanh_op(conv2d(feat, kg));
    for (std::int64_t i = 0; i < got.numel(); ++i) CHECK(got.data()[i] == want.data()[i]);
  }

  SUBCASE("kernel entries are tanh-bounded") {
    auto kg = make_conv<float>(9, 4, 1, rng);
    for (auto& v : kg.weight.values()) v *= 2.0f;
    auto feat = rand_t<float>({1, 4, 6, 6}, rng);
    auto w = rand_t<float>({1, 1, 6, 6}, rng);
    auto k = kernel_generate(feat, w, kg, true);
    for (auto v : k.values()) {
      // strict in exact arithmetic; float rounds to +/-1 only at saturation
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
  }

  SUBCASE("gradients through generate + filter") {
    Rng drng(4);
    auto kg = make_conv<double>(9, 2, 1, drng);
    auto feat = rand_t<double>({1, 2, 6, 6}, drng, true);
    auto w = rand_t<double>({1, 1, 6, 6}, drng, true);
    auto x = rand_t<double>({1, 2, 6, 6}, drng, true);
    auto proj = rand_t<double>({1, 2, 6, 6}, drng);
    const double err = grad_check(
        [&] { return sum(mul(svf_filter(x, kernel_generate(feat, w, kg, true)), proj)); },
        {feat, w, x, kg.weight, kg.bias}, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("mgf") {
  Rng rng(5);

  SUBCASE("zero-initialized generators are a residual identity pair") {
    auto p = fresh_mgf(4, rng);
    auto fid = rand_t<float>({1, 4, 5, 5}, rng);
    auto fsp = rand_t<float>({1, 4, 5, 5}, rng);
    auto w = rand_t<float>({1, 1, 5, 5}, rng);
    auto r = mgf(fid, fsp, w, p, MgfMode::P2DThenD2P, true);
    CHECK(std::memcmp(r.filtered_depth.data(), fid.data(), std::size_t(fid.numel()) * 4) == 0);
    CHECK(std::memcmp(r.filtered_prior.data(), fsp.data(), std::size_t(fsp.numel()) * 4) == 0);
  }

  SUBCASE("zero depth input stays zero under zero-init generators") {
    auto p = fresh_mgf(4, rng);
    auto fid = Tensor<float>::zeros({1, 4, 5, 5});
    auto fsp = rand_t<float>({1, 4, 5, 5}, rng);
    auto w = rand_t<float>({1, 1, 5, 5}, rng);
    auto r = mgf(fid, fsp, w, p, MgfMode::P2DThenD2P, true);
    for (auto v : r.filtered_depth.values()) CHECK(v == 0.0f);
  }

  SUBCASE("composition matches the two filtering steps applied by hand") {
    auto p = fresh_mgf(2, rng);
    for (auto& v : p.kg_prior->weight.values()) v = float(rng.uniform(-0.5, 0.5));
    for (auto& v : p.kg_depth->weight.values()) v = float(rng.uniform(-0.5, 0.5));
    auto fid = rand_t<float>({1, 2, 5, 5}, rng);
    auto fsp = rand_t<float>({1, 2, 5, 5}, rng);
    auto w = rand_t<float>({1, 1, 5, 5}, rng);
    auto r = mgf(fid, fsp, w, p, MgfMode::P2DThenD2P, true);

    auto k_pd = kernel_generate(fsp, w, *p.kg_prior, true);
    auto f_pd = add(svf_filter(fid, k_pd), fid);
    auto k_dp = kernel_generate(f_pd, w, *p.kg_depth, true);
    auto f_dp = add(svf_filter(fsp, k_dp), fsp);
    for (std::int64_t i = 0; i < f_pd.numel(); ++i) {
      CHECK(r.filtered_depth.data()[i] == doctest::Approx(f_pd.data()[i]).epsilon(1e-6));
      CHECK(r.filtered_prior.data()[i] == doctest::Approx(f_dp.data()[i]).epsilon(1e-6));
    }
  }

  SUBCASE("single-direction modes leave the other side untouched") {
    auto p = fresh_mgf(2, rng);
    for (auto& v : p.kg_prior->weight.values()) v = 0.3f;
    for (auto& v : p.kg_depth->weight.values()) v = 0.3f;
    auto fid = rand_t<float>({1, 2, 4, 4}, rng);
    auto fsp = rand_t<float>({1, 2, 4, 4}, rng);
    auto w = rand_t<float>({1, 1, 4, 4}, rng);
    auto rp = mgf(fid, fsp, w, p, MgfMode::P2D, true);
    CHECK(std::memcmp(rp.filtered_prior.data(), fsp.data(), std::size_t(fsp.numel()) * 4) == 0);
    CHECK(std::memcmp(rp.filtered_depth.data(), fid.data(), std::size_t(fid.numel()) * 4) != 0);
    auto rd = mgf(fid, fsp, w, p, MgfMode::D2P, true);
    CHECK(std::memcmp(rd.filtered_depth.data(), fid.data(), std::size_t(fid.numel()) * 4) == 0);
    CHECK(std::memcmp(rd.filtered_prior.data(), fsp.data(), std::size_t(fsp.numel()) * 4) != 0);
    auto rn = mgf(fid, fsp, w, p, MgfMode::None, true);
    CHECK(std::memcmp(rn.filtered_depth.data(), fid.data(), std::size_t(fid.numel()) * 4) == 0);
    CHECK(std::memcmp(rn.filtered_prior.data(), fsp.data(), std::size_t(fsp.numel()) * 4) == 0);
  }
}

TEST_CASE("ope_stage") {
  Rng rng(6);
  const std::vector<Modality> order{Modality::Normal, Modality::Semantic, Modality::Rgb};

  auto fresh_ope = [&](int ch, Rng& r) {
    ModelConfig mc;
    mc.channels = ch;
    OpeParams<float> p;
    p.mgf_normal = make_mgf_params<float>(mc, r);
    p.mgf_semantic = make_mgf_params<float>(mc, r);
    p.mgf_rgb = make_mgf_params<float>(mc, r);
    p.fuse_fd = make_conv<float>(ch, 3 * ch, 1, r);
    p.fusion = make_fusion_group<float>(4 * ch, ch, 1, r);
    return p;
  };

  SUBCASE("a freshly initialized stage is the identity on the depth feature") {
    auto p = fresh_ope(4, rng);
    auto fd = rand_t<float>({1, 4, 6, 6}, rng);
    EnhancedPriors<float> e{rand_t<float>({1, 4, 6, 6}, rng), rand_t<float>({1, 4, 6, 6}, rng),
                            rand_t<float>({1, 4, 6, 6}, rng)};
    SimilarityWeights<float> w{rand_t<float>({1, 1, 6, 6}, rng), rand_t<float>({1, 1, 6, 6}, rng),
                               rand_t<float>({1, 1, 6, 6}, rng)};
    auto out = ope_stage(fd, e, w, p, order, MgfMode::P2DThenD2P, true);
    CHECK(std::memcmp(out.depth_next.data(), fd.data(), std::size_t(fd.numel()) * 4) == 0);
  }

  SUBCASE("with everything zeroed the stage is exactly the identity") {
    auto p = fresh_ope(4, rng);
    visit_params<float>(p.fusion, "f", [](const std::string&, Tensor<float>& t) {
      std::fill(t.values().begin(), t.values().end(), 0.0f);
    });
    visit_params<float>(p.fuse_fd, "c", [](const std::string&, Tensor<float>& t) {
      std::fill(t.values().begin(), t.values().end(), 0.0f);
    });
    auto fd = rand_t<float>({1, 4, 5, 5}, rng);
    EnhancedPriors<float> e{rand_t<float>({1, 4, 5, 5}, rng), rand_t<float>({1, 4, 5, 5}, rng),
                            rand_t<float>({1, 4, 5, 5}, rng)};
    SimilarityWeights<float> w{rand_t<float>({1, 1, 5, 5}, rng), rand_t<float>({1, 1, 5, 5}, rng),
                               rand_t<float>({1, 1, 5, 5}, rng)};
    auto out = ope_stage(fd, e, w, p, order, MgfMode::P2DThenD2P, true);
    CHECK(std::memcmp(out.depth_next.data(), fd.data(), std::size_t(fd.numel()) * 4) == 0);
  }

  SUBCASE("filter order changes the outputs once generators are non-zero") {
    auto p = fresh_ope(4, rng);
    Rng wr(7);
    for (auto* mp : {&p.mgf_normal, &p.mgf_semantic, &p.mgf_rgb}) {
      for (auto& v : mp->kg_prior->weight.values()) v = float(wr.uniform(-0.5, 0.5));
      for (auto& v : mp->kg_depth->weight.values()) v = float(wr.uniform(-0.5, 0.5));
    }
    for (auto& v : p.fusion.tail.weight.values()) v = float(wr.uniform(-0.3, 0.3));
    auto fd = rand_t<float>({1, 4, 6, 6}, rng);
    EnhancedPriors<float> e{rand_t<float>({1, 4, 6, 6}, rng), rand_t<float>({1, 4, 6, 6}, rng),
                            rand_t<float>({1, 4, 6, 6}, rng)};
    SimilarityWeights<float> w{rand_t<float>({1, 1, 6, 6}, rng), rand_t<float>({1, 1, 6, 6}, rng),
                               rand_t<float>({1, 1, 6, 6}, rng)};
    auto a = ope_stage(fd, e, w, p, order, MgfMode::P2DThenD2P, true);
    const std::vector<Modality> srn{Modality::Semantic, Modality::Rgb, Modality::Normal};
    auto b = ope_stage(fd, e, w, p, srn, MgfMode::P2DThenD2P, true);
    CHECK(std::memcmp(a.depth_next.data(), b.depth_next.data(), std::size_t(fd.numel()) * 4) != 0);
  }

  SUBCASE("gradient check at 4 channels, 6x6") {
    Rng drng(8);
    ModelConfig mc;
    mc.channels = 4;
    OpeParams<double> p;
    p.mgf_normal = make_mgf_params<double>(mc, drng);
    p.mgf_semantic = make_mgf_params<double>(mc, drng);
    p.mgf_rgb = make_mgf_params<double>(mc, drng);
    p.fuse_fd = make_conv<double>(4, 12, 1, drng);
    p.fusion = make_fusion_group<double>(16, 4, 1, drng);
    for (auto* mp : {&p.mgf_normal, &p.mgf_semantic, &p.mgf_rgb}) {
      for (auto& v : mp->kg_prior->weight.values()) v = drng.uniform(-0.4, 0.4);
      for (auto& v : mp->kg_depth->weight.values()) v = drng.uniform(-0.4, 0.4);
    }
    for (auto& v : p.fusion.tail.weight.values()) v = drng.uniform(-0.2, 0.2);
    auto fd = rand_t<double>({1, 4, 6, 6}, drng, true);
    EnhancedPriors<double> e{rand_t<double>({1, 4, 6, 6}, drng, true), rand_t<double>({1, 4, 6, 6}, drng, true),
                             rand_t<double>({1, 4, 6, 6}, drng, true)};
    SimilarityWeights<double> w{rand_t<double>({1, 1, 6, 6}, drng, true), rand_t<double>({1, 1, 6, 6}, drng, true),
                                rand_t<double>({1, 1, 6, 6}, drng, true)};
    auto proj = rand_t<double>({1, 4, 6, 6}, drng);
    const std::vector<Modality> ord{Modality::Normal, Modality::Semantic, Modality::Rgb};
    const double err = grad_check(
        [&] {
          auto out = ope_stage(fd, e, w, p, ord, MgfMode::P2DThenD2P, true);
          return sum(mul(out.depth_next, proj));
        },
        {fd, e.normal, e.semantic, e.rgb, w.w_n, w.w_s, w.w_r, p.fuse_fd.weight, p.fusion.reduce.weight}, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("kernel_stats") {
  SUBCASE("constant field puts all mass in bin 0") {
    auto k = Tensor<float>::full({1, 9, 6, 6}, 0.37f);
    auto st = kernel_stats(k);
    CHECK(st.hist[0] == doctest::Approx(1.0));
    CHECK(st.mean == doctest::Approx(0.0));
    CHECK(st.variance == doctest::Approx(0.0));
  }

  SUBCASE("checkerboard +/-1 concentrates mass in the top bin") {
    auto k = Tensor<float>::zeros({1, 9, 8, 8});
    for (std::int64_t t = 0; t < 9; ++t)
      for (std::int64_t y = 0; y < 8; ++y)
        for (std::int64_t x = 0; x < 8; ++x)
          k.data()[t * 64 + y * 8 + x] = ((y + x) % 2 == 0) ? 1.0f : -1.0f;
    auto st = kernel_stats(k);
    // interior gradient magnitude |dx|+|dy| = 4 => last bin
    CHECK(st.hist[KernelStats::kBins - 1] > 0.7);
  }

  SUBCASE("histogram is normalized") {
    Rng rng(5);
    auto k = rand_t<float>({1, 9, 7, 7}, rng);
    auto st = kernel_stats(k);
    double s = 0;
    for (auto h : st.hist) s += h;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
}
