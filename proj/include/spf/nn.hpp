#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <optional>
#include <vector>

#include "spf/parallel.hpp"
#include "spf/rng.hpp"
#include "spf/tensor.hpp"

namespace spf {

namespace detail {

// C[m,n] += A[m,k] * B[k,n], all row-major. Register-blocked over rows and
// column tiles: each B tile is streamed once per row block instead of once
// per row. The k loop stays sequential per output element, so accumulation
// order is fixed and results are bitwise stable for any thread count.
template <typename T>
void gemm_acc(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C) {
  constexpr std::int64_t JB = 64, IB = 8;
  const std::int64_t jblocks = (N + JB - 1) / JB;
  parallel_for_work(jblocks, M * N * K, [&](std::int64_t jb) {
    const std::int64_t j0 = jb * JB;
    const std::int64_t jn = std::min(JB, N - j0);
    T acc[IB][JB];
    for (std::int64_t i0 = 0; i0 < M; i0 += IB) {
      const std::int64_t in = std::min(IB, M - i0);
      for (std::int64_t ii = 0; ii < in; ++ii)
        for (std::int64_t j = 0; j < jn; ++j) acc[ii][j] = T(0);
      for (std::int64_t k = 0; k < K; ++k) {
        const T* b_row = B + k * N + j0;
        for (std::int64_t ii = 0; ii < in; ++ii) {
          const T a = A[(i0 + ii) * K + k];
          if (a == T(0)) continue;
          T* arow = acc[ii];
          for (std::int64_t j = 0; j < jn; ++j) arow[j] += a * b_row[j];
        }
      }
      for (std::int64_t ii = 0; ii < in; ++ii) {
        T* c_row = C + (i0 + ii) * N + j0;
        const T* arow = acc[ii];
        for (std::int64_t j = 0; j < jn; ++j) c_row[j] += arow[j];
      }
    }
  });
}

// C[m,k] += A[m,n] * B[k,n]  (B transposed). Lane-wise partial sums keep the
// reduction vectorizable with a fixed summation order.
template <typename T>
void gemm_nt_acc(std::int64_t M, std::int64_t K, std::int64_t N, const T* A, const T* B, T* C) {
  constexpr std::int64_t L = 16;
  parallel_for_work(M, M * N * K, [&](std::int64_t i) {
    const T* a_row = A + i * N;
    for (std::int64_t k = 0; k < K; ++k) {
      const T* b_row = B + k * N;
      T part[L] = {};
      std::int64_t j = 0;
      for (; j + L <= N; j += L)
        for (std::int64_t l = 0; l < L; ++l) part[l] += a_row[j + l] * b_row[j + l];
      T s = 0;
      for (std::int64_t l = 0; l < L; ++l) s += part[l];
      for (; j < N; ++j) s += a_row[j] * b_row[j];
      C[i * K + k] += s;
    }
  });
}

// C[k,n] += A[m,k]^T * B[m,n], same tiling as gemm_acc
template <typename T>
void gemm_tn_acc(std::int64_t K, std::int64_t N, std::int64_t M, const T* A, const T* B, T* C) {
  constexpr std::int64_t JB = 64, IB = 8;
  const std::int64_t jblocks = (N + JB - 1) / JB;
  parallel_for_work(jblocks, M * N * K, [&](std::int64_t jb) {
    const std::int64_t j0 = jb * JB;
    const std::int64_t jn = std::min(JB, N - j0);
    T acc[IB][JB];
    for (std::int64_t k0 = 0; k0 < K; k0 += IB) {
      const std::int64_t kn = std::min(IB, K - k0);
      for (std::int64_t kk = 0; kk < kn; ++kk)
        for (std::int64_t j = 0; j < jn; ++j) acc[kk][j] = T(0);
      for (std::int64_t m = 0; m < M; ++m) {
        const T* b_row = B + m * N + j0;
        for (std::int64_t kk = 0; kk < kn; ++kk) {
          const T a = A[m * K + k0 + kk];
          if (a == T(0)) continue;
          T* arow = acc[kk];
          for (std::int64_t j = 0; j < jn; ++j) arow[j] += a * b_row[j];
        }
      }
      for (std::int64_t kk = 0; kk < kn; ++kk) {
        T* c_row = C + (k0 + kk) * N + j0;
        const T* arow = acc[kk];
        for (std::int64_t j = 0; j < jn; ++j) c_row[j] += arow[j];
      }
    }
  });
}

template <typename T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t Ho, std::int64_t Wo, T* cols) {
  parallel_for_work(C, C * kh * kw * Ho * Wo, [&](std::int64_t c) {
    T* out = cols + c * kh * kw * Ho * Wo;
    const T* in = x + c * H * W;
    for (std::int64_t dy = 0; dy < kh; ++dy)
      for (std::int64_t dx = 0; dx < kw; ++dx) {
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * stride + dy - pad;
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            const std::int64_t ix = ox * stride + dx - pad;
            *out++ = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? in[iy * W + ix] : T(0);
          }
        }
      }
  });
}

template <typename T>
void im2col_acc(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
                std::int64_t stride, std::int64_t pad, std::int64_t Ho, std::int64_t Wo, T* cols) {
  parallel_for_work(C, C * kh * kw * Ho * Wo, [&](std::int64_t c) {
    T* out = cols + c * kh * kw * Ho * Wo;
    const T* in = x + c * H * W;
    for (std::int64_t dy = 0; dy < kh; ++dy)
      for (std::int64_t dx = 0; dx < kw; ++dx) {
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * stride + dy - pad;
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            const std::int64_t ix = ox * stride + dx - pad;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W) *out += in[iy * W + ix];
            ++out;
          }
        }
      }
  });
}

template <typename T>
void col2im_acc(const T* cols, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
                std::int64_t stride, std::int64_t pad, std::int64_t Ho, std::int64_t Wo, T* x) {
  parallel_for_work(C, C * kh * kw * Ho * Wo, [&](std::int64_t c) {
    const T* in = cols + c * kh * kw * Ho * Wo;
    T* out = x + c * H * W;
    for (std::int64_t dy = 0; dy < kh; ++dy)
      for (std::int64_t dx = 0; dx < kw; ++dx) {
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * stride + dy - pad;
          if (iy < 0 || iy >= H) {
            in += Wo;
            continue;
          }
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            const std::int64_t ix = ox * stride + dx - pad;
            if (ix >= 0 && ix < W) out[iy * W + ix] += in[ox];
          }
          in += Wo;
        }
      }
  });
}

}  // namespace detail

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // (out_ch, in_ch, kh, kw)
  Tensor<T> bias;    // (out_ch)
  int stride = 1;
  int pad = 0;

  std::int64_t out_channels() const { return weight.dim(0); }
  std::int64_t in_channels() const { return weight.dim(1); }
};

// He fan-in initialization; "same" padding for odd kernels.
template <typename T>
ConvParams<T> make_conv(std::int64_t out_ch, std::int64_t in_ch, int k, Rng& rng, bool zero_init = false,
                        int stride = 1) {
  ConvParams<T> p;
  p.weight = Tensor<T>::zeros({out_ch, in_ch, k, k}, true);
  p.bias = Tensor<T>::zeros({out_ch}, true);
  p.stride = stride;
  p.pad = (k - 1) / 2;
  if (!zero_init) {
    const double stddev = std::sqrt(2.0 / double(in_ch * k * k));
    for (auto& w : p.weight.values()) w = T(rng.normal() * stddev);
  }
  return p;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  check(x.rank() == 4, "conv2d: input must be 4-D BCHW, got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(p.weight.rank() == 4 && p.weight.dim(1) == C,
        "conv2d: weight expects " + std::to_string(p.weight.dim(1)) + " input channels, input has " +
            std::to_string(C) + " " + shape_str(x.shape()));
  const std::int64_t O = p.weight.dim(0), kh = p.weight.dim(2), kw = p.weight.dim(3);
  const std::int64_t stride = p.stride, pad = p.pad;
  const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  check(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");

  Tensor<T> out = Tensor<T>::zeros({B, O, Ho, Wo});
  const std::int64_t K = C * kh * kw;
  const std::int64_t N = Ho * Wo;
  const bool is_1x1 = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
  std::vector<T> cols;
  if (!is_1x1) cols.resize(std::size_t(K * N));
  for (std::int64_t b = 0; b < B; ++b) {
    const T* xb = x.data() + b * C * H * W;
    const T* col_ptr = xb;
    if (!is_1x1) {
      detail::im2col(xb, C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
      col_ptr = cols.data();
    }
    T* ob = out.data() + b * O * N;
    detail::gemm_acc(O, N, K, p.weight.data(), col_ptr, ob);
    for (std::int64_t o = 0; o < O; ++o) {
      const T bias = p.bias.data()[o];
      if (bias == T(0)) continue;
      T* row = ob + o * N;
      for (std::int64_t j = 0; j < N; ++j) row[j] += bias;
    }
  }

  Tensor<T> weight = p.weight, bias = p.bias;
  detail::maybe_record(out, {x, weight, bias}, [=]() mutable {
    const auto& g = out.grad();
    std::vector<T> cols_b;
    if (!is_1x1) cols_b.resize(std::size_t(K * N));
    std::vector<T> dcols;
    if (x.requires_grad() && !is_1x1) dcols.assign(std::size_t(K * N), T(0));
    for (std::int64_t b = 0; b < B; ++b) {
      const T* gb = g.data() + b * O * N;
      if (weight.requires_grad()) {
        const T* xb = x.data() + b * C * H * W;
        const T* col_ptr = xb;
        if (!is_1x1) {
          detail::im2col(xb, C, H, W, kh, kw, stride, pad, Ho, Wo, cols_b.data());
          col_ptr = cols_b.data();
        }
        auto& gw = weight.storage()->grad;
        if (gw.empty()) gw.assign(std::size_t(weight.numel()), T(0));
        detail::gemm_nt_acc(O, K, N, gb, col_ptr, gw.data());
      }
      if (bias.requires_grad()) {
        auto& gbias = bias.storage()->grad;
        if (gbias.empty()) gbias.assign(std::size_t(O), T(0));
        for (std::int64_t o = 0; o < O; ++o) {
          T s = 0;
          const T* row = gb + o * N;
          for (std::int64_t j = 0; j < N; ++j) s += row[j];
          gbias[std::size_t(o)] += s;
        }
      }
      if (x.requires_grad()) {
        auto& gx = x.storage()->grad;
        if (gx.empty()) gx.assign(std::size_t(x.numel()), T(0));
        if (is_1x1) {
          detail::gemm_tn_acc(K, N, O, weight.data(), gb, gx.data() + b * C * H * W);
        } else {
          std::fill(dcols.begin(), dcols.end(), T(0));
          detail::gemm_tn_acc(K, N, O, weight.data(), gb, dcols.data());
          detail::col2im_acc(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, gx.data() + b * C * H * W);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// unfold / fold (3x3, zero padding 1, stride 1)

template <typename T>
Tensor<T> unfold3x3(const Tensor<T>& x) {
  check(x.rank() == 4, "unfold3x3: input must be 4-D BCHW, got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t L = H * W;
  Tensor<T> out = Tensor<T>::zeros({B, C * 9, L});
  for (std::int64_t b = 0; b < B; ++b)
    detail::im2col(x.data() + b * C * H * W, C, H, W, 3, 3, 1, 1, H, W, out.data() + b * C * 9 * L);
  detail::maybe_record(out, {x}, [=]() mutable {
    const auto& g = out.grad();
    auto& gx = x.storage()->grad;
    if (gx.empty()) gx.assign(std::size_t(x.numel()), T(0));
    for (std::int64_t b = 0; b < B; ++b)
      detail::col2im_acc(g.data() + b * C * 9 * L, C, H, W, 3, 3, 1, 1, H, W, gx.data() + b * C * H * W);
  });
  return out;
}

// Per-pixel contribution counts of the 3x3 unfold/fold pair: 9 in the
// interior, 6 on edges, 4 in corners (smaller extents degrade gracefully).
inline std::vector<double> fold3x3_counts(std::int64_t H, std::int64_t W) {
  std::vector<double> cnt(std::size_t(H * W), 0.0);
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const std::int64_t py = y + dy, px = x + dx;
          if (py >= 0 && py < H && px >= 0 && px < W) cnt[std::size_t(y * W + x)] += 1.0;
        }
  return cnt;
}

template <typename T>
Tensor<T> fold3x3(const Tensor<T>& patches, Shape out_shape, bool normalize) {
  check(patches.rank() == 3, "fold3x3: patches must be (B, C*9, L), got " + shape_str(patches.shape()));
  check(out_shape.size() == 4, "fold3x3: out_shape must be BCHW");
  const std::int64_t B = out_shape[0], C = out_shape[1], H = out_shape[2], W = out_shape[3];
  check(patches.dim(0) == B && patches.dim(1) == C * 9,
        "fold3x3: patches " + shape_str(patches.shape()) + " incompatible with " + shape_str(out_shape));
  check(patches.dim(2) == H * W, "fold3x3: column count " + std::to_string(patches.dim(2)) +
                                     " does not match H*W = " + std::to_string(H * W));
  const std::int64_t L = H * W;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  for (std::int64_t b = 0; b < B; ++b)
    detail::col2im_acc(patches.data() + b * C * 9 * L, C, H, W, 3, 3, 1, 1, H, W, out.data() + b * C * H * W);
  std::vector<double> cnt;
  if (normalize) {
    cnt = fold3x3_counts(H, W);
    T* po = out.data();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < L; ++i) po[(b * C + c) * L + i] /= T(cnt[std::size_t(i)]);
  }
  detail::maybe_record(out, {patches}, [=]() mutable {
    const auto& g = out.grad();
    std::vector<T> gsc;
    const T* gp = g.data();
    if (normalize) {
      gsc.resize(g.size());
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t i = 0; i < L; ++i) {
            const std::size_t idx = std::size_t((b * C + c) * L + i);
            gsc[idx] = g[idx] / T(cnt[std::size_t(i)]);
          }
      gp = gsc.data();
    }
    auto& gpat = patches.storage()->grad;
    if (gpat.empty()) gpat.assign(std::size_t(patches.numel()), T(0));
    for (std::int64_t b = 0; b < B; ++b)
      detail::im2col_acc(gp + b * C * H * W, C, H, W, 3, 3, 1, 1, H, W, gpat.data() + b * C * 9 * L);
  });
  return out;
}

// ---------------------------------------------------------------------------
// bicubic resize (Catmull-Rom a = -0.5, half-pixel centers, edge clamp)

namespace detail {

inline double cubic_weight(double d) {
  d = std::abs(d);
  if (d <= 1.0) return (1.5 * d - 2.5) * d * d + 1.0;
  if (d < 2.0) return ((-0.5 * d + 2.5) * d - 4.0) * d + 2.0;
  return 0.0;
}

struct ResizeTap {
  std::array<std::int32_t, 4> idx;
  std::array<double, 4> w;
};

inline std::vector<ResizeTap> make_taps(std::int64_t in_n, std::int64_t out_n) {
  std::vector<ResizeTap> taps(static_cast<std::size_t>(out_n));
  for (std::int64_t o = 0; o < out_n; ++o) {
    const double src = (double(o) + 0.5) * double(in_n) / double(out_n) - 0.5;
    const std::int64_t base = std::int64_t(std::floor(src));
    const double t = src - double(base);
    ResizeTap tap;
    for (int k = 0; k < 4; ++k) {
      const std::int64_t i = base - 1 + k;
      tap.idx[std::size_t(k)] = std::int32_t(std::clamp<std::int64_t>(i, 0, in_n - 1));
      tap.w[std::size_t(k)] = cubic_weight(src - double(base - 1 + k));
    }
    taps[std::size_t(o)] = tap;
  }
  return taps;
}

}  // namespace detail

inline bool bicubic_scale_supported(int numer, int denom) {
  auto pow2_ok = [](int v) { return v == 2 || v == 4 || v == 8 || v == 16; };
  return (numer == 1 && pow2_ok(denom)) || (denom == 1 && pow2_ok(numer));
}

// Scale is numer/denom with one side 1 and the other in {2,4,8,16}.
template <typename T>
Tensor<T> bicubic_resize(const Tensor<T>& x, int numer, int denom) {
  check(x.rank() == 4, "bicubic_resize: input must be 4-D BCHW, got " + shape_str(x.shape()));
  check(bicubic_scale_supported(numer, denom),
        "bicubic_resize: unsupported scale " + std::to_string(numer) + "/" + std::to_string(denom) +
            " (expected 2,4,8,16 up or down)");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H * numer % denom == 0 && W * numer % denom == 0,
        "bicubic_resize: extents " + shape_str(x.shape()) + " not divisible by " + std::to_string(denom));
  const std::int64_t Ho = H * numer / denom, Wo = W * numer / denom;
  const auto ty = detail::make_taps(H, Ho);
  const auto tx = detail::make_taps(W, Wo);

  Tensor<T> out = Tensor<T>::zeros({B, C, Ho, Wo});
  parallel_for_work(B * C, B * C * Ho * Wo * 16, [&](std::int64_t bc) {
    const T* in = x.data() + bc * H * W;
    T* o = out.data() + bc * Ho * Wo;
    for (std::int64_t oy = 0; oy < Ho; ++oy) {
      const auto& tyo = ty[std::size_t(oy)];
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        const auto& txo = tx[std::size_t(ox)];
        double acc = 0.0;
        for (int i = 0; i < 4; ++i) {
          const T* row = in + std::int64_t(tyo.idx[std::size_t(i)]) * W;
          double rowacc = 0.0;
          for (int j = 0; j < 4; ++j) rowacc += txo.w[std::size_t(j)] * double(row[txo.idx[std::size_t(j)]]);
          acc += tyo.w[std::size_t(i)] * rowacc;
        }
        o[oy * Wo + ox] = T(acc);
      }
    }
  });
  detail::maybe_record(out, {x}, [=]() mutable {
    const auto& g = out.grad();
    auto& gx = x.storage()->grad;
    if (gx.empty()) gx.assign(std::size_t(x.numel()), T(0));
    parallel_for_work(B * C, B * C * Ho * Wo * 16, [&](std::int64_t bc) {
      const T* go = g.data() + bc * Ho * Wo;
      T* gi = gx.data() + bc * H * W;
      for (std::int64_t oy = 0; oy < Ho; ++oy) {
        const auto& tyo = ty[std::size_t(oy)];
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          const auto& txo = tx[std::size_t(ox)];
          const double gv = double(go[oy * Wo + ox]);
          for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
              gi[std::int64_t(tyo.idx[std::size_t(i)]) * W + txo.idx[std::size_t(j)]] +=
                  T(tyo.w[std::size_t(i)] * txo.w[std::size_t(j)] * gv);
        }
      }
    });
  });
  return out;
}

template <typename T>
Tensor<T> bicubic_up(const Tensor<T>& x, int s) {
  return bicubic_resize(x, s, 1);
}

template <typename T>
Tensor<T> bicubic_down(const Tensor<T>& x, int s) {
  return bicubic_resize(x, 1, s);
}

// ---------------------------------------------------------------------------
// sub-pixel rearrangement (depth-to-space)

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  check(x.rank() == 4, "pixel_shuffle: input must be 4-D BCHW");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(C % (std::int64_t(r) * r) == 0, "pixel_shuffle: channels " + std::to_string(C) +
                                            " not divisible by r^2 = " + std::to_string(r * r));
  const std::int64_t Co = C / (std::int64_t(r) * r);
  const std::int64_t Ho = H * r, Wo = W * r;
  Tensor<T> out = Tensor<T>::zeros({B, Co, Ho, Wo});
  parallel_for_work(B * Co, B * C * H * W, [&](std::int64_t bc) {
    const std::int64_t b = bc / Co, co = bc % Co;
    T* o = out.data() + bc * Ho * Wo;
    for (std::int64_t sy = 0; sy < r; ++sy)
      for (std::int64_t sx = 0; sx < r; ++sx) {
        const T* src = x.data() + ((b * C + co * r * r + sy * r + sx) * H) * W;
        for (std::int64_t y = 0; y < H; ++y) {
          T* orow = o + (y * r + sy) * Wo + sx;
          const T* srow = src + y * W;
          for (std::int64_t xx = 0; xx < W; ++xx) orow[xx * r] = srow[xx];
        }
      }
  });
  detail::maybe_record(out, {x}, [=]() mutable {
    const auto& g = out.grad();
    auto& gx = x.storage()->grad;
    if (gx.empty()) gx.assign(std::size_t(x.numel()), T(0));
    parallel_for_work(B * Co, B * C * H * W, [&](std::int64_t bc) {
      const std::int64_t b = bc / Co, co = bc % Co;
      const T* go = g.data() + bc * Ho * Wo;
      for (std::int64_t sy = 0; sy < r; ++sy)
        for (std::int64_t sx = 0; sx < r; ++sx) {
          T* dst = gx.data() + ((b * C + co * r * r + sy * r + sx) * H) * W;
          for (std::int64_t y = 0; y < H; ++y) {
            const T* grow = go + (y * r + sy) * Wo + sx;
            T* drow = dst + y * W;
            for (std::int64_t xx = 0; xx < W; ++xx) drow[xx] += grow[xx * r];
          }
        }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// residual groups

template <typename T>
struct ResidualBlockParams {
  ConvParams<T> conv1, conv2;
};

// blocks with internal skips, then a trailing conv, then the group skip
template <typename T>
struct ResidualGroupParams {
  std::vector<ResidualBlockParams<T>> blocks;
  ConvParams<T> tail;
  double slope = 0.1;
};

template <typename T>
ResidualGroupParams<T> make_residual_group(std::int64_t ch, int depth, Rng& rng, double slope = 0.1) {
  ResidualGroupParams<T> p;
  for (int i = 0; i < depth; ++i)
    p.blocks.push_back({make_conv<T>(ch, ch, 3, rng), make_conv<T>(ch, ch, 3, rng)});
  p.tail = make_conv<T>(ch, ch, 3, rng, /*zero_init=*/true);
  p.slope = slope;
  return p;
}

template <typename T>
Tensor<T> residual_group(const Tensor<T>& x, const ResidualGroupParams<T>& p) {
  check(x.rank() == 4 && x.dim(1) == p.tail.in_channels(),
        "residual_group: expects " + std::to_string(p.tail.in_channels()) + " channels, got " +
            shape_str(x.shape()));
  Tensor<T> y = x;
  for (const auto& blk : p.blocks)
    y = add(y, conv2d(leaky_relu(conv2d(y, blk.conv1), T(p.slope)), blk.conv2));
  return add(x, conv2d(y, p.tail));
}

// Reduction + residual body with an external skip: out = skip + tail(blocks(reduce(x))).
// The trailing conv is zero-initialized, so a fresh fusion group is the
// identity on its skip input.
template <typename T>
struct FusionGroupParams {
  ConvParams<T> reduce;  // 1x1, k*ch -> ch
  std::vector<ResidualBlockParams<T>> blocks;
  ConvParams<T> tail;
  double slope = 0.1;
};

template <typename T>
FusionGroupParams<T> make_fusion_group(std::int64_t in_ch, std::int64_t ch, int depth, Rng& rng,
                                       double slope = 0.1) {
  FusionGroupParams<T> p;
  p.reduce = make_conv<T>(ch, in_ch, 1, rng);
  for (int i = 0; i < depth; ++i)
    p.blocks.push_back({make_conv<T>(ch, ch, 3, rng), make_conv<T>(ch, ch, 3, rng)});
  p.tail = make_conv<T>(ch, ch, 3, rng, /*zero_init=*/true);
  p.slope = slope;
  return p;
}

template <typename T>
Tensor<T> fusion_group(const Tensor<T>& x, const Tensor<T>& skip, const FusionGroupParams<T>& p) {
  Tensor<T> y = conv2d(x, p.reduce);
  for (const auto& blk : p.blocks)
    y = add(y, conv2d(leaky_relu(conv2d(y, blk.conv1), T(p.slope)), blk.conv2));
  return add(skip, conv2d(y, p.tail));
}

// ---------------------------------------------------------------------------
// feature upsampling: conv (C -> 4C) + depth-to-space, one step per factor 2

template <typename T>
struct UpsamplerParams {
  std::vector<ConvParams<T>> steps;
};

template <typename T>
UpsamplerParams<T> make_upsampler(std::int64_t ch, int factor, Rng& rng) {
  check(factor == 2 || factor == 4 || factor == 8 || factor == 16,
        "upsampler: factor must be 2, 4, 8 or 16, got " + std::to_string(factor));
  UpsamplerParams<T> p;
  for (int f = factor; f > 1; f /= 2) p.steps.push_back(make_conv<T>(ch * 4, ch, 3, rng));
  return p;
}

template <typename T>
Tensor<T> upsample_features(const Tensor<T>& x, const UpsamplerParams<T>& p) {
  Tensor<T> y = x;
  for (const auto& step : p.steps) {
    check(step.in_channels() == y.dim(1) && step.out_channels() == y.dim(1) * 4,
          "upsample_features: conv must map C to 4C, got weight " + shape_str(step.weight.shape()) +
              " for input " + shape_str(y.shape()));
    y = pixel_shuffle(conv2d(y, step), 2);
  }
  return y;
}

}  // namespace spf
